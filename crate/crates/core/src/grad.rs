//! End-to-end training pipeline: traced forward through fusion, decoder, and
//! heads into the loss, plus the reverse pass producing parameter gradients.
//!
//! The assignment and the attention masking patterns are discrete and enter
//! backward as constants; gradients flow through values only. Reference
//! tokens and target features are frozen inputs, so backward stops at the
//! fusion block's parameters.

use crate::encoder::FeatureMap;
use crate::error::Result;
use crate::interact::{fusion_fwd, FusionTrace, TokenSet};
use crate::layers::{attention_bwd, concat_rows, ffn_bwd, linear_bwd, norm_bwd, split_rows};
use crate::losses::{
    match_instances, mask_loss_grad, total_loss, Assignment, GroundTruthSet,
    LossBreakdown, LossWeights, PROB_FLOOR,
};
use crate::mformer::{decoder_fwd, DecoderTrace, HeadTrace, Prediction};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// One training example: frozen reference tokens, frozen target features,
/// and the ground truth at feature resolution.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub t_id: TokenSet,
    pub t_sem: TokenSet,
    pub feat_t: FeatureMap,
    pub gt: GroundTruthSet,
}

pub struct PipelineTrace {
    pub fusion: FusionTrace,
    pub decoder: DecoderTrace,
    /// Instance assignment per supervised prediction (index = layer).
    pub assignments: Vec<Option<Assignment>>,
    pub loss: LossBreakdown,
}

fn supervised_layers(n_predictions: usize, deep_supervision: bool) -> Vec<usize> {
    if deep_supervision {
        (0..n_predictions).collect()
    } else {
        vec![n_predictions - 1]
    }
}

/// Forward through fusion, decoder, and loss, keeping every cache.
pub fn pipeline_fwd(
    params: &ModelParams,
    ex: &TrainExample,
    weights: &LossWeights,
    deep_supervision: bool,
) -> Result<PipelineTrace> {
    let fusion = fusion_fwd(&params.fusion, &ex.t_id, &ex.t_sem, &ex.feat_t)?;
    let decoder = decoder_fwd(
        params,
        &fusion.q_id,
        &params.q_ins_init,
        &fusion.p_sem,
        &fusion.f_enh,
    )?;
    let supervised = supervised_layers(decoder.predictions.len(), deep_supervision);
    let mut assignments = vec![None; decoder.predictions.len()];
    let mut loss = LossBreakdown {
        hungarian: 0.0,
        id: 0.0,
        total: 0.0,
    };
    for &l in &supervised {
        let pred = &decoder.predictions[l];
        let part = total_loss(pred, &ex.gt, weights)?;
        assignments[l] = match_instances(pred, &ex.gt, weights)?;
        loss.hungarian += part.hungarian;
        loss.id += part.id;
        loss.total += part.total;
    }
    Ok(PipelineTrace {
        fusion,
        decoder,
        assignments,
        loss,
    })
}

/// Loss only; the finite-difference probe path.
pub fn pipeline_loss(
    params: &ModelParams,
    ex: &TrainExample,
    weights: &LossWeights,
    deep_supervision: bool,
) -> Result<LossBreakdown> {
    pipeline_fwd(params, ex, weights, deep_supervision).map(|t| t.loss)
}

/// Gradients of the loss w.r.t. the prediction logits of one supervised
/// layer. The discrete assignment is a constant of the backward pass.
fn loss_logit_grads(
    pred: &Prediction,
    gt: &GroundTruthSet,
    weights: &LossWeights,
    assignment: &Option<Assignment>,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let s = pred.ins_class_probs.dims()[0];
    let m = pred.ins_class_probs.dims()[1] - 1;
    let n = pred.id_presence_probs.dims()[0];
    let (h, w) = (pred.ins_mask_logits.dims()[1], pred.ins_mask_logits.dims()[2]);
    let hw = h * w;
    let mut dcls = Tensor::zeros(&[s, m + 1]);
    let mut dins_masks = Tensor::zeros(&[s, h, w]);
    let mut dpresence = Tensor::zeros(&[n, 2]);
    let mut did_masks = Tensor::zeros(&[n, h, w]);

    let mut matched_to = vec![None; s];
    if let Some(a) = assignment {
        for (j, &i) in a.assigned.iter().enumerate() {
            matched_to[i] = Some(j);
        }
    }
    let wh = weights.hungarian;
    for i in 0..s {
        match matched_to[i] {
            Some(j) => {
                let target = &gt.instances[j];
                let p_c = pred.ins_class_probs.at2(i, target.class_index);
                if p_c > PROB_FLOOR {
                    // d(-log softmax_c)/dlogit_k = p_k - [k == c]
                    for k in 0..=m {
                        let p_k = pred.ins_class_probs.at2(i, k);
                        let delta = if k == target.class_index { 1.0 } else { 0.0 };
                        dcls.set2(i, k, wh * (p_k - delta));
                    }
                }
                let slice = &pred.ins_mask_logits.data()[i * hw..(i + 1) * hw];
                let out = &mut dins_masks.data_mut()[i * hw..(i + 1) * hw];
                mask_loss_grad(slice, &target.mask, weights.bce, weights.dice, wh, out);
            }
            None => {
                let p_no = pred.ins_class_probs.at2(i, m);
                if p_no > PROB_FLOOR {
                    for k in 0..=m {
                        let p_k = pred.ins_class_probs.at2(i, k);
                        let delta = if k == m { 1.0 } else { 0.0 };
                        dcls.set2(i, k, wh * weights.no_object * (p_k - delta));
                    }
                }
            }
        }
    }
    let wi = weights.id;
    for i in 0..n {
        match &gt.id_targets[i] {
            Some(mask) => {
                let p = pred.id_presence_probs.at2(i, 0);
                if p > PROB_FLOOR {
                    dpresence.set2(i, 0, wi * (p - 1.0));
                    dpresence.set2(i, 1, wi * pred.id_presence_probs.at2(i, 1));
                }
                let slice = &pred.id_mask_logits.data()[i * hw..(i + 1) * hw];
                let out = &mut did_masks.data_mut()[i * hw..(i + 1) * hw];
                mask_loss_grad(slice, mask, weights.bce, weights.dice, wi, out);
            }
            None => {
                let p = pred.id_presence_probs.at2(i, 1);
                if p > PROB_FLOOR {
                    dpresence.set2(i, 0, wi * pred.id_presence_probs.at2(i, 0));
                    dpresence.set2(i, 1, wi * (p - 1.0));
                }
            }
        }
    }
    (dcls, dins_masks, dpresence, did_masks)
}

/// Backward through one head call. Returns gradients on the query state and
/// adds the pixel-embedding contribution to `dcells`.
#[allow(clippy::too_many_arguments)]
fn heads_bwd(
    params: &ModelParams,
    trace: &HeadTrace,
    dcls: &Tensor,
    dins_masks: &Tensor,
    dpresence: &Tensor,
    did_masks: &Tensor,
    grads: &mut ModelParams,
    dcells: &mut Tensor,
) -> (Tensor, Tensor, Tensor) {
    let hp = &params.heads;
    let hg = &mut grads.heads;
    let (n, s, m) = (trace.n, trace.s, trace.m);
    let c = hp.pixel_embed.in_dim();
    let hw = trace.pixel_emb.dims()[0];
    let scale = 1.0 / (c as f64).sqrt();

    // Presence head.
    let dqn_id_presence = linear_bwd(&hp.presence, &trace.c_presence, dpresence, &mut hg.presence);

    // Class logits: cls[q][j] = scale * qn_ins[q] . pn_sem[j] (j < m),
    // cls[q][m] = scale * qn_ins[q] . no_object.
    let mut dqn_ins = Tensor::zeros(&[s, c]);
    let mut dpn_sem = Tensor::zeros(&[m, c]);
    for q in 0..s {
        let qrow = trace.qn_ins.row(q);
        for j in 0..m {
            let g = dcls.at2(q, j) * scale;
            if g == 0.0 {
                continue;
            }
            let prow = trace.pn_sem.row(j);
            for t in 0..c {
                dqn_ins.data_mut()[q * c + t] += g * prow[t];
                dpn_sem.data_mut()[j * c + t] += g * qrow[t];
            }
        }
        let g = dcls.at2(q, m) * scale;
        if g != 0.0 {
            for t in 0..c {
                dqn_ins.data_mut()[q * c + t] += g * hp.no_object.data()[t];
                hg.no_object.data_mut()[t] += g * qrow[t];
            }
        }
    }

    // Mask logits: logits[k][cell] = emb[k] . pixel_emb[cell].
    let mut d_id_emb = Tensor::zeros(&[n, c]);
    let mut d_ins_emb = Tensor::zeros(&[s, c]);
    let mut d_pixel = Tensor::zeros(&[hw, c]);
    for k in 0..n {
        let emb = trace.id_emb.row(k);
        for cell in 0..hw {
            let g = did_masks.data()[k * hw + cell];
            if g == 0.0 {
                continue;
            }
            let pix = trace.pixel_emb.row(cell);
            for t in 0..c {
                d_id_emb.data_mut()[k * c + t] += g * pix[t];
                d_pixel.data_mut()[cell * c + t] += g * emb[t];
            }
        }
    }
    for k in 0..s {
        let emb = trace.ins_emb.row(k);
        for cell in 0..hw {
            let g = dins_masks.data()[k * hw + cell];
            if g == 0.0 {
                continue;
            }
            let pix = trace.pixel_emb.row(cell);
            for t in 0..c {
                d_ins_emb.data_mut()[k * c + t] += g * pix[t];
                d_pixel.data_mut()[cell * c + t] += g * emb[t];
            }
        }
    }

    let dqn_id_mlp = ffn_bwd(&hp.id_mask_mlp, &trace.c_id_mlp, &d_id_emb, &mut hg.id_mask_mlp);
    let dqn_ins_mlp = ffn_bwd(&hp.ins_mask_mlp, &trace.c_ins_mlp, &d_ins_emb, &mut hg.ins_mask_mlp);
    let dc = linear_bwd(&hp.pixel_embed, &trace.c_pixel, &d_pixel, &mut hg.pixel_embed);
    for (a, b) in dcells.data_mut().iter_mut().zip(dc.data()) {
        *a += b;
    }

    let dqn_id = dqn_id_presence.add(&dqn_id_mlp).expect("shape");
    let dqn_ins_total = dqn_ins.add(&dqn_ins_mlp).expect("shape");
    let dnormed = concat_rows(&[&dqn_id, &dqn_ins_total, &dpn_sem]);
    let dseq = norm_bwd(&hp.decoder_norm, &trace.c_norm, &dnormed, &mut hg.decoder_norm);
    let parts = split_rows(&dseq, &[n, s, m]);
    (parts[0].clone(), parts[1].clone(), parts[2].clone())
}

/// Backward through one decoder block.
#[allow(clippy::too_many_arguments)]
fn block_bwd(
    params: &ModelParams,
    layer_idx: usize,
    trace: &crate::mformer::BlockTrace,
    dq_id_out: &Tensor,
    dq_ins_out: &Tensor,
    dp_sem_out: &Tensor,
    grads: &mut ModelParams,
    dcells: &mut Tensor,
) -> (Tensor, Tensor, Tensor) {
    let lp = &params.layers[layer_idx];
    let lg = &mut grads.layers[layer_idx];
    let n = dq_id_out.dims()[0];
    let s = dq_ins_out.dims()[0];
    let m = dp_sem_out.dims()[0];

    // Prototype feed-forward: c_sem = a_sem + ffn_p(norm_p(a_sem)).
    let dfp = ffn_bwd(&lp.ffn_proto, &trace.c_ffn_proto, dp_sem_out, &mut lg.ffn_proto);
    let da_sem = dp_sem_out
        .add(&norm_bwd(&lp.norm_ffn_proto, &trace.c_norm_ffn_proto, &dfp, &mut lg.norm_ffn_proto))
        .expect("shape");

    // Query feed-forward over [b_id; b_ins].
    let dcq = concat_rows(&[dq_id_out, dq_ins_out]);
    let dfq = ffn_bwd(&lp.ffn_query, &trace.c_ffn_query, &dcq, &mut lg.ffn_query);
    let dbq = dcq
        .add(&norm_bwd(&lp.norm_ffn_query, &trace.c_norm_ffn_query, &dfq, &mut lg.norm_ffn_query))
        .expect("shape");
    let parts = split_rows(&dbq, &[n, s]);
    let (db_id, db_ins) = (&parts[0], &parts[1]);

    // Masked cross-attention per query kind; keys = cells + pe, values =
    // cells, so both key and value input grads land on the cells.
    let (dq_in, dk_in, dv_in) = attention_bwd(&lp.cross_attn, &trace.c_cross_id, db_id, &mut lg.cross_attn);
    let da_id_norm = norm_bwd(&lp.norm_cross, &trace.c_norm_cross_id, &dq_in, &mut lg.norm_cross);
    let da_id = db_id.add(&da_id_norm).expect("shape");
    for (a, b) in dcells.data_mut().iter_mut().zip(dk_in.data()) {
        *a += b;
    }
    for (a, b) in dcells.data_mut().iter_mut().zip(dv_in.data()) {
        *a += b;
    }

    let (dq_in, dk_in, dv_in) =
        attention_bwd(&lp.cross_attn, &trace.c_cross_ins, db_ins, &mut lg.cross_attn);
    let da_ins_norm = norm_bwd(&lp.norm_cross, &trace.c_norm_cross_ins, &dq_in, &mut lg.norm_cross);
    let da_ins = db_ins.add(&da_ins_norm).expect("shape");
    for (a, b) in dcells.data_mut().iter_mut().zip(dk_in.data()) {
        *a += b;
    }
    for (a, b) in dcells.data_mut().iter_mut().zip(dv_in.data()) {
        *a += b;
    }

    // Shared masked self-attention over [q_id; q_ins; p_sem].
    let dseq1 = concat_rows(&[&da_id, &da_ins, &da_sem]);
    let (dqs, dks, dvs) = attention_bwd(&lp.self_attn, &trace.c_self, &dseq1, &mut lg.self_attn);
    let dsn = dqs.add(&dks).expect("shape").add(&dvs).expect("shape");
    let dseq = dseq1
        .add(&norm_bwd(&lp.norm_self, &trace.c_norm_self, &dsn, &mut lg.norm_self))
        .expect("shape");
    let parts = split_rows(&dseq, &[n, s, m]);
    (parts[0].clone(), parts[1].clone(), parts[2].clone())
}

/// Backward through the fusion block given gradients on its three outputs.
fn fusion_bwd(
    params: &ModelParams,
    trace: &FusionTrace,
    dq_id: &Tensor,
    dp_sem: &Tensor,
    dcells_out: &Tensor,
    grads: &mut ModelParams,
) {
    let fp = &params.fusion;
    let fg = &mut grads.fusion;

    let dt3 = concat_rows(&[dq_id, dp_sem]);
    // Feed-forward on both streams (shared parameters).
    let dff_t = ffn_bwd(&fp.ffn, &trace.c_ffn_t, &dt3, &mut fg.ffn);
    let dt2 = dt3
        .add(&norm_bwd(&fp.norm_ffn_tokens, &trace.c_norm_ft, &dff_t, &mut fg.norm_ffn_tokens))
        .expect("shape");
    let dff_c = ffn_bwd(&fp.ffn, &trace.c_ffn_c, dcells_out, &mut fg.ffn);
    let dc2 = dcells_out
        .add(&norm_bwd(&fp.norm_ffn_cells, &trace.c_norm_fc, &dff_c, &mut fg.norm_ffn_cells))
        .expect("shape");

    // Symmetric cross-attention, shared parameters, roles swapped.
    let (dq_t, dk_t, dv_t) =
        attention_bwd(&fp.cross_attn, &trace.c_cross_tokens, &dt2, &mut fg.cross_attn);
    let (dq_c, dk_c, dv_c) =
        attention_bwd(&fp.cross_attn, &trace.c_cross_cells, &dc2, &mut fg.cross_attn);
    // Token-side normalized stream feeds: Q of pass 1, K and V of pass 2.
    let dt1n = dq_t.add(&dk_c).expect("shape").add(&dv_c).expect("shape");
    // Cell-side normalized stream feeds: K (with pe) and V of pass 1, Q
    // (with pe) of pass 2; the positional grid is constant.
    let dcn = dk_t.add(&dv_t).expect("shape").add(&dq_c).expect("shape");
    let dt1 = dt2
        .add(&norm_bwd(&fp.norm_cross_tokens, &trace.c_norm_ct, &dt1n, &mut fg.norm_cross_tokens))
        .expect("shape");
    // The raw cell stream only feeds through its norm (plus the residual to
    // c2); its gradient ends here because target features are frozen.
    let _dcells_in = dc2
        .add(&norm_bwd(&fp.norm_cross_cells, &trace.c_norm_cc, &dcn, &mut fg.norm_cross_cells))
        .expect("shape");

    // Token self-attention.
    let (dqs, dks, dvs) = attention_bwd(&fp.self_attn, &trace.c_self, &dt1, &mut fg.self_attn);
    let dtn = dqs.add(&dks).expect("shape").add(&dvs).expect("shape");
    let _dtokens = dt1
        .add(&norm_bwd(&fp.norm_self, &trace.c_norm_self, &dtn, &mut fg.norm_self))
        .expect("shape");
}

/// Forward plus analytic backward: the loss and its gradient w.r.t. every
/// trainable parameter.
pub fn pipeline_grads(
    params: &ModelParams,
    ex: &TrainExample,
    weights: &LossWeights,
    deep_supervision: bool,
) -> Result<(LossBreakdown, ModelParams)> {
    let trace = pipeline_fwd(params, ex, weights, deep_supervision)?;
    let grads = pipeline_backward(params, &trace, ex, weights, deep_supervision)?;
    Ok((trace.loss, grads))
}

pub fn pipeline_backward(
    params: &ModelParams,
    trace: &PipelineTrace,
    ex: &TrainExample,
    weights: &LossWeights,
    deep_supervision: bool,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let l_count = params.layers.len();
    let supervised = supervised_layers(trace.decoder.predictions.len(), deep_supervision);
    let hw = trace.decoder.cells.dims()[0];
    let c = trace.decoder.cells.dims()[1];
    let mut dcells = Tensor::zeros(&[hw, c]);

    let (n, s, m) = trace.decoder.states[0].counts();
    let mut dq_id = Tensor::zeros(&[n, c]);
    let mut dq_ins = Tensor::zeros(&[s, c]);
    let mut dp_sem = Tensor::zeros(&[m, c]);

    for layer in (0..=l_count).rev() {
        if supervised.contains(&layer) {
            let pred = &trace.decoder.predictions[layer];
            let (dcls, dins_masks, dpresence, did_masks) =
                loss_logit_grads(pred, &ex.gt, weights, &trace.assignments[layer]);
            let (hq_id, hq_ins, hp_sem) = heads_bwd(
                params,
                &trace.decoder.heads[layer],
                &dcls,
                &dins_masks,
                &dpresence,
                &did_masks,
                &mut grads,
                &mut dcells,
            );
            dq_id = dq_id.add(&hq_id)?;
            dq_ins = dq_ins.add(&hq_ins)?;
            dp_sem = dp_sem.add(&hp_sem)?;
        }
        if layer > 0 {
            let (bq_id, bq_ins, bp_sem) = block_bwd(
                params,
                layer - 1,
                &trace.decoder.blocks[layer - 1],
                &dq_id,
                &dq_ins,
                &dp_sem,
                &mut grads,
                &mut dcells,
            );
            dq_id = bq_id;
            dq_ins = bq_ins;
            dp_sem = bp_sem;
        }
    }

    // The layer-0 instance queries are the learnable q_ins_init.
    for (a, b) in grads.q_ins_init.data_mut().iter_mut().zip(dq_ins.data()) {
        *a += b;
    }
    fusion_bwd(params, &trace.fusion, &dq_id, &dp_sem, &dcells, &mut grads);
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Finite-difference safety: the pipeline is differentiable except on the
// measure-zero sets where a mask threshold, a matching tie, or the
// probability floor flips. Probing instances are kept away from those sets.
// ---------------------------------------------------------------------------

/// True when `ex` is safely differentiable for FD probes of size `eps`:
/// masking logits stay `margin` away from the threshold, the instance
/// matching has a cost gap, and no probability sits at the floor.
pub fn fd_safe(
    params: &ModelParams,
    ex: &TrainExample,
    weights: &LossWeights,
    deep_supervision: bool,
    margin: f64,
) -> Result<bool> {
    let trace = pipeline_fwd(params, ex, weights, deep_supervision)?;
    let l_count = params.layers.len();
    // Mask logits of predictions 0..L-1 drive the next block's attention
    // masks; a logit near zero flips cells in or out under perturbation.
    for pred in &trace.decoder.predictions[..l_count] {
        for &v in pred.id_mask_logits.data().iter().chain(pred.ins_mask_logits.data()) {
            if v.abs() < margin {
                return Ok(false);
            }
        }
    }
    let supervised = supervised_layers(trace.decoder.predictions.len(), deep_supervision);
    for &l in &supervised {
        let pred = &trace.decoder.predictions[l];
        // Matching gap: the best assignment must beat every alternative.
        if !ex.gt.instances.is_empty() {
            let g = ex.gt.instances.len();
            let s = pred.ins_class_probs.dims()[0];
            let mut cost = Tensor::zeros(&[g, s]);
            for (j, t) in ex.gt.instances.iter().enumerate() {
                for i in 0..s {
                    cost.set2(j, i, crate::losses::pair_cost(pred, i, t, weights)?);
                }
            }
            let best = crate::losses::hungarian_match(&cost)?;
            let mut second = f64::INFINITY;
            enumerate_totals(&cost, &mut |assigned, total| {
                if assigned != best.assigned.as_slice() && total < second {
                    second = total;
                }
            });
            if second - best.total < margin {
                return Ok(false);
            }
        }
        // Probability floor.
        for &p in pred.ins_class_probs.data().iter().chain(pred.id_presence_probs.data()) {
            if p < PROB_FLOOR * 10.0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn enumerate_totals(cost: &Tensor, visit: &mut dyn FnMut(&[usize], f64)) {
    let (g, s) = (cost.dims()[0], cost.dims()[1]);
    let mut assigned = vec![0usize; g];
    let mut used = vec![false; s];
    fn rec(
        r: usize,
        g: usize,
        s: usize,
        cost: &Tensor,
        assigned: &mut [usize],
        used: &mut [bool],
        visit: &mut dyn FnMut(&[usize], f64),
    ) {
        if r == g {
            let total: f64 = assigned
                .iter()
                .enumerate()
                .map(|(j, &i)| cost.at2(j, i))
                .sum();
            visit(assigned, total);
            return;
        }
        for c in 0..s {
            if !used[c] {
                used[c] = true;
                assigned[r] = c;
                rec(r + 1, g, s, cost, assigned, used, visit);
                used[c] = false;
            }
        }
    }
    rec(0, g, s, cost, &mut assigned, &mut used, visit);
}
