//! Dual-path matching decoder.
//!
//! L pre-norm blocks share one masked self-attention over the concatenated
//! sequence [q_id; q_ins; p_sem]. The query path (q_id, q_ins) runs masked
//! cross-attention against the enhanced target cells, restricted to the
//! foreground of the previous layer's predicted masks; the prototype path
//! refines p_sem with its own feed-forward and never touches the target.
//!
//! The self-attention mask is the strictest pattern consistent with the two
//! requirements it exists for: prototypes hand semantics to instance queries
//! (q_ins may read p_sem), and nothing contaminates the ID queries (q_id
//! reads only q_id). Prototypes read only themselves.

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::layers::{
    attention_fwd, concat_rows, ffn_fwd, norm_fwd, positional_grid, split_rows, AttentionCache,
    FeedForwardCache, NormCache,
};
use crate::params::{HeadParams, MFormerLayer, ModelParams};
use crate::tensor::{self, AdditiveMask, Tensor};

/// Decoder state: per-reference-instance ID queries, learnable instance
/// queries, and per-category semantic prototypes.
#[derive(Debug, Clone)]
pub struct QueryState {
    pub q_id: Tensor,
    pub q_ins: Tensor,
    pub p_sem: Tensor,
    pub layer: usize,
}

impl QueryState {
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.q_id.dims()[0],
            self.q_ins.dims()[0],
            self.p_sem.dims()[0],
        )
    }
}

/// Per-query outputs of both heads.
///
/// `ins_class_probs` rows are over the M real categories plus a final
/// no-object column; `id_presence_probs` columns are {present, no-object}.
/// Mask logits live at feature resolution.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub ins_class_probs: Tensor,
    pub ins_mask_logits: Tensor,
    pub id_presence_probs: Tensor,
    pub id_mask_logits: Tensor,
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        for (name, probs) in [
            ("ins_class_probs", &self.ins_class_probs),
            ("id_presence_probs", &self.id_presence_probs),
        ] {
            let cols = probs.dims()[1];
            for r in 0..probs.dims()[0] {
                let sum: f64 = probs.row(r).iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(Error::Contract(format!(
                        "{name} row {r} sums to {sum}"
                    )));
                }
                for c in 0..cols {
                    if !probs.at2(r, c).is_finite() {
                        return Err(Error::NonFinite(format!("{name} at ({r},{c})")));
                    }
                }
            }
        }
        if !self.ins_mask_logits.all_finite() || !self.id_mask_logits.all_finite() {
            return Err(Error::NonFinite("mask logits".to_string()));
        }
        Ok(())
    }
}

/// Self-attention mask over the concatenated sequence.
///
/// Layout: rows/cols [0, N) are q_id, [N, N+S) are q_ins, [N+S, N+S+M) are
/// p_sem. Allowed: q_id -> q_id, q_ins -> {q_ins, p_sem}, p_sem -> p_sem.
pub fn build_attention_mask(n: usize, s: usize, m: usize) -> AdditiveMask {
    let total = n + s + m;
    let mut mask = AdditiveMask::all_blocked(total, total);
    for r in 0..n {
        for c in 0..n {
            mask.allow(r, c);
        }
    }
    for r in n..n + s {
        for c in n..n + s + m {
            mask.allow(r, c);
        }
    }
    for r in n + s..total {
        for c in n + s..total {
            mask.allow(r, c);
        }
    }
    mask
}

/// Attention mask from the previous layer's mask logits: query k attends to
/// cells whose logit is >= 0 (sigmoid >= 0.5). A query with no foreground
/// cell falls back to attending everywhere.
pub fn mask_from_logits(prev: &Tensor) -> Result<AdditiveMask> {
    if prev.dims().len() != 3 {
        return Err(Error::Shape(format!(
            "mask logits must be [K, H, W], got {:?}",
            prev.dims()
        )));
    }
    let k = prev.dims()[0];
    let hw = prev.dims()[1] * prev.dims()[2];
    let mut mask = AdditiveMask::all_blocked(k, hw);
    for q in 0..k {
        let row = &prev.data()[q * hw..(q + 1) * hw];
        let mut any = false;
        for (cell, &logit) in row.iter().enumerate() {
            if logit >= 0.0 {
                mask.allow(q, cell);
                any = true;
            }
        }
        if !any {
            for cell in 0..hw {
                mask.allow(q, cell);
            }
        }
    }
    Ok(mask)
}

/// Cross-attention of queries over target cells: keys carry the sinusoidal
/// positional grid, values do not. No residual, no norm; callers own both.
pub(crate) fn cross_attend(
    attn: &crate::layers::Attention,
    q_in: &Tensor,
    cells: &Tensor,
    pe: &Tensor,
    mask: Option<&AdditiveMask>,
) -> Result<(Tensor, AttentionCache)> {
    let keys = cells.add(pe)?;
    attention_fwd(attn, q_in, &keys, cells, mask)
}

/// Masked cross-attention with residual: queries attend to the foreground of
/// the previous mask logits (everywhere when absent or empty) over `f_enh`.
pub fn masked_cross_attention(
    queries: &Tensor,
    f_enh: &FeatureMap,
    prev_mask_logits: Option<&Tensor>,
    attn: &crate::layers::Attention,
) -> Result<Tensor> {
    let cells = f_enh.flatten_cells();
    let pe = positional_grid(f_enh.channels(), f_enh.height(), f_enh.width())?;
    let mask = match prev_mask_logits {
        Some(prev) => Some(mask_from_logits(prev)?),
        None => None,
    };
    let (out, _) = cross_attend(attn, queries, &cells, &pe, mask.as_ref())?;
    queries.add(&out)
}

pub struct BlockTrace {
    pub(crate) c_norm_self: NormCache,
    pub(crate) c_self: AttentionCache,
    pub(crate) c_norm_cross_id: NormCache,
    pub(crate) c_cross_id: AttentionCache,
    pub(crate) c_norm_cross_ins: NormCache,
    pub(crate) c_cross_ins: AttentionCache,
    pub(crate) c_norm_ffn_query: NormCache,
    pub(crate) c_ffn_query: FeedForwardCache,
    pub(crate) c_norm_ffn_proto: NormCache,
    pub(crate) c_ffn_proto: FeedForwardCache,
}

/// One decoder block with trace: shared masked self-attention, per-path
/// masked cross-attention, then the two feed-forwards.
pub(crate) fn block_fwd(
    p: &MFormerLayer,
    state: &QueryState,
    cells: &Tensor,
    pe: &Tensor,
    prev: &Prediction,
) -> Result<(QueryState, BlockTrace)> {
    let (n, s, m) = state.counts();
    let seq = concat_rows(&[&state.q_id, &state.q_ins, &state.p_sem]);
    let self_mask = build_attention_mask(n, s, m);
    let (sn, c_norm_self) = norm_fwd(&p.norm_self, &seq)?;
    let (sa, c_self) = attention_fwd(&p.self_attn, &sn, &sn, &sn, Some(&self_mask))?;
    let seq1 = seq.add(&sa)?;
    let parts = split_rows(&seq1, &[n, s, m]);
    let (a_id, a_ins, a_sem) = (&parts[0], &parts[1], &parts[2]);

    let id_mask = mask_from_logits(&prev.id_mask_logits)?;
    let ins_mask = mask_from_logits(&prev.ins_mask_logits)?;
    let (idn, c_norm_cross_id) = norm_fwd(&p.norm_cross, a_id)?;
    let (ca_id, c_cross_id) = cross_attend(&p.cross_attn, &idn, cells, pe, Some(&id_mask))?;
    let b_id = a_id.add(&ca_id)?;
    let (insn, c_norm_cross_ins) = norm_fwd(&p.norm_cross, a_ins)?;
    let (ca_ins, c_cross_ins) = cross_attend(&p.cross_attn, &insn, cells, pe, Some(&ins_mask))?;
    let b_ins = a_ins.add(&ca_ins)?;

    // Query-path feed-forward operates row-wise, so both query kinds run in
    // one concatenated call.
    let bq = concat_rows(&[&b_id, &b_ins]);
    let (bqn, c_norm_ffn_query) = norm_fwd(&p.norm_ffn_query, &bq)?;
    let (fq, c_ffn_query) = ffn_fwd(&p.ffn_query, &bqn)?;
    let cq = bq.add(&fq)?;
    let qparts = split_rows(&cq, &[n, s]);

    let (pn, c_norm_ffn_proto) = norm_fwd(&p.norm_ffn_proto, a_sem)?;
    let (fp, c_ffn_proto) = ffn_fwd(&p.ffn_proto, &pn)?;
    let c_sem = a_sem.add(&fp)?;

    Ok((
        QueryState {
            q_id: qparts[0].clone(),
            q_ins: qparts[1].clone(),
            p_sem: c_sem,
            layer: state.layer + 1,
        },
        BlockTrace {
            c_norm_self,
            c_self,
            c_norm_cross_id,
            c_cross_id,
            c_norm_cross_ins,
            c_cross_ins,
            c_norm_ffn_query,
            c_ffn_query,
            c_norm_ffn_proto,
            c_ffn_proto,
        },
    ))
}

/// One decoder block (plain view).
pub fn m_former_block(
    p: &MFormerLayer,
    state: &QueryState,
    f_enh: &FeatureMap,
    prev: &Prediction,
) -> Result<QueryState> {
    let cells = f_enh.flatten_cells();
    let pe = positional_grid(f_enh.channels(), f_enh.height(), f_enh.width())?;
    block_fwd(p, state, &cells, &pe, prev).map(|(s, _)| s)
}

pub struct HeadTrace {
    pub prediction: Prediction,
    pub(crate) c_norm: NormCache,
    pub(crate) c_pixel: crate::layers::LinearCache,
    pub(crate) c_id_mlp: FeedForwardCache,
    pub(crate) c_ins_mlp: FeedForwardCache,
    pub(crate) c_presence: crate::layers::LinearCache,
    pub(crate) pixel_emb: Tensor,
    pub(crate) id_emb: Tensor,
    pub(crate) ins_emb: Tensor,
    pub(crate) qn_ins: Tensor,
    pub(crate) pn_sem: Tensor,
    pub(crate) n: usize,
    pub(crate) s: usize,
    pub(crate) m: usize,
}

/// Prediction heads with trace: pixel embedding, per-path mask MLPs, the
/// prototype classifier with a learnable no-object row, and the two-way
/// presence head.
pub(crate) fn heads_fwd(
    p: &HeadParams,
    state: &QueryState,
    cells: &Tensor,
    grid: (usize, usize),
) -> Result<(HeadTrace, Prediction)> {
    let (n, s, m) = state.counts();
    let c = p.pixel_embed.in_dim();
    let (h, w) = grid;
    let seq = concat_rows(&[&state.q_id, &state.q_ins, &state.p_sem]);
    let (normed, c_norm) = norm_fwd(&p.decoder_norm, &seq)?;
    let parts = split_rows(&normed, &[n, s, m]);
    let (qn_id, qn_ins, pn_sem) = (&parts[0], &parts[1], &parts[2]);

    let (pixel_emb, c_pixel) = crate::layers::linear_fwd(&p.pixel_embed, cells)?;
    let (id_emb, c_id_mlp) = ffn_fwd(&p.id_mask_mlp, qn_id)?;
    let (ins_emb, c_ins_mlp) = ffn_fwd(&p.ins_mask_mlp, qn_ins)?;

    let mut id_logits = Tensor::zeros(&[n, h, w]);
    for q in 0..n {
        let emb = id_emb.row(q);
        for cell in 0..h * w {
            let pix = pixel_emb.row(cell);
            let mut acc = 0.0;
            for t in 0..c {
                acc += emb[t] * pix[t];
            }
            id_logits.data_mut()[q * h * w + cell] = acc;
        }
    }
    let mut ins_logits = Tensor::zeros(&[s, h, w]);
    for q in 0..s {
        let emb = ins_emb.row(q);
        for cell in 0..h * w {
            let pix = pixel_emb.row(cell);
            let mut acc = 0.0;
            for t in 0..c {
                acc += emb[t] * pix[t];
            }
            ins_logits.data_mut()[q * h * w + cell] = acc;
        }
    }

    // Class logits against the prototypes plus the no-object row, 1/sqrt(C).
    let scale = 1.0 / (c as f64).sqrt();
    let mut cls_logits = Tensor::zeros(&[s, m + 1]);
    for q in 0..s {
        let qrow = qn_ins.row(q);
        for j in 0..m {
            let prow = pn_sem.row(j);
            let mut acc = 0.0;
            for t in 0..c {
                acc += qrow[t] * prow[t];
            }
            cls_logits.set2(q, j, acc * scale);
        }
        let mut acc = 0.0;
        for t in 0..c {
            acc += qrow[t] * p.no_object.data()[t];
        }
        cls_logits.set2(q, m, acc * scale);
    }
    let ins_class_probs = tensor::softmax(&cls_logits, 1)?;

    let (presence_logits, c_presence) = crate::layers::linear_fwd(&p.presence, qn_id)?;
    let id_presence_probs = tensor::softmax(&presence_logits, 1)?;

    let prediction = Prediction {
        ins_class_probs,
        ins_mask_logits: ins_logits,
        id_presence_probs,
        id_mask_logits: id_logits,
    };
    Ok((
        HeadTrace {
            prediction: prediction.clone(),
            c_norm,
            c_pixel,
            c_id_mlp,
            c_ins_mlp,
            c_presence,
            pixel_emb,
            id_emb,
            ins_emb,
            qn_ins: qn_ins.clone(),
            pn_sem: pn_sem.clone(),
            n,
            s,
            m,
        },
        prediction,
    ))
}

/// Prediction heads (plain view).
pub fn predict_heads(
    p: &HeadParams,
    state: &QueryState,
    f_enh: &FeatureMap,
) -> Result<Prediction> {
    let cells = f_enh.flatten_cells();
    heads_fwd(p, state, &cells, (f_enh.height(), f_enh.width())).map(|(_, pred)| pred)
}

pub struct DecoderTrace {
    /// States before each block plus the final state (L+1 entries).
    pub states: Vec<QueryState>,
    pub predictions: Vec<Prediction>,
    pub(crate) blocks: Vec<BlockTrace>,
    pub(crate) heads: Vec<HeadTrace>,
    pub(crate) cells: Tensor,
}

/// Full decoder forward with trace: an initial prediction from the layer-0
/// state, then each block consumes the previous prediction's masks and emits
/// a new prediction (L+1 predictions in total).
pub(crate) fn decoder_fwd(
    params: &ModelParams,
    q_id0: &Tensor,
    q_ins0: &Tensor,
    p_sem0: &Tensor,
    f_enh: &FeatureMap,
) -> Result<DecoderTrace> {
    if params.layers.is_empty() {
        return Err(Error::Config("decoder needs at least one block".to_string()));
    }
    let cells = f_enh.flatten_cells();
    let pe = positional_grid(f_enh.channels(), f_enh.height(), f_enh.width())?;
    let grid = (f_enh.height(), f_enh.width());
    let mut states = vec![QueryState {
        q_id: q_id0.clone(),
        q_ins: q_ins0.clone(),
        p_sem: p_sem0.clone(),
        layer: 0,
    }];
    let mut blocks = Vec::with_capacity(params.layers.len());
    let mut heads = Vec::with_capacity(params.layers.len() + 1);
    let mut predictions = Vec::with_capacity(params.layers.len() + 1);

    let (head0, pred0) = heads_fwd(&params.heads, &states[0], &cells, grid)?;
    heads.push(head0);
    predictions.push(pred0);

    for layer in &params.layers {
        let prev_pred = predictions.last().expect("at least the initial prediction");
        let (next, trace) = block_fwd(layer, states.last().unwrap(), &cells, &pe, prev_pred)?;
        let (head, pred) = heads_fwd(&params.heads, &next, &cells, grid)?;
        states.push(next);
        blocks.push(trace);
        heads.push(head);
        predictions.push(pred);
    }
    Ok(DecoderTrace {
        states,
        predictions,
        blocks,
        heads,
        cells,
    })
}

/// Run the decoder stack: returns the final state and all L+1 predictions.
pub fn m_former_forward(
    params: &ModelParams,
    q_id0: &Tensor,
    q_ins0: &Tensor,
    p_sem0: &Tensor,
    f_enh: &FeatureMap,
) -> Result<(QueryState, Vec<Prediction>)> {
    let trace = decoder_fwd(params, q_id0, q_ins0, p_sem0, f_enh)?;
    let DecoderTrace {
        mut states,
        predictions,
        ..
    } = trace;
    Ok((states.pop().expect("non-empty"), predictions))
}
