//! Decoding predictions into task outputs at three granularities: identity
//! masks for tracking, category instances, and a semantic label map. Mask
//! logits upsample bilinearly to image resolution before thresholding; all
//! decoding is deterministic.

use crate::encoder::{encode_stub, FeatureMap, Image};
use crate::error::{Error, Result};
use crate::interact::{example_tokens, in_context_fusion, InContextExample};
use crate::mask::{LabelMap, Mask};
use crate::mformer::{m_former_forward, Prediction};
use crate::losses::sigmoid;
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const DEFAULT_PRESENCE_THRESH: f64 = 0.5;
pub const DEFAULT_SCORE_THRESH: f64 = 0.05;
pub const DEFAULT_BACKGROUND_THRESH: f64 = 0.5;

/// Bilinear upsampling of a `[h, w]` grid to `out_h x out_w`
/// (pixel-center alignment).
pub fn upsample_bilinear(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if grid.dims().len() != 2 {
        return Err(Error::Shape(format!(
            "upsample expects [h, w], got {:?}",
            grid.dims()
        )));
    }
    let (h, w) = (grid.dims()[0], grid.dims()[1]);
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = grid.at2(y0, x0) * (1.0 - fx) + grid.at2(y0, x1) * fx;
            let bot = grid.at2(y1, x0) * (1.0 - fx) + grid.at2(y1, x1) * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    Tensor::from_vec(&[out_h, out_w], out)
}

fn logits_row(t: &Tensor, k: usize) -> Tensor {
    let (h, w) = (t.dims()[1], t.dims()[2]);
    Tensor::from_vec(&[h, w], t.data()[k * h * w..(k + 1) * h * w].to_vec()).expect("shape")
}

#[derive(Debug, Clone)]
pub struct IdOutput {
    /// Index of the ID query (reference instance).
    pub index: usize,
    pub mask: Mask,
    pub score: f64,
}

/// Decode the identity path: every ID query whose presence probability
/// clears the threshold emits a mask; overlapping claims resolve per pixel
/// toward the query with the higher confidence.
pub fn decode_id(
    pred: &Prediction,
    presence_thresh: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<IdOutput>> {
    let n = pred.id_presence_probs.dims()[0];
    let mut kept: Vec<(usize, Tensor, f64)> = Vec::new();
    let mut outputs = Vec::new();
    for i in 0..n {
        let p1 = pred.id_presence_probs.at2(i, 0);
        if p1 < presence_thresh {
            continue;
        }
        let up = upsample_bilinear(&logits_row(&pred.id_mask_logits, i), out_h, out_w)?;
        let mut conf_sum = 0.0;
        let mut count = 0usize;
        for &z in up.data() {
            if z >= 0.0 {
                conf_sum += sigmoid(z);
                count += 1;
            }
        }
        let score = if count == 0 {
            0.0
        } else {
            p1 * conf_sum / count as f64
        };
        outputs.push(IdOutput {
            index: i,
            mask: Mask::new(out_h, out_w),
            score,
        });
        kept.push((i, up, p1));
    }
    // Resolve overlaps by per-pixel argmax of p1 * sigmoid(logit).
    for px in 0..out_h * out_w {
        let mut best: Option<(usize, f64)> = None;
        for (slot, (_, up, p1)) in kept.iter().enumerate() {
            let z = up.data()[px];
            if z >= 0.0 {
                let conf = p1 * sigmoid(z);
                if best.map_or(true, |(_, b)| conf > b) {
                    best = Some((slot, conf));
                }
            }
        }
        if let Some((slot, _)) = best {
            outputs[slot].mask.set(px / out_w, px % out_w, true);
        }
    }
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct InstanceOutput {
    pub category: u32,
    pub mask: Mask,
    pub score: f64,
}

/// Decode the instance path: per query, the argmax real category must beat
/// the no-object probability; score is class probability times mean
/// foreground confidence; results sort by descending score.
pub fn decode_instances(
    pred: &Prediction,
    categories: &[u32],
    score_thresh: f64,
    out_h: usize,
    out_w: usize,
) -> Result<Vec<InstanceOutput>> {
    let s = pred.ins_class_probs.dims()[0];
    let m = pred.ins_class_probs.dims()[1] - 1;
    if categories.len() != m {
        return Err(Error::Contract(format!(
            "{} category ids for {m} prototypes",
            categories.len()
        )));
    }
    let mut outputs = Vec::new();
    for q in 0..s {
        let row = pred.ins_class_probs.row(q);
        let mut cat_idx = 0usize;
        for j in 1..m {
            if row[j] > row[cat_idx] {
                cat_idx = j;
            }
        }
        let p_cat = row[cat_idx];
        if p_cat <= row[m] {
            continue; // no-object wins
        }
        let up = upsample_bilinear(&logits_row(&pred.ins_mask_logits, q), out_h, out_w)?;
        let mut mask = Mask::new(out_h, out_w);
        let mut conf_sum = 0.0;
        let mut count = 0usize;
        for (px, &z) in up.data().iter().enumerate() {
            if z >= 0.0 {
                mask.set(px / out_w, px % out_w, true);
                conf_sum += sigmoid(z);
                count += 1;
            }
        }
        let score = if count == 0 {
            0.0
        } else {
            p_cat * conf_sum / count as f64
        };
        if score >= score_thresh {
            outputs.push(InstanceOutput {
                category: categories[cat_idx],
                mask,
                score,
            });
        }
    }
    outputs.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    Ok(outputs)
}

/// Decode the semantic map: per pixel, class scores aggregate probability
/// times mask confidence over all queries; a pixel is labeled with the
/// argmax class when its score clears the background threshold.
pub fn decode_semantic(
    pred: &Prediction,
    categories: &[u32],
    background_thresh: f64,
    out_h: usize,
    out_w: usize,
) -> Result<LabelMap> {
    let s = pred.ins_class_probs.dims()[0];
    let m = pred.ins_class_probs.dims()[1] - 1;
    if categories.len() != m {
        return Err(Error::Contract(format!(
            "{} category ids for {m} prototypes",
            categories.len()
        )));
    }
    for &c in categories {
        if c == 0 || c > 255 {
            return Err(Error::Contract(format!(
                "category id {c} does not fit a label map (1..=255)"
            )));
        }
    }
    let mut confidences = Vec::with_capacity(s);
    for q in 0..s {
        let up = upsample_bilinear(&logits_row(&pred.ins_mask_logits, q), out_h, out_w)?;
        confidences.push(up);
    }
    let mut map = LabelMap::new(out_h, out_w);
    for px in 0..out_h * out_w {
        let mut best_class = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for j in 0..m {
            let mut score = 0.0;
            for q in 0..s {
                score += pred.ins_class_probs.at2(q, j) * sigmoid(confidences[q].data()[px]);
            }
            if score > best_score {
                best_score = score;
                best_class = j;
            }
        }
        if best_score > background_thresh {
            map.set(px / out_w, px % out_w, categories[best_class] as u8);
        }
    }
    Ok(map)
}

/// Output of one full model run against a reference/target pair.
pub struct RunOutput {
    pub prediction: Prediction,
    /// Category ids behind the prototype columns, ascending.
    pub sem_categories: Vec<u32>,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
}

/// Encode both images, pool the reference, fuse, and decode: the standard
/// inference path shared by prediction, evaluation, and tracking.
pub fn run_model(
    params: &ModelParams,
    reference: &InContextExample,
    target: &Image,
) -> Result<RunOutput> {
    let cfg = &params.config;
    let f_r = encode_stub(&reference.image, cfg.patch, cfg.channels, cfg.encoder_seed)?;
    let f_t = encode_stub(target, cfg.patch, cfg.channels, cfg.encoder_seed)?;
    let (t_id, t_sem, grouped) = example_tokens(&f_r, reference)?;
    let (q_id, p_sem, f_enh) = in_context_fusion(&params.fusion, &t_id, &t_sem, &f_t)?;
    let (_, predictions) = m_former_forward(params, &q_id, &params.q_ins_init, &p_sem, &f_enh)?;
    let prediction = predictions.into_iter().last().expect("at least one");
    Ok(RunOutput {
        prediction,
        sem_categories: grouped.sem_categories,
        grid: (f_t.height(), f_t.width()),
        image_size: (target.height(), target.width()),
    })
}

/// One-shot episodic semantic score: run the model with the reference as
/// context and compare the decoded map's `category` region with the target
/// ground truth.
pub fn semantic_episode_iou(
    params: &ModelParams,
    reference: &InContextExample,
    target: &Image,
    target_gt: &Mask,
    category: u32,
) -> Result<f64> {
    let out = run_model(params, reference, target)?;
    let map = decode_semantic(
        &out.prediction,
        &out.sem_categories,
        DEFAULT_BACKGROUND_THRESH,
        out.image_size.0,
        out.image_size.1,
    )?;
    crate::metrics::iou(&map.class_mask(category as u8), target_gt)
}

/// Pool a single identity token for an object masked on a feature map.
pub fn pool_object_token(features: &FeatureMap, mask: &Mask) -> Result<(Tensor, bool)> {
    let set = crate::interact::mask_pool(
        features,
        std::slice::from_ref(mask),
        crate::interact::TokenKind::Id,
    )?;
    Ok((set.tokens, set.empty[0]))
}
