//! Semi-supervised video tracking over per-object memory banks.
//!
//! Each tracked object owns a bank of (features, mask, score, frame) entries
//! with a pinned first-frame reference that is never evicted; eviction drops
//! the lowest time-decayed score. Tracking pools an identity token from each
//! entry, averages them, and runs the standard inference path per frame.

use crate::encoder::{encode_stub, FeatureMap, Image};
use crate::error::{Error, Result};
use crate::infer::{decode_id, pool_object_token, run_model};
use crate::interact::{example_tokens, in_context_fusion, InContextExample, TokenKind, TokenSet};
use crate::losses::sigmoid;
use crate::mask::Mask;
use crate::mformer::{m_former_forward, Prediction};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const DEFAULT_CAPACITY: usize = 6;
pub const DEFAULT_DECAY: f64 = 0.99;

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub features: FeatureMap,
    /// Object mask at feature resolution.
    pub mask: Mask,
    pub raw_score: f64,
    pub frame_idx: usize,
    pub pinned: bool,
}

#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub object_id: usize,
    pub entries: Vec<MemoryEntry>,
    pub capacity: usize,
    pub decay: f64,
    last_frame: usize,
}

impl MemoryBank {
    /// A bank starts with its pinned reference entry (score defined as 1).
    pub fn new(
        object_id: usize,
        capacity: usize,
        decay: f64,
        reference_features: FeatureMap,
        reference_mask: Mask,
        frame_idx: usize,
    ) -> Result<MemoryBank> {
        if capacity == 0 {
            return Err(Error::Config("memory capacity must be at least 1".to_string()));
        }
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {decay}")));
        }
        Ok(MemoryBank {
            object_id,
            entries: vec![MemoryEntry {
                features: reference_features,
                mask: reference_mask,
                raw_score: 1.0,
                frame_idx,
                pinned: true,
            }],
            capacity,
            decay,
            last_frame: frame_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Score of an entry as seen from frame `now`: `raw * decay^(now - t)`.
    pub fn decayed_score(&self, entry: &MemoryEntry, now: usize) -> f64 {
        entry.raw_score * self.decay.powi((now - entry.frame_idx) as i32)
    }
}

/// Quality of one object's prediction: presence probability times mean
/// foreground confidence at feature resolution; empty foreground scores 0.
pub fn score_prediction(pred: &Prediction, object_index: usize) -> f64 {
    let p1 = pred.id_presence_probs.at2(object_index, 0);
    let hw = pred.id_mask_logits.dims()[1] * pred.id_mask_logits.dims()[2];
    let slice = &pred.id_mask_logits.data()[object_index * hw..(object_index + 1) * hw];
    let mut conf = 0.0;
    let mut count = 0usize;
    for &z in slice {
        if z >= 0.0 {
            conf += sigmoid(z);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        p1 * conf / count as f64
    }
}

/// Offer a candidate frame to the bank. Frames must arrive in strictly
/// increasing order. When over capacity, the non-pinned entry with the
/// lowest decayed score is evicted (older entry on ties).
pub fn update_memory(
    bank: &mut MemoryBank,
    features: FeatureMap,
    mask: Mask,
    raw_score: f64,
    frame_idx: usize,
) -> Result<()> {
    if frame_idx <= bank.last_frame {
        return Err(Error::Protocol(format!(
            "frame {frame_idx} does not advance past {}",
            bank.last_frame
        )));
    }
    bank.last_frame = frame_idx;
    bank.entries.push(MemoryEntry {
        features,
        mask,
        raw_score,
        frame_idx,
        pinned: false,
    });
    if bank.entries.len() > bank.capacity {
        let mut victim: Option<(usize, f64, usize)> = None; // (pos, score, frame)
        for (pos, e) in bank.entries.iter().enumerate() {
            if e.pinned {
                continue;
            }
            let score = bank.decayed_score(e, frame_idx);
            let replace = match victim {
                None => true,
                Some((_, vs, vf)) => score < vs || (score == vs && e.frame_idx < vf),
            };
            if replace {
                victim = Some((pos, score, e.frame_idx));
            }
        }
        let (pos, _, _) = victim.expect("capacity >= 1 leaves a non-pinned candidate");
        bank.entries.remove(pos);
    }
    Ok(())
}

/// Fused identity token for a bank: pool each (non-vanished) entry under its
/// stored mask and average. Falls back to the pinned entry if every mask
/// pooled empty.
pub fn fuse_bank_token(bank: &MemoryBank) -> Result<(Tensor, bool)> {
    let c = bank.entries[0].features.channels();
    let mut acc = vec![0.0; c];
    let mut used = 0usize;
    for e in &bank.entries {
        let (tok, empty) = pool_object_token(&e.features, &e.mask)?;
        if empty {
            continue;
        }
        for (a, b) in acc.iter_mut().zip(tok.data()) {
            *a += b;
        }
        used += 1;
    }
    if used == 0 {
        let pinned = bank
            .entries
            .iter()
            .find(|e| e.pinned)
            .expect("banks always hold their pinned entry");
        let (tok, empty) = pool_object_token(&pinned.features, &pinned.mask)?;
        return Ok((tok, empty));
    }
    for a in acc.iter_mut() {
        *a /= used as f64;
    }
    Ok((Tensor::from_vec(&[1, c], acc)?, false))
}

#[derive(Debug, Clone)]
pub struct TrackOptions {
    pub capacity: usize,
    pub decay: f64,
    pub presence_thresh: f64,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            capacity: DEFAULT_CAPACITY,
            decay: DEFAULT_DECAY,
            presence_thresh: crate::infer::DEFAULT_PRESENCE_THRESH,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    /// `masks[t][obj]`, image resolution; frame 0 repeats the annotation.
    pub masks: Vec<Vec<Mask>>,
    /// `scores[t][obj]`; frame 0 scores are defined as 1.
    pub scores: Vec<Vec<f64>>,
}

/// Track every annotated object through the video. Semantic tokens come from
/// the pinned reference; identity tokens re-fuse from each object's memory
/// bank every frame. Objects that vanish keep advancing and may reappear
/// through the pinned reference.
pub fn track_video(
    frames: &[Image],
    annotation: &InContextExample,
    params: &ModelParams,
    opts: &TrackOptions,
) -> Result<TrackResult> {
    if frames.is_empty() {
        return Err(Error::Protocol("video has no frames".to_string()));
    }
    if annotation.masks.is_empty() {
        return Err(Error::Protocol("first-frame annotation is empty".to_string()));
    }
    annotation.validate(false)?;
    let cfg = &params.config;
    let f0 = encode_stub(&annotation.image, cfg.patch, cfg.channels, cfg.encoder_seed)?;
    let (_, t_sem, grouped) = example_tokens(&f0, annotation)?;
    let n_obj = annotation.masks.len();

    let mut banks = Vec::with_capacity(n_obj);
    for (i, mask) in grouped.id_masks.iter().enumerate() {
        banks.push(MemoryBank::new(
            i,
            opts.capacity,
            opts.decay,
            f0.clone(),
            mask.clone(),
            0,
        )?);
    }

    let mut masks = vec![annotation.masks.clone()];
    let mut scores = vec![vec![1.0; n_obj]];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let f_t = encode_stub(frame, cfg.patch, cfg.channels, cfg.encoder_seed)?;
        let c = cfg.channels;
        let mut tok_data = Vec::with_capacity(n_obj * c);
        let mut empties = Vec::with_capacity(n_obj);
        for bank in &banks {
            let (tok, empty) = fuse_bank_token(bank)?;
            tok_data.extend_from_slice(tok.data());
            empties.push(empty);
        }
        let t_id = TokenSet {
            tokens: Tensor::from_vec(&[n_obj, c], tok_data)?,
            kind: TokenKind::Id,
            empty: empties,
        };
        let (q_id, p_sem, f_enh) = in_context_fusion(&params.fusion, &t_id, &t_sem, &f_t)?;
        let (_, predictions) =
            m_former_forward(params, &q_id, &params.q_ins_init, &p_sem, &f_enh)?;
        let pred = predictions.last().expect("at least one prediction");

        let decoded = decode_id(
            pred,
            opts.presence_thresh,
            annotation.image.height(),
            annotation.image.width(),
        )?;
        let mut frame_masks =
            vec![Mask::new(annotation.image.height(), annotation.image.width()); n_obj];
        for d in decoded {
            frame_masks[d.index] = d.mask;
        }
        let mut frame_scores = Vec::with_capacity(n_obj);
        for i in 0..n_obj {
            let raw = score_prediction(pred, i);
            frame_scores.push(raw);
            let grid_mask = frame_masks[i].downsample_majority(f_t.height(), f_t.width())?;
            update_memory(&mut banks[i], f_t.clone(), grid_mask, raw, t)?;
        }
        masks.push(frame_masks);
        scores.push(frame_scores);
    }
    Ok(TrackResult { masks, scores })
}

/// Single-shot convenience used by evaluation: run the model once with the
/// reference as the only context (equivalent to capacity 1 on frame 1).
pub fn run_reference_only(
    params: &ModelParams,
    reference: &InContextExample,
    target: &Image,
) -> Result<Prediction> {
    run_model(params, reference, target).map(|out| out.prediction)
}
