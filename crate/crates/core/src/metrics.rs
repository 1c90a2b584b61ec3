//! Evaluation metrics: region IoU and dataset mIoU, greedy-matched average
//! precision over IoU thresholds with 101-point interpolation, boundary F
//! with a distance tolerance, and the tracking J/F/J&F summary.
//!
//! Empty-vs-empty comparisons score 1 (predicting absence correctly is
//! perfect); empty-vs-non-empty scores 0.

use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};

/// Intersection over union; two empty masks count as identical.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::Shape(format!(
            "iou: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Dataset mIoU: per-class intersections and unions aggregate over all
/// aligned map pairs, then average over the classes present in ground truth.
pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: &[u8]) -> Result<f64> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "mIoU needs aligned non-empty lists, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut present = Vec::new();
    for &class in classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        let mut in_gt = false;
        for (p, g) in preds.iter().zip(gts) {
            if p.labels().len() != g.labels().len() {
                return Err(Error::Shape("mIoU: map sizes differ".to_string()));
            }
            for (&pl, &gl) in p.labels().iter().zip(g.labels()) {
                let pp = pl == class;
                let gg = gl == class;
                if gg {
                    in_gt = true;
                }
                if pp && gg {
                    inter += 1;
                }
                if pp || gg {
                    union += 1;
                }
            }
        }
        if in_gt {
            present.push(if union == 0 { 1.0 } else { inter as f64 / union as f64 });
        }
    }
    if present.is_empty() {
        return Err(Error::Metric("no evaluated class appears in ground truth".to_string()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// A scored instance prediction.
#[derive(Debug, Clone)]
pub struct ScoredInstance {
    pub category: u32,
    pub mask: Mask,
    pub score: f64,
}

/// A ground-truth instance.
#[derive(Debug, Clone)]
pub struct GtInstance {
    pub category: u32,
    pub mask: Mask,
}

/// The standard 0.50:0.05:0.95 threshold sweep.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision: greedy matching by descending score at each IoU
/// threshold, 101-point interpolated precision, averaged over thresholds
/// and over classes present in ground truth. Empty inputs score 0.
pub fn average_precision(
    preds: &[ScoredInstance],
    gts: &[GtInstance],
    thresholds: &[f64],
) -> Result<f64> {
    if gts.is_empty() || thresholds.is_empty() {
        return Ok(0.0);
    }
    let mut classes: Vec<u32> = gts.iter().map(|g| g.category).collect();
    classes.sort_unstable();
    classes.dedup();

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .expect("finite scores")
            .then(a.cmp(&b))
    });

    let mut total = 0.0;
    for &class in &classes {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].category == class).collect();
        let pred_order: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| preds[i].category == class)
            .collect();
        for &thresh in thresholds {
            total += ap_single(preds, &pred_order, gts, &gt_idx, thresh)?;
        }
    }
    Ok(total / (classes.len() * thresholds.len()) as f64)
}

fn ap_single(
    preds: &[ScoredInstance],
    pred_order: &[usize],
    gts: &[GtInstance],
    gt_idx: &[usize],
    thresh: f64,
) -> Result<f64> {
    let n_gt = gt_idx.len();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut gt_used = vec![false; n_gt];
    let mut tp = Vec::with_capacity(pred_order.len());
    for &pi in pred_order {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &gi) in gt_idx.iter().enumerate() {
            if gt_used[slot] {
                continue;
            }
            let overlap = iou(&preds[pi].mask, &gts[gi].mask)?;
            if overlap >= thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((slot, overlap));
            }
        }
        match best {
            Some((slot, _)) => {
                gt_used[slot] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // Precision-recall points, then 101-point interpolation.
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            hits += 1;
        }
        points.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(recall, _)| *recall >= r)
            .map(|(_, p)| *p)
            .fold(0.0f64, f64::max);
        ap += best;
    }
    Ok(ap / 101.0)
}

fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Default contour tolerance: `ceil(0.0088 * image diagonal)`.
pub fn default_boundary_tolerance(h: usize, w: usize) -> f64 {
    (0.0088 * ((h * h + w * w) as f64).sqrt()).ceil()
}

/// Boundary F-measure: precision and recall of 4-connected contour pixels
/// matched within a Euclidean tolerance radius.
pub fn boundary_f(a: &Mask, b: &Mask, tolerance_radius: f64) -> Result<f64> {
    if !a.same_grid(b) {
        return Err(Error::Shape(format!(
            "boundary_f: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    if ba.is_empty() && bb.is_empty() {
        return Ok(1.0);
    }
    if ba.is_empty() || bb.is_empty() {
        return Ok(0.0);
    }
    let r2 = tolerance_radius * tolerance_radius;
    let matched = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .filter(|&&(y, x)| {
                to.iter().any(|&(ty, tx)| {
                    let dy = y as f64 - ty as f64;
                    let dx = x as f64 - tx as f64;
                    dy * dy + dx * dx <= r2
                })
            })
            .count()
    };
    let precision = matched(&ba, &bb) as f64 / ba.len() as f64;
    let recall = matched(&bb, &ba) as f64 / bb.len() as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Tracking quality over aligned per-frame, per-object masks (frame 0, the
/// given annotation, must already be excluded by the caller).
pub fn jf_score(preds: &[Vec<Mask>], gts: &[Vec<Mask>]) -> Result<JfScore> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Metric(format!(
            "J&F needs aligned non-empty sequences, got {} vs {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut count = 0usize;
    for (pf, gf) in preds.iter().zip(gts) {
        if pf.len() != gf.len() {
            return Err(Error::Metric("object counts differ between frames".to_string()));
        }
        for (p, g) in pf.iter().zip(gf) {
            let tol = default_boundary_tolerance(p.height(), p.width());
            j_sum += iou(p, g)?;
            f_sum += boundary_f(p, g, tol)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metric("no objects to score".to_string()));
    }
    let j = j_sum / count as f64;
    let f = f_sum / count as f64;
    Ok(JfScore {
        j,
        f,
        jf: (j + f) / 2.0,
    })
}
