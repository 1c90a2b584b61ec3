//! Set-prediction losses: stable binary cross-entropy and Dice on mask
//! logits, pair costs, Hungarian matching with a brute-force oracle, the
//! matched set loss over instance predictions, and the fixed-matching
//! identity loss.
//!
//! Matching runs on detached values; no gradient flows through the discrete
//! assignment. Near-ties (within `tie_tolerance`) resolve toward the
//! lexicographically smallest assignment in both the solver and the oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::mformer::Prediction;
use crate::tensor::Tensor;

/// Floor inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    /// Weight on the no-object terms of unmatched predictions.
    pub no_object: f64,
    pub hungarian: f64,
    pub id: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            bce: 1.0,
            dice: 1.0,
            no_object: 1.0,
            hungarian: 1.0,
            id: 1.0,
        }
    }
}

/// One real instance target: a category index into the M prototypes and a
/// binary mask at feature resolution.
#[derive(Debug, Clone)]
pub struct InstanceTarget {
    pub class_index: usize,
    pub mask: Mask,
}

/// Ground truth for one training example. `id_targets[i]` is `Some(mask)`
/// when reference instance i appears in the target view, `None` otherwise.
#[derive(Debug, Clone)]
pub struct GroundTruthSet {
    pub instances: Vec<InstanceTarget>,
    pub id_targets: Vec<Option<Mask>>,
}

/// Injective assignment of ground-truth index j to prediction `assigned[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub assigned: Vec<usize>,
    pub total: f64,
}

fn check_grids(logits: &Tensor, gt: &Mask, op: &str) -> Result<()> {
    if logits.dims() != [gt.height(), gt.width()] {
        return Err(Error::Shape(format!(
            "{op}: logits {:?} vs mask {}x{}",
            logits.dims(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

pub(crate) fn bce_slice(logits: &[f64], gt: &Mask) -> f64 {
    let mut acc = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        let g = if gt.bits()[i] { 1.0 } else { 0.0 };
        acc += z.max(0.0) - z * g + (-z.abs()).exp().ln_1p();
    }
    acc / logits.len() as f64
}

pub(crate) fn dice_slice(logits: &[f64], gt: &Mask) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        let p = sigmoid(z);
        psum += p;
        if gt.bits()[i] {
            inter += p;
            gsum += 1.0;
        }
    }
    1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean numerically-stable binary cross-entropy of `sigmoid(logits)` vs `gt`.
pub fn bce_mask_loss(logits: &Tensor, gt: &Mask) -> Result<f64> {
    check_grids(logits, gt, "bce_mask_loss")?;
    Ok(bce_slice(logits.data(), gt))
}

/// Dice loss with smoothing 1 on `sigmoid(logits)` vs `gt`.
pub fn dice_loss(logits: &Tensor, gt: &Mask) -> Result<f64> {
    check_grids(logits, gt, "dice_loss")?;
    Ok(dice_slice(logits.data(), gt))
}

/// Accumulate `scale * d(w_bce*bce + w_dice*dice)/dlogit` into `out`.
pub(crate) fn mask_loss_grad(
    logits: &[f64],
    gt: &Mask,
    w_bce: f64,
    w_dice: f64,
    scale: f64,
    out: &mut [f64],
) {
    let n = logits.len() as f64;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        let p = sigmoid(z);
        psum += p;
        if gt.bits()[i] {
            inter += p;
            gsum += 1.0;
        }
    }
    let denom = psum + gsum + 1.0;
    let num = 2.0 * inter + 1.0;
    for (i, &z) in logits.iter().enumerate() {
        let p = sigmoid(z);
        let g = if gt.bits()[i] { 1.0 } else { 0.0 };
        let dbce = (p - g) / n;
        // d dice / dp = -(2 g * denom - num) / denom^2, then dp/dz = p(1-p).
        let ddice = -((2.0 * g * denom - num) / (denom * denom)) * p * (1.0 - p);
        out[i] += scale * (w_bce * dbce + w_dice * ddice);
    }
}

fn mask_logits_row(t: &Tensor, k: usize) -> (Tensor, &[f64]) {
    let (h, w) = (t.dims()[1], t.dims()[2]);
    let slice = &t.data()[k * h * w..(k + 1) * h * w];
    (
        Tensor::from_vec(&[h, w], slice.to_vec()).expect("shape"),
        slice,
    )
}

/// Matching cost between instance prediction `i` and a real ground-truth
/// object: `-p_i(c_j) + w_bce*bce + w_dice*dice`. The probability enters
/// raw here; the loss itself uses its logarithm.
pub fn pair_cost(
    pred: &Prediction,
    i: usize,
    gt: &InstanceTarget,
    weights: &LossWeights,
) -> Result<f64> {
    let m = pred.ins_class_probs.dims()[1] - 1;
    if gt.class_index >= m {
        return Err(Error::Contract(format!(
            "pair_cost: class index {} is not a real class (M = {m})",
            gt.class_index
        )));
    }
    let (row, slice) = mask_logits_row(&pred.ins_mask_logits, i);
    check_grids(&row, &gt.mask, "pair_cost")?;
    let p = pred.ins_class_probs.at2(i, gt.class_index);
    Ok(-p + weights.bce * bce_slice(slice, &gt.mask) + weights.dice * dice_slice(slice, &gt.mask))
}

/// Tie tolerance for assignment totals: totals within this of the optimum
/// count as optimal and the lexicographically smallest assignment wins.
fn tie_tolerance(cost: &Tensor) -> f64 {
    let max_abs = cost.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    1e-9 * (1.0 + max_abs)
}

/// Canonical total of an assignment: row-order sum.
fn assignment_total(cost: &Tensor, assigned: &[usize]) -> f64 {
    let s = cost.dims()[1];
    assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.data()[r * s + c])
        .sum()
}

/// Optimal assignment value by shortest augmenting paths (Kuhn-Munkres with
/// potentials), rectangular `g <= s`.
fn km_solve(cost: &[f64], g: usize, s: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; s + 1];
    let mut matched = vec![0usize; s + 1]; // 1-indexed row per column, 0 free
    let mut way = vec![0usize; s + 1];
    for i in 1..=g {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=s {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * s + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assigned = vec![usize::MAX; g];
    for j in 1..=s {
        if matched[j] != 0 {
            assigned[matched[j] - 1] = j - 1;
        }
    }
    assigned
}

fn km_total(cost: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let s = cost.dims()[1];
    let mut sub = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            sub.push(cost.data()[r * s + c]);
        }
    }
    let assigned = km_solve(&sub, rows.len(), cols.len());
    assigned
        .iter()
        .enumerate()
        .map(|(r, &c)| sub[r * cols.len() + c])
        .sum()
}

/// Minimum-cost injective assignment of the G rows to the S columns
/// (`G <= S`), ties broken toward the lexicographically smallest mapping.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    if cost.dims().len() != 2 {
        return Err(Error::Shape(format!(
            "cost must be 2-D, got {:?}",
            cost.dims()
        )));
    }
    let (g, s) = (cost.dims()[0], cost.dims()[1]);
    if g > s {
        return Err(Error::Infeasible(format!(
            "{g} targets cannot inject into {s} predictions"
        )));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("assignment costs".to_string()));
    }
    let base = km_solve(cost.data(), g, s);
    let optimal = assignment_total(cost, &base);
    let tol = tie_tolerance(cost);

    // Lexicographic refinement: fix rows in order, choosing the smallest
    // column whose best completion stays within the tie tolerance.
    let mut assigned = Vec::with_capacity(g);
    let mut used = vec![false; s];
    let mut prefix = 0.0;
    for r in 0..g {
        let rest_rows: Vec<usize> = (r + 1..g).collect();
        let mut chosen = None;
        for c in 0..s {
            if used[c] {
                continue;
            }
            let avail: Vec<usize> = (0..s).filter(|&j| !used[j] && j != c).collect();
            let entry = cost.data()[r * s + c];
            let total = prefix + entry + km_total(cost, &rest_rows, &avail);
            if total <= optimal + tol {
                chosen = Some(c);
                break;
            }
        }
        let c = chosen.expect("an optimal column exists for every prefix");
        used[c] = true;
        prefix += cost.data()[r * s + c];
        assigned.push(c);
    }
    let total = assignment_total(cost, &assigned);
    Ok(Assignment { assigned, total })
}

/// Exhaustive assignment oracle for matrices up to 7 rows; identical
/// tie-break rule as [`hungarian_match`].
pub fn brute_force_match(cost: &Tensor) -> Result<Assignment> {
    let (g, s) = (cost.dims()[0], cost.dims()[1]);
    if g > 7 {
        return Err(Error::Oracle(format!(
            "brute_force_match is bounded to 7 rows, got {g}"
        )));
    }
    if g > s {
        return Err(Error::Infeasible(format!(
            "{g} targets cannot inject into {s} predictions"
        )));
    }
    let tol = tie_tolerance(cost);
    // Pass 1: exact minimum.
    let mut best = f64::INFINITY;
    enumerate_injections(g, s, &mut |assigned| {
        let total = assignment_total(cost, assigned);
        if total < best {
            best = total;
        }
    });
    // Pass 2: first (lexicographically smallest) within tolerance.
    let mut found: Option<Vec<usize>> = None;
    enumerate_injections(g, s, &mut |assigned| {
        if found.is_some() {
            return;
        }
        let total = assignment_total(cost, assigned);
        if total <= best + tol {
            found = Some(assigned.to_vec());
        }
    });
    let assigned = found.expect("at least one injection exists");
    let total = assignment_total(cost, &assigned);
    Ok(Assignment { assigned, total })
}

fn enumerate_injections(g: usize, s: usize, visit: &mut dyn FnMut(&[usize])) {
    let mut assigned = vec![0usize; g];
    let mut used = vec![false; s];
    fn rec(
        r: usize,
        g: usize,
        s: usize,
        assigned: &mut [usize],
        used: &mut [bool],
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if r == g {
            visit(assigned);
            return;
        }
        for c in 0..s {
            if !used[c] {
                used[c] = true;
                assigned[r] = c;
                rec(r + 1, g, s, assigned, used, visit);
                used[c] = false;
            }
        }
    }
    rec(0, g, s, &mut assigned, &mut used, visit);
}

/// Build the pair-cost matrix and match real targets to predictions.
/// `None` when the example has no real instances.
pub fn match_instances(
    pred: &Prediction,
    gt: &GroundTruthSet,
    weights: &LossWeights,
) -> Result<Option<Assignment>> {
    let g = gt.instances.len();
    let s = pred.ins_class_probs.dims()[0];
    if g == 0 {
        return Ok(None);
    }
    if g > s {
        return Err(Error::Infeasible(format!(
            "{g} ground-truth instances exceed {s} instance queries"
        )));
    }
    let mut cost = Tensor::zeros(&[g, s]);
    for (j, target) in gt.instances.iter().enumerate() {
        for i in 0..s {
            cost.set2(j, i, pair_cost(pred, i, target, weights)?);
        }
    }
    hungarian_match(&cost).map(Some)
}

/// Matched set loss: `-log p` plus mask losses on matched pairs; every
/// unmatched prediction pays the no-object term.
pub fn hungarian_loss(
    pred: &Prediction,
    gt: &GroundTruthSet,
    weights: &LossWeights,
) -> Result<f64> {
    let s = pred.ins_class_probs.dims()[0];
    let m = pred.ins_class_probs.dims()[1] - 1;
    let assignment = match_instances(pred, gt, weights)?;
    let mut matched_to = vec![None; s];
    if let Some(a) = &assignment {
        for (j, &i) in a.assigned.iter().enumerate() {
            matched_to[i] = Some(j);
        }
    }
    let mut loss = 0.0;
    for i in 0..s {
        match matched_to[i] {
            Some(j) => {
                let target = &gt.instances[j];
                let p = pred.ins_class_probs.at2(i, target.class_index).max(PROB_FLOOR);
                let (_, slice) = mask_logits_row(&pred.ins_mask_logits, i);
                loss += -p.ln()
                    + weights.bce * bce_slice(slice, &target.mask)
                    + weights.dice * dice_slice(slice, &target.mask);
            }
            None => {
                let p = pred.ins_class_probs.at2(i, m).max(PROB_FLOOR);
                loss += weights.no_object * -p.ln();
            }
        }
    }
    Ok(loss)
}

/// Fixed-matching identity loss: prediction i is scored against reference
/// instance i directly, no assignment search.
pub fn id_loss(pred: &Prediction, gt: &GroundTruthSet, weights: &LossWeights) -> Result<f64> {
    let n = pred.id_presence_probs.dims()[0];
    if gt.id_targets.len() != n {
        return Err(Error::Contract(format!(
            "id_loss: {} targets for {n} ID predictions",
            gt.id_targets.len()
        )));
    }
    let mut loss = 0.0;
    for (i, target) in gt.id_targets.iter().enumerate() {
        match target {
            Some(mask) => {
                let p = pred.id_presence_probs.at2(i, 0).max(PROB_FLOOR);
                let (row, slice) = mask_logits_row(&pred.id_mask_logits, i);
                check_grids(&row, mask, "id_loss")?;
                loss += -p.ln()
                    + weights.bce * bce_slice(slice, mask)
                    + weights.dice * dice_slice(slice, mask);
            }
            None => {
                let p = pred.id_presence_probs.at2(i, 1).max(PROB_FLOOR);
                loss += -p.ln();
            }
        }
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub hungarian: f64,
    pub id: f64,
    pub total: f64,
}

/// Weighted sum of the two objectives (unweighted by default).
pub fn total_loss(
    pred: &Prediction,
    gt: &GroundTruthSet,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let hungarian = hungarian_loss(pred, gt, weights)?;
    let id = id_loss(pred, gt, weights)?;
    Ok(LossBreakdown {
        hungarian,
        id,
        total: weights.hungarian * hungarian + weights.id * id,
    })
}
