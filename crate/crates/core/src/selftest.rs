//! Built-in oracle and invariant suite behind the `selftest` CLI command.
//!
//! Each check re-verifies a core correctness property against an
//! independent route (brute force, closed form, or an algebraic identity)
//! and reports one pass/fail line. The suite is sized to finish in seconds.

use crate::encoder::{encode_stub, FeatureMap, Image};
use crate::error::{Error, Result};
use crate::interact::{in_context_fusion, mask_pool, InContextExample, TokenKind, TokenSet};
use crate::losses::{brute_force_match, hungarian_match};
use crate::mask::{LabelMap, Mask};
use crate::memory::{update_memory, MemoryBank};
use crate::metrics::{average_precision, default_iou_thresholds, iou, miou, GtInstance, ScoredInstance};
use crate::mformer::m_former_forward;
use crate::params::{ModelConfig, ModelParams};
use crate::rngutil::DetRng;
use crate::tensor::{self, softmax, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<()>,
}

fn fail(msg: String) -> Result<()> {
    Err(Error::Oracle(msg))
}

fn check_softmax_normalization() -> Result<()> {
    let mut rng = DetRng::new(1);
    for _ in 0..200 {
        let cols = 1 + rng.below(8);
        let data: Vec<f64> = (0..cols).map(|_| rng.uniform(-30.0, 30.0)).collect();
        let x = Tensor::from_vec(&[cols], data)?;
        let s = softmax(&x, 0)?;
        let sum: f64 = s.data().iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return fail(format!("softmax row sums to {sum}"));
        }
    }
    Ok(())
}

fn check_attention_mask_equals_removal() -> Result<()> {
    let mut rng = DetRng::new(2);
    for _ in 0..20 {
        let c = 4;
        let mk = |rows: usize, rng: &mut DetRng| {
            Tensor::from_vec(&[rows, c], (0..rows * c).map(|_| rng.normal()).collect()).unwrap()
        };
        let q = mk(2, &mut rng);
        let k = mk(4, &mut rng);
        let v = mk(4, &mut rng);
        let drop = rng.below(4);
        let mut mask = tensor::AdditiveMask::all_allowed(2, 4);
        for r in 0..2 {
            mask.block(r, drop);
        }
        let masked = tensor::attention(&q, &k, &v, Some(&mask))?;
        let keep: Vec<usize> = (0..4).filter(|&j| j != drop).collect();
        let take = |t: &Tensor| {
            Tensor::from_vec(&[3, c], keep.iter().flat_map(|&j| t.row(j).to_vec()).collect())
                .unwrap()
        };
        let removed = tensor::attention(&q, &take(&k), &take(&v), None)?;
        if masked.data() != removed.data() {
            return fail("masked attention differs from key removal".to_string());
        }
    }
    Ok(())
}

fn check_finite_difference_oracle() -> Result<()> {
    let mut rng = DetRng::new(3);
    let p: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
    let g = tensor::finite_diff_grad(|x| Ok(x.iter().map(|v| v * v).sum()), &p, 1e-5)?;
    for (gi, pi) in g.iter().zip(&p) {
        if (gi - 2.0 * pi).abs() > 1e-6 {
            return fail(format!("finite differences disagree with 2x: {gi} vs {}", 2.0 * pi));
        }
    }
    Ok(())
}

fn check_matching_oracle() -> Result<()> {
    let mut rng = DetRng::new(4);
    for case in 0..200 {
        let g = 1 + rng.below(6);
        let s = g + rng.below(7 - g);
        let data: Vec<f64> = (0..g * s).map(|_| rng.uniform(-4.0, 4.0)).collect();
        let cost = Tensor::from_vec(&[g, s], data)?;
        let fast = hungarian_match(&cost)?;
        let slow = brute_force_match(&cost)?;
        if fast.assigned != slow.assigned || fast.total != slow.total {
            return fail(format!("assignment mismatch on case {case}"));
        }
    }
    Ok(())
}

fn random_features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = DetRng::new(seed);
    let mut f = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                f.set(ch, y, x, rng.normal());
            }
        }
    }
    f
}

fn check_mask_pool_oracle() -> Result<()> {
    let mut rng = DetRng::new(5);
    for case in 0..30 {
        let c = 1 + rng.below(5);
        let h = 1 + rng.below(5);
        let w = 1 + rng.below(5);
        let f = random_features(c, h, w, 600 + case);
        let mask = Mask::from_fn(h, w, |_, _| rng.chance(0.4));
        let pooled = mask_pool(&f, &[mask.clone()], TokenKind::Id)?;
        let mut acc = vec![0.0; c];
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    count += 1;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += f.at(ch, y, x);
                    }
                }
            }
        }
        for (ch, a) in acc.iter().enumerate() {
            let expect = if count == 0 { 0.0 } else { a / count as f64 };
            if (pooled.tokens.at2(0, ch) - expect).abs() > 1e-12 {
                return fail(format!("mask pooling differs from double loop on case {case}"));
            }
        }
    }
    Ok(())
}

fn toy_model(seed: u64) -> Result<ModelParams> {
    ModelParams::init(
        &ModelConfig {
            channels: 8,
            instance_queries: 3,
            layers: 2,
            heads: 1,
            expansion: 2,
            patch: 4,
            encoder_seed: 0,
        },
        seed,
    )
}

fn random_tokens(k: usize, c: usize, kind: TokenKind, rng: &mut DetRng) -> TokenSet {
    TokenSet {
        tokens: Tensor::from_vec(&[k, c], (0..k * c).map(|_| rng.normal()).collect()).unwrap(),
        kind,
        empty: vec![false; k],
    }
}

fn check_residual_identity() -> Result<()> {
    let mut params = toy_model(6)?;
    params.zero_all_output_projections();
    let mut rng = DetRng::new(7);
    let t_id = random_tokens(2, 8, TokenKind::Id, &mut rng);
    let t_sem = random_tokens(2, 8, TokenKind::Semantic, &mut rng);
    let f_t = random_features(8, 4, 4, 8);
    let (q_id, p_sem, f_enh) = in_context_fusion(&params.fusion, &t_id, &t_sem, &f_t)?;
    if q_id.data() != t_id.tokens.data()
        || p_sem.data() != t_sem.tokens.data()
        || f_enh.data() != f_t.data()
    {
        return fail("fusion with zero projections is not the identity".to_string());
    }
    let (state, _) = m_former_forward(&params, &q_id, &params.q_ins_init, &p_sem, &f_enh)?;
    if state.q_id.data() != q_id.data()
        || state.q_ins.data() != params.q_ins_init.data()
        || state.p_sem.data() != p_sem.data()
    {
        return fail("decoder stack with zero projections is not the identity".to_string());
    }
    Ok(())
}

fn check_id_path_isolation() -> Result<()> {
    let params = toy_model(9)?;
    let mut rng = DetRng::new(10);
    for _ in 0..10 {
        let q_id = Tensor::from_vec(&[2, 8], (0..16).map(|_| rng.normal()).collect())?;
        let f = random_features(8, 4, 4, rng.below(10_000) as u64);
        let mk = |k: usize, rng: &mut DetRng| {
            Tensor::from_vec(&[k, 8], (0..k * 8).map(|_| rng.normal()).collect()).unwrap()
        };
        let (a_state, a_preds) =
            m_former_forward(&params, &q_id, &mk(3, &mut rng), &mk(2, &mut rng), &f)?;
        let (b_state, b_preds) =
            m_former_forward(&params, &q_id, &mk(3, &mut rng), &mk(2, &mut rng), &f)?;
        if a_state.q_id.data() != b_state.q_id.data() {
            return fail("q_id trajectory depends on other inputs".to_string());
        }
        for (a, b) in a_preds.iter().zip(&b_preds) {
            if a.id_mask_logits.data() != b.id_mask_logits.data()
                || a.id_presence_probs.data() != b.id_presence_probs.data()
            {
                return fail("ID head outputs depend on other inputs".to_string());
            }
        }
    }
    Ok(())
}

fn check_memory_invariants() -> Result<()> {
    let mut rng = DetRng::new(11);
    let f = random_features(4, 4, 4, 12);
    let mask = Mask::from_fn(4, 4, |y, x| y == x);
    let mut bank = MemoryBank::new(0, 3, 0.95, f.clone(), mask.clone(), 0)?;
    for t in 1..=200 {
        update_memory(&mut bank, f.clone(), mask.clone(), rng.next_f64(), t)?;
        if bank.len() > 3 {
            return fail("memory bank exceeded capacity".to_string());
        }
        if bank.entries.iter().filter(|e| e.pinned).count() != 1 {
            return fail("pinned reference entry was evicted".to_string());
        }
    }
    Ok(())
}

fn check_format_round_trips() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("icseg-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut rng = DetRng::new(13);
    let t = Tensor::from_vec(&[2, 3], (0..6).map(|_| rng.normal()).collect())?;
    let sint = dir.join("t.sint");
    tensor::sint_save(&sint, &t)?;
    let back = tensor::sint_load(&sint)?;
    let ok_sint = t
        .data()
        .iter()
        .zip(back.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    let gray: Vec<u8> = (0..20).map(|_| rng.below(256) as u8).collect();
    let pgm = dir.join("m.pgm");
    crate::pnm::pgm_save(&pgm, 5, 4, &gray)?;
    let first = std::fs::read(&pgm)?;
    let (w, h, data) = crate::pnm::pgm_load(&pgm)?;
    crate::pnm::pgm_save(&pgm, w, h, &data)?;
    let ok_pgm = std::fs::read(&pgm)? == first;

    let img = Image::from_rgb(2, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1, 0.9, 0.2, 0.3, 0.4, 0.6, 0.8])?;
    let ppm = dir.join("i.ppm");
    crate::pnm::ppm_save(&ppm, &img)?;
    let first = std::fs::read(&ppm)?;
    let back = crate::pnm::ppm_load(&ppm)?;
    crate::pnm::ppm_save(&ppm, &back)?;
    let ok_ppm = std::fs::read(&ppm)? == first;

    let _ = std::fs::remove_dir_all(&dir);
    if ok_sint && ok_pgm && ok_ppm {
        Ok(())
    } else {
        fail(format!(
            "round trips failed (sint {ok_sint}, pgm {ok_pgm}, ppm {ok_ppm})"
        ))
    }
}

fn check_metric_sanity() -> Result<()> {
    let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    if iou(&m, &m)? != 1.0 {
        return fail("IoU of identical masks is not 1".to_string());
    }
    let mut map = LabelMap::new(4, 4);
    map.set(0, 0, 1);
    if miou(&[map.clone()], &[map], &[1])? != 1.0 {
        return fail("mIoU of identical maps is not 1".to_string());
    }
    let gts = vec![GtInstance {
        category: 1,
        mask: m.clone(),
    }];
    let preds = vec![ScoredInstance {
        category: 1,
        mask: m.clone(),
        score: 1.0,
    }];
    if average_precision(&preds, &gts, &default_iou_thresholds())? != 1.0 {
        return fail("AP of perfect predictions is not 1".to_string());
    }
    // Ranking example: FP first halves AP, TP first keeps it at 1.
    let fp = ScoredInstance {
        category: 1,
        mask: Mask::from_fn(8, 8, |y, x| y >= 5 && x >= 5),
        score: 0.9,
    };
    let tp = ScoredInstance {
        category: 1,
        mask: m,
        score: 0.8,
    };
    let ap_fp_first = average_precision(&[fp.clone(), tp.clone()], &gts, &[0.5])?;
    let mut tp2 = tp;
    tp2.score = 0.9;
    let mut fp2 = fp;
    fp2.score = 0.8;
    let ap_tp_first = average_precision(&[tp2, fp2], &gts, &[0.5])?;
    if ap_fp_first != 0.5 || ap_tp_first != 1.0 {
        return fail(format!(
            "AP ranking example gave {ap_fp_first} / {ap_tp_first}, expected 0.5 / 1.0"
        ));
    }
    Ok(())
}

fn check_encoder_stub() -> Result<()> {
    let mut rng = DetRng::new(14);
    let data: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.next_f64()).collect();
    let img = Image::from_rgb(8, 8, data)?;
    let a = encode_stub(&img, 4, 8, 3)?;
    let b = encode_stub(&img, 4, 8, 3)?;
    if a.data() != b.data() {
        return fail("encoder stub is not deterministic".to_string());
    }
    let zero = encode_stub(&Image::new(8, 8), 4, 8, 3)?;
    if zero.data().iter().any(|&v| v != 0.0) {
        return fail("encoder stub is not linear at zero".to_string());
    }
    Ok(())
}

fn check_example_validation() -> Result<()> {
    let ex = InContextExample {
        image: Image::new(8, 8),
        masks: vec![Mask::from_fn(8, 8, |y, _| y < 2)],
        categories: vec![1],
    };
    ex.validate(false)?;
    let bad = InContextExample {
        image: Image::new(8, 8),
        masks: vec![Mask::new(8, 8)],
        categories: vec![1],
    };
    if bad.validate(false).is_ok() {
        return fail("empty reference mask passed validation".to_string());
    }
    Ok(())
}

/// Run the whole suite, returning one result per check.
pub fn run_all() -> Vec<CheckResult> {
    let checks: Vec<(&'static str, fn() -> Result<()>)> = vec![
        ("softmax normalization", check_softmax_normalization),
        ("masked attention equals key removal", check_attention_mask_equals_removal),
        ("finite-difference oracle", check_finite_difference_oracle),
        ("assignment solver vs brute force", check_matching_oracle),
        ("mask pooling vs double loop", check_mask_pool_oracle),
        ("residual identity with zero projections", check_residual_identity),
        ("ID path isolation", check_id_path_isolation),
        ("memory bank invariants", check_memory_invariants),
        ("file format round trips", check_format_round_trips),
        ("metric sanity", check_metric_sanity),
        ("encoder stub determinism", check_encoder_stub),
        ("reference example validation", check_example_validation),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckResult {
            name,
            outcome: f(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_selftests_pass() {
        for check in run_all() {
            if let Err(e) = &check.outcome {
                panic!("selftest `{}` failed: {e}", check.name);
            }
        }
    }
}
