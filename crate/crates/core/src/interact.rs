//! In-context interaction: turn a reference example into identity tokens and
//! semantic tokens by mask pooling, then fuse them with the target features.
//!
//! The fusion block is one pre-norm transformer block: self-attention over
//! the concatenated token sequence, symmetric cross-attention where tokens
//! and target cells serve as keys and values for each other (shared
//! weights, roles swapped), and a shared feed-forward on both streams.

use crate::encoder::{FeatureMap, Image};
use crate::error::{Error, Result};
use crate::layers::{
    attention_fwd, concat_rows, ffn_fwd, norm_fwd, positional_grid, split_rows, AttentionCache,
    FeedForwardCache, NormCache,
};
use crate::mask::Mask;
use crate::params::FusionParams;
use crate::tensor::Tensor;

/// A reference image together with its per-instance masks and categories.
#[derive(Debug, Clone)]
pub struct InContextExample {
    pub image: Image,
    pub masks: Vec<Mask>,
    pub categories: Vec<u32>,
}

impl InContextExample {
    /// N >= 1, masks non-empty and on the image grid, one category per mask,
    /// and pairwise disjoint unless `allow_overlap`.
    pub fn validate(&self, allow_overlap: bool) -> Result<()> {
        if self.masks.is_empty() {
            return Err(Error::Contract("reference needs at least one mask".to_string()));
        }
        if self.masks.len() != self.categories.len() {
            return Err(Error::Contract(format!(
                "{} masks but {} categories",
                self.masks.len(),
                self.categories.len()
            )));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.height() != self.image.height() || m.width() != self.image.width() {
                return Err(Error::Shape(format!(
                    "mask {i} is {}x{}, image is {}x{}",
                    m.height(),
                    m.width(),
                    self.image.height(),
                    self.image.width()
                )));
            }
            if m.is_empty() {
                return Err(Error::Contract(format!("mask {i} is empty")));
            }
        }
        if !allow_overlap {
            for i in 0..self.masks.len() {
                for j in i + 1..self.masks.len() {
                    if self.masks[i].overlaps(&self.masks[j]) {
                        return Err(Error::Contract(format!("masks {i} and {j} overlap")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Id,
    Semantic,
}

/// K x C pooled tokens; `empty[k]` marks tokens whose mask vanished under
/// downsampling (the token is zero but keeps its slot).
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub tokens: Tensor,
    pub kind: TokenKind,
    pub empty: Vec<bool>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-instance and per-category masks at feature resolution.
#[derive(Debug, Clone)]
pub struct GroupedMasks {
    pub id_masks: Vec<Mask>,
    /// Instances whose mask downsampled to nothing (kept, flagged).
    pub id_empty: Vec<bool>,
    pub sem_masks: Vec<Mask>,
    /// Ascending category id per semantic mask.
    pub sem_categories: Vec<u32>,
}

/// Downsample instance masks to the feature grid by per-cell majority vote
/// and merge same-category instances into semantic masks.
pub fn group_masks(ex: &InContextExample, grid: (usize, usize)) -> Result<GroupedMasks> {
    ex.validate(false)?;
    let (gh, gw) = grid;
    let mut id_masks = Vec::with_capacity(ex.masks.len());
    let mut id_empty = Vec::with_capacity(ex.masks.len());
    for m in &ex.masks {
        let d = m.downsample_majority(gh, gw)?;
        id_empty.push(d.is_empty());
        id_masks.push(d);
    }
    let mut cats: Vec<u32> = ex.categories.clone();
    cats.sort_unstable();
    cats.dedup();
    let mut sem_masks = Vec::with_capacity(cats.len());
    for &c in &cats {
        let mut u = Mask::new(gh, gw);
        for (m, &mc) in id_masks.iter().zip(&ex.categories) {
            if mc == c {
                u.union_with(m);
            }
        }
        sem_masks.push(u);
    }
    Ok(GroupedMasks {
        id_masks,
        id_empty,
        sem_masks,
        sem_categories: cats,
    })
}

/// Pool the feature map under each mask: token k is the mean feature vector
/// over mask k's cells. An empty mask yields a zero token plus a flag.
pub fn mask_pool(f: &FeatureMap, masks: &[Mask], kind: TokenKind) -> Result<TokenSet> {
    let c = f.channels();
    let mut tokens = Tensor::zeros(&[masks.len().max(1), c]);
    if masks.is_empty() {
        return Err(Error::Contract("mask_pool needs at least one mask".to_string()));
    }
    let mut empty = Vec::with_capacity(masks.len());
    for (k, m) in masks.iter().enumerate() {
        if m.height() != f.height() || m.width() != f.width() {
            return Err(Error::Shape(format!(
                "mask {k} is {}x{}, features are {}x{}",
                m.height(),
                m.width(),
                f.height(),
                f.width()
            )));
        }
        let count = m.count();
        empty.push(count == 0);
        if count == 0 {
            continue;
        }
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..f.height() {
                for x in 0..f.width() {
                    if m.get(y, x) {
                        acc += f.at(ch, y, x);
                    }
                }
            }
            tokens.set2(k, ch, acc / count as f64);
        }
    }
    Ok(TokenSet {
        tokens,
        kind,
        empty,
    })
}

/// Group and pool a reference example against its feature map.
pub fn example_tokens(
    f_r: &FeatureMap,
    ex: &InContextExample,
) -> Result<(TokenSet, TokenSet, GroupedMasks)> {
    let grouped = group_masks(ex, (f_r.height(), f_r.width()))?;
    let t_id = mask_pool(f_r, &grouped.id_masks, TokenKind::Id)?;
    let t_sem = mask_pool(f_r, &grouped.sem_masks, TokenKind::Semantic)?;
    Ok((t_id, t_sem, grouped))
}

/// Everything the backward pass needs from a fusion forward.
pub struct FusionTrace {
    pub q_id: Tensor,
    pub p_sem: Tensor,
    pub f_enh: FeatureMap,
    /// Enhanced cell stream, `(H*W) x C`, same values as `f_enh`.
    pub cells_out: Tensor,
    pub(crate) c_norm_self: NormCache,
    pub(crate) c_self: AttentionCache,
    pub(crate) c_norm_ct: NormCache,
    pub(crate) c_norm_cc: NormCache,
    pub(crate) c_cross_tokens: AttentionCache,
    pub(crate) c_cross_cells: AttentionCache,
    pub(crate) c_norm_ft: NormCache,
    pub(crate) c_ffn_t: FeedForwardCache,
    pub(crate) c_norm_fc: NormCache,
    pub(crate) c_ffn_c: FeedForwardCache,
}

/// Fusion forward with trace. `in_context_fusion` is the plain view of it.
pub fn fusion_fwd(
    p: &FusionParams,
    t_id: &TokenSet,
    t_sem: &TokenSet,
    f_t: &FeatureMap,
) -> Result<FusionTrace> {
    let c = p.self_attn.wq.in_dim();
    if t_id.tokens.dims()[1] != c || t_sem.tokens.dims()[1] != c || f_t.channels() != c {
        return Err(Error::Config(format!(
            "fusion width mismatch: params C={c}, t_id {:?}, t_sem {:?}, features C={}",
            t_id.tokens.dims(),
            t_sem.tokens.dims(),
            f_t.channels()
        )));
    }
    let n_id = t_id.len();
    let n_sem = t_sem.len();
    let tokens = concat_rows(&[&t_id.tokens, &t_sem.tokens]);
    let cells = f_t.flatten_cells();
    let pe = positional_grid(c, f_t.height(), f_t.width())?;

    // Token self-attention.
    let (tn, c_norm_self) = norm_fwd(&p.norm_self, &tokens)?;
    let (sa, c_self) = attention_fwd(&p.self_attn, &tn, &tn, &tn, None)?;
    let t1 = tokens.add(&sa)?;

    // Symmetric cross-attention over the pre-update streams; the positional
    // grid rides on cell features wherever cells act as queries or keys.
    let (t1n, c_norm_ct) = norm_fwd(&p.norm_cross_tokens, &t1)?;
    let (cn, c_norm_cc) = norm_fwd(&p.norm_cross_cells, &cells)?;
    let cn_pe = cn.add(&pe)?;
    let (ca_t, c_cross_tokens) = attention_fwd(&p.cross_attn, &t1n, &cn_pe, &cn, None)?;
    let (ca_c, c_cross_cells) = attention_fwd(&p.cross_attn, &cn_pe, &t1n, &t1n, None)?;
    let t2 = t1.add(&ca_t)?;
    let c2 = cells.add(&ca_c)?;

    // Shared feed-forward on both streams.
    let (tf, c_norm_ft) = norm_fwd(&p.norm_ffn_tokens, &t2)?;
    let (ff_t, c_ffn_t) = ffn_fwd(&p.ffn, &tf)?;
    let t3 = t2.add(&ff_t)?;
    let (cf, c_norm_fc) = norm_fwd(&p.norm_ffn_cells, &c2)?;
    let (ff_c, c_ffn_c) = ffn_fwd(&p.ffn, &cf)?;
    let c3 = c2.add(&ff_c)?;

    let parts = split_rows(&t3, &[n_id, n_sem]);
    let f_enh = FeatureMap::from_cells(&c3, f_t.height(), f_t.width())?;
    Ok(FusionTrace {
        q_id: parts[0].clone(),
        p_sem: parts[1].clone(),
        f_enh,
        cells_out: c3,
        c_norm_self,
        c_self,
        c_norm_ct,
        c_norm_cc,
        c_cross_tokens,
        c_cross_cells,
        c_norm_ft,
        c_ffn_t,
        c_norm_fc,
        c_ffn_c,
    })
}

/// Fuse reference tokens with the target features, producing the ID queries,
/// the semantic prototypes, and the enhanced target feature.
pub fn in_context_fusion(
    p: &FusionParams,
    t_id: &TokenSet,
    t_sem: &TokenSet,
    f_t: &FeatureMap,
) -> Result<(Tensor, Tensor, FeatureMap)> {
    let trace = fusion_fwd(p, t_id, t_sem, f_t)?;
    Ok((trace.q_id, trace.p_sem, trace.f_enh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ModelConfig, ModelParams};
    use crate::rngutil::DetRng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            channels: 16,
            instance_queries: 4,
            layers: 1,
            heads: 1,
            expansion: 2,
            patch: 4,
            encoder_seed: 3,
        }
    }

    fn random_feature_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = DetRng::new(seed);
        let mut fm = FeatureMap::zeros(c, h, w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    fm.set(ch, y, x, rng.normal());
                }
            }
        }
        fm
    }

    fn example_with(masks: Vec<Mask>, categories: Vec<u32>, hw: usize) -> InContextExample {
        InContextExample {
            image: Image::new(hw, hw),
            masks,
            categories,
        }
    }

    #[test]
    fn group_same_category_merges() {
        let m1 = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let m2 = Mask::from_fn(8, 8, |y, x| y >= 4 && x >= 4);
        let ex = example_with(vec![m1, m2], vec![7, 7], 8);
        let g = group_masks(&ex, (8, 8)).unwrap();
        assert_eq!(g.id_masks.len(), 2);
        assert_eq!(g.sem_masks.len(), 1);
        assert_eq!(g.sem_categories, vec![7]);
        assert_eq!(g.sem_masks[0].count(), 32);
    }

    #[test]
    fn group_distinct_categories_keep_masks() {
        let m1 = Mask::from_fn(8, 8, |y, _| y < 4);
        let m2 = Mask::from_fn(8, 8, |y, _| y >= 4);
        let ex = example_with(vec![m1.clone(), m2.clone()], vec![2, 1], 8);
        let g = group_masks(&ex, (8, 8)).unwrap();
        assert_eq!(g.sem_masks.len(), 2);
        // Categories come out ascending.
        assert_eq!(g.sem_categories, vec![1, 2]);
        assert_eq!(g.sem_masks[0], m2);
        assert_eq!(g.sem_masks[1], m1);
    }

    #[test]
    fn group_downsamples_by_majority() {
        // 8x8 mask covering the top-left 4x4 quadrant at patch 4.
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let ex = example_with(vec![m], vec![1], 8);
        let g = group_masks(&ex, (2, 2)).unwrap();
        assert!(g.id_masks[0].get(0, 0));
        assert_eq!(g.id_masks[0].count(), 1);
        assert!(!g.id_empty[0]);
    }

    #[test]
    fn group_flags_vanishing_masks() {
        // A 2-pixel mask inside an 8x8 cell disappears under majority vote.
        let mut m = Mask::new(8, 8);
        m.set(0, 0, true);
        m.set(0, 1, true);
        let big = Mask::from_fn(8, 8, |y, _| y >= 4);
        let ex = example_with(vec![m, big], vec![1, 2], 8);
        let g = group_masks(&ex, (1, 1)).unwrap();
        assert!(g.id_empty[0]);
        assert!(!g.id_empty[1]);
        assert!(g.id_masks[0].is_empty());
    }

    #[test]
    fn sem_union_equals_id_union() {
        let mut rng = DetRng::new(5);
        for _ in 0..20 {
            let masks: Vec<Mask> = (0..3)
                .map(|k| {
                    Mask::from_fn(8, 8, |y, x| {
                        // Disjoint bands with ragged random edges.
                        let band = y / 3 == k && y < 9;
                        band && (rng.chance(0.8) || x == 0)
                    })
                })
                .collect();
            let masks: Vec<Mask> = masks
                .into_iter()
                .map(|m| if m.is_empty() { Mask::from_fn(8, 8, |y, x| y == 0 && x == 0) } else { m })
                .collect();
            let ex = example_with(masks, vec![3, 1, 3], 8);
            if ex.validate(false).is_err() {
                continue;
            }
            let g = group_masks(&ex, (4, 4)).unwrap();
            let mut id_union = Mask::new(4, 4);
            for m in &g.id_masks {
                id_union.union_with(m);
            }
            let mut sem_union = Mask::new(4, 4);
            for m in &g.sem_masks {
                sem_union.union_with(m);
            }
            assert_eq!(id_union, sem_union);
        }
    }

    #[test]
    fn pool_full_mask_is_spatial_mean() {
        let f = random_feature_map(6, 4, 4, 1);
        let full = Mask::from_fn(4, 4, |_, _| true);
        let t = mask_pool(&f, &[full], TokenKind::Semantic).unwrap();
        for ch in 0..6 {
            let mut mean = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    mean += f.at(ch, y, x);
                }
            }
            mean /= 16.0;
            assert!((t.tokens.at2(0, ch) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_single_cell_is_exact() {
        let f = random_feature_map(5, 3, 3, 2);
        let mut m = Mask::new(3, 3);
        m.set(2, 1, true);
        let t = mask_pool(&f, &[m], TokenKind::Id).unwrap();
        for ch in 0..5 {
            assert_eq!(t.tokens.at2(0, ch), f.at(ch, 2, 1));
        }
    }

    #[test]
    fn pool_matches_brute_force_oracle() {
        // Independent double-loop accumulation, 100 random cases.
        let mut rng = DetRng::new(3);
        for case in 0..100 {
            let c = 1 + rng.below(6);
            let h = 1 + rng.below(5);
            let w = 1 + rng.below(5);
            let f = random_feature_map(c, h, w, 1000 + case);
            let k = 1 + rng.below(3);
            let masks: Vec<Mask> = (0..k)
                .map(|_| Mask::from_fn(h, w, |_, _| rng.chance(0.4)))
                .collect();
            let t = mask_pool(&f, &masks, TokenKind::Id).unwrap();
            for (ki, m) in masks.iter().enumerate() {
                // Oracle: explicit per-cell accumulation, cell-major.
                let mut count = 0usize;
                let mut acc = vec![0.0; c];
                for y in 0..h {
                    for x in 0..w {
                        if m.get(y, x) {
                            count += 1;
                            for (ch, a) in acc.iter_mut().enumerate() {
                                *a += f.at(ch, y, x);
                            }
                        }
                    }
                }
                if count == 0 {
                    assert!(t.empty[ki]);
                    for ch in 0..c {
                        assert_eq!(t.tokens.at2(ki, ch), 0.0);
                    }
                } else {
                    for ch in 0..c {
                        let oracle = acc[ch] / count as f64;
                        assert!((t.tokens.at2(ki, ch) - oracle).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pool_grid_mismatch_errors() {
        let f = random_feature_map(4, 4, 4, 9);
        let m = Mask::new(8, 8);
        assert!(mask_pool(&f, &[m], TokenKind::Id).is_err());
    }

    fn toy_tokens(n: usize, m: usize, c: usize, seed: u64) -> (TokenSet, TokenSet) {
        let mut rng = DetRng::new(seed);
        let t_id = TokenSet {
            tokens: Tensor::from_vec(&[n, c], (0..n * c).map(|_| rng.normal()).collect()).unwrap(),
            kind: TokenKind::Id,
            empty: vec![false; n],
        };
        let t_sem = TokenSet {
            tokens: Tensor::from_vec(&[m, c], (0..m * c).map(|_| rng.normal()).collect()).unwrap(),
            kind: TokenKind::Semantic,
            empty: vec![false; m],
        };
        (t_id, t_sem)
    }

    #[test]
    fn fusion_shape_contract() {
        let cfg = toy_config();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let (t_id, t_sem) = toy_tokens(2, 1, 16, 4);
        let f_t = random_feature_map(16, 8, 8, 5);
        let (q_id, p_sem, f_enh) = in_context_fusion(&p.fusion, &t_id, &t_sem, &f_t).unwrap();
        assert_eq!(q_id.dims(), &[2, 16]);
        assert_eq!(p_sem.dims(), &[1, 16]);
        assert_eq!(
            (f_enh.channels(), f_enh.height(), f_enh.width()),
            (16, 8, 8)
        );
    }

    #[test]
    fn fusion_zero_projections_is_identity() {
        let cfg = toy_config();
        let mut p = ModelParams::init(&cfg, 1).unwrap();
        p.fusion.self_attn.zero_output();
        p.fusion.cross_attn.zero_output();
        p.fusion.ffn.zero_output();
        let (t_id, t_sem) = toy_tokens(3, 2, 16, 6);
        let f_t = random_feature_map(16, 4, 4, 7);
        let (q_id, p_sem, f_enh) = in_context_fusion(&p.fusion, &t_id, &t_sem, &f_t).unwrap();
        assert_eq!(q_id.data(), t_id.tokens.data());
        assert_eq!(p_sem.data(), t_sem.tokens.data());
        assert_eq!(f_enh.data(), f_t.data());
    }

    #[test]
    fn fusion_duplicated_tokens_leave_target_unchanged() {
        let cfg = toy_config();
        let p = ModelParams::init(&cfg, 2).unwrap();
        let (t_id, t_sem) = toy_tokens(2, 2, 16, 8);
        let f_t = random_feature_map(16, 4, 4, 9);
        let (_, _, base) = in_context_fusion(&p.fusion, &t_id, &t_sem, &f_t).unwrap();

        // Duplicate every token; softmax weights re-normalize.
        let dup = |t: &TokenSet| {
            let k = t.len();
            let c = t.tokens.dims()[1];
            let mut data = Vec::new();
            for r in 0..k {
                data.extend_from_slice(t.tokens.row(r));
                data.extend_from_slice(t.tokens.row(r));
            }
            TokenSet {
                tokens: Tensor::from_vec(&[2 * k, c], data).unwrap(),
                kind: t.kind,
                empty: vec![false; 2 * k],
            }
        };
        let (_, _, doubled) = in_context_fusion(&p.fusion, &dup(&t_id), &dup(&t_sem), &f_t).unwrap();
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn fusion_permuting_instances_permutes_queries() {
        let cfg = toy_config();
        let p = ModelParams::init(&cfg, 3).unwrap();
        let (t_id, t_sem) = toy_tokens(4, 2, 16, 10);
        let f_t = random_feature_map(16, 4, 4, 11);
        let (q_id, _, f_enh) = in_context_fusion(&p.fusion, &t_id, &t_sem, &f_t).unwrap();

        let perm = [2usize, 0, 3, 1];
        let permuted = TokenSet {
            tokens: Tensor::from_vec(
                &[4, 16],
                perm.iter().flat_map(|&i| t_id.tokens.row(i).to_vec()).collect(),
            )
            .unwrap(),
            kind: TokenKind::Id,
            empty: vec![false; 4],
        };
        let (q_id_p, _, f_enh_p) = in_context_fusion(&p.fusion, &permuted, &t_sem, &f_t).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for ch in 0..16 {
                let a = q_id_p.at2(new_row, ch);
                let b = q_id.at2(old_row, ch);
                assert!((a - b).abs() < 1e-10);
            }
        }
        for (a, b) in f_enh.data().iter().zip(f_enh_p.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fusion_rejects_width_mismatch() {
        let cfg = toy_config();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let (t_id, t_sem) = toy_tokens(1, 1, 8, 12);
        let f_t = random_feature_map(8, 4, 4, 13);
        assert!(matches!(
            in_context_fusion(&p.fusion, &t_id, &t_sem, &f_t).unwrap_err(),
            Error::Config(_)
        ));
    }
}
