//! Image features: a deterministic patch-projection stub standing in for a
//! frozen pretrained backbone, plus a loader for features computed elsewhere.
//!
//! The stub is linear and bias-free on purpose: linearity and patch locality
//! are exactly testable, and downstream correctness does not depend on what
//! a real encoder would add.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rngutil::DetRng;
use crate::tensor::{self, Tensor};

/// RGB image with values in `[0, 1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Image {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn from_rgb(h: usize, w: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "image data {} does not fill {h}x{w}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("image values must lie in [0,1]".to_string()));
        }
        Ok(Image { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * 3 + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.data[(y * self.w + x) * 3 + ch] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Dense feature grid, stored channel-major as C x H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn at(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[(ch * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.c, self.h, self.w], self.data.clone())
            .expect("dims match by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<FeatureMap> {
        if t.dims().len() != 3 {
            return Err(Error::Shape(format!(
                "feature map needs ndim=3, got ndim={} ({:?})",
                t.dims().len(),
                t.dims()
            )));
        }
        Ok(FeatureMap {
            c: t.dims()[0],
            h: t.dims()[1],
            w: t.dims()[2],
            data: t.data().to_vec(),
        })
    }

    /// Rearrange to a `(H*W) x C` tensor of per-cell feature vectors,
    /// cells in row-major (y, x) order.
    pub fn flatten_cells(&self) -> Tensor {
        let hw = self.h * self.w;
        let mut data = vec![0.0; hw * self.c];
        for y in 0..self.h {
            for x in 0..self.w {
                let cell = y * self.w + x;
                for ch in 0..self.c {
                    data[cell * self.c + ch] = self.at(ch, y, x);
                }
            }
        }
        Tensor::from_vec(&[hw, self.c], data).expect("dims match")
    }

    /// Inverse of [`FeatureMap::flatten_cells`].
    pub fn from_cells(cells: &Tensor, h: usize, w: usize) -> Result<FeatureMap> {
        if cells.dims().len() != 2 || cells.dims()[0] != h * w {
            return Err(Error::Shape(format!(
                "cell tensor {:?} does not fill {h}x{w}",
                cells.dims()
            )));
        }
        let c = cells.dims()[1];
        let mut fm = FeatureMap::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                let cell = y * w + x;
                for ch in 0..c {
                    fm.set(ch, y, x, cells.at2(cell, ch));
                }
            }
        }
        Ok(fm)
    }
}

/// Deterministic patch-projection encoder stub.
///
/// Each `patch x patch` block is flattened (pixel-major, channel-minor) and
/// projected by a seeded random matrix scaled by `1/sqrt(3*patch^2)`. The
/// map is linear with no bias; identical inputs give bit-identical outputs.
pub fn encode_stub(img: &Image, patch: usize, c: usize, seed: u64) -> Result<FeatureMap> {
    if patch == 0 || c == 0 {
        return Err(Error::Config("patch and C must be positive".to_string()));
    }
    if img.h % patch != 0 || img.w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by patch {patch}",
            img.h, img.w
        )));
    }
    let gh = img.h / patch;
    let gw = img.w / patch;
    let in_dim = 3 * patch * patch;
    let proj = projection_matrix(patch, c, seed);
    let mut fm = FeatureMap::zeros(c, gh, gw);
    let mut patch_vec = vec![0.0; in_dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..3 {
                        patch_vec[i] = img.get(gy * patch + dy, gx * patch + dx, ch);
                        i += 1;
                    }
                }
            }
            for ch in 0..c {
                let row = &proj[ch * in_dim..(ch + 1) * in_dim];
                let mut acc = 0.0;
                for t in 0..in_dim {
                    acc += row[t] * patch_vec[t];
                }
                fm.set(ch, gy, gx, acc);
            }
        }
    }
    Ok(fm)
}

fn projection_matrix(patch: usize, c: usize, seed: u64) -> Vec<f64> {
    let in_dim = 3 * patch * patch;
    let scale = 1.0 / (in_dim as f64).sqrt();
    let mut rng = DetRng::new(seed);
    (0..c * in_dim).map(|_| rng.normal() * scale).collect()
}

/// Read a feature map from a SINT v1 file with ndim=3.
pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let t = tensor::sint_load(path)?;
    FeatureMap::from_tensor(&t)
}

/// Write a feature map as a SINT v1 file (dims C, H, W).
pub fn save_features(path: &Path, fm: &FeatureMap) -> Result<()> {
    tensor::sint_save(path, &fm.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::DetRng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = DetRng::new(seed);
        let data = (0..h * w * 3).map(|_| rng.next_f64()).collect();
        Image::from_rgb(h, w, data).unwrap()
    }

    #[test]
    fn stub_shape_contract() {
        let img = random_image(16, 16, 1);
        let fm = encode_stub(&img, 4, 8, 0).unwrap();
        assert_eq!((fm.channels(), fm.height(), fm.width()), (8, 4, 4));
    }

    #[test]
    fn stub_zero_image_zero_features() {
        let img = Image::new(8, 8);
        let fm = encode_stub(&img, 4, 8, 0).unwrap();
        assert!(fm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stub_deterministic() {
        let img = random_image(16, 16, 2);
        let a = encode_stub(&img, 4, 8, 3).unwrap();
        let b = encode_stub(&img, 4, 8, 3).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stub_rejects_nondivisible() {
        let img = random_image(10, 16, 2);
        assert!(encode_stub(&img, 4, 8, 0).is_err());
    }

    #[test]
    fn stub_is_linear() {
        // encode(a*x + b*y) == a*encode(x) + b*encode(y) within 1e-10.
        let x = random_image(8, 8, 4);
        let y = random_image(8, 8, 5);
        let (a, b) = (0.3, 0.45);
        let mut combo = Image::new(8, 8);
        for i in 0..combo.data.len() {
            combo.data[i] = a * x.data[i] + b * y.data[i];
        }
        let fc = encode_stub(&combo, 4, 8, 9).unwrap();
        let fx = encode_stub(&x, 4, 8, 9).unwrap();
        let fy = encode_stub(&y, 4, 8, 9).unwrap();
        for i in 0..fc.data().len() {
            let lhs = fc.data()[i];
            let rhs = a * fx.data()[i] + b * fy.data()[i];
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn stub_patch_locality() {
        let img = random_image(16, 16, 6);
        let base = encode_stub(&img, 4, 8, 7).unwrap();
        // Perturb only the patch at grid cell (1, 2).
        let mut changed = img.clone();
        for dy in 0..4 {
            for dx in 0..4 {
                changed.set(4 + dy, 8 + dx, 0, 1.0 - changed.get(4 + dy, 8 + dx, 0));
            }
        }
        let out = encode_stub(&changed, 4, 8, 7).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..8 {
                    let same = base.at(ch, y, x) == out.at(ch, y, x);
                    if (y, x) == (1, 2) {
                        // The touched cell must differ somewhere; checked below.
                    } else {
                        assert!(same, "untouched cell ({y},{x}) changed");
                    }
                }
            }
        }
        let touched_differs = (0..8).any(|ch| base.at(ch, 1, 2) != out.at(ch, 1, 2));
        assert!(touched_differs);
    }

    #[test]
    fn feature_round_trip_and_ndim_check() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(8, 8, 8);
        let fm = encode_stub(&img, 4, 6, 1).unwrap();
        let path = dir.path().join("f.sint");
        save_features(&path, &fm).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(fm, back);

        // A 2-D tensor is not a feature map.
        let t2 = Tensor::zeros(&[3, 3]);
        let p2 = dir.path().join("bad.sint");
        tensor::sint_save(&p2, &t2).unwrap();
        let err = load_features(&p2).unwrap_err().to_string();
        assert!(err.contains("ndim=2"), "{err}");
    }

    #[test]
    fn cells_round_trip() {
        let img = random_image(8, 12, 10);
        let fm = encode_stub(&img, 4, 5, 2).unwrap();
        let cells = fm.flatten_cells();
        let back = FeatureMap::from_cells(&cells, fm.height(), fm.width()).unwrap();
        assert_eq!(fm, back);
    }
}
