//! Binary masks and label maps.

use crate::error::{Error, Result};

/// Binary mask over an `h` x `w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Mask {
        Mask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> bool>(h: usize, w: usize, mut f: F) -> Mask {
        let mut m = Mask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.bits[y * w + x] = f(y, x);
            }
        }
        m
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Mask> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!(
                "mask bits {} do not fill {h}x{w}",
                bits.len()
            )));
        }
        Ok(Mask { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    /// Same grid check used by mask-consuming operations.
    pub fn same_grid(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }

    /// Downsample to `gh` x `gw` by per-cell majority vote; exact halves count
    /// as foreground. Source dims must be multiples of the target dims.
    pub fn downsample_majority(&self, gh: usize, gw: usize) -> Result<Mask> {
        if gh == 0 || gw == 0 || self.h % gh != 0 || self.w % gw != 0 {
            return Err(Error::Shape(format!(
                "grid {gh}x{gw} does not divide mask {}x{}",
                self.h, self.w
            )));
        }
        let py = self.h / gh;
        let px = self.w / gw;
        let cell = py * px;
        let mut out = Mask::new(gh, gw);
        for gy in 0..gh {
            for gx in 0..gw {
                let mut count = 0usize;
                for dy in 0..py {
                    for dx in 0..px {
                        if self.get(gy * py + dy, gx * px + dx) {
                            count += 1;
                        }
                    }
                }
                out.set(gy, gx, 2 * count >= cell);
            }
        }
        Ok(out)
    }
}

/// Per-pixel category labels; 0 means background. Values stay below 256 so
/// label maps serialize directly as PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> LabelMap {
        LabelMap {
            h,
            w,
            labels: vec![0; h * w],
        }
    }

    pub fn from_labels(h: usize, w: usize, labels: Vec<u8>) -> Result<LabelMap> {
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label data {} does not fill {h}x{w}",
                labels.len()
            )));
        }
        Ok(LabelMap { h, w, labels })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.w + x] = v;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, class: u8) -> Mask {
        Mask::from_bits(
            self.h,
            self.w,
            self.labels.iter().map(|&l| l == class).collect(),
        )
        .expect("labels fill the grid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_downsample_quadrant() {
        // 8x8 mask covering the top-left 4x4 quadrant, patch 4 -> only (0,0).
        let m = Mask::from_fn(8, 8, |y, x| y < 4 && x < 4);
        let d = m.downsample_majority(2, 2).unwrap();
        assert!(d.get(0, 0));
        assert!(!d.get(0, 1));
        assert!(!d.get(1, 0));
        assert!(!d.get(1, 1));
    }

    #[test]
    fn majority_tie_is_foreground() {
        // Exactly half of a 2x2 cell set -> foreground.
        let m = Mask::from_fn(2, 2, |y, _| y == 0);
        let d = m.downsample_majority(1, 1).unwrap();
        assert!(d.get(0, 0));
    }

    #[test]
    fn downsample_requires_divisibility() {
        let m = Mask::new(6, 6);
        assert!(m.downsample_majority(4, 4).is_err());
    }
}
