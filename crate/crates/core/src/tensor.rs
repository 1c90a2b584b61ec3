//! Dense f64 tensor kernels: matmul, softmax, layer norm, masked attention,
//! feed-forward, and a central-difference gradient oracle.
//!
//! All kernels accumulate in a fixed row-major, left-to-right order so that
//! repeated runs are bit-identical. Blocked attention entries are skipped
//! (never multiplied by zero), which makes masking a key bit-identical to
//! removing it from the key set.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Sentinel marking a blocked attention-mask entry. Softmax treats any value
/// equal to this as a flag (exact zero weight), never as an operand.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Dense row-major tensor, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {:?} imply {} elements, got {}",
                dims,
                n,
                data.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {dims:?}")));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let c = self.dims[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert_eq!(self.dims.len(), 2);
        let c = self.dims[1];
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 2);
        self.data[i * self.dims[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.dims.len(), 2);
        let c = self.dims[1];
        self.data[i * c + j] = v;
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        debug_assert_eq!(self.dims.len(), 3);
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f64) {
        debug_assert_eq!(self.dims.len(), 3);
        let (d1, d2) = (self.dims[1], self.dims[2]);
        self.data[(i * d1 + j) * d2 + k] = v;
    }

    /// True when every element is finite (sentinels count as non-finite).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise sum, shapes must match.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Additive attention mask: every entry is either 0 (allowed) or the
/// `NEG_INF` sentinel (blocked). Stored as flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdditiveMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AdditiveMask {
    pub fn all_allowed(rows: usize, cols: usize) -> AdditiveMask {
        AdditiveMask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn all_blocked(rows: usize, cols: usize) -> AdditiveMask {
        AdditiveMask {
            rows,
            cols,
            allowed: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allow(&mut self, r: usize, c: usize) {
        self.allowed[r * self.cols + c] = true;
    }

    pub fn block(&mut self, r: usize, c: usize) {
        self.allowed[r * self.cols + c] = false;
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    /// The additive value of an entry: 0 when allowed, `NEG_INF` when blocked.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        if self.is_allowed(r, c) {
            0.0
        } else {
            NEG_INF
        }
    }

    pub fn row_has_allowed(&self, r: usize) -> bool {
        self.allowed[r * self.cols..(r + 1) * self.cols]
            .iter()
            .any(|&a| a)
    }

    pub fn count_allowed(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// `A[m,k] * B[k,n]`, accumulated over `k` ascending per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims.len() != 2 || b.dims.len() != 2 {
        return Err(Error::Shape(format!(
            "matmul expects 2-D operands, got {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    let (m, ka) = (a.dims[0], a.dims[1]);
    let (kb, n) = (b.dims[0], b.dims[1]);
    if ka != kb {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {:?} vs {:?}",
            a.dims, b.dims
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor {
        dims: vec![m, n],
        data: out,
    })
}

/// Softmax along `axis` with max-subtraction. Entries equal to `NEG_INF` are
/// treated as blocked flags and map to exactly 0; a slice with no unblocked
/// entry is an error, as is any NaN/+Inf input.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.dims.len() {
        return Err(Error::Shape(format!(
            "softmax axis {axis} out of range for dims {:?}",
            x.dims
        )));
    }
    let len = x.dims[axis];
    let inner: usize = x.dims[axis + 1..].iter().product();
    let outer: usize = x.dims[..axis].iter().product();
    let mut out = vec![0.0; x.data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..len {
                let v = x.data[idx(j)];
                if v == NEG_INF {
                    continue;
                }
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "softmax input at flat index {}",
                        idx(j)
                    )));
                }
                any = true;
                if v > max {
                    max = v;
                }
            }
            if !any {
                return Err(Error::DegenerateSlice(format!(
                    "softmax slice (outer {o}, inner {i}) is fully blocked"
                )));
            }
            let mut sum = 0.0;
            for j in 0..len {
                let v = x.data[idx(j)];
                if v == NEG_INF {
                    out[idx(j)] = 0.0;
                } else {
                    let e = (v - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
            }
            for j in 0..len {
                let v = x.data[idx(j)];
                if v != NEG_INF {
                    out[idx(j)] /= sum;
                }
            }
        }
    }
    Ok(Tensor {
        dims: x.dims.clone(),
        data: out,
    })
}

/// Layer normalization over the last axis, then `gamma * xhat + beta`.
///
/// A zero-variance vector with `eps == 0` normalizes to zeros (output beta)
/// rather than dividing by zero.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.dims.last().ok_or_else(|| {
        Error::Shape("layer_norm requires at least one dimension".to_string())
    })?;
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::Shape(format!(
            "layer_norm channel mismatch: x {:?}, gamma {:?}, beta {:?}",
            x.dims,
            gamma.dims(),
            beta.dims()
        )));
    }
    if eps < 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let rows = x.data.len() / c;
    let mut out = vec![0.0; x.data.len()];
    for r in 0..rows {
        let xr = &x.data[r * c..(r + 1) * c];
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var /= c as f64;
        let denom = (var + eps).sqrt();
        let orow = &mut out[r * c..(r + 1) * c];
        for j in 0..c {
            let xhat = if denom == 0.0 { 0.0 } else { (xr[j] - mean) / denom };
            orow[j] = gamma.data[j] * xhat + beta.data[j];
        }
    }
    Ok(Tensor {
        dims: x.dims.clone(),
        data: out,
    })
}

/// Scaled dot-product attention: `softmax(Q Kᵀ / sqrt(C) + mask) V`.
///
/// Blocked keys are skipped in every accumulation, so masking a key out is
/// bit-identical to removing it from K/V.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AdditiveMask>,
) -> Result<Tensor> {
    attention_full(q, k, v, mask).map(|(out, _)| out)
}

/// Attention that also returns the q×k weight matrix (zeros at blocked keys).
pub fn attention_full(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AdditiveMask>,
) -> Result<(Tensor, Tensor)> {
    if q.dims.len() != 2 || k.dims.len() != 2 || v.dims.len() != 2 {
        return Err(Error::Shape("attention expects 2-D Q, K, V".to_string()));
    }
    let (nq, c) = (q.dims[0], q.dims[1]);
    let nk = k.dims[0];
    if k.dims[1] != c || v.dims[1] != c || v.dims[0] != nk {
        return Err(Error::Shape(format!(
            "attention shapes inconsistent: Q {:?}, K {:?}, V {:?}",
            q.dims, k.dims, v.dims
        )));
    }
    if let Some(m) = mask {
        if m.rows() != nq || m.cols() != nk {
            return Err(Error::Shape(format!(
                "attention mask {}x{} does not match {}x{}",
                m.rows(),
                m.cols(),
                nq,
                nk
            )));
        }
    }
    let scale = 1.0 / (c as f64).sqrt();
    let mut weights = vec![0.0; nq * nk];
    let mut out = vec![0.0; nq * c];
    for i in 0..nq {
        let qrow = q.row(i);
        // Max over allowed logits.
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        let mut logits = vec![0.0; nk];
        for j in 0..nk {
            if let Some(m) = mask {
                if !m.is_allowed(i, j) {
                    logits[j] = NEG_INF;
                    continue;
                }
            }
            let mut dot = 0.0;
            let krow = k.row(j);
            for t in 0..c {
                dot += qrow[t] * krow[t];
            }
            let l = dot * scale;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!("attention logit ({i},{j})")));
            }
            logits[j] = l;
            any = true;
            if l > max {
                max = l;
            }
        }
        if !any {
            return Err(Error::DegenerateSlice(format!(
                "attention query row {i} has every key blocked"
            )));
        }
        let mut sum = 0.0;
        for j in 0..nk {
            if logits[j] != NEG_INF {
                let e = (logits[j] - max).exp();
                weights[i * nk + j] = e;
                sum += e;
            }
        }
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..nk {
            if logits[j] == NEG_INF {
                continue;
            }
            let w = weights[i * nk + j] / sum;
            weights[i * nk + j] = w;
            let vrow = v.row(j);
            for t in 0..c {
                orow[t] += w * vrow[t];
            }
        }
    }
    Ok((
        Tensor {
            dims: vec![nq, c],
            data: out,
        },
        Tensor {
            dims: vec![nq, nk],
            data: weights,
        },
    ))
}

/// GELU activation (tanh form).
pub fn gelu(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654; // sqrt(2/pi)
    const B: f64 = 0.044715;
    0.5 * x * (1.0 + (A * (x + B * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_deriv(x: f64) -> f64 {
    const A: f64 = 0.7978845608028654;
    const B: f64 = 0.044715;
    let u = A * (x + B * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * A * (1.0 + 3.0 * B * x * x)
}

/// Per-token feed-forward: `W2 · gelu(W1 · x + b1) + b2`.
///
/// `x` is `[..., C]`; `w1` is `[hidden, C]`, `w2` is `[C, hidden]`.
pub fn ffn(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let c = *x
        .dims
        .last()
        .ok_or_else(|| Error::Shape("ffn requires at least one dimension".to_string()))?;
    if w1.dims.len() != 2 || w1.dims[1] != c {
        return Err(Error::Shape(format!(
            "ffn W1 {:?} does not accept C={c}",
            w1.dims
        )));
    }
    let hidden = w1.dims[0];
    if b1.dims() != [hidden] || w2.dims() != [c, hidden] || b2.dims() != [c] {
        return Err(Error::Shape(format!(
            "ffn shapes inconsistent: W1 {:?}, b1 {:?}, W2 {:?}, b2 {:?}",
            w1.dims,
            b1.dims(),
            w2.dims(),
            b2.dims()
        )));
    }
    let rows = x.data.len() / c;
    let mut out = vec![0.0; x.data.len()];
    let mut h = vec![0.0; hidden];
    for r in 0..rows {
        let xr = &x.data[r * c..(r + 1) * c];
        for j in 0..hidden {
            let wrow = &w1.data[j * c..(j + 1) * c];
            let mut acc = b1.data[j];
            for t in 0..c {
                acc += wrow[t] * xr[t];
            }
            h[j] = gelu(acc);
        }
        let orow = &mut out[r * c..(r + 1) * c];
        for j in 0..c {
            let wrow = &w2.data[j * hidden..(j + 1) * hidden];
            let mut acc = b2.data[j];
            for t in 0..hidden {
                acc += wrow[t] * h[t];
            }
            orow[j] = acc;
        }
    }
    Ok(Tensor {
        dims: x.dims.clone(),
        data: out,
    })
}

/// Central-difference gradient of a scalar function.
///
/// `grad[i] = (f(p + eps e_i) - f(p - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe)?;
        probe[i] = orig - eps;
        let fm = f(&probe)?;
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Oracle(format!(
                "finite_diff_grad: non-finite value at coordinate {i} (f+ = {fp}, f- = {fm})"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// SINT v1 tensor file format
// ---------------------------------------------------------------------------
// magic "SINT", version 0x01, dtype byte (0 = f32, 1 = f64), ndim byte,
// ndim little-endian u32 dims, then the row-major little-endian payload.

const SINT_MAGIC: &[u8; 4] = b"SINT";

/// Write a tensor as a SINT v1 file (f64 payload).
pub fn sint_save(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 4 * t.dims.len() + 8 * t.data.len());
    buf.extend_from_slice(SINT_MAGIC);
    buf.push(0x01);
    buf.push(1); // f64
    if t.dims.len() > u8::MAX as usize {
        return Err(Error::Shape(format!("ndim {} exceeds format limit", t.dims.len())));
    }
    buf.push(t.dims.len() as u8);
    for &d in &t.dims {
        if d > u32::MAX as usize {
            return Err(Error::Shape(format!("dimension {d} exceeds u32")));
        }
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Read a SINT v1 file. f32 payloads widen exactly to f64.
pub fn sint_load(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    sint_from_bytes(&bytes)
}

pub fn sint_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != SINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected SINT".to_string(),
        });
    }
    if bytes.len() < 5 || bytes[4] != 0x01 {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {:?}", bytes.get(4)),
        });
    }
    let dtype = *bytes.get(5).ok_or(Error::Format {
        offset: 5,
        detail: "truncated before dtype".to_string(),
    })?;
    if dtype > 1 {
        return Err(Error::Format {
            offset: 5,
            detail: format!("unknown dtype {dtype}"),
        });
    }
    let ndim = *bytes.get(6).ok_or(Error::Format {
        offset: 6,
        detail: "truncated before ndim".to_string(),
    })? as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut off = 7;
    for _ in 0..ndim {
        let end = off + 4;
        let chunk = bytes.get(off..end).ok_or(Error::Format {
            offset: off,
            detail: "truncated inside dims".to_string(),
        })?;
        dims.push(u32::from_le_bytes(chunk.try_into().unwrap()) as usize);
        off = end;
    }
    let n: usize = dims.iter().product();
    let width = if dtype == 0 { 4 } else { 8 };
    let need = n * width;
    let payload = bytes.get(off..off + need).ok_or(Error::Format {
        offset: bytes.len(),
        detail: format!("payload truncated, expected {need} bytes from offset {off}"),
    })?;
    if bytes.len() != off + need {
        return Err(Error::Format {
            offset: off + need,
            detail: "trailing bytes after payload".to_string(),
        });
    }
    let mut data = Vec::with_capacity(n);
    if dtype == 0 {
        for c in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
    } else {
        for c in payload.chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
    }
    Tensor::from_vec(&dims, data)
}
