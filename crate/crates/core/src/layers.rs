//! Parameterized building blocks: linear, layer norm, multi-head attention,
//! and the GELU feed-forward, each with a cached forward and a hand-written
//! backward. Gradients accumulate into a mirror parameter struct.
//!
//! Backward passes follow the forward accumulation orders exactly, so a
//! training step is bit-reproducible.

use crate::error::{Error, Result};
use crate::rngutil::DetRng;
use crate::tensor::{self, AdditiveMask, Tensor};

pub const LN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `y = x Wᵀ + b` with `w: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(out: usize, inn: usize) -> Linear {
        Linear {
            w: Tensor::zeros(&[out, inn]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn init(out: usize, inn: usize, rng: &mut DetRng) -> Linear {
        let scale = 1.0 / (inn as f64).sqrt();
        let w = Tensor::from_vec(
            &[out, inn],
            (0..out * inn).map(|_| rng.normal() * scale).collect(),
        )
        .expect("shape");
        Linear {
            w,
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }
}

pub struct LinearCache {
    x: Tensor,
}

pub fn linear_fwd(p: &Linear, x: &Tensor) -> Result<(Tensor, LinearCache)> {
    let (out, inn) = (p.out_dim(), p.in_dim());
    if x.dims().len() != 2 || x.dims()[1] != inn {
        return Err(Error::Shape(format!(
            "linear expects [rows, {inn}], got {:?}",
            x.dims()
        )));
    }
    let rows = x.dims()[0];
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = x.row(r);
        let yr = &mut y[r * out..(r + 1) * out];
        for o in 0..out {
            let wrow = p.w.row(o);
            let mut acc = p.b.data()[o];
            for i in 0..inn {
                acc += wrow[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    Ok((
        Tensor::from_vec(&[rows, out], y).expect("shape"),
        LinearCache { x: x.clone() },
    ))
}

/// Returns `dx`; accumulates `dw`, `db` into `grad`.
pub fn linear_bwd(p: &Linear, cache: &LinearCache, dy: &Tensor, grad: &mut Linear) -> Tensor {
    let (out, inn) = (p.out_dim(), p.in_dim());
    let rows = cache.x.dims()[0];
    let mut dx = vec![0.0; rows * inn];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xr = cache.x.row(r);
        let dxr = &mut dx[r * inn..(r + 1) * inn];
        for o in 0..out {
            let g = dyr[o];
            grad.b.data_mut()[o] += g;
            let wrow = p.w.row(o);
            let gwrow = grad.w.row_mut(o);
            for i in 0..inn {
                gwrow[i] += g * xr[i];
                dxr[i] += g * wrow[i];
            }
        }
    }
    Tensor::from_vec(&[rows, inn], dx).expect("shape")
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl Norm {
    pub fn init(c: usize) -> Norm {
        Norm {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }
}

pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

pub fn norm_fwd(p: &Norm, x: &Tensor) -> Result<(Tensor, NormCache)> {
    let c = p.gamma.dims()[0];
    if x.dims().len() != 2 || x.dims()[1] != c {
        return Err(Error::Shape(format!(
            "norm expects [rows, {c}], got {:?}",
            x.dims()
        )));
    }
    let rows = x.dims()[0];
    let mut out = vec![0.0; rows * c];
    let mut xhat = vec![0.0; rows * c];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = x.row(r);
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
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = s;
        for j in 0..c {
            let xh = (xr[j] - mean) * s;
            xhat[r * c + j] = xh;
            out[r * c + j] = p.gamma.data()[j] * xh + p.beta.data()[j];
        }
    }
    Ok((
        Tensor::from_vec(&[rows, c], out).expect("shape"),
        NormCache {
            xhat: Tensor::from_vec(&[rows, c], xhat).expect("shape"),
            inv_std,
        },
    ))
}

pub fn norm_bwd(p: &Norm, cache: &NormCache, dy: &Tensor, grad: &mut Norm) -> Tensor {
    let c = p.gamma.dims()[0];
    let rows = cache.xhat.dims()[0];
    let mut dx = vec![0.0; rows * c];
    for r in 0..rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut dxhat = vec![0.0; c];
        for j in 0..c {
            grad.beta.data_mut()[j] += dyr[j];
            grad.gamma.data_mut()[j] += dyr[j] * xh[j];
            let d = dyr[j] * p.gamma.data()[j];
            dxhat[j] = d;
            sum_dxhat += d;
            sum_dxhat_xhat += d * xh[j];
        }
        let s = cache.inv_std[r];
        let n = c as f64;
        for j in 0..c {
            dx[r * c + j] = s * (dxhat[j] - sum_dxhat / n - xh[j] * sum_dxhat_xhat / n);
        }
    }
    Tensor::from_vec(&[rows, c], dx).expect("shape")
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn init(c: usize, heads: usize, rng: &mut DetRng) -> Attention {
        Attention {
            wq: Linear::init(c, c, rng),
            wk: Linear::init(c, c, rng),
            wv: Linear::init(c, c, rng),
            wo: Linear::init(c, c, rng),
            heads,
        }
    }

    /// Zero the output projection; the sub-layer then contributes nothing to
    /// its residual stream.
    pub fn zero_output(&mut self) {
        self.wo.w.data_mut().fill(0.0);
        self.wo.b.data_mut().fill(0.0);
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.wq.for_each(f);
        self.wk.for_each(f);
        self.wv.for_each(f);
        self.wo.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.wq.for_each_mut(f);
        self.wk.for_each_mut(f);
        self.wv.for_each_mut(f);
        self.wo.for_each_mut(f);
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.for_each_named(&format!("{prefix}.wq"), f);
        self.wk.for_each_named(&format!("{prefix}.wk"), f);
        self.wv.for_each_named(&format!("{prefix}.wv"), f);
        self.wo.for_each_named(&format!("{prefix}.wo"), f);
    }
}

pub struct AttentionCache {
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per-head softmax weight matrices (zeros at blocked keys).
    weights: Vec<Tensor>,
    o_cache: LinearCache,
}

fn head_slice(t: &Tensor, head: usize, d: usize) -> Tensor {
    let rows = t.dims()[0];
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let src = &t.row(r)[head * d..(head + 1) * d];
        out[r * d..(r + 1) * d].copy_from_slice(src);
    }
    Tensor::from_vec(&[rows, d], out).expect("shape")
}

fn head_scatter_add(dst: &mut Tensor, head: usize, d: usize, part: &Tensor) {
    let rows = dst.dims()[0];
    let c = dst.dims()[1];
    for r in 0..rows {
        for j in 0..d {
            dst.data_mut()[r * c + head * d + j] += part.at2(r, j);
        }
    }
}

/// Multi-head attention with an optional additive mask shared by all heads.
pub fn attention_fwd(
    p: &Attention,
    q_in: &Tensor,
    k_in: &Tensor,
    v_in: &Tensor,
    mask: Option<&AdditiveMask>,
) -> Result<(Tensor, AttentionCache)> {
    let c = p.wq.out_dim();
    if p.heads == 0 || c % p.heads != 0 {
        return Err(Error::Config(format!(
            "head count {} must divide channel width {c}",
            p.heads
        )));
    }
    let d = c / p.heads;
    let (q, q_cache) = linear_fwd(&p.wq, q_in)?;
    let (k, k_cache) = linear_fwd(&p.wk, k_in)?;
    let (v, v_cache) = linear_fwd(&p.wv, v_in)?;
    let nq = q.dims()[0];
    let mut ctx = Tensor::zeros(&[nq, c]);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = head_slice(&q, h, d);
        let kh = head_slice(&k, h, d);
        let vh = head_slice(&v, h, d);
        let (out_h, w_h) = tensor::attention_full(&qh, &kh, &vh, mask)?;
        head_scatter_add(&mut ctx, h, d, &out_h);
        weights.push(w_h);
    }
    let (out, o_cache) = linear_fwd(&p.wo, &ctx)?;
    Ok((
        out,
        AttentionCache {
            q_cache,
            k_cache,
            v_cache,
            q,
            k,
            v,
            weights,
            o_cache,
        },
    ))
}

/// Returns `(dq_in, dk_in, dv_in)`. When the same tensor fed several inputs
/// (self-attention), the caller sums the returned gradients.
pub fn attention_bwd(
    p: &Attention,
    cache: &AttentionCache,
    dout: &Tensor,
    grad: &mut Attention,
) -> (Tensor, Tensor, Tensor) {
    let c = p.wq.out_dim();
    let d = c / p.heads;
    let dctx = linear_bwd(&p.wo, &cache.o_cache, dout, &mut grad.wo);
    let nq = cache.q.dims()[0];
    let nk = cache.k.dims()[0];
    let mut dq = Tensor::zeros(&[nq, c]);
    let mut dk = Tensor::zeros(&[nk, c]);
    let mut dv = Tensor::zeros(&[nk, c]);
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..p.heads {
        let w = &cache.weights[h];
        let kh = head_slice(&cache.k, h, d);
        let qh = head_slice(&cache.q, h, d);
        let vh = head_slice(&cache.v, h, d);
        let dctx_h = head_slice(&dctx, h, d);
        let mut dqh = Tensor::zeros(&[nq, d]);
        let mut dkh = Tensor::zeros(&[nk, d]);
        let mut dvh = Tensor::zeros(&[nk, d]);
        for i in 0..nq {
            // dW and softmax backward on row i.
            let wrow = w.row(i);
            let dctx_row = dctx_h.row(i);
            let mut dw = vec![0.0; nk];
            for j in 0..nk {
                if wrow[j] == 0.0 {
                    continue;
                }
                let vrow = vh.row(j);
                let mut acc = 0.0;
                for t in 0..d {
                    acc += dctx_row[t] * vrow[t];
                    dvh.data_mut()[j * d + t] += wrow[j] * dctx_row[t];
                }
                dw[j] = acc;
            }
            let mut dot = 0.0;
            for j in 0..nk {
                dot += dw[j] * wrow[j];
            }
            for j in 0..nk {
                if wrow[j] == 0.0 {
                    continue;
                }
                let dlogit = wrow[j] * (dw[j] - dot);
                let krow = kh.row(j);
                let qrow = qh.row(i);
                for t in 0..d {
                    dqh.data_mut()[i * d + t] += dlogit * krow[t] * scale;
                    dkh.data_mut()[j * d + t] += dlogit * qrow[t] * scale;
                }
            }
        }
        head_scatter_add(&mut dq, h, d, &dqh);
        head_scatter_add(&mut dk, h, d, &dkh);
        head_scatter_add(&mut dv, h, d, &dvh);
    }
    let dq_in = linear_bwd(&p.wq, &cache.q_cache, &dq, &mut grad.wq);
    let dk_in = linear_bwd(&p.wk, &cache.k_cache, &dk, &mut grad.wk);
    let dv_in = linear_bwd(&p.wv, &cache.v_cache, &dv, &mut grad.wv);
    (dq_in, dk_in, dv_in)
}

// ---------------------------------------------------------------------------
// Feed-forward (also used as the 2-layer mask-embedding MLP)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn init(inn: usize, hidden: usize, out: usize, rng: &mut DetRng) -> FeedForward {
        FeedForward {
            lin1: Linear::init(hidden, inn, rng),
            lin2: Linear::init(out, hidden, rng),
        }
    }

    pub fn zero_output(&mut self) {
        self.lin2.w.data_mut().fill(0.0);
        self.lin2.b.data_mut().fill(0.0);
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&Tensor)) {
        self.lin1.for_each(f);
        self.lin2.for_each(f);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.lin1.for_each_mut(f);
        self.lin2.for_each_mut(f);
    }

    pub fn for_each_named(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.lin1.for_each_named(&format!("{prefix}.lin1"), f);
        self.lin2.for_each_named(&format!("{prefix}.lin2"), f);
    }
}

pub struct FeedForwardCache {
    c1: LinearCache,
    h_pre: Tensor,
    c2: LinearCache,
}

pub fn ffn_fwd(p: &FeedForward, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
    let (h_pre, c1) = linear_fwd(&p.lin1, x)?;
    let h = Tensor::from_vec(
        h_pre.dims(),
        h_pre.data().iter().map(|&v| tensor::gelu(v)).collect(),
    )
    .expect("shape");
    let (y, c2) = linear_fwd(&p.lin2, &h)?;
    Ok((y, FeedForwardCache { c1, h_pre, c2 }))
}

pub fn ffn_bwd(
    p: &FeedForward,
    cache: &FeedForwardCache,
    dy: &Tensor,
    grad: &mut FeedForward,
) -> Tensor {
    let dh = linear_bwd(&p.lin2, &cache.c2, dy, &mut grad.lin2);
    let dh_pre = Tensor::from_vec(
        dh.dims(),
        dh.data()
            .iter()
            .zip(cache.h_pre.data())
            .map(|(&g, &x)| g * tensor::gelu_deriv(x))
            .collect(),
    )
    .expect("shape");
    linear_bwd(&p.lin1, &cache.c1, &dh_pre, &mut grad.lin1)
}

// ---------------------------------------------------------------------------
// Fixed sinusoidal positional grid
// ---------------------------------------------------------------------------

/// 2-D sinusoidal positional encoding, `(h*w) x c`, cells in (y, x) order.
/// The first half of the channels encodes y, the second half x; `c` must be
/// a multiple of 4.
pub fn positional_grid(c: usize, h: usize, w: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::Config(format!(
            "positional grid needs C divisible by 4, got {c}"
        )));
    }
    let half = c / 2;
    let pairs = half / 2;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let cell = y * w + x;
            for k in 0..pairs {
                let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                data[cell * c + 2 * k] = (y as f64 * freq).sin();
                data[cell * c + 2 * k + 1] = (y as f64 * freq).cos();
                data[cell * c + half + 2 * k] = (x as f64 * freq).sin();
                data[cell * c + half + 2 * k + 1] = (x as f64 * freq).cos();
            }
        }
    }
    Tensor::from_vec(&[h * w, c], data)
}

// ---------------------------------------------------------------------------
// Row concat / split helpers
// ---------------------------------------------------------------------------

pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let c = parts[0].dims()[1];
    let rows: usize = parts.iter().map(|t| t.dims()[0]).sum();
    let mut data = Vec::with_capacity(rows * c);
    for t in parts {
        debug_assert_eq!(t.dims()[1], c);
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[rows, c], data).expect("shape")
}

pub fn split_rows(t: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let c = t.dims()[1];
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        let data = t.data()[start * c..(start + s) * c].to_vec();
        out.push(Tensor::from_vec(&[s, c], data).expect("shape"));
        start += s;
    }
    debug_assert_eq!(start, t.dims()[0]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn rand_tensor(dims: &[usize], rng: &mut DetRng) -> Tensor {
        Tensor::from_vec(
            dims,
            (0..dims.iter().product()).map(|_| rng.normal()).collect(),
        )
        .unwrap()
    }

    /// Flatten an attention param set for FD probing.
    fn flat_attn(p: &Attention) -> Vec<f64> {
        let mut v = Vec::new();
        p.for_each(&mut |t| v.extend_from_slice(t.data()));
        v
    }

    fn unflat_attn(p: &Attention, flat: &[f64]) -> Attention {
        let mut out = p.clone();
        let mut pos = 0;
        out.for_each_mut(&mut |t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        });
        out
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = DetRng::new(1);
        let p = Linear::init(3, 4, &mut rng);
        let x = rand_tensor(&[2, 4], &mut rng);
        let readout = rand_tensor(&[2, 3], &mut rng);

        let mut flat: Vec<f64> = Vec::new();
        p.for_each(&mut |t| flat.extend_from_slice(t.data()));
        let fd = finite_diff_grad(
            |probe| {
                let mut q = p.clone();
                let mut pos = 0;
                q.for_each_mut(&mut |t| {
                    let n = t.numel();
                    t.data_mut().copy_from_slice(&probe[pos..pos + n]);
                    pos += n;
                });
                let (y, _) = linear_fwd(&q, &x)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            &flat,
            1e-6,
        )
        .unwrap();

        let (_, cache) = linear_fwd(&p, &x).unwrap();
        let mut grad = Linear::zeros(3, 4);
        let dx = linear_bwd(&p, &cache, &readout, &mut grad);
        let mut an: Vec<f64> = Vec::new();
        grad.for_each(&mut |t| an.extend_from_slice(t.data()));
        for (a, f) in an.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-6, "{a} vs {f}");
        }

        // Input gradient.
        let fd_x = finite_diff_grad(
            |probe| {
                let xp = Tensor::from_vec(&[2, 4], probe.to_vec())?;
                let (y, _) = linear_fwd(&p, &xp)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, f) in dx.data().iter().zip(&fd_x) {
            assert!((a - f).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_backward_matches_fd() {
        let mut rng = DetRng::new(2);
        let p = Norm::init(5);
        let x = rand_tensor(&[3, 5], &mut rng);
        let readout = rand_tensor(&[3, 5], &mut rng);

        let fd_x = finite_diff_grad(
            |probe| {
                let xp = Tensor::from_vec(&[3, 5], probe.to_vec())?;
                let (y, _) = norm_fwd(&p, &xp)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        let (_, cache) = norm_fwd(&p, &x).unwrap();
        let mut grad = Norm {
            gamma: Tensor::zeros(&[5]),
            beta: Tensor::zeros(&[5]),
        };
        let dx = norm_bwd(&p, &cache, &readout, &mut grad);
        for (a, f) in dx.data().iter().zip(&fd_x) {
            assert!((a - f).abs() < 1e-6, "{a} vs {f}");
        }

        // Gamma/beta gradients against FD.
        let mut flat = Vec::new();
        p.for_each(&mut |t| flat.extend_from_slice(t.data()));
        let fd_p = finite_diff_grad(
            |probe| {
                let q = Norm {
                    gamma: Tensor::from_vec(&[5], probe[..5].to_vec())?,
                    beta: Tensor::from_vec(&[5], probe[5..].to_vec())?,
                };
                let (y, _) = norm_fwd(&q, &x)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let mut an = Vec::new();
        grad.for_each(&mut |t| an.extend_from_slice(t.data()));
        for (a, f) in an.iter().zip(&fd_p) {
            assert!((a - f).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_backward_matches_fd() {
        for heads in [1usize, 2] {
            let mut rng = DetRng::new(3 + heads as u64);
            let c = 4;
            let p = Attention::init(c, heads, &mut rng);
            let q_in = rand_tensor(&[3, c], &mut rng);
            let k_in = rand_tensor(&[5, c], &mut rng);
            let v_in = rand_tensor(&[5, c], &mut rng);
            let mut mask = AdditiveMask::all_allowed(3, 5);
            mask.block(0, 1);
            mask.block(2, 4);
            let readout = rand_tensor(&[3, c], &mut rng);

            let flat = flat_attn(&p);
            let fd = finite_diff_grad(
                |probe| {
                    let q = unflat_attn(&p, probe);
                    let (y, _) = attention_fwd(&q, &q_in, &k_in, &v_in, Some(&mask))?;
                    Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
                },
                &flat,
                1e-6,
            )
            .unwrap();

            let (_, cache) = attention_fwd(&p, &q_in, &k_in, &v_in, Some(&mask)).unwrap();
            let mut grad = Attention {
                wq: Linear::zeros(c, c),
                wk: Linear::zeros(c, c),
                wv: Linear::zeros(c, c),
                wo: Linear::zeros(c, c),
                heads,
            };
            let (dq, dk, dv) = attention_bwd(&p, &cache, &readout, &mut grad);
            let an = flat_attn(&grad);
            for (a, f) in an.iter().zip(&fd) {
                assert!((a - f).abs() < 1e-5, "heads={heads}: {a} vs {f}");
            }

            // Input gradients.
            let fd_q = finite_diff_grad(
                |probe| {
                    let qp = Tensor::from_vec(&[3, c], probe.to_vec())?;
                    let (y, _) = attention_fwd(&p, &qp, &k_in, &v_in, Some(&mask))?;
                    Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
                },
                q_in.data(),
                1e-6,
            )
            .unwrap();
            for (a, f) in dq.data().iter().zip(&fd_q) {
                assert!((a - f).abs() < 1e-5);
            }
            let fd_k = finite_diff_grad(
                |probe| {
                    let kp = Tensor::from_vec(&[5, c], probe.to_vec())?;
                    let (y, _) = attention_fwd(&p, &q_in, &kp, &v_in, Some(&mask))?;
                    Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
                },
                k_in.data(),
                1e-6,
            )
            .unwrap();
            for (a, f) in dk.data().iter().zip(&fd_k) {
                assert!((a - f).abs() < 1e-5);
            }
            let fd_v = finite_diff_grad(
                |probe| {
                    let vp = Tensor::from_vec(&[5, c], probe.to_vec())?;
                    let (y, _) = attention_fwd(&p, &q_in, &k_in, &vp, Some(&mask))?;
                    Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
                },
                v_in.data(),
                1e-6,
            )
            .unwrap();
            for (a, f) in dv.data().iter().zip(&fd_v) {
                assert!((a - f).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ffn_backward_matches_fd() {
        let mut rng = DetRng::new(4);
        let p = FeedForward::init(4, 8, 4, &mut rng);
        let x = rand_tensor(&[3, 4], &mut rng);
        let readout = rand_tensor(&[3, 4], &mut rng);

        let mut flat = Vec::new();
        p.for_each(&mut |t| flat.extend_from_slice(t.data()));
        let fd = finite_diff_grad(
            |probe| {
                let mut q = p.clone();
                let mut pos = 0;
                q.for_each_mut(&mut |t| {
                    let n = t.numel();
                    t.data_mut().copy_from_slice(&probe[pos..pos + n]);
                    pos += n;
                });
                let (y, _) = ffn_fwd(&q, &x)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let (_, cache) = ffn_fwd(&p, &x).unwrap();
        let mut grad = FeedForward {
            lin1: Linear::zeros(8, 4),
            lin2: Linear::zeros(4, 8),
        };
        let dx = ffn_bwd(&p, &cache, &readout, &mut grad);
        let mut an = Vec::new();
        grad.for_each(&mut |t| an.extend_from_slice(t.data()));
        for (a, f) in an.iter().zip(&fd) {
            assert!((a - f).abs() < 1e-5, "{a} vs {f}");
        }
        let fd_x = finite_diff_grad(
            |probe| {
                let xp = Tensor::from_vec(&[3, 4], probe.to_vec())?;
                let (y, _) = ffn_fwd(&p, &xp)?;
                Ok(y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum())
            },
            x.data(),
            1e-6,
        )
        .unwrap();
        for (a, f) in dx.data().iter().zip(&fd_x) {
            assert!((a - f).abs() < 1e-5);
        }
    }

    #[test]
    fn positional_grid_shape_and_range() {
        let pe = positional_grid(8, 3, 5).unwrap();
        assert_eq!(pe.dims(), &[15, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert!(positional_grid(6, 2, 2).is_err());
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let cat = concat_rows(&[&a, &b]);
        let parts = split_rows(&cat, &[2, 1]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
