//! Slice-level compute kernels shared by the autodiff graph and the
//! tape-free incremental decoder.

use crate::numeric::Scalar;
use crate::parallel;

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out += alpha * x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], out: &mut [F]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `a[n,k] · b[k,m]`
pub fn matmul_nn<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    parallel::for_each_row(&mut out, m, k * m, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av != F::zero() {
                axpy(av, &b[p * m..(p + 1) * m], row);
            }
        }
    });
    out
}

/// `a[n,k] · b[m,k]ᵀ`
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * m];
    parallel::for_each_row(&mut out, m, k * m, |i, row| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a[n,k]ᵀ · c[n,m]`, giving `[k,m]`.
pub fn matmul_tn<F: Scalar>(a: &[F], c: &[F], n: usize, k: usize, m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * m];
    parallel::for_each_row(&mut out, m, n * m, |p, row| {
        for i in 0..n {
            let av = a[i * k + p];
            if av != F::zero() {
                axpy(av, &c[i * m..(i + 1) * m], row);
            }
        }
    });
    out
}

/// Adds `bias` to every row of `x` in place.
pub fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of a `[n, m]` matrix.
pub fn column_sums<F: Scalar>(x: &[F], m: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m];
    for row in x.chunks(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::of(0.5);
    half * x * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf())
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`
#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let cdf = F::of(0.5) * (F::one() + (x * F::of(FRAC_1_SQRT_2)).erf());
    let pdf = F::of(INV_SQRT_2PI) * (-(x * x) * F::of(0.5)).exp();
    cdf + x * pdf
}

/// In-place softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place log-softmax of one row.
pub fn log_softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Row-wise layer normalization. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<F: Scalar>(
    x: &[F],
    gain: &[F],
    bias: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gain.len();
    let n = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); n];
    let eps = F::of(LAYER_NORM_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let is = F::one() / (var + eps).sqrt();
        inv_std[i] = is;
        let xh = &mut xhat[i * d..(i + 1) * d];
        let yr = &mut y[i * d..(i + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
            yr[j] = xh[j] * gain[j] + bias[j];
        }
    }
    (y, xhat, inv_std)
}

/// Gradients of layer normalization. Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    gain: &[F],
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let d = gain.len();
    let n = inv_std.len();
    let mut dx = vec![F::zero(); dy.len()];
    let mut dgain = vec![F::zero(); d];
    let mut dbias = vec![F::zero(); d];
    let inv_d = F::one() / F::of(d as f64);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dxr[j] = inv_std[i] * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Geometry and masking of one multi-head attention call.
///
/// Queries are `[batch * q_len, d]`, keys and values `[batch * k_len, d]`.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; padded keys are never attended.
    pub key_valid: Vec<bool>,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

/// Scaled dot-product attention. Returns `(output, probs)` where probs is
/// `[batch, heads, q_len, k_len]`.
pub fn attention_forward<F: Scalar>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<F>, Vec<F>) {
    let AttentionLayout {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let work = heads * q_len * k_len * dh;
    let per_batch = parallel::map_range(batch, |b| {
        let mut out = vec![F::zero(); q_len * d];
        let mut probs = vec![F::zero(); heads * q_len * k_len];
        if work == 0 {
            return (out, probs);
        }
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..q_len {
                let qi = &q[(b * q_len + i) * d..][hs.clone()];
                let p = &mut probs[(h * q_len + i) * k_len..(h * q_len + i + 1) * k_len];
                let mut max = F::neg_infinity();
                for j in 0..k_len {
                    if layout.allowed(b, i, j) {
                        let kj = &k[(b * k_len + j) * d..][hs.clone()];
                        p[j] = dot(qi, kj) * scale;
                        max = max.max(p[j]);
                    }
                }
                if max == F::neg_infinity() {
                    continue;
                }
                let mut sum = F::zero();
                for j in 0..k_len {
                    if layout.allowed(b, i, j) {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    } else {
                        p[j] = F::zero();
                    }
                }
                let o = &mut out[i * d..][hs.clone()];
                for j in 0..k_len {
                    if p[j] != F::zero() {
                        p[j] /= sum;
                        axpy(p[j], &v[(b * k_len + j) * d..][hs.clone()], o);
                    }
                }
            }
        }
        (out, probs)
    });
    let mut out = Vec::with_capacity(batch * q_len * d);
    let mut probs = Vec::with_capacity(batch * heads * q_len * k_len);
    for (o, p) in per_batch {
        out.extend(o);
        probs.extend(p);
    }
    (out, probs)
}

/// Gradients of [`attention_forward`]. Returns `(dq, dk, dv)`.
pub fn attention_backward<F: Scalar>(
    dout: &[F],
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    d: usize,
    layout: &AttentionLayout,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let AttentionLayout {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *layout;
    let dh = d / heads;
    let scale = F::one() / F::of(dh as f64).sqrt();
    let per_batch = parallel::map_range(batch, |b| {
        let mut dq = vec![F::zero(); q_len * d];
        let mut dk = vec![F::zero(); k_len * d];
        let mut dv = vec![F::zero(); k_len * d];
        let mut dp = vec![F::zero(); k_len];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            for i in 0..q_len {
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let doi = &dout[(b * q_len + i) * d..][hs.clone()];
                let mut weighted = F::zero();
                for j in 0..k_len {
                    if p[j] != F::zero() {
                        let vj = &v[(b * k_len + j) * d..][hs.clone()];
                        dp[j] = dot(doi, vj);
                        weighted += p[j] * dp[j];
                        axpy(p[j], doi, &mut dv[j * d..][hs.clone()]);
                    }
                }
                let qi = &q[(b * q_len + i) * d..][hs.clone()];
                for j in 0..k_len {
                    if p[j] != F::zero() {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        let kj = &k[(b * k_len + j) * d..][hs.clone()];
                        axpy(ds, kj, &mut dq[i * d..][hs.clone()]);
                        axpy(ds, qi, &mut dk[j * d..][hs.clone()]);
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(batch * q_len * d);
    let mut dk = Vec::with_capacity(batch * k_len * d);
    let mut dv = Vec::with_capacity(batch * k_len * d);
    for (a, b, c) in per_batch {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (n, k, m) = (5, 11, 7);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let expect = naive_matmul(&a, &b, n, k, m);
        let nn = matmul_nn(&a, &b, n, k, m);
        let nt = matmul_nt(&a, &transpose(&b, k, m), n, k, m);
        let tn = matmul_tn(&transpose(&a, n, k), &b, k, n, m);
        for i in 0..n * m {
            assert!((nn[i] - expect[i]).abs() < 1e-12);
            assert!((nt[i] - expect[i]).abs() < 1e-12);
            assert!((tn[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-6);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut row = vec![3.5f64; 8];
        softmax_in_place(&mut row);
        for v in row {
            assert!((v - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 1.7).sin() * 5.0 + 2.0).collect();
        let g = vec![1.0; 8];
        let b = vec![0.0; 8];
        let (_, xhat, _) = layer_norm_forward(&x, &g, &b);
        for row in xhat.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let d = 4;
        let layout = AttentionLayout {
            batch: 1,
            q_len: 3,
            k_len: 3,
            heads: 2,
            causal: true,
            key_valid: vec![true; 3],
        };
        let q: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let k = q.clone();
        let mut v: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let (out1, _) = attention_forward(&q, &k, &v, d, &layout);
        for x in &mut v[8..] {
            *x += 10.0;
        }
        let (out2, _) = attention_forward(&q, &k, &v, d, &layout);
        assert_eq!(&out1[..8], &out2[..8]);
        assert_ne!(&out1[8..], &out2[8..]);
    }
}
