//! Slice-level numeric kernels shared by the tape and by tape-free callers.

use super::COSINE_EPS;

/// `a[m×k] · b[k×n]`. Zero entries of `a` are skipped, so masked attention
/// weights contribute nothing (not even a signed zero) to the product.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`, accumulated into `out[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`, accumulated into `out[m×n]`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `a[m×k] · b[k×n]`, accumulated into `out[m×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with four independent partial sums, combined in a fixed
/// order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity plus the two norms it was computed from.
pub fn cosine(u: &[f64], v: &[f64]) -> (f64, f64, f64) {
    let nu = norm(u);
    let nv = norm(v);
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return (0.0, nu, nv);
    }
    let c = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    (c, nu, nv)
}

/// Accumulates `g · ∂cos(u,v)/∂u` into `du` and `g · ∂cos(u,v)/∂v` into `dv`.
pub fn cosine_backward(u: &[f64], v: &[f64], g: f64, du: Option<&mut [f64]>, dv: Option<&mut [f64]>) {
    let nu = norm(u);
    let nv = norm(v);
    if nu < COSINE_EPS || nv < COSINE_EPS {
        return;
    }
    let c = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    if let Some(du) = du {
        for ((d, &ui), &vi) in du.iter_mut().zip(u).zip(v) {
            *d += g * (vi * inv - c * ui / (nu * nu));
        }
    }
    if let Some(dv) = dv {
        for ((d, &ui), &vi) in dv.iter_mut().zip(u).zip(v) {
            *d += g * (ui * inv - c * vi / (nv * nv));
        }
    }
}

/// Max-subtracted softmax of one row, considering only the first `live`
/// entries; the rest are set to exactly zero.
pub fn softmax_prefix(row: &[f64], live: usize, out: &mut [f64]) {
    let max = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out[..live].iter_mut().zip(&row[..live]) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in &mut out[..live] {
        *o /= sum;
    }
    out[live..].fill(0.0);
}

/// Log-sum-exp of a row, computed with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-softmax of a row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
