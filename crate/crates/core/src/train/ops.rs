//! Dense kernels shared by the forward and backward passes. Row-major
//! everywhere; `n` rows, `k` inner dimension, `m` output columns.

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Floating-point element type of a model evaluation.
pub trait Scalar:
    Float + Sum + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    fn c(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// `out = a · b` for `a: n×k`, `b: k×m`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(F::zero());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `out += aᵀ · g` for `a: n×k`, `g: n×m`, `out: k×m`.
pub fn matmul_at_acc<F: Scalar>(a: &[F], g: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let s = a[i * k + p];
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += s * gv;
            }
        }
    }
}

/// `out = g · bᵀ` for `g: n×m`, `b: k×m`, `out: n×k`.
pub fn matmul_bt<F: Scalar>(g: &[F], b: &[F], out: &mut [F], n: usize, m: usize, k: usize) {
    let bt = transpose(b, k, m);
    matmul(g, &bt, out, n, m, k);
}

pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

pub fn add_bias<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `out += Σ_rows g`.
pub fn col_sum_acc<F: Scalar>(g: &[F], out: &mut [F]) {
    for row in g.chunks_exact(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Saved statistics of one layer-norm application.
pub struct LayerNormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Scalar>(x: &[F], w: &[F], b: &[F], d: usize) -> (Vec<F>, LayerNormCache<F>) {
    let n = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::c(1.0 / d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let r = F::one() / (var + F::c(LN_EPS)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            y[i * d + j] = h * w[j] + b[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Accumulates `dw`, `db` and returns `dx`.
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    cache: &LayerNormCache<F>,
    w: &[F],
    dw: &mut [F],
    db: &mut [F],
    d: usize,
) -> Vec<F> {
    let n = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::c(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            dw[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * w[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let u = F::c(GELU_K) * (x + F::c(GELU_C) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let u = F::c(GELU_K) * (x + F::c(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = F::c(GELU_K) * (F::one() + F::c(3.0 * GELU_C) * x * x);
    F::c(0.5) * (F::one() + t) + F::c(0.5) * x * (F::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut o = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    o[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        o
    }

    #[test]
    fn matmul_variants_agree_with_triple_loop() {
        let (n, k, m) = (3, 4, 5);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut out = vec![0.0; n * m];
        matmul(&a, &b, &mut out, n, k, m);
        let expect = naive(&a, &b, n, k, m);
        assert!(out.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        // aᵀ·g with g = out: compare to naive(transpose(a), out).
        let mut at_g = vec![0.0; k * m];
        matmul_at_acc(&a, &out, &mut at_g, n, k, m);
        let expect = naive(&transpose(&a, n, k), &out, k, n, m);
        assert!(at_g.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));

        // g·bᵀ with g = out (n×m), b (k×m).
        let mut g_bt = vec![0.0; n * k];
        matmul_bt(&out, &b, &mut g_bt, n, m, k);
        let expect = naive(&out, &transpose(&b, k, m), n, m, k);
        assert!(g_bt.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 8.0f64];
        let (y, _) = layer_norm(&x, &[1.0; 4], &[0.0; 4], 4);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
