//! Dense row-major kernels.
//!
//! Every output row is computed from its own input row with a fixed
//! summation order, so results for one sequence never depend on what else
//! shares the batch.

use super::scalar::Scalar;

/// `out = a (m x k) * b (k x n)`.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(F::zero());
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a * b + bias` (bias broadcast over rows).
pub fn linear<F: Scalar>(
    x: &[F],
    w: &[F],
    bias: &[F],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); rows * d_out];
    matmul(x, w, rows, d_in, d_out, &mut out);
    for row in out.chunks_exact_mut(d_out) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// `out += a^T (m x k)^T * b (m x n)`, i.e. weight gradients.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let bi = &b[i * n..(i + 1) * n];
        for (p, &av) in ai.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(bi) {
                *o += av * bv;
            }
        }
    }
}

pub fn transpose<F: Scalar>(w: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = w[r * cols + c];
        }
    }
    t
}

/// Backward of [`linear`]: accumulates weight and bias gradients and
/// returns the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    matmul_tn_acc(x, dy, rows, d_in, d_out, dw);
    for row in dy.chunks_exact(d_out) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    let wt = transpose(w, d_in, d_out);
    let mut dx = vec![F::zero(); rows * d_in];
    matmul(dy, &wt, rows, d_out, d_in, &mut dx);
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Scalar>(x: &[F], g: &[F], b: &[F], d: usize) -> (Vec<F>, LnCache<F>) {
    let rows = x.len() / d;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    g: &[F],
    cache: &LnCache<F>,
    d: usize,
    dg: &mut [F],
    db: &mut [F],
) -> Vec<F> {
    let rows = dy.len() / d;
    let mut dx = vec![F::zero(); dy.len()];
    let inv_d = F::of(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxh = F::zero();
        let mut sum_dxh_xh = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let rs = cache.rstd[r];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] = rs * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut out = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut out);
        assert_eq!(out, [4.0, 5.0, 10.0, 11.0]);
        let mut acc = [0.0; 6];
        matmul_tn_acc(&a, &out, 2, 3, 2, &mut acc);
        // a^T * out
        assert_eq!(acc, [44.0, 49.0, 58.0, 65.0, 72.0, 81.0]);
        assert_eq!(transpose(&a, 2, 3), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn rows_are_batch_independent() {
        let w: Vec<f32> = (0..32 * 24).map(|i| ((i * 37 % 101) as f32 - 50.0) / 77.0).collect();
        let x: Vec<f32> = (0..7 * 32).map(|i| ((i * 13 % 59) as f32 - 29.0) / 31.0).collect();
        let b = vec![0.25f32; 24];
        let full = linear(&x, &w, &b, 7, 32, 24);
        for r in 0..7 {
            let single = linear(&x[r * 32..(r + 1) * 32], &w, &b, 1, 32, 24);
            assert_eq!(&full[r * 24..(r + 1) * 24], single.as_slice());
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
