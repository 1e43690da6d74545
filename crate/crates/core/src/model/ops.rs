//! Dense row-major kernels and their backward passes.

use super::real::Real;

/// `a [m,k] · b [k,n]`.
pub(crate) fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == R::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    out
}

/// `out += aᵀ · b` with `a [r,m]`, `b [r,n]`, `out [m,n]`.
pub(crate) fn add_matmul_tn<R: Real>(out: &mut [R], a: &[R], b: &[R], r: usize, m: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for p in 0..r {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let s = a[p * m + i];
            if s == R::ZERO {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// `a [m,k] · bᵀ` with `b [n,k]`.
pub(crate) fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `y = x W + b` for `x [rows,in]`, `W [in,out]`.
pub(crate) fn linear<R: Real>(x: &[R], w: &[R], b: &[R], rows: usize, d_in: usize, d_out: usize) -> Vec<R> {
    let mut y = matmul(x, w, rows, d_in, d_out);
    for row in y.chunks_exact_mut(d_out) {
        for (v, &bb) in row.iter_mut().zip(b) {
            *v += bb;
        }
    }
    y
}

/// Accumulates `dW`, `db` and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<R: Real>(
    x: &[R],
    dy: &[R],
    w: &[R],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dw: &mut [R],
    db: &mut [R],
) -> Vec<R> {
    add_matmul_tn(dw, x, dy, rows, d_in, d_out);
    for row in dy.chunks_exact(d_out) {
        for (g, &d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
    matmul_nt(dy, w, rows, d_out, d_in)
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache<R> {
    xhat: Vec<R>,
    rstd: Vec<R>,
}

pub(crate) fn layer_norm<R: Real>(x: &[R], gain: &[R], bias: &[R], d: usize) -> (Vec<R>, NormCache<R>) {
    let rows = x.len() / d;
    let mut y = vec![R::ZERO; x.len()];
    let mut xhat = vec![R::ZERO; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = R::from_f64(1.0 / d as f64);
    let eps = R::from_f64(LN_EPS);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<R>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_d;
        let rs = R::ONE / (var + eps).sqrt();
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            y[r * d + c] = h * gain[c] + bias[c];
        }
        rstd.push(rs);
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward<R: Real>(
    cache: &NormCache<R>,
    dy: &[R],
    gain: &[R],
    d: usize,
    dgain: &mut [R],
    dbias: &mut [R],
) -> Vec<R> {
    let rows = dy.len() / d;
    let mut dx = vec![R::ZERO; dy.len()];
    let inv_d = R::from_f64(1.0 / d as f64);
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_g = R::ZERO;
        let mut sum_gx = R::ZERO;
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            let g = dyr[c] * gain[c];
            sum_g += g;
            sum_gx += g * xh[c];
        }
        let rs = cache.rstd[r];
        for c in 0..d {
            let g = dyr[c] * gain[c];
            dx[r * d + c] = rs * (g - inv_d * sum_g - xh[c] * inv_d * sum_gx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    half * x * (R::ONE + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (R::ONE + t) + half * x * (R::ONE - t * t) * c * (R::ONE + R::from_f64(3.0) * a * x * x)
}

/// In-place softmax over `row`; entries at `-inf` come out as zero.
pub(crate) fn softmax_in_place<R: Real>(row: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = if v.is_finite() { (*v - max).exp() } else { R::ZERO };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
