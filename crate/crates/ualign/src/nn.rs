//! Shared neural-net building blocks used by the adapter and the decoder:
//! LayerNorm with a variance floor, tanh-form GELU, affine maps, softmax.
//! Plain loops over row-major slices; exact reverse-mode throughout.

use crate::numerics::Matrix;

/// Variance floor inside LayerNorm; prevents NaN on constant rows. Applied
/// as `max(var, floor)` so non-degenerate rows normalize to unit variance
/// exactly.
pub(crate) const LN_VAR_FLOOR: f64 = 1e-5;

pub(crate) struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_denom: Vec<f64>,
    pub floored: Vec<bool>,
}

/// Per-row LayerNorm: `y = xhat * gain + bias` with
/// `xhat = (x - mean) / sqrt(max(var, floor))`.
pub(crate) fn layer_norm_forward(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
) -> (Matrix, LayerNormCache) {
    let (rows, cols) = (x.rows(), x.cols());
    debug_assert_eq!(gain.len(), cols);
    debug_assert_eq!(bias.len(), cols);
    let mut y = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_denom = vec![0.0; rows];
    let mut floored = vec![false; rows];
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let flo = var <= LN_VAR_FLOOR;
        let denom = var.max(LN_VAR_FLOOR).sqrt();
        let inv = 1.0 / denom;
        inv_denom[i] = inv;
        floored[i] = flo;
        let xh = xhat.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            xh[j] = (v - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..cols {
            yr[j] = xhat.get(i, j) * gain[j] + bias[j];
        }
    }
    (
        y,
        LayerNormCache {
            xhat,
            inv_denom,
            floored,
        },
    )
}

/// Reverse-mode LayerNorm. Returns the gradient with respect to `x`;
/// accumulates into `dgain`/`dbias` when provided (frozen uses pass `None`).
pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    gain: &[f64],
    cache: &LayerNormCache,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
) -> Matrix {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..cols {
                dg[j] += dyr[j] * xh[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..cols {
                db[j] += dyr[j];
            }
        }
        let dxhat: Vec<f64> = (0..cols).map(|j| dyr[j] * gain[j]).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
        let inv = cache.inv_denom[i];
        let dxr = dx.row_mut(i);
        if cache.floored[i] {
            // Denominator is a constant below the floor.
            for j in 0..cols {
                dxr[j] = inv * (dxhat[j] - mean_dxhat);
            }
        } else {
            let mean_dxhat_xhat =
                dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
            for j in 0..cols {
                dxr[j] = inv * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            }
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh form: `0.5 x (1 + tanh(c (x + a x^3)))`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `y = x W' + b` with `w` stored row-major as `[out][in]`.
pub(crate) fn linear_forward(x: &Matrix, w: &[f64], b: Option<&[f64]>, out_dim: usize) -> Matrix {
    let (rows, in_dim) = (x.rows(), x.cols());
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = Matrix::zeros(rows, out_dim);
    for i in 0..rows {
        let xr = x.row(i);
        let yr = y.row_mut(i);
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = match b {
                Some(bias) => bias[o],
                None => 0.0,
            };
            for (xv, wv) in xr.iter().zip(wr) {
                acc += xv * wv;
            }
            yr[o] = acc;
        }
    }
    y
}

/// `dx = dy W` for `w` stored `[out][in]`.
pub(crate) fn linear_backward_input(dy: &Matrix, w: &[f64], in_dim: usize) -> Matrix {
    let (rows, out_dim) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(rows, in_dim);
    for i in 0..rows {
        let dyr = dy.row(i);
        let dxr = dx.row_mut(i);
        for o in 0..out_dim {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            for (dxv, wv) in dxr.iter_mut().zip(wr) {
                *dxv += g * wv;
            }
        }
    }
    dx
}

/// Accumulate `dw += dy' x` and `db += sum_rows dy`.
pub(crate) fn linear_backward_params(
    dy: &Matrix,
    x: &Matrix,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    let (rows, out_dim) = (dy.rows(), dy.cols());
    let in_dim = x.cols();
    debug_assert_eq!(dw.len(), out_dim * in_dim);
    for i in 0..rows {
        let dyr = dy.row(i);
        let xr = x.row(i);
        for o in 0..out_dim {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            let wr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for (wv, xv) in wr.iter_mut().zip(xr) {
                *wv += g * xv;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..rows {
            for (o, g) in dy.row(i).iter().enumerate() {
                db[o] += g;
            }
        }
    }
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(x: &Matrix) -> Matrix {
    let (rows, cols) = (x.rows(), x.cols());
    let mut y = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let yr = y.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            yr[j] = v - lse;
        }
    }
    y
}

/// Sinusoidal position table, `s x d` with `d` even.
pub(crate) fn sinusoidal_positions(s: usize, d: usize) -> Matrix {
    debug_assert!(d % 2 == 0);
    let mut pe = Matrix::zeros(s, d);
    for pos in 0..s {
        let row = pe.row_mut(pos);
        for k in 0..d / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * k as f64 / d as f64);
            let angle = pos as f64 * freq;
            row[2 * k] = angle.sin();
            row[2 * k + 1] = angle.cos();
        }
    }
    pe
}
