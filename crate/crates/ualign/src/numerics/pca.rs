//! Deterministic 2D principal-component projection.
//!
//! Power iteration with a fixed iteration count and a fixed seeded start
//! vector, so the projection is reproducible bit-for-bit. Sign convention:
//! the first nonzero loading of each component is positive.

use super::matrix::Matrix;
use super::rng::Rng;
use crate::error::{Error, Result};

const POWER_ITERATIONS: usize = 100;
const INIT_SEED: u64 = 0x5CA1_AB1E;
const SIGN_TOL: f64 = 1e-12;
const DEGENERATE_NORM: f64 = 1e-30;

/// Projection plus the fitted components and their captured variances.
#[derive(Clone, Debug)]
pub struct PcaResult {
    /// N x 2 coordinates of the mean-centered points on the components.
    pub projection: Matrix,
    /// Unit-length principal directions (zero vectors when degenerate).
    pub components: [Vec<f64>; 2],
    /// Variance captured by each component (`v' C v` with `C = X'X/N`).
    pub variances: [f64; 2],
}

/// Mean-centered projection onto the top-2 principal directions.
pub fn pca_project(points: &Matrix) -> Result<Matrix> {
    Ok(pca_fit_project(points)?.projection)
}

pub fn pca_fit_project(points: &Matrix) -> Result<PcaResult> {
    let n = points.rows();
    let d = points.cols();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "pca_project requires at least 2 points, got {n}"
        )));
    }

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &x) in mean.iter_mut().zip(points.row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = Matrix::zeros(n, d);
    for i in 0..n {
        let row = centered.row_mut(i);
        for (j, &x) in points.row(i).iter().enumerate() {
            row[j] = x - mean[j];
        }
    }

    // Covariance C = X'X / N (population convention).
    let mut cov = Matrix::zeros(d, d);
    for i in 0..n {
        let row = centered.row(i);
        for a in 0..d {
            let ra = row[a];
            let cov_row = cov.row_mut(a);
            for b in 0..d {
                cov_row[b] += ra * row[b];
            }
        }
    }
    for v in cov.data_mut() {
        *v /= n as f64;
    }

    let trace: f64 = (0..d).map(|k| cov.get(k, k)).sum();
    let mut components: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];

    if trace > DEGENERATE_NORM {
        let mut rng = Rng::new(INIT_SEED).split("pca-init");
        for comp in 0..2 {
            let mut v: Vec<f64> = (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect();
            orthogonalize(&mut v, &components[..comp]);
            if !normalize(&mut v) {
                continue;
            }
            let mut dead = false;
            for _ in 0..POWER_ITERATIONS {
                let mut w = mat_vec(&cov, &v);
                orthogonalize(&mut w, &components[..comp]);
                if !normalize(&mut w) {
                    dead = true;
                    break;
                }
                v = w;
            }
            if dead {
                continue;
            }
            if let Some(j) = v.iter().position(|x| x.abs() > SIGN_TOL) {
                if v[j] < 0.0 {
                    for x in &mut v {
                        *x = -*x;
                    }
                }
            }
            let cv = mat_vec(&cov, &v);
            variances[comp] = super::dot(&v, &cv);
            components[comp] = v;
        }
    }

    let mut projection = Matrix::zeros(n, 2);
    for i in 0..n {
        let row = centered.row(i);
        let x = super::dot(row, &components[0]);
        let y = super::dot(row, &components[1]);
        projection.set(i, 0, x);
        projection.set(i, 1, y);
    }
    debug_assert!(projection.all_finite());
    Ok(PcaResult {
        projection,
        components,
        variances,
    })
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| super::dot(m.row(i), v)).collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        if b.iter().all(|&x| x == 0.0) {
            continue;
        }
        let p = super::dot(v, b);
        for (x, &bb) in v.iter_mut().zip(b) {
            *x -= p * bb;
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = super::norm(v);
    if n < DEGENERATE_NORM {
        for x in v.iter_mut() {
            *x = 0.0;
        }
        return false;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    true
}
