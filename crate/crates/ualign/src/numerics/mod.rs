//! Numeric substrate: dense matrices, similarity kernels, stable log-domain
//! arithmetic, edit distance, deterministic RNG, and 2D projection.

mod matrix;
mod pca;
mod rng;

pub use matrix::Matrix;
pub use pca::{pca_fit_project, pca_project, PcaResult};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Default norm floor used when dividing by vector norms.
pub const NORM_EPSILON: f64 = 1e-8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity with norms clamped below at `epsilon`.
pub fn cosine_similarity(h: &[f64], e: &[f64], epsilon: f64) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let nh = norm(h).max(epsilon);
    let ne = norm(e).max(epsilon);
    dot(h, e) / (nh * ne)
}

/// Cosine distance `1 - <h,e>/(|h||e|)` with clamped norms.
pub fn cosine_distance(h: &[f64], e: &[f64], epsilon: f64) -> f64 {
    1.0 - cosine_similarity(h, e, epsilon)
}

/// Pairwise cosine-distance matrix between the rows of `h` (I x d) and the
/// rows of `e` (J x d). Entries lie in `[0, 2]` up to rounding.
pub fn cosine_distance_matrix(h: &Matrix, e: &Matrix, epsilon: f64) -> Result<Matrix> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    if h.cols() != e.cols() {
        return Err(Error::ShapeMismatch {
            context: "cosine_distance_matrix".into(),
            expected: format!("{}x{} vs Jx{}", h.rows(), h.cols(), h.cols()),
            found: format!("{}x{}", e.rows(), e.cols()),
        });
    }
    let (i_len, j_len) = (h.rows(), e.rows());
    let h_norms: Vec<f64> = (0..i_len).map(|i| norm(h.row(i)).max(epsilon)).collect();
    let e_norms: Vec<f64> = (0..j_len).map(|j| norm(e.row(j)).max(epsilon)).collect();
    let mut c = Matrix::zeros(i_len, j_len);
    for i in 0..i_len {
        let hi = h.row(i);
        for j in 0..j_len {
            let v = 1.0 - dot(hi, e.row(j)) / (h_norms[i] * e_norms[j]);
            c.set(i, j, v);
        }
    }
    debug_assert!(c.all_finite());
    Ok(c)
}

/// Gradient of the cosine distance with respect to `h`:
/// `dC/dh = -( e/(|h||e|) - <h,e> h/(|h|^3 |e|) )` with clamped norms.
pub fn cosine_distance_grad(h: &[f64], e: &[f64], epsilon: f64) -> Vec<f64> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    debug_assert_eq!(h.len(), e.len());
    let nh = norm(h).max(epsilon);
    let ne = norm(e).max(epsilon);
    let d = dot(h, e);
    let a = 1.0 / (nh * ne);
    let b = d / (nh * nh * nh * ne);
    h.iter()
        .zip(e)
        .map(|(&hi, &ei)| -(ei * a - hi * b))
        .collect()
}

/// Max-shifted log-sum-exp. `-inf` entries are treated as log(0); an all
/// `-inf` input returns `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let s: f64 = values.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Log-domain add of two values: `log(exp(a) + exp(b))`.
pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Levenshtein distance with unit substitution/insertion/deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + sub);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Plain recursive definition, independent of the DP above.
    fn edit_distance_oracle(a: &[char], b: &[char]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = usize::from(a[0] != b[0]);
        (edit_distance_oracle(&a[1..], &b[1..]) + sub)
            .min(edit_distance_oracle(&a[1..], b) + 1)
            .min(edit_distance_oracle(a, &b[1..]) + 1)
    }

    #[test]
    fn cosine_distance_matrix_examples() {
        let eps = NORM_EPSILON;
        let h = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let same = cosine_distance_matrix(&h, &h, eps).unwrap();
        assert!(same.get(0, 0).abs() < 1e-15);

        let e = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let orth = cosine_distance_matrix(&h, &e, eps).unwrap();
        assert!((orth.get(0, 0) - 1.0).abs() < 1e-15);

        let anti = Matrix::from_rows(&[vec![-1.0, 0.0]]).unwrap();
        let opp = cosine_distance_matrix(&h, &anti, eps).unwrap();
        assert!((opp.get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_distance_matrix_shape_error() {
        let h = Matrix::zeros(2, 3);
        let e = Matrix::zeros(2, 4);
        let err = cosine_distance_matrix(&h, &e, 1e-8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x4"), "error names both shapes: {msg}");
    }

    #[test]
    fn cosine_grad_at_minimum_is_zero() {
        let g = cosine_distance_grad(&[1.0, 0.0], &[1.0, 0.0], 1e-8);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_grad_orthogonal_case() {
        // Analytic formula evaluated by hand, cross-checked by central
        // differences below.
        let g = cosine_distance_grad(&[1.0, 0.0], &[0.0, 1.0], 1e-8);
        assert!((g[0] - 0.0).abs() < 1e-12);
        assert!((g[1] - (-1.0)).abs() < 1e-12);

        let step = 1e-6;
        for k in 0..2 {
            let mut hp = [1.0, 0.0];
            let mut hm = [1.0, 0.0];
            hp[k] += step;
            hm[k] -= step;
            let fd = (cosine_distance(&hp, &[0.0, 1.0], 1e-8)
                - cosine_distance(&hm, &[0.0, 1.0], 1e-8))
                / (2.0 * step);
            assert!((fd - g[k]).abs() < 1e-6, "component {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn cosine_grad_matches_finite_differences_seed7() {
        let mut rng = Rng::new(7);
        let d = 8;
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let e: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        assert!(norm(&h) >= 0.1 && norm(&e) >= 0.1);
        let g = cosine_distance_grad(&h, &e, 1e-8);
        let step = 1e-6;
        let mut max_rel = 0.0f64;
        for k in 0..d {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[k] += step;
            hm[k] -= step;
            let fd = (cosine_distance(&hp, &e, 1e-8) - cosine_distance(&hm, &e, 1e-8))
                / (2.0 * step);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn cosine_scale_invariance() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let h: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let e: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let c = rng.uniform(0.1, 10.0);
            let scaled: Vec<f64> = h.iter().map(|x| x * c).collect();
            let d0 = cosine_distance(&h, &e, 1e-8);
            let d1 = cosine_distance(&scaled, &e, 1e-8);
            assert!((d0 - d1).abs() < 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_examples() {
        assert!((log_sum_exp(&[0.0, 0.0]).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        let shifted = log_sum_exp(&[-1000.0, -1000.0]).unwrap();
        assert!((shifted - (-1000.0 + 2.0f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[5.0]).unwrap(), 5.0);
        assert!(log_sum_exp(&[]).is_err());
    }

    #[test]
    fn log_sum_exp_shift_invariance() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let v: Vec<f64> = (0..7).map(|_| rng.uniform(-4.0, 4.0)).collect();
            let c = rng.uniform(-50.0, 50.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let lhs = log_sum_exp(&shifted).unwrap();
            let rhs = log_sum_exp(&v).unwrap() + c;
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")), 0);
        assert_eq!(edit_distance(&chars("abc"), &chars("")), 3);
        let a = chars("kitten");
        let b = chars("sitting");
        assert_eq!(edit_distance_oracle(&a, &b), 3);
        assert_eq!(edit_distance(&a, &b), 3);
    }

    #[test]
    fn edit_distance_matches_oracle_on_random_pairs() {
        let mut rng = Rng::new(23);
        for _ in 0..60 {
            let la = rng.below(7) as usize;
            let lb = rng.below(7) as usize;
            let a: Vec<char> = (0..la)
                .map(|_| char::from(b'a' + rng.below(3) as u8))
                .collect();
            let b: Vec<char> = (0..lb)
                .map(|_| char::from(b'a' + rng.below(3) as u8))
                .collect();
            assert_eq!(edit_distance(&a, &b), edit_distance_oracle(&a, &b));
        }
    }

    #[test]
    fn edit_distance_is_a_metric() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let mk = |rng: &mut Rng| -> Vec<u32> {
                let l = rng.below(8) as usize;
                (0..l).map(|_| rng.below(4) as u32).collect()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let c = mk(&mut rng);
            let dab = edit_distance(&a, &b);
            let dba = edit_distance(&b, &a);
            assert_eq!(dab, dba, "symmetry");
            assert_eq!(edit_distance(&a, &a), 0, "identity");
            if dab == 0 {
                assert_eq!(a, b, "indiscernibles");
            }
            let dac = edit_distance(&a, &c);
            let dcb = edit_distance(&c, &b);
            assert!(dab <= dac + dcb, "triangle inequality");
        }
    }
}
