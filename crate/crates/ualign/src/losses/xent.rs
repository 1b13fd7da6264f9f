//! Next-token cross-entropy with ignored positions.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Mean negative log-softmax over non-ignored positions. Returns the loss and
/// its gradient with respect to the logits: `(softmax - one_hot) / count` on
/// scored positions, zero elsewhere.
pub fn cross_entropy(logits: &Matrix, targets: &[u32], ignore_id: u32) -> Result<(f64, Matrix)> {
    let (t_len, vocab) = (logits.rows(), logits.cols());
    if targets.len() != t_len {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy".into(),
            expected: format!("{t_len} targets"),
            found: format!("{} targets", targets.len()),
        });
    }
    let scored: Vec<usize> = (0..t_len).filter(|&t| targets[t] != ignore_id).collect();
    if scored.is_empty() {
        return Err(Error::AllPositionsIgnored);
    }
    for &t in &scored {
        if targets[t] as usize >= vocab {
            return Err(Error::TokenOutOfRange {
                id: targets[t],
                vocab,
            });
        }
    }

    let count = scored.len() as f64;
    let mut grad = Matrix::zeros(t_len, vocab);
    let mut loss = 0.0;
    for &t in &scored {
        let row = logits.row(t);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let target = targets[t] as usize;
        loss += lse - row[target];
        let g = grad.row_mut(t);
        for (k, &v) in row.iter().enumerate() {
            g[k] = (v - lse).exp() / count;
        }
        g[target] -= 1.0 / count;
    }
    Ok((loss / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0] {
            let mut logits = Matrix::zeros(3, 4);
            for (t, &target) in [0usize, 2, 1].iter().enumerate() {
                logits.set(t, target, margin);
            }
            let (loss, _) = cross_entropy(&logits, &[0, 2, 1], 99).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let vocab = 7;
        let logits = Matrix::zeros(4, vocab);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 2, 3], 99).unwrap();
        assert!((loss - (vocab as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            cross_entropy(&logits, &[9, 9], 9),
            Err(Error::AllPositionsIgnored)
        ));
    }

    #[test]
    fn ignored_positions_have_zero_gradient() {
        let mut rng = Rng::new(6);
        let mut logits = Matrix::zeros(3, 4);
        for v in logits.data_mut() {
            *v = rng.normal();
        }
        let (_, grad) = cross_entropy(&logits, &[9, 2, 9], 9).unwrap();
        assert!(grad.row(0).iter().all(|&v| v == 0.0));
        assert!(grad.row(2).iter().all(|&v| v == 0.0));
        assert!(grad.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(1212).split("xent-fd");
        let (t, vocab) = (5, 7);
        let mut logits = Matrix::zeros(t, vocab);
        for v in logits.data_mut() {
            *v = rng.uniform(-2.0, 2.0);
        }
        let targets = [3u32, 9, 0, 6, 2]; // position 1 ignored
        let (_, grad) = cross_entropy(&logits, &targets, 9).unwrap();
        let step = 1e-6;
        for k in 0..logits.data().len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data_mut()[k] += step;
            lm.data_mut()[k] -= step;
            let fp = cross_entropy(&lp, &targets, 9).unwrap().0;
            let fm = cross_entropy(&lm, &targets, 9).unwrap().0;
            let fd = (fp - fm) / (2.0 * step);
            let an = grad.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-5, "k={k}: fd {fd} vs {an}");
        }
    }
}
