//! CTC loss: forward-backward over the blank-extended label sequence,
//! entirely in the log domain, with an exhaustive enumeration oracle.

use crate::error::{Error, Result};
use crate::nn::log_softmax_rows;
use crate::numerics::{log_add, log_sum_exp, Matrix};

/// Upper bound on enumerated strings in [`ctc_bruteforce`].
const BRUTEFORCE_STRING_LIMIT: u128 = 1_000_000;

/// Row-normalized log-probabilities plus the blank assignment.
#[derive(Clone, Debug)]
pub struct CtcSetup {
    vocab_size: usize,
    blank_id: usize,
    log_probs: Matrix,
}

impl CtcSetup {
    /// Build from raw logits by applying a row log-softmax.
    pub fn from_logits(logits: &Matrix, blank_id: usize) -> Result<CtcSetup> {
        if blank_id >= logits.cols() {
            return Err(Error::TokenOutOfRange {
                id: blank_id as u32,
                vocab: logits.cols(),
            });
        }
        if logits.rows() == 0 || logits.cols() == 0 {
            return Err(Error::EmptyInput("CtcSetup::from_logits"));
        }
        Ok(CtcSetup {
            vocab_size: logits.cols(),
            blank_id,
            log_probs: log_softmax_rows(logits),
        })
    }

    /// Build from already-normalized log-probabilities; each row's
    /// log-sum-exp must be 0 within 1e-9.
    pub fn from_log_probs(log_probs: Matrix, blank_id: usize) -> Result<CtcSetup> {
        if blank_id >= log_probs.cols() {
            return Err(Error::TokenOutOfRange {
                id: blank_id as u32,
                vocab: log_probs.cols(),
            });
        }
        for t in 0..log_probs.rows() {
            let lse = log_sum_exp(log_probs.row(t))?;
            if lse.abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "CtcSetup row {t} is not normalized: log-sum-exp = {lse}"
                )));
            }
        }
        Ok(CtcSetup {
            vocab_size: log_probs.cols(),
            blank_id,
            log_probs,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn blank_id(&self) -> usize {
        self.blank_id
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }
}

/// Minimum frame count for a label sequence: one frame per label plus a
/// mandatory blank between adjacent repeats.
pub fn ctc_min_frames(labels: &[u32]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate_labels(setup: &CtcSetup, labels: &[u32]) -> Result<()> {
    for (pos, &l) in labels.iter().enumerate() {
        if l as usize >= setup.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: l,
                vocab: setup.vocab_size,
            });
        }
        if l as usize == setup.blank_id {
            return Err(Error::BlankInLabels {
                position: pos,
                blank_id: setup.blank_id,
            });
        }
    }
    let min = ctc_min_frames(labels);
    if setup.frames() < min {
        return Err(Error::LabelTooLong {
            label_len: labels.len(),
            min_frames: min,
            frames: setup.frames(),
        });
    }
    Ok(())
}

/// Blank-extended sequence: blank, l1, blank, l2, ..., blank.
fn extended(setup: &CtcSetup, labels: &[u32]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(setup.blank_id);
    for &l in labels {
        ext.push(l as usize);
        ext.push(setup.blank_id);
    }
    ext
}

fn forward_lattice(setup: &CtcSetup, ext: &[usize]) -> Matrix {
    let t_len = setup.frames();
    let s_len = ext.len();
    let lp = &setup.log_probs;
    let mut alpha = Matrix::from_vec(t_len, s_len, vec![f64::NEG_INFINITY; t_len * s_len])
        .expect("alpha shape");
    alpha.set(0, 0, lp.get(0, ext[0]));
    if s_len > 1 {
        alpha.set(0, 1, lp.get(0, ext[1]));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if s >= 2 && ext[s] != setup.blank_id && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc != f64::NEG_INFINITY {
                alpha.set(t, s, acc + lp.get(t, ext[s]));
            }
        }
    }
    alpha
}

fn backward_lattice(setup: &CtcSetup, ext: &[usize]) -> Matrix {
    let t_len = setup.frames();
    let s_len = ext.len();
    let lp = &setup.log_probs;
    let mut beta = Matrix::from_vec(t_len, s_len, vec![f64::NEG_INFINITY; t_len * s_len])
        .expect("beta shape");
    beta.set(t_len - 1, s_len - 1, lp.get(t_len - 1, ext[s_len - 1]));
    if s_len > 1 {
        beta.set(t_len - 1, s_len - 2, lp.get(t_len - 1, ext[s_len - 2]));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta.get(t + 1, s);
            if s + 1 < s_len {
                acc = log_add(acc, beta.get(t + 1, s + 1));
            }
            if s + 2 < s_len && ext[s + 2] != setup.blank_id && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta.get(t + 1, s + 2));
            }
            if acc != f64::NEG_INFINITY {
                beta.set(t, s, acc + lp.get(t, ext[s]));
            }
        }
    }
    beta
}

fn total_log_prob(alpha: &Matrix) -> f64 {
    let t = alpha.rows() - 1;
    let s = alpha.cols();
    let mut p = alpha.get(t, s - 1);
    if s > 1 {
        p = log_add(p, alpha.get(t, s - 2));
    }
    p
}

/// Negative log-likelihood of `labels` under the CTC collapse rule, plus the
/// forward lattice (T x (2L+1)) over the blank-extended sequence.
pub fn ctc_forward(setup: &CtcSetup, labels: &[u32]) -> Result<(f64, Matrix)> {
    validate_labels(setup, labels)?;
    let ext = extended(setup, labels);
    let alpha = forward_lattice(setup, &ext);
    let loss = -total_log_prob(&alpha);
    Ok((loss, alpha))
}

/// Enumerates every length-T string over the vocabulary, sums the
/// probabilities of those whose blank-collapse equals `labels`, and returns
/// the negative log of the sum. Guarded to at most 10^6 strings.
pub fn ctc_bruteforce(setup: &CtcSetup, labels: &[u32]) -> Result<f64> {
    let count = (setup.vocab_size as u128)
        .checked_pow(setup.frames() as u32)
        .unwrap_or(u128::MAX);
    if count > BRUTEFORCE_STRING_LIMIT {
        return Err(Error::GuardExceeded {
            what: "ctc_bruteforce string count",
            count,
            limit: BRUTEFORCE_STRING_LIMIT,
        });
    }
    validate_labels(setup, labels)?;

    let t_len = setup.frames();
    let v = setup.vocab_size;
    let lp = &setup.log_probs;
    let mut string = vec![0usize; t_len];
    let mut total = 0.0f64;
    loop {
        // Collapse: merge adjacent repeats, then drop blanks.
        let mut collapsed: Vec<usize> = Vec::with_capacity(t_len);
        let mut prev = usize::MAX;
        for &s in &string {
            if s != prev && s != setup.blank_id {
                collapsed.push(s);
            }
            prev = s;
        }
        let matches = collapsed.len() == labels.len()
            && collapsed
                .iter()
                .zip(labels)
                .all(|(&c, &l)| c == l as usize);
        if matches {
            let logp: f64 = string
                .iter()
                .enumerate()
                .map(|(t, &s)| lp.get(t, s))
                .sum();
            total += logp.exp();
        }
        // Next string in base-V counting order.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return Ok(-total.ln());
            }
            pos -= 1;
            string[pos] += 1;
            if string[pos] < v {
                break;
            }
            string[pos] = 0;
        }
    }
}

/// Gradient of the CTC loss with respect to the un-normalized logits feeding
/// the row softmax: `grad[t][k] = p[t][k] - sum_{s: ext[s]=k} gamma[t][s]`.
/// Every row sums to zero.
pub fn ctc_backward(setup: &CtcSetup, labels: &[u32]) -> Result<Matrix> {
    validate_labels(setup, labels)?;
    let ext = extended(setup, labels);
    let alpha = forward_lattice(setup, &ext);
    let beta = backward_lattice(setup, &ext);
    let log_p = total_log_prob(&alpha);

    let t_len = setup.frames();
    let v = setup.vocab_size;
    let lp = &setup.log_probs;
    let mut grad = Matrix::zeros(t_len, v);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            *g = lp.get(t, k).exp();
        }
        for (s, &sym) in ext.iter().enumerate() {
            let a = alpha.get(t, s);
            let b = beta.get(t, s);
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            // Alpha and beta both include the emission at t; remove one copy.
            let gamma = (a + b - lp.get(t, sym) - log_p).exp();
            row[sym] -= gamma;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn uniform_setup(t: usize, vocab: usize, blank: usize) -> CtcSetup {
        let lp = (vocab as f64).ln();
        let data = vec![-lp; t * vocab];
        CtcSetup::from_log_probs(Matrix::from_vec(t, vocab, data).unwrap(), blank).unwrap()
    }

    fn random_setup(rng: &mut Rng, t: usize, vocab: usize, blank: usize) -> CtcSetup {
        let mut logits = Matrix::zeros(t, vocab);
        for v in logits.data_mut() {
            *v = rng.uniform(-2.0, 2.0);
        }
        CtcSetup::from_logits(&logits, blank).unwrap()
    }

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(ctc_min_frames(&[]), 0);
        assert_eq!(ctc_min_frames(&[1]), 1);
        assert_eq!(ctc_min_frames(&[1, 1]), 3);
        assert_eq!(ctc_min_frames(&[1, 2, 2, 2]), 6);
    }

    #[test]
    fn single_frame_single_label() {
        let mut rng = Rng::new(8);
        let setup = random_setup(&mut rng, 1, 4, 3);
        let (loss, _) = ctc_forward(&setup, &[1]).unwrap();
        assert!((loss - (-setup.log_probs().get(0, 1))).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_uniform() {
        // P = P(aa) + P(a, blank) + P(blank, a) = 3/9 for vocab 3.
        let setup = uniform_setup(2, 3, 2);
        let (loss, _) = ctc_forward(&setup, &[0]).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn label_too_long_errors_with_minimum() {
        let setup = uniform_setup(2, 3, 2);
        match ctc_forward(&setup, &[0, 0]) {
            Err(Error::LabelTooLong {
                min_frames, frames, ..
            }) => {
                assert_eq!(min_frames, 3);
                assert_eq!(frames, 2);
            }
            other => panic!("expected LabelTooLong, got {other:?}"),
        }
    }

    #[test]
    fn blank_in_labels_is_an_error() {
        let setup = uniform_setup(3, 3, 2);
        assert!(matches!(
            ctc_forward(&setup, &[2]),
            Err(Error::BlankInLabels { position: 0, .. })
        ));
    }

    #[test]
    fn bruteforce_mirrors_forward_error() {
        let setup = uniform_setup(2, 3, 2);
        assert!(matches!(
            ctc_bruteforce(&setup, &[0, 0]),
            Err(Error::LabelTooLong { .. })
        ));
    }

    #[test]
    fn bruteforce_matches_forward_on_repeat_labels() {
        let mut rng = Rng::new(17);
        let setup = random_setup(&mut rng, 4, 3, 2);
        let (loss, _) = ctc_forward(&setup, &[0, 0]).unwrap();
        let brute = ctc_bruteforce(&setup, &[0, 0]).unwrap();
        assert!((loss - brute).abs() < 1e-9, "{loss} vs {brute}");
    }

    #[test]
    fn bruteforce_collapse_enumeration_small() {
        // Vocab {a, blank}, T = 3: of the 8 strings, those collapsing to [a]
        // are: aab? no b symbol; enumerate by code. Checked against forward.
        let mut rng = Rng::new(21);
        let setup = random_setup(&mut rng, 3, 2, 1);
        let (loss, _) = ctc_forward(&setup, &[0]).unwrap();
        let brute = ctc_bruteforce(&setup, &[0]).unwrap();
        assert!((loss - brute).abs() < 1e-9);
    }

    #[test]
    fn unique_alignment_is_cross_entropy() {
        // T = 2, labels = [a, b]: only the string "ab" collapses to [a, b].
        let mut rng = Rng::new(33);
        let setup = random_setup(&mut rng, 2, 4, 3);
        let (loss, _) = ctc_forward(&setup, &[0, 1]).unwrap();
        let expect = -(setup.log_probs().get(0, 0) + setup.log_probs().get(1, 1));
        assert!((loss - expect).abs() < 1e-9);

        // Gradient reduces to softmax minus one-hot per frame.
        let grad = ctc_backward(&setup, &[0, 1]).unwrap();
        for t in 0..2 {
            let target = [0usize, 1][t];
            for k in 0..4 {
                let p = setup.log_probs().get(t, k).exp();
                let expect = p - if k == target { 1.0 } else { 0.0 };
                assert!(
                    (grad.get(t, k) - expect).abs() < 1e-9,
                    "t={t} k={k}: {} vs {expect}",
                    grad.get(t, k)
                );
            }
        }
    }

    #[test]
    fn forward_matches_bruteforce_on_random_instances() {
        let mut rng = Rng::new(555).split("ctc-oracle");
        for trial in 0..60 {
            let vocab = 2 + rng.below(3) as usize;
            let t = 1 + rng.below(5) as usize;
            let blank = rng.below(vocab as u64) as usize;
            let setup = random_setup(&mut rng, t, vocab, blank);
            // Random labels that fit.
            let non_blank: Vec<u32> = (0..vocab as u32)
                .filter(|&k| k as usize != blank)
                .collect();
            let max_len = t.min(3);
            let len = rng.below(max_len as u64 + 1) as usize;
            let labels: Vec<u32> = (0..len)
                .map(|_| non_blank[rng.below(non_blank.len() as u64) as usize])
                .collect();
            if ctc_min_frames(&labels) > t {
                continue;
            }
            let (loss, _) = ctc_forward(&setup, &labels).unwrap();
            let brute = ctc_bruteforce(&setup, &labels).unwrap();
            assert!(
                (loss - brute).abs() < 1e-9,
                "trial {trial}: {loss} vs {brute}"
            );
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = Rng::new(9).split("ctc-pos");
        for _ in 0..30 {
            let setup = random_setup(&mut rng, 5, 4, 3);
            let labels = [rng.below(3) as u32, rng.below(3) as u32];
            let (loss, _) = ctc_forward(&setup, &labels).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn empty_labels_are_all_blanks() {
        let mut rng = Rng::new(13);
        let setup = random_setup(&mut rng, 3, 3, 2);
        let (loss, _) = ctc_forward(&setup, &[]).unwrap();
        let expect: f64 = -(0..3).map(|t| setup.log_probs().get(t, 2)).sum::<f64>();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_rows_sum_to_zero() {
        let mut rng = Rng::new(77).split("ctc-rows");
        for _ in 0..20 {
            let setup = random_setup(&mut rng, 5, 4, 0);
            let grad = ctc_backward(&setup, &[1, 2, 1]).unwrap();
            for t in 0..grad.rows() {
                let s: f64 = grad.row(t).iter().sum();
                assert!(s.abs() < 1e-9, "row {t} sums to {s}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(4242).split("ctc-fd");
        let (t, vocab, blank) = (4, 4, 3);
        let labels = [0u32, 1u32];
        let mut logits = Matrix::zeros(t, vocab);
        for v in logits.data_mut() {
            *v = rng.uniform(-1.5, 1.5);
        }
        let setup = CtcSetup::from_logits(&logits, blank).unwrap();
        let grad = ctc_backward(&setup, &labels).unwrap();
        let step = 1e-6;
        for k in 0..logits.data().len() {
            let mut lp = logits.clone();
            let mut lm = logits.clone();
            lp.data_mut()[k] += step;
            lm.data_mut()[k] -= step;
            let fp = ctc_forward(&CtcSetup::from_logits(&lp, blank).unwrap(), &labels)
                .unwrap()
                .0;
            let fm = ctc_forward(&CtcSetup::from_logits(&lm, blank).unwrap(), &labels)
                .unwrap()
                .0;
            let fd = (fp - fm) / (2.0 * step);
            let an = grad.data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-5, "k={k}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn guard_trips_on_large_enumeration() {
        let setup = uniform_setup(25, 4, 3);
        assert!(matches!(
            ctc_bruteforce(&setup, &[0]),
            Err(Error::GuardExceeded { .. })
        ));
    }
}
