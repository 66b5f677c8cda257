//! Log-space CTC forward-backward over the blank-augmented label sequence.

use super::tensor::{log_sum_exp, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimum number of frames needed to emit `targets`: one per label plus one
/// separating blank between each pair of equal neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

/// Negative log-likelihood of `targets` under per-frame `log_probs` and its
/// gradient with respect to `log_probs`.
///
/// `log_probs` is `frames × symbols`; `blank` indexes the blank column.
pub fn ctc_nll<T: Scalar>(
    log_probs: &Tensor<T>,
    targets: &[usize],
    blank: usize,
) -> Result<(T, Tensor<T>)> {
    let frames = log_probs.rows();
    let symbols = log_probs.cols();
    if targets.is_empty() {
        return Err(Error::InvalidConfig("CTC target must be non-empty".into()));
    }
    if blank >= symbols || targets.iter().any(|&t| t >= symbols || t == blank) {
        return Err(Error::InvalidConfig(format!(
            "CTC labels must lie in [0, {symbols}) and differ from blank {blank}"
        )));
    }
    let required = min_frames(targets);
    if frames < required {
        return Err(Error::Infeasible { frames, required });
    }

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(targets.iter().flat_map(|&t| [t, blank]))
        .collect();
    let states = ext.len();
    let ninf = T::neg_infinity();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * states];
    alpha[0] = log_probs.at(0, ext[0]);
    alpha[1] = log_probs.at(0, ext[1]);
    for t in 1..frames {
        for s in 0..states {
            let prev = &alpha[(t - 1) * states..t * states];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if can_skip(s) {
                terms[2] = prev[s - 2];
            }
            let acc = log_sum_exp(&terms);
            alpha[t * states + s] = if acc == ninf {
                ninf
            } else {
                acc + log_probs.at(t, ext[s])
            };
        }
    }

    let mut beta = vec![ninf; frames * states];
    let last = frames - 1;
    beta[last * states + states - 1] = log_probs.at(last, ext[states - 1]);
    beta[last * states + states - 2] = log_probs.at(last, ext[states - 2]);
    for t in (0..last).rev() {
        for s in 0..states {
            let next = &beta[(t + 1) * states..(t + 2) * states];
            let mut terms = [next[s], ninf, ninf];
            if s + 1 < states {
                terms[1] = next[s + 1];
            }
            if s + 2 < states && can_skip(s + 2) {
                terms[2] = next[s + 2];
            }
            let acc = log_sum_exp(&terms);
            beta[t * states + s] = if acc == ninf {
                ninf
            } else {
                acc + log_probs.at(t, ext[s])
            };
        }
    }

    let log_lik = log_sum_exp(&[
        alpha[last * states + states - 1],
        alpha[last * states + states - 2],
    ]);
    if !log_lik.is_finite() {
        return Err(Error::NonFinite {
            entry: "ctc log-likelihood".into(),
        });
    }

    // d(-log p)/d lp[t, k] = -(expected occupancy of symbol k at frame t)
    let mut grad = Tensor::zeros(vec![frames, symbols]);
    for t in 0..frames {
        for s in 0..states {
            let a = alpha[t * states + s];
            let b = beta[t * states + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - log_probs.at(t, ext[s]) - log_lik).exp();
            let g = grad.row_mut(t);
            g[ext[s]] = g[ext[s]] - occ;
        }
    }
    Ok((-log_lik, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_frames_counts_repeats() {
        assert_eq!(min_frames(&[1, 2, 3]), 3);
        assert_eq!(min_frames(&[1, 1, 2, 2]), 6);
    }

    #[test]
    fn single_label_two_frames_uniform() {
        // alignments: "a-", "-a", "aa", each with probability 1/4
        let lp = Tensor::filled(vec![2, 2], 0.5f64.ln());
        let (loss, _) = ctc_nll(&lp, &[0], 1).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_empty_rejected() {
        let lp = Tensor::filled(vec![2, 3], (1.0f64 / 3.0).ln());
        assert!(matches!(
            ctc_nll(&lp, &[0, 0], 2),
            Err(Error::Infeasible { frames: 2, required: 3 })
        ));
        assert!(ctc_nll(&lp, &[], 2).is_err());
        assert!(ctc_nll(&lp, &[2], 2).is_err());
    }

    #[test]
    fn occupancy_sums_to_one_per_frame() {
        let lp = Tensor::filled(vec![5, 3], (1.0f64 / 3.0).ln());
        let (_, g) = ctc_nll(&lp, &[0, 1], 2).unwrap();
        for t in 0..5 {
            let s: f64 = g.row(t).iter().sum();
            assert!((s + 1.0).abs() < 1e-12);
        }
    }
}
