//! Token error rate (the word-error-rate analog), per-task evaluation and the
//! averaged/weighted summaries used for reporting and model selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastream::HeldOut;
use crate::error::{Error, Result};
use crate::numcore::ParamSet;
use crate::scalar::Scalar;
use crate::seqmodel::SeqModel;

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidConfig("reference sequence must be non-empty".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

/// `(w·err_initial + err_new) / (w + 1)`
pub fn weighted_awer(err_initial: f64, err_new: f64, w: f64) -> f64 {
    (w * err_initial + err_new) / (w + 1.0)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Number of stream batches processed when the evaluation ran.
    pub step: usize,
    pub per_task_error: BTreeMap<usize, f64>,
    /// Mean error over the tasks seen so far.
    pub awer: f64,
    /// Current T₀ error minus the initial model's T₀ error.
    pub forgetting_t0: Option<f64>,
    /// Minus the mean forgetting over completed stream tasks.
    pub bwt: Option<f64>,
}

/// Mean token error rate of greedy decoding on one held-out set.
pub fn task_error<T: Scalar>(model: &SeqModel, params: &ParamSet<T>, set: &HeldOut) -> Result<f64> {
    let rates: Vec<f64> = set
        .utterances
        .par_iter()
        .map(|u| {
            let frames = u.sample.frames.cast::<T>();
            let hyp = model.greedy_decode(params, &frames)?;
            token_error_rate(&hyp, u.sample.content())
        })
        .collect::<Result<_>>()?;
    Ok(mean(rates))
}

/// Evaluates `params` on the held-out sets of `seen_tasks`. Forgetting and
/// backward transfer are left for the caller, who knows the history.
pub fn evaluate<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    eval_sets: &[HeldOut],
    seen_tasks: &[usize],
    step: usize,
) -> Result<EvalReport> {
    let mut per_task_error = BTreeMap::new();
    for &task in seen_tasks {
        let set = eval_sets
            .iter()
            .find(|s| s.task_id == task)
            .ok_or_else(|| Error::InvalidConfig(format!("no evaluation set for task {task}")))?;
        per_task_error.insert(task, task_error(model, params, set)?);
    }
    Ok(EvalReport {
        step,
        awer: mean(per_task_error.values().copied()),
        per_task_error,
        forgetting_t0: None,
        bwt: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((token_error_rate(&[1, 2, 3], &[1, 9, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_error_rate(&[], &[1, 2]).unwrap(), 1.0);
        assert!(token_error_rate(&[1], &[]).is_err());
    }

    #[test]
    fn weighted_awer_examples() {
        assert!((weighted_awer(0.15, 0.30, 2.0) - 0.20).abs() < 1e-15);
        assert_eq!(weighted_awer(0.1, 0.3, 1.0), mean([0.1, 0.3]));
        assert_eq!(weighted_awer(0.25, 0.25, 2.0), 0.25);
    }

    #[test]
    fn awer_is_plain_mean() {
        assert!((mean([0.2, 0.1]) - 0.15).abs() < 1e-15);
        assert_eq!(mean([0.37]), 0.37);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0usize..4, 0..7),
            b in proptest::collection::vec(0usize..4, 0..7),
            c in proptest::collection::vec(0usize..4, 0..7),
        ) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
        }

        #[test]
        fn awer_permutation_invariant(mut v in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let m = mean(v.iter().copied());
            v.reverse();
            prop_assert!((mean(v.iter().copied()) - m).abs() < 1e-12);
        }
    }
}
