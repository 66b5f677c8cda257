//! The step interface every online learner implements, and the batch-gradient
//! helper they share.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::datastream::LearnerBatch;
use crate::error::{Error, Result};
use crate::numcore::ParamSet;
use crate::scalar::Scalar;
use crate::seqmodel::{LossGrad, Sample};

/// An online continual learner. Each batch is handed over by value exactly
/// once; anything the learner wants to keep it must copy into its own state.
pub trait Learner<T: Scalar>: Send {
    fn name(&self) -> String;

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()>;

    /// Parameters used for inference.
    fn inference_params(&self) -> &ParamSet<T>;

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: vec![("params".into(), self.inference_params().clone())],
            counters: BTreeMap::new(),
        }
    }
}

/// Everything a learner needs persisted: named parameter sets and counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: Vec<(String, ParamSet<T>)>,
    pub counters: BTreeMap<String, usize>,
}

impl<T: Scalar> Learner<T> for Box<dyn Learner<T>> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        (**self).step(batch)
    }

    fn inference_params(&self) -> &ParamSet<T> {
        (**self).inference_params()
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        (**self).checkpoint()
    }
}

/// Per-sample losses and gradients, evaluated in parallel and returned in order.
pub fn per_sample_losses<T, F>(samples: &[Sample<T>], per_sample: F) -> Result<Vec<LossGrad<T>>>
where
    T: Scalar,
    F: Fn(&Sample<T>) -> Result<LossGrad<T>> + Sync + Send,
{
    samples.par_iter().map(&per_sample).collect()
}

/// Sums per-sample parts in order. Errors on an empty list or a non-finite total.
pub fn sum_parts<T: Scalar>(parts: Vec<LossGrad<T>>) -> Result<LossGrad<T>> {
    let mut iter = parts.into_iter();
    let mut total = iter
        .next()
        .ok_or_else(|| Error::InvalidConfig("cannot take a step on an empty batch".into()))?;
    for part in iter {
        total.value = total.value + part.value;
        total.grad.add_scaled(T::one(), &part.grad)?;
    }
    if !total.value.is_finite() {
        return Err(Error::NonFinite { entry: "batch loss".into() });
    }
    Ok(total)
}

/// Sum over `samples` of a per-sample loss and gradient. Samples are evaluated
/// in parallel and summed in order, so the result does not depend on scheduling.
pub fn summed_loss<T, F>(samples: &[Sample<T>], per_sample: F) -> Result<LossGrad<T>>
where
    T: Scalar,
    F: Fn(&Sample<T>) -> Result<LossGrad<T>> + Sync + Send,
{
    sum_parts(per_sample_losses(samples, per_sample)?)
}
