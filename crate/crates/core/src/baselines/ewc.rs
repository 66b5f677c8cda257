use serde::{Deserialize, Serialize};

use super::SgdConfig;
use crate::datastream::LearnerBatch;
use crate::error::{Error, Result};
use crate::learner::{per_sample_losses, sum_parts, Learner};
use crate::numcore::{sgd_step, Grad, ParamSet};
use crate::scalar::Scalar;
use crate::seqmodel::{LossGrad, Sample, SeqModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcConfig {
    pub sgd: SgdConfig,
    /// Penalty strength.
    pub lambda_ewc: f64,
    /// Decay of the running Fisher estimate at each refresh.
    pub gamma: f64,
    /// Steps between Fisher/anchor refreshes.
    pub refresh_every: usize,
    /// Initial-task utterances used for the first Fisher estimate.
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            sgd: SgdConfig::default(),
            lambda_ewc: 1e4,
            gamma: 0.95,
            refresh_every: 50,
            fisher_samples: 200,
        }
    }
}

impl EwcConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.lambda_ewc >= 0.0) || !(0.0..=1.0).contains(&self.gamma) || self.refresh_every == 0 {
            return Err(Error::InvalidConfig(format!(
                "invalid EWC settings: lambda_ewc={}, gamma={}, refresh_every={}",
                self.lambda_ewc, self.gamma, self.refresh_every
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EwcState<T> {
    pub anchor: ParamSet<T>,
    /// Diagonal Fisher estimate, one value per parameter.
    pub fisher: ParamSet<T>,
    window: ParamSet<T>,
    window_count: usize,
    steps: usize,
}

impl<T: Scalar> EwcState<T> {
    pub fn new(anchor: ParamSet<T>, fisher: ParamSet<T>) -> Result<Self> {
        anchor.check_compatible(&fisher)?;
        Ok(EwcState {
            window: anchor.zeros_like(),
            anchor,
            fisher,
            window_count: 0,
            steps: 0,
        })
    }
}

fn add_squares<T: Scalar>(acc: &mut ParamSet<T>, g: &Grad<T>) {
    for (a, e) in acc.entries_mut().iter_mut().zip(g.entries()) {
        for (x, &d) in a.tensor.data_mut().iter_mut().zip(e.tensor.data()) {
            *x = *x + d * d;
        }
    }
}

/// Mean squared per-sample cross-entropy gradient at `params`.
pub fn empirical_fisher<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    samples: &[Sample<T>],
    c: f64,
) -> Result<ParamSet<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("Fisher estimate needs at least one sample".into()));
    }
    let c = T::lit(c);
    let parts = per_sample_losses(samples, |s| model.ce_loss(params, s, c))?;
    let mut fisher = params.zeros_like();
    for p in &parts {
        add_squares(&mut fisher, &p.grad);
    }
    let n = T::count(samples.len());
    Ok(fisher.map(|v| v / n))
}

/// `(λ/2)·Σ F·(θ − θ*)²` and its gradient `λ·F·(θ − θ*)`.
pub fn ewc_penalty<T: Scalar>(params: &ParamSet<T>, state: &EwcState<T>, lambda_ewc: f64) -> Result<LossGrad<T>> {
    params.check_compatible(&state.anchor)?;
    let lambda = T::lit(lambda_ewc);
    let mut grad = params.zeros_like();
    let mut value = T::zero();
    for (((g, p), a), f) in grad
        .entries_mut()
        .iter_mut()
        .zip(params.entries())
        .zip(state.anchor.entries())
        .zip(state.fisher.entries())
    {
        let it = p.tensor.data().iter().zip(a.tensor.data()).zip(f.tensor.data());
        for (gv, ((&x, &x0), &fi)) in g.tensor.data_mut().iter_mut().zip(it) {
            let d = x - x0;
            value = value + fi * d * d;
            *gv = lambda * fi * d;
        }
    }
    Ok(LossGrad {
        value: lambda * value / T::lit(2.0),
        grad,
    })
}

/// SGD on batch cross-entropy plus the penalty. Squared per-sample gradients
/// accumulate between refreshes; every `refresh_every` steps the Fisher
/// estimate decays towards their mean and the anchor moves to the current weights.
pub fn ewc_step<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    state: &EwcState<T>,
    batch: &LearnerBatch<T>,
    config: &EwcConfig,
) -> Result<(ParamSet<T>, EwcState<T>)> {
    let c = T::lit(config.sgd.c);
    let parts = per_sample_losses(&batch.samples, |s| model.ce_loss(params, s, c))?;
    let mut next = state.clone();
    for p in &parts {
        add_squares(&mut next.window, &p.grad);
    }
    next.window_count += parts.len();
    let mut loss = sum_parts(parts)?;
    if config.lambda_ewc > 0.0 {
        let pen = ewc_penalty(params, state, config.lambda_ewc)?;
        loss.grad.add_scaled(T::one(), &pen.grad)?;
    }
    let params = sgd_step(params, &loss.grad, T::lit(config.sgd.alpha), None)?;

    next.steps += 1;
    if next.steps % config.refresh_every == 0 {
        let gamma = T::lit(config.gamma);
        let n = T::count(next.window_count);
        for (f, w) in next.fisher.entries_mut().iter_mut().zip(next.window.entries()) {
            for (x, &s) in f.tensor.data_mut().iter_mut().zip(w.tensor.data()) {
                *x = gamma * *x + (T::one() - gamma) * (s / n);
            }
        }
        next.anchor = params.clone();
        next.window = params.zeros_like();
        next.window_count = 0;
    }
    Ok((params, next))
}

pub struct EwcLearner<T> {
    model: SeqModel,
    config: EwcConfig,
    params: ParamSet<T>,
    state: EwcState<T>,
}

impl<T: Scalar> EwcLearner<T> {
    /// Anchors at `params` with the Fisher estimated on `fisher_data`.
    pub fn new(model: SeqModel, config: EwcConfig, params: ParamSet<T>, fisher_data: &[Sample<T>]) -> Result<Self> {
        config.validate()?;
        let fisher = empirical_fisher(&model, &params, fisher_data, config.sgd.c)?;
        let state = EwcState::new(params.clone(), fisher)?;
        Ok(EwcLearner { model, config, params, state })
    }

    pub fn state(&self) -> &EwcState<T> {
        &self.state
    }
}

impl<T: Scalar> Learner<T> for EwcLearner<T> {
    fn name(&self) -> String {
        "ewc".into()
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        let (params, state) = ewc_step(&self.model, &self.params, &self.state, &batch, &self.config)?;
        self.params = params;
        self.state = state;
        Ok(())
    }

    fn inference_params(&self) -> &ParamSet<T> {
        &self.params
    }
}
