//! Online averaging with distillation.
//!
//! Two models are kept. The adapted model is trained by SGD on each incoming
//! batch, regularized by distillation from the final model. The final model is
//! never trained directly: after every batch it moves towards the adapted
//! model by a weight proportional to the batch's share of all data seen so far,
//! counted in frames for encoder parameters and in target tokens for decoder
//! parameters.

use serde::{Deserialize, Serialize};

use crate::datastream::LearnerBatch;
use crate::error::{Error, Result};
use crate::learner::{summed_loss, Checkpoint, Learner};
use crate::numcore::{convex_mix, sgd_step, Group, ParamSet};
use crate::scalar::Scalar;
use crate::seqmodel::SeqModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AosConfig {
    /// Encoder plasticity τ ≥ 1.
    pub tau: f64,
    /// Decoder plasticity τ₂ ≥ 1.
    pub tau2: f64,
    /// Distillation weight λ ∈ [0, 1].
    pub lambda: f64,
    /// SGD learning rate of the adapted model.
    pub alpha: f64,
    /// CTC weight c.
    pub c: f64,
}

impl AosConfig {
    /// `(τ, λ, τ₂) = (2, 0.1, 1)`, the setting selected on the test experiment.
    pub fn optimized() -> Self {
        AosConfig {
            tau: 2.0,
            ..aos_default_config()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 1.0 && self.tau2 >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plasticity factors must be >= 1 (tau={}, tau2={})",
                self.tau, self.tau2
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::InvalidConfig(format!("ctc weight {} outside [0, 1]", self.c)));
        }
        Ok(())
    }
}

impl Default for AosConfig {
    fn default() -> Self {
        aos_default_config()
    }
}

/// `(τ, λ, τ₂) = (1, 0.1, 1)`, learning rate 0.01, CTC weight 0.3.
pub fn aos_default_config() -> AosConfig {
    AosConfig {
        tau: 1.0,
        tau2: 1.0,
        lambda: 0.1,
        alpha: 0.01,
        c: 0.3,
    }
}

fn eta(batch: f64, seen: f64, tau: f64) -> Result<f64> {
    if !(batch > 0.0) {
        return Err(Error::InvalidConfig(format!("batch size must be positive, got {batch}")));
    }
    if !(seen >= 0.0) || !(tau >= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "need seen >= 0 and tau >= 1 (seen={seen}, tau={tau})"
        )));
    }
    Ok(tau * batch / (seen + tau * batch))
}

/// Encoder averaging weight `τ·F / (F_seen + τ·F)`.
pub fn eta_enc(frames: f64, frames_seen: f64, tau: f64) -> Result<f64> {
    eta(frames, frames_seen, tau)
}

/// Decoder averaging weight `τ₂·W / (W_seen + τ₂·W)`.
pub fn eta_dec(tokens: f64, tokens_seen: f64, tau2: f64) -> Result<f64> {
    eta(tokens, tokens_seen, tau2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AosState<T> {
    /// θᵢ, the model used for inference.
    pub final_params: ParamSet<T>,
    /// θ̃ᵢ, trained on the stream.
    pub adapted: ParamSet<T>,
    pub frames_seen: usize,
    pub tokens_seen: usize,
    pub step: usize,
}

impl<T: Scalar> AosState<T> {
    /// Both models start from θ₀; counters start at the initial task's totals.
    pub fn new(theta0: ParamSet<T>, initial_frames: usize, initial_tokens: usize) -> Self {
        AosState {
            adapted: theta0.clone(),
            final_params: theta0,
            frames_seen: initial_frames,
            tokens_seen: initial_tokens,
            step: 0,
        }
    }
}

/// One batch of online averaging. On error the input state is untouched.
pub fn aos_step<T: Scalar>(
    model: &SeqModel,
    state: &AosState<T>,
    batch: &LearnerBatch<T>,
    config: &AosConfig,
) -> Result<AosState<T>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let (c, lambda) = (T::lit(config.c), T::lit(config.lambda));
    let loss = summed_loss(&batch.samples, |s| {
        model.total_loss(&state.adapted, &state.final_params, s, c, lambda)
    })?;
    let adapted = sgd_step(&state.adapted, &loss.grad, T::lit(config.alpha), None)?;

    // weights use the counts from before this batch
    let eta_e = T::lit(eta_enc(batch.frames as f64, state.frames_seen as f64, config.tau)?);
    let eta_d = T::lit(eta_dec(batch.tokens as f64, state.tokens_seen as f64, config.tau2)?);
    let mut final_params = state.final_params.clone();
    for (f, a) in final_params.entries_mut().iter_mut().zip(adapted.entries()) {
        let eta = match f.group {
            Group::Decoder => eta_d,
            Group::Encoder => eta_e,
        };
        for (x, &y) in f.tensor.data_mut().iter_mut().zip(a.tensor.data()) {
            *x = convex_mix(*x, y, eta);
        }
    }

    Ok(AosState {
        final_params,
        adapted,
        frames_seen: state.frames_seen + batch.frames,
        tokens_seen: state.tokens_seen + batch.tokens,
        step: state.step + 1,
    })
}

pub struct AosLearner<T> {
    model: SeqModel,
    config: AosConfig,
    state: AosState<T>,
}

impl<T: Scalar> AosLearner<T> {
    pub fn new(model: SeqModel, config: AosConfig, state: AosState<T>) -> Result<Self> {
        config.validate()?;
        Ok(AosLearner { model, config, state })
    }

    pub fn state(&self) -> &AosState<T> {
        &self.state
    }
}

impl<T: Scalar> Learner<T> for AosLearner<T> {
    fn name(&self) -> String {
        "aos".into()
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        self.state = aos_step(&self.model, &self.state, &batch, &self.config)?;
        Ok(())
    }

    fn inference_params(&self) -> &ParamSet<T> {
        &self.state.final_params
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        let s = &self.state;
        Checkpoint {
            params: vec![
                ("final".into(), s.final_params.clone()),
                ("adapted".into(), s.adapted.clone()),
            ],
            counters: [
                ("frames_seen".to_string(), s.frames_seen),
                ("tokens_seen".to_string(), s.tokens_seen),
                ("step".to_string(), s.step),
            ]
            .into(),
        }
    }
}
