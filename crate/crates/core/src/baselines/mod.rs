//! Comparison learners: plain fine-tuning, experience replay, online gradient
//! episodic memory, encoder-only updates and online elastic weight consolidation.

mod ewc;
mod memory;

pub use ewc::{empirical_fisher, ewc_penalty, ewc_step, EwcConfig, EwcLearner, EwcState};
pub use memory::{reservoir_offer, Memory};

use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::datastream::LearnerBatch;
use crate::error::{Error, Result};
use crate::learner::{summed_loss, Learner};
use crate::numcore::{dot, sgd_step, Grad, Group, ParamSet};
use crate::scalar::Scalar;
use crate::seqmodel::{LossGrad, Sample, SeqModel};

/// Learning rate and CTC weight shared by every SGD-based baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub alpha: f64,
    pub c: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { alpha: 0.01, c: 0.3 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::InvalidConfig(format!("ctc weight {} outside [0, 1]", self.c)));
        }
        Ok(())
    }
}

fn batch_ce<T: Scalar>(model: &SeqModel, params: &ParamSet<T>, samples: &[Sample<T>], c: f64) -> Result<LossGrad<T>> {
    let c = T::lit(c);
    summed_loss(samples, |s| model.ce_loss(params, s, c))
}

/// One SGD step on the summed cross-entropy of the batch.
pub fn ft_step<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    batch: &LearnerBatch<T>,
    config: &SgdConfig,
) -> Result<ParamSet<T>> {
    let loss = batch_ce(model, params, &batch.samples, config.c)?;
    sgd_step(params, &loss.grad, T::lit(config.alpha), None)
}

/// SGD on `L_new + weight·L_memory`. With no replayed samples this is `ft_step`.
pub fn er_step<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    batch: &LearnerBatch<T>,
    replay: &[Sample<T>],
    weight: f64,
    config: &SgdConfig,
) -> Result<ParamSet<T>> {
    let mut loss = batch_ce(model, params, &batch.samples, config.c)?;
    if !replay.is_empty() && weight != 0.0 {
        let mem = batch_ce(model, params, replay, config.c)?;
        loss.value = loss.value + T::lit(weight) * mem.value;
        loss.grad.add_scaled(T::lit(weight), &mem.grad)?;
    }
    sgd_step(params, &loss.grad, T::lit(config.alpha), None)
}

/// Projects `g` so it does not increase the reference loss to first order:
/// `g − (g·r / r·r)·r` when `g·r < 0`, otherwise `g` unchanged.
pub fn gem_project<T: Scalar>(g: &Grad<T>, g_ref: &Grad<T>) -> Result<Grad<T>> {
    let d = dot(g, g_ref)?;
    if d >= T::zero() {
        return Ok(g.clone());
    }
    let nn = dot(g_ref, g_ref)?;
    if nn == T::zero() {
        return Ok(g.clone());
    }
    let mut out = g.clone();
    out.add_scaled(-(d / nn), g_ref)?;
    // one refinement pass absorbs rounding in the first projection
    let d2 = dot(&out, g_ref)?;
    if d2 < T::zero() {
        out.add_scaled(-(d2 / nn), g_ref)?;
    }
    Ok(out)
}

/// SGD along the batch gradient projected against the replayed-sample gradient.
pub fn ogem_step<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    batch: &LearnerBatch<T>,
    replay: &[Sample<T>],
    config: &SgdConfig,
) -> Result<ParamSet<T>> {
    let loss = batch_ce(model, params, &batch.samples, config.c)?;
    let g = if replay.is_empty() {
        loss.grad
    } else {
        let reference = batch_ce(model, params, replay, config.c)?;
        gem_project(&loss.grad, &reference.grad)?
    };
    sgd_step(params, &g, T::lit(config.alpha), None)
}

/// Trainable entries for encoder-only updates: encoder weights, excluding normalization.
pub fn uoe_mask<T: Scalar>(params: &ParamSet<T>) -> Vec<bool> {
    params
        .entries()
        .iter()
        .map(|e| e.group == Group::Encoder && !e.norm)
        .collect()
}

/// Fine-tuning restricted to `uoe_mask`; every other entry is left bit-identical.
pub fn uoe_step<T: Scalar>(
    model: &SeqModel,
    params: &ParamSet<T>,
    batch: &LearnerBatch<T>,
    config: &SgdConfig,
) -> Result<ParamSet<T>> {
    let loss = batch_ce(model, params, &batch.samples, config.c)?;
    sgd_step(params, &loss.grad, T::lit(config.alpha), Some(&uoe_mask(params)))
}

pub struct FtLearner<T> {
    model: SeqModel,
    config: SgdConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> FtLearner<T> {
    pub fn new(model: SeqModel, config: SgdConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        Ok(FtLearner { model, config, params })
    }
}

impl<T: Scalar> Learner<T> for FtLearner<T> {
    fn name(&self) -> String {
        "ft".into()
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        self.params = ft_step(&self.model, &self.params, &batch, &self.config)?;
        Ok(())
    }

    fn inference_params(&self) -> &ParamSet<T> {
        &self.params
    }
}

pub struct UoeLearner<T> {
    model: SeqModel,
    config: SgdConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> UoeLearner<T> {
    pub fn new(model: SeqModel, config: SgdConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        Ok(UoeLearner { model, config, params })
    }
}

impl<T: Scalar> Learner<T> for UoeLearner<T> {
    fn name(&self) -> String {
        "uoe".into()
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        self.params = uoe_step(&self.model, &self.params, &batch, &self.config)?;
        Ok(())
    }

    fn inference_params(&self) -> &ParamSet<T> {
        &self.params
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub sgd: SgdConfig,
    /// Memory capacity in utterances.
    pub memory: usize,
    /// Weight of the replay loss (experience replay only).
    pub weight: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            sgd: SgdConfig::default(),
            memory: 200,
            weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ReplayKind {
    Er,
    Ogem,
}

/// Experience replay or online GEM over a reservoir-sampled memory. New
/// utterances are offered to the memory after the step that used them.
pub struct ReplayLearner<T> {
    kind: ReplayKind,
    model: SeqModel,
    config: ReplayConfig,
    params: ParamSet<T>,
    memory: Memory<T>,
    rng: Xoshiro256PlusPlus,
}

impl<T: Scalar> ReplayLearner<T> {
    pub fn er(model: SeqModel, config: ReplayConfig, params: ParamSet<T>, rng: Xoshiro256PlusPlus) -> Result<Self> {
        Self::build(ReplayKind::Er, model, config, params, rng)
    }

    pub fn ogem(model: SeqModel, config: ReplayConfig, params: ParamSet<T>, rng: Xoshiro256PlusPlus) -> Result<Self> {
        Self::build(ReplayKind::Ogem, model, config, params, rng)
    }

    fn build(
        kind: ReplayKind,
        model: SeqModel,
        config: ReplayConfig,
        params: ParamSet<T>,
        rng: Xoshiro256PlusPlus,
    ) -> Result<Self> {
        config.sgd.validate()?;
        if !(config.weight >= 0.0) {
            return Err(Error::InvalidConfig("replay weight must be non-negative".into()));
        }
        Ok(ReplayLearner {
            kind,
            model,
            memory: Memory::new(config.memory),
            config,
            params,
            rng,
        })
    }

    pub fn memory(&self) -> &Memory<T> {
        &self.memory
    }
}

impl<T: Scalar> Learner<T> for ReplayLearner<T> {
    fn name(&self) -> String {
        match self.kind {
            ReplayKind::Er => format!("er{}", self.config.memory),
            ReplayKind::Ogem => format!("ogem{}", self.config.memory),
        }
    }

    fn step(&mut self, batch: LearnerBatch<T>) -> Result<()> {
        let replay = self.memory.sample(batch.len(), &mut self.rng);
        self.params = match self.kind {
            ReplayKind::Er => er_step(&self.model, &self.params, &batch, &replay, self.config.weight, &self.config.sgd)?,
            ReplayKind::Ogem => ogem_step(&self.model, &self.params, &batch, &replay, &self.config.sgd)?,
        };
        for s in &batch.samples {
            self.memory.offer(s, &mut self.rng);
        }
        Ok(())
    }

    fn inference_params(&self) -> &ParamSet<T> {
        &self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastream::stream_rng;
    use crate::numcore::Tensor;
    use crate::seqmodel::ModelConfig;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn grad(vals: Vec<f64>) -> Grad<f64> {
        let mut p = ParamSet::new();
        let n = vals.len();
        p.push("g", Group::Encoder, false, Tensor::matrix(1, n, vals).unwrap()).unwrap();
        p
    }

    fn tiny() -> (SeqModel, ParamSet<f64>, LearnerBatch<f64>) {
        let cfg = ModelConfig {
            d_in: 3,
            d_hidden: 4,
            n_enc: 1,
            n_dec: 1,
            vocab: 4,
            max_len: 4,
            ..ModelConfig::default()
        };
        let model = SeqModel::new(cfg).unwrap();
        let params = model.init_params(1);
        let mut rng = stream_rng(2, &[]);
        let samples = (0..3)
            .map(|i| Sample {
                frames: Tensor::matrix(7, 3, (0..21).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
                targets: vec![1 + i % 3, 2, 0],
            })
            .collect();
        (model, params, LearnerBatch::new(samples))
    }

    #[test]
    fn projection_example() {
        let g = grad(vec![1.0, -1.0]);
        let r = grad(vec![0.0, 1.0]);
        assert_eq!(gem_project(&g, &r).unwrap().flat(), vec![1.0, 0.0]);
        let g = grad(vec![1.0, 1.0]);
        assert_eq!(gem_project(&g, &r).unwrap(), g);
        let zero = grad(vec![0.0, 0.0]);
        assert_eq!(gem_project(&grad(vec![-1.0, 2.0]), &zero).unwrap().flat(), vec![-1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn projection_removes_conflict(
            pair in (1usize..40).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f64..5.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            let (g, r) = (grad(pair.0), grad(pair.1));
            let p = gem_project(&g, &r).unwrap();
            prop_assert!(dot(&p, &r).unwrap() >= -1e-12);
            if dot(&g, &r).unwrap() >= 0.0 {
                prop_assert_eq!(p, g);
            }
        }
    }

    #[test]
    fn uoe_mask_selects_encoder_weights() {
        let (model, params, _) = tiny();
        let mask = uoe_mask(&params);
        let _ = model;
        for (e, m) in params.entries().iter().zip(&mask) {
            assert_eq!(*m, e.group == Group::Encoder && !e.norm, "{}", e.name);
        }
        assert!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
    }

    #[test]
    fn uoe_leaves_frozen_entries_bit_identical() {
        let (model, params, batch) = tiny();
        let next = uoe_step(&model, &params, &batch, &SgdConfig::default()).unwrap();
        let mask = uoe_mask(&params);
        for ((a, b), m) in params.entries().iter().zip(next.entries()).zip(mask) {
            if !m {
                assert_eq!(a.tensor, b.tensor, "{}", a.name);
            }
        }
        assert_ne!(params, next);
    }

    #[test]
    fn er_without_replay_is_fine_tuning() {
        let (model, params, batch) = tiny();
        let cfg = SgdConfig::default();
        let ft = ft_step(&model, &params, &batch, &cfg).unwrap();
        assert_eq!(er_step(&model, &params, &batch, &[], 1.0, &cfg).unwrap(), ft);
        assert_eq!(er_step(&model, &params, &batch, &batch.samples, 0.0, &cfg).unwrap(), ft);
        assert_eq!(ogem_step(&model, &params, &batch, &[], &cfg).unwrap(), ft);
    }

    #[test]
    fn replay_learner_fills_memory_after_step() {
        let (model, params, batch) = tiny();
        let cfg = ReplayConfig { memory: 2, ..ReplayConfig::default() };
        let mut er = ReplayLearner::er(model.clone(), cfg, params.clone(), stream_rng(1, &[])).unwrap();
        let mut ft = FtLearner::new(model, cfg.sgd, params).unwrap();
        er.step(batch.clone()).unwrap();
        ft.step(batch.clone()).unwrap();
        // the first step has nothing to replay
        assert_eq!(er.inference_params(), ft.inference_params());
        assert_eq!(er.memory().len(), 2);
        assert_eq!(er.memory().offered(), 3);
        er.step(batch.clone()).unwrap();
        ft.step(batch).unwrap();
        assert_ne!(er.inference_params(), ft.inference_params());
        assert_eq!(er.name(), "er2");
    }
}
