use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastream::{stream_rng, InitialDataset};
use crate::error::{Error, Result};
use crate::learner::summed_loss;
use crate::numcore::{sgd_step, ParamSet};
use crate::seqmodel::{Sample, SeqModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 8,
        }
    }
}

/// The initial model θ₀ and the size of the data it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrained {
    pub params: ParamSet<f64>,
    /// F₀
    pub frames: usize,
    /// W₀
    pub tokens: usize,
}

const TAG_INIT: u64 = 20;
const TAG_SHUFFLE: u64 = 21;

/// Multi-epoch minibatch SGD on the initial task's training split.
pub fn pretrain(model: &SeqModel, data: &InitialDataset, config: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig("pretraining needs batch size >= 1 and a positive rate".into()));
    }
    let init_seed = crate::datastream::derive_seed(seed, &[TAG_INIT]);
    let mut params = model.init_params::<f64>(init_seed);
    let samples: Vec<&Sample<f64>> = data.train.iter().map(|u| &u.sample).collect();
    let c = model.config().ctc_weight;
    let mut rng = stream_rng(seed, &[TAG_SHUFFLE]);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample<f64>> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let loss = summed_loss(&batch, |s| model.ce_loss(&params, s, c)).map_err(|e| match e {
                Error::NonFinite { entry } => Error::NonFinite {
                    entry: format!("{entry} (pretraining epoch {epoch})"),
                },
                other => other,
            })?;
            params = sgd_step(&params, &loss.grad, config.learning_rate, None)?;
        }
    }
    Ok(Pretrained {
        params,
        frames: data.frames,
        tokens: data.tokens,
    })
}
