//! Toy encoder-decoder sequence model with a CTC head on the encoder and an
//! autoregressive cross-entropy head on the decoder.

mod model;

pub use model::{LossGrad, SeqModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Scalar;

/// Token id reserved for end-of-sequence. Every generated target ends with it
/// and greedy decoding stops when the decoder emits it.
pub const EOS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input feature dimension per frame.
    pub d_in: usize,
    pub d_hidden: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Output vocabulary size, excluding the CTC blank (blank index = `vocab`).
    pub vocab: usize,
    /// CTC weight `c` in `(1 − c)·L_dec + c·L_ctc`.
    pub ctc_weight: f64,
    /// Longest target / decoded sequence.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 8,
            d_hidden: 32,
            n_enc: 2,
            n_dec: 1,
            vocab: 12,
            ctc_weight: 0.3,
            max_len: 10,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::InvalidConfig(format!(
                "ctc weight {} outside [0, 1]",
                self.ctc_weight
            )));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("vocabulary needs at least 2 tokens".into()));
        }
        if [self.d_in, self.d_hidden, self.n_enc, self.n_dec, self.max_len].contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }
}

/// The part of an utterance a learner may see: frames and transcription.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    /// `L_F × d_in`
    pub frames: Tensor<T>,
    /// Token ids in `[0, vocab)`, length `L_W`.
    pub targets: Vec<usize>,
}

impl<T: Scalar> Sample<T> {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_tokens(&self) -> usize {
        self.targets.len()
    }

    /// Targets with a trailing end-of-sequence token removed.
    pub fn content(&self) -> &[usize] {
        match self.targets.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.targets,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            frames: self.frames.cast(),
            targets: self.targets.clone(),
        }
    }
}

/// A sample together with the labels only the evaluation side may read.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<T> {
    pub sample: Sample<T>,
    pub speaker_id: usize,
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<T> {
    /// `L_F × (vocab + 1)` log-softmax, blank last.
    pub ctc_log_probs: Tensor<T>,
    /// `L_W × vocab` log-softmax under teacher forcing.
    pub dec_log_probs: Tensor<T>,
}
