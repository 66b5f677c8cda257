//! Online continual learning of encoder-decoder sequence models by online
//! weight averaging with knowledge distillation, alongside the usual
//! rehearsal and regularization baselines and a harness to compare them.

pub mod aos;
pub mod baselines;
pub mod datastream;
pub mod error;
pub mod harness;
pub mod io;
pub mod learner;
pub mod metrics;
pub mod numcore;
pub mod scalar;
pub mod seqmodel;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases; everything the harness runs uses these.
pub type Tensor64 = numcore::Tensor<f64>;
pub type ParamSet64 = numcore::ParamSet<f64>;
pub type Grad64 = numcore::Grad<f64>;
pub type Sample64 = seqmodel::Sample<f64>;
pub type Utterance64 = seqmodel::Utterance<f64>;
