#![allow(dead_code)]

use aos::numcore::{ParamSet, Tensor};
use aos::seqmodel::{ModelConfig, Sample, SeqModel};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_in: 3,
        d_hidden: 4,
        n_enc: 2,
        n_dec: 1,
        vocab: 3,
        ctc_weight: 0.3,
        max_len: 4,
    }
}

/// Random feasible sample for `config`.
pub fn random_sample(config: &ModelConfig, rng: &mut impl Rng) -> Sample<f64> {
    let lw = rng.random_range(1..=config.max_len.min(3));
    let targets: Vec<usize> = (0..lw).map(|_| rng.random_range(0..config.vocab)).collect();
    let lf = 2 * lw + 1 + rng.random_range(0..3);
    let data = (0..lf * config.d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
    Sample {
        frames: Tensor::matrix(lf, config.d_in, data).unwrap(),
        targets,
    }
}

/// Parameters perturbed away from the symmetric initialization (non-trivial
/// layer-norm gains and biases).
pub fn random_params(model: &SeqModel, seed: u64) -> ParamSet<f64> {
    let mut p = model.init_params::<f64>(seed);
    let mut r = rng(seed ^ 0xabcdef);
    for e in p.entries_mut() {
        for v in e.tensor.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute norm when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// `−ln Σ_paths Π p` by enumerating every frame labelling and collapsing it
/// (merge repeats, drop blanks).
pub fn brute_force_ctc(log_probs: &Tensor<f64>, targets: &[usize], blank: usize) -> f64 {
    let frames = log_probs.rows();
    let symbols = log_probs.cols();
    let mut path = vec![0usize; frames];
    let mut total = 0.0f64;
    loop {
        let mut collapsed = Vec::new();
        let mut last = None;
        for &s in &path {
            if Some(s) != last && s != blank {
                collapsed.push(s);
            }
            last = Some(s);
        }
        if collapsed == targets {
            let lp: f64 = path.iter().enumerate().map(|(t, &s)| log_probs.at(t, s)).sum();
            total += lp.exp();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < symbols {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Row-normalized random log-probabilities.
pub fn random_log_probs(frames: usize, symbols: usize, rng: &mut impl Rng) -> Tensor<f64> {
    let mut data = Vec::with_capacity(frames * symbols);
    for _ in 0..frames {
        let logits: Vec<f64> = (0..symbols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lse = aos::numcore::log_sum_exp(&logits);
        data.extend(logits.iter().map(|l| l - lse));
    }
    Tensor::matrix(frames, symbols, data).unwrap()
}

/// Learner wrapper that records what crosses the learner interface.
/// Destructuring the batch and its samples exhaustively means this stops
/// compiling if either type ever grows a field such as a task label.
pub struct Audit<L> {
    pub inner: L,
    pub batches: usize,
    pub samples: usize,
    pub duplicate_batches: usize,
    pub duplicate_samples: usize,
    seen_batches: std::collections::HashSet<Vec<u64>>,
    seen_samples: std::collections::HashSet<Vec<u64>>,
}

fn fingerprint(sample: &Sample<f64>) -> Vec<u64> {
    let Sample { frames, targets } = sample;
    let mut key: Vec<u64> = targets.iter().map(|&t| t as u64).collect();
    key.push(u64::MAX);
    key.extend(frames.data().iter().map(|v| v.to_bits()));
    key
}

impl<L> Audit<L> {
    pub fn new(inner: L) -> Self {
        Audit {
            inner,
            batches: 0,
            samples: 0,
            duplicate_batches: 0,
            duplicate_samples: 0,
            seen_batches: Default::default(),
            seen_samples: Default::default(),
        }
    }
}

impl<L: aos::learner::Learner<f64>> aos::learner::Learner<f64> for Audit<L> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn step(&mut self, batch: aos::datastream::LearnerBatch<f64>) -> aos::Result<()> {
        let aos::datastream::LearnerBatch { samples, frames, tokens } = &batch;
        assert_eq!(*frames, samples.iter().map(Sample::num_frames).sum::<usize>());
        assert_eq!(*tokens, samples.iter().map(Sample::num_tokens).sum::<usize>());
        let mut batch_key = Vec::new();
        for s in samples {
            let key = fingerprint(s);
            batch_key.extend(&key);
            if !self.seen_samples.insert(key) {
                self.duplicate_samples += 1;
            }
        }
        if !self.seen_batches.insert(batch_key) {
            self.duplicate_batches += 1;
        }
        self.batches += 1;
        self.samples += samples.len();
        self.inner.step(batch)
    }

    fn inference_params(&self) -> &ParamSet<f64> {
        self.inner.inference_params()
    }
}
