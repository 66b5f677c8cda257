//! Synthetic task stream: an initial task with a large training set, then
//! smaller tasks presented as single-speaker batches sorted by task and
//! speaker.
//!
//! Tasks ("accents") share one token codebook and differ by an orthogonal
//! mixing of the input space, each a random perturbation of a common base
//! mixing; speakers add a bounded offset.

mod rng;

pub use rng::{derive_seed, splitmix64, stream_rng};

use rand::Rng;
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seqmodel::{Sample, Utterance, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub utterances: usize,
    pub speakers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    /// The initial task T₀ the model is pretrained on.
    pub initial: TaskSpec,
    /// Stream tasks, in presentation order.
    pub stream_tasks: Vec<TaskSpec>,
    pub batch_size_cap: usize,
    /// Inclusive bounds on frames per utterance.
    pub frame_len_range: (usize, usize),
    /// Inclusive bounds on tokens per utterance, end-of-sequence included.
    pub target_len_range: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
    pub d_in: usize,
    pub vocab: usize,
    /// Frames occupied by each token: `frames_per_token − 1` signal frames then one silent frame.
    pub frames_per_token: usize,
    /// Magnitude of the perturbation that gives each task, T₀ included, its own mixing.
    pub task_shift: f64,
    /// Upper bound on the norm of a speaker offset (at most 1.0).
    pub speaker_scale: f64,
    pub initial_validation: usize,
    /// Held-out utterances per task for evaluation and for validation.
    pub eval_per_task: usize,
}

pub const TASK_NAMES: [&str; 6] = ["US", "ENG", "AUS", "IND", "SCO", "IRE"];

impl StreamSpec {
    fn desk_scale(seed: u64, order: &[usize]) -> StreamSpec {
        StreamSpec {
            initial: TaskSpec {
                task_id: 0,
                name: TASK_NAMES[0].into(),
                utterances: 2000,
                speakers: 10,
            },
            stream_tasks: order
                .iter()
                .map(|&t| TaskSpec {
                    task_id: t,
                    name: TASK_NAMES[t].into(),
                    utterances: 400,
                    speakers: 10,
                })
                .collect(),
            batch_size_cap: 8,
            frame_len_range: (19, 24),
            target_len_range: (3, 6),
            noise_std: 0.05,
            seed,
            d_in: 8,
            vocab: 12,
            frames_per_token: 3,
            task_shift: 0.6,
            speaker_scale: 0.5,
            initial_validation: 200,
            eval_per_task: 100,
        }
    }

    /// ENG → AUS → IND → SCO → IRE after US.
    pub fn seq1(seed: u64) -> StreamSpec {
        Self::desk_scale(seed, &[1, 2, 3, 4, 5])
    }

    /// IRE → IND → AUS → ENG → SCO after US.
    pub fn seq2(seed: u64) -> StreamSpec {
        Self::desk_scale(seed, &[5, 3, 2, 1, 4])
    }

    /// Small hyper-parameter search stream: two accents absent from the main
    /// streams, about 5% of the main stream's utterances.
    pub fn test_experiment(seed: u64) -> StreamSpec {
        let mut spec = Self::desk_scale(seed, &[]);
        spec.stream_tasks = vec![
            TaskSpec {
                task_id: 6,
                name: "NZL".into(),
                utterances: 50,
                speakers: 3,
            },
            TaskSpec {
                task_id: 7,
                name: "WAL".into(),
                utterances: 50,
                speakers: 3,
            },
        ];
        spec
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        std::iter::once(&self.initial).chain(&self.stream_tasks)
    }

    /// Task ids in column order: T₀ first, then stream order.
    pub fn task_order(&self) -> Vec<usize> {
        self.all_tasks().map(|t| t.task_id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size_cap == 0 {
            return bad("batch size cap must be >= 1".into());
        }
        let (fmin, fmax) = self.frame_len_range;
        let (wmin, wmax) = self.target_len_range;
        if wmin < 1 || wmin > wmax || fmin > fmax {
            return bad("empty length range".into());
        }
        if fmin < 2 * wmax + 1 || fmin < self.frames_per_token * wmax {
            return bad(format!(
                "frame range {fmin}..={fmax} too short for {wmax} tokens at {} frames each",
                self.frames_per_token
            ));
        }
        if self.frames_per_token < 2 {
            return bad("frames per token must be >= 2".into());
        }
        if self.vocab < 2 || self.d_in < 2 {
            return bad("vocabulary and input dimension must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.speaker_scale) {
            return bad("speaker offsets must be bounded by 1.0".into());
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return bad("noise std must be finite and non-negative".into());
        }
        if self
            .stream_tasks
            .iter()
            .any(|t| t.utterances >= self.initial.utterances)
        {
            return bad("the initial task must be strictly the largest".into());
        }
        let mut ids: Vec<usize> = self.task_order();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.stream_tasks.len() + 1 {
            return bad("task ids must be distinct".into());
        }
        for t in self.all_tasks() {
            if t.speakers == 0 || t.speakers > t.utterances.max(1) {
                return bad(format!("task {} needs 1..=utterances speakers", t.task_id));
            }
        }
        Ok(())
    }
}

/// One stream element: utterances of a single speaker, with exact frame and token totals.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub utterances: Vec<Utterance<T>>,
    pub frames: usize,
    pub tokens: usize,
}

/// What a learner is handed: samples and totals, no task or speaker labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerBatch<T> {
    pub samples: Vec<Sample<T>>,
    /// Total frames `F`.
    pub frames: usize,
    /// Total target tokens `W`.
    pub tokens: usize,
}

impl<T: crate::Scalar> LearnerBatch<T> {
    pub fn new(samples: Vec<Sample<T>>) -> Self {
        let frames = samples.iter().map(Sample::num_frames).sum();
        let tokens = samples.iter().map(Sample::num_tokens).sum();
        LearnerBatch {
            samples,
            frames,
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl<T: crate::Scalar> Batch<T> {
    pub fn task_id(&self) -> usize {
        self.utterances[0].task_id
    }

    pub fn speaker_id(&self) -> usize {
        self.utterances[0].speaker_id
    }

    /// Drops the labels, handing over ownership of the samples.
    pub fn into_learner(self) -> LearnerBatch<T> {
        LearnerBatch {
            frames: self.frames,
            tokens: self.tokens,
            samples: self.utterances.into_iter().map(|u| u.sample).collect(),
        }
    }
}

/// Geometry of one task: its input mixing and the offsets of its speakers.
#[derive(Clone, Debug)]
pub struct TaskGenerator {
    pub task_id: usize,
    /// Orthogonal `d_in × d_in`.
    pub mixing: Tensor<f64>,
    pub speaker_offsets: Vec<Vec<f64>>,
}

/// Shared token codebook plus per-task generators.
#[derive(Clone, Debug)]
pub struct World {
    spec: StreamSpec,
    prototypes: Tensor<f64>,
    tasks: Vec<TaskGenerator>,
}

#[derive(Clone, Debug)]
pub struct InitialDataset {
    pub train: Vec<Utterance<f64>>,
    pub validation: Vec<Utterance<f64>>,
    pub test: Vec<Utterance<f64>>,
    /// Total frames of the training split (F₀).
    pub frames: usize,
    /// Total target tokens of the training split (W₀).
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct HeldOut {
    pub task_id: usize,
    pub utterances: Vec<Utterance<f64>>,
}

const TAG_CODEBOOK: u64 = 1;
const TAG_BASE: u64 = 2;
const TAG_TASK: u64 = 3;
const TAG_TRAIN: u64 = 10;
const TAG_VALID: u64 = 11;
const TAG_EVAL: u64 = 12;
const TAG_STREAM: u64 = 13;

fn gaussian(rng: &mut Xoshiro256PlusPlus) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthonormalizes the rows of a square matrix (modified Gram-Schmidt).
fn orthonormalize(m: &mut Tensor<f64>) {
    let n = m.rows();
    for i in 0..n {
        for j in 0..i {
            let proj: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            let rj = m.row(j).to_vec();
            for (a, b) in m.row_mut(i).iter_mut().zip(&rj) {
                *a -= proj * b;
            }
        }
        let norm = m.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in m.row_mut(i) {
            *a /= norm;
        }
    }
}

pub fn frobenius_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl World {
    pub fn new(spec: &StreamSpec) -> Result<World> {
        spec.validate()?;
        let d = spec.d_in;

        let mut rng = stream_rng(spec.seed, &[TAG_CODEBOOK]);
        let mut prototypes = Tensor::zeros(vec![spec.vocab, d]);
        for v in 0..spec.vocab {
            let row = prototypes.row_mut(v);
            for x in row.iter_mut() {
                *x = gaussian(&mut rng);
            }
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let scale = (d as f64).sqrt() / norm;
            for x in row.iter_mut() {
                *x *= scale;
            }
        }

        let mut rng = stream_rng(spec.seed, &[TAG_BASE]);
        let mut base = Tensor::zeros(vec![d, d]);
        for x in base.data_mut() {
            *x = gaussian(&mut rng);
        }
        orthonormalize(&mut base);

        let mut tasks = Vec::new();
        for t in spec.all_tasks() {
            let mut rng = stream_rng(spec.seed, &[TAG_TASK, t.task_id as u64]);
            let strength = spec.task_shift * rng.random_range(0.75..1.25);
            let mut r = Tensor::zeros(vec![d, d]);
            for i in 0..d {
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    r.row_mut(i)[j] = delta + strength * gaussian(&mut rng) / (d as f64).sqrt();
                }
            }
            orthonormalize(&mut r);
            let mixing = r.matmul(&base);
            let speaker_offsets = (0..t.speakers)
                .map(|_| {
                    let dir: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
                    let norm = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let mag = spec.speaker_scale * rng.random_range(0.0..1.0);
                    dir.iter().map(|a| a * mag / norm).collect()
                })
                .collect();
            tasks.push(TaskGenerator {
                task_id: t.task_id,
                mixing,
                speaker_offsets,
            });
        }
        for i in 0..tasks.len() {
            for j in 0..i {
                if frobenius_distance(&tasks[i].mixing, &tasks[j].mixing) <= 0.1 {
                    return Err(Error::InvalidConfig(format!(
                        "tasks {} and {} are not separable; raise task_shift",
                        tasks[j].task_id, tasks[i].task_id
                    )));
                }
            }
        }
        Ok(World {
            spec: spec.clone(),
            prototypes,
            tasks,
        })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn task(&self, task_id: usize) -> Option<&TaskGenerator> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    fn utterance(&self, task: &TaskGenerator, speaker: usize, rng: &mut Xoshiro256PlusPlus) -> Utterance<f64> {
        let s = &self.spec;
        let d = s.d_in;
        let lw = rng.random_range(s.target_len_range.0..=s.target_len_range.1);
        let mut targets: Vec<usize> = (0..lw - 1).map(|_| rng.random_range(1..s.vocab)).collect();
        targets.push(EOS);
        let fmin = s.frame_len_range.0.max(s.frames_per_token * lw);
        let lf = rng.random_range(fmin..=s.frame_len_range.1);

        let mixed: Vec<Vec<f64>> = targets
            .iter()
            .map(|&y| {
                let proto = self.prototypes.row(y);
                (0..d)
                    .map(|i| task.mixing.row(i).iter().zip(proto).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        let offset = &task.speaker_offsets[speaker];
        let mut frames = Tensor::zeros(vec![lf, d]);
        for k in 0..lf {
            let (tok, phase) = (k / s.frames_per_token, k % s.frames_per_token);
            let signal = (tok < lw && phase + 1 < s.frames_per_token).then(|| &mixed[tok]);
            for (i, x) in frames.row_mut(k).iter_mut().enumerate() {
                let base = signal.map_or(0.0, |m| m[i]);
                *x = base + offset[i] + s.noise_std * gaussian(rng);
            }
        }
        Utterance {
            sample: Sample { frames, targets },
            speaker_id: speaker,
            task_id: task.task_id,
        }
    }

    /// `n` utterances with speakers drawn uniformly from the task's pool.
    fn held_out(&self, task_id: usize, tag: u64, n: usize) -> Vec<Utterance<f64>> {
        let task = self.task(task_id).expect("known task");
        let mut rng = stream_rng(self.spec.seed, &[tag, task_id as u64]);
        (0..n)
            .map(|_| {
                let spk = rng.random_range(0..task.speaker_offsets.len());
                self.utterance(task, spk, &mut rng)
            })
            .collect()
    }

    /// Speaker-sorted utterances of a task's training data.
    fn speaker_sorted(&self, spec: &TaskSpec, tag: u64) -> Vec<Utterance<f64>> {
        let task = self.task(spec.task_id).expect("known task");
        let mut rng = stream_rng(self.spec.seed, &[tag, spec.task_id as u64]);
        let mut counts = vec![1usize; spec.speakers];
        for _ in spec.speakers..spec.utterances {
            counts[rng.random_range(0..spec.speakers)] += 1;
        }
        let mut out = Vec::with_capacity(spec.utterances);
        for (spk, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.push(self.utterance(task, spk, &mut rng));
            }
        }
        out
    }

    pub fn initial_dataset(&self) -> InitialDataset {
        let train = self.speaker_sorted(&self.spec.initial, TAG_TRAIN);
        let validation = self.held_out(0, TAG_VALID, self.spec.initial_validation);
        let test = self.held_out(0, TAG_EVAL, self.spec.eval_per_task);
        let frames = train.iter().map(|u| u.sample.num_frames()).sum();
        let tokens = train.iter().map(|u| u.sample.num_tokens()).sum();
        InitialDataset {
            train,
            validation,
            test,
            frames,
            tokens,
        }
    }

    pub fn stream(&self) -> Vec<Batch<f64>> {
        let cap = self.spec.batch_size_cap;
        let mut batches = Vec::new();
        for t in &self.spec.stream_tasks {
            let utts = self.speaker_sorted(t, TAG_STREAM);
            let mut current: Vec<Utterance<f64>> = Vec::new();
            for u in utts {
                if current.len() == cap || current.first().is_some_and(|c| c.speaker_id != u.speaker_id) {
                    batches.push(make_batch(std::mem::take(&mut current)));
                }
                current.push(u);
            }
            if !current.is_empty() {
                batches.push(make_batch(current));
            }
        }
        batches
    }

    /// Held-out evaluation set per task, T₀ first.
    pub fn eval_sets(&self) -> Vec<HeldOut> {
        self.spec
            .all_tasks()
            .map(|t| HeldOut {
                task_id: t.task_id,
                utterances: self.held_out(t.task_id, TAG_EVAL, self.spec.eval_per_task),
            })
            .collect()
    }

    /// Held-out validation set per task, T₀ first; disjoint draws from [`World::eval_sets`].
    pub fn validation_sets(&self) -> Vec<HeldOut> {
        self.spec
            .all_tasks()
            .map(|t| {
                let n = if t.task_id == self.spec.initial.task_id {
                    self.spec.initial_validation
                } else {
                    self.spec.eval_per_task
                };
                HeldOut {
                    task_id: t.task_id,
                    utterances: self.held_out(t.task_id, TAG_VALID, n),
                }
            })
            .collect()
    }
}

fn make_batch(utterances: Vec<Utterance<f64>>) -> Batch<f64> {
    let frames = utterances.iter().map(|u| u.sample.num_frames()).sum();
    let tokens = utterances.iter().map(|u| u.sample.num_tokens()).sum();
    Batch {
        utterances,
        frames,
        tokens,
    }
}

pub fn generate_initial_dataset(spec: &StreamSpec) -> Result<InitialDataset> {
    Ok(World::new(spec)?.initial_dataset())
}

pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<Batch<f64>>> {
    Ok(World::new(spec)?.stream())
}

pub fn eval_sets(spec: &StreamSpec) -> Result<Vec<HeldOut>> {
    Ok(World::new(spec)?.eval_sets())
}
