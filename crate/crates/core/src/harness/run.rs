use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{pretrain, PretrainConfig, Pretrained};
use crate::aos::{AosConfig, AosLearner, AosState};
use crate::baselines::{EwcConfig, EwcLearner, FtLearner, ReplayConfig, ReplayLearner, SgdConfig, UoeLearner};
use crate::datastream::{stream_rng, Batch, HeldOut, InitialDataset, StreamSpec, World};
use crate::error::{Error, Result};
use crate::io::Archive;
use crate::learner::{Checkpoint, Learner};
use crate::metrics::{evaluate, mean, EvalReport};
use crate::numcore::ParamSet;
use crate::seqmodel::{ModelConfig, SeqModel};

const TAG_LEARNER: u64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Seq1,
    Seq2,
    Test,
}

impl StreamKind {
    pub fn spec(self, seed: u64) -> StreamSpec {
        match self {
            StreamKind::Seq1 => StreamSpec::seq1(seed),
            StreamKind::Seq2 => StreamSpec::seq2(seed),
            StreamKind::Test => StreamSpec::test_experiment(seed),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::Seq1 => "seq1",
            StreamKind::Seq2 => "seq2",
            StreamKind::Test => "test",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq1" => Ok(StreamKind::Seq1),
            "seq2" => Ok(StreamKind::Seq2),
            "test" => Ok(StreamKind::Test),
            _ => Err(Error::InvalidConfig(format!("unknown stream `{s}` (expected seq1, seq2 or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodConfig {
    Aos(AosConfig),
    Ft(SgdConfig),
    Er(ReplayConfig),
    Ogem(ReplayConfig),
    Uoe(SgdConfig),
    Ewc(EwcConfig),
}

impl MethodConfig {
    /// Default settings for a method name (`aos`, `ft`, `er`, `ogem`, `uoe`, `ewc`).
    pub fn default_for(name: &str) -> Result<MethodConfig> {
        Ok(match name {
            "aos" => MethodConfig::Aos(AosConfig::default()),
            "ft" => MethodConfig::Ft(SgdConfig::default()),
            "er" => MethodConfig::Er(ReplayConfig::default()),
            "ogem" => MethodConfig::Ogem(ReplayConfig::default()),
            "uoe" => MethodConfig::Uoe(SgdConfig::default()),
            "ewc" => MethodConfig::Ewc(EwcConfig::default()),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown method `{name}` (expected aos, ft, er, ogem, uoe or ewc)"
                )))
            }
        })
    }

    pub fn method(&self) -> &'static str {
        match self {
            MethodConfig::Aos(_) => "aos",
            MethodConfig::Ft(_) => "ft",
            MethodConfig::Er(_) => "er",
            MethodConfig::Ogem(_) => "ogem",
            MethodConfig::Uoe(_) => "uoe",
            MethodConfig::Ewc(_) => "ewc",
        }
    }

    /// Row label for reports, e.g. `aos(1,0.1,1)` or `er(M=200)`.
    pub fn label(&self) -> String {
        match self {
            MethodConfig::Aos(a) => format!("aos({},{},{})", a.tau, a.lambda, a.tau2),
            MethodConfig::Er(r) | MethodConfig::Ogem(r) => format!("{}(M={})", self.method(), r.memory),
            MethodConfig::Ewc(e) => format!("ewc(lambda={})", e.lambda_ewc),
            _ => self.method().to_string(),
        }
    }

    pub fn memory(&self) -> Option<usize> {
        match self {
            MethodConfig::Er(r) | MethodConfig::Ogem(r) => Some(r.memory),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Aos(a) => a.validate(),
            MethodConfig::Ft(s) | MethodConfig::Uoe(s) => s.validate(),
            MethodConfig::Er(r) | MethodConfig::Ogem(r) => r.sgd.validate(),
            MethodConfig::Ewc(e) => e.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: MethodConfig,
    pub stream: StreamKind,
    pub seed: u64,
    /// Evaluate every this many batches (0 disables the periodic cadence).
    pub eval_every: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl RunConfig {
    pub fn new(method: MethodConfig, stream: StreamKind, seed: u64) -> Self {
        RunConfig {
            method,
            stream,
            seed,
            eval_every: 100,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }

    pub fn spec(&self) -> StreamSpec {
        self.stream.spec(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.model.validate()?;
        let spec = self.spec();
        spec.validate()?;
        if spec.d_in != self.model.d_in || spec.vocab != self.model.vocab {
            return Err(Error::InvalidConfig("model input size or vocabulary does not match the stream".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { step: usize, error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskColumn {
    pub task_id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    /// Tasks in column order: T₀ then stream order.
    pub tasks: Vec<TaskColumn>,
    /// The initial model evaluated on every task.
    pub initial: EvalReport,
    /// Evaluations of the inference model, ordered by step.
    pub reports: Vec<EvalReport>,
    pub steps: usize,
    pub status: RunStatus,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&EvalReport> {
        self.reports.last()
    }

    /// Errors of the last evaluation in column order (`None` for tasks not yet seen).
    pub fn final_row(&self) -> Vec<Option<f64>> {
        let last = self.last();
        self.tasks
            .iter()
            .map(|t| last.and_then(|r| r.per_task_error.get(&t.task_id).copied()))
            .collect()
    }

    pub fn final_awer(&self) -> Option<f64> {
        self.last().map(|r| r.awer)
    }

    pub fn initial_task_error(&self) -> Option<f64> {
        let t0 = self.tasks.first()?.task_id;
        self.initial.per_task_error.get(&t0).copied()
    }

    pub fn final_initial_task_error(&self) -> Option<f64> {
        let t0 = self.tasks.first()?.task_id;
        self.last()?.per_task_error.get(&t0).copied()
    }
}

/// Data shared by every run on one stream and seed.
pub struct Workspace {
    pub spec: StreamSpec,
    pub model: SeqModel,
    pub initial: InitialDataset,
    pub eval_sets: Vec<HeldOut>,
    world: World,
}

impl Workspace {
    pub fn new(spec: StreamSpec, model: ModelConfig) -> Result<Self> {
        let world = World::new(&spec)?;
        Ok(Workspace {
            model: SeqModel::new(model)?,
            initial: world.initial_dataset(),
            eval_sets: world.eval_sets(),
            spec,
            world,
        })
    }

    /// A fresh copy of the stream; each run consumes its own.
    pub fn stream(&self) -> Vec<Batch<f64>> {
        self.world.stream()
    }

    pub fn columns(&self) -> Vec<TaskColumn> {
        self.spec
            .all_tasks()
            .map(|t| TaskColumn {
                task_id: t.task_id,
                name: t.name.clone(),
            })
            .collect()
    }

    pub fn pretrain(&self, config: &PretrainConfig, seed: u64) -> Result<Pretrained> {
        pretrain(&self.model, &self.initial, config, seed)
    }
}

/// Builds the configured learner starting from θ₀.
pub fn build_learner(
    method: &MethodConfig,
    ws: &Workspace,
    theta0: &Pretrained,
    seed: u64,
) -> Result<Box<dyn Learner<f64>>> {
    method.validate()?;
    let model = ws.model.clone();
    let params = theta0.params.clone();
    let rng = stream_rng(seed, &[TAG_LEARNER]);
    Ok(match method {
        MethodConfig::Aos(c) => Box::new(AosLearner::new(
            model,
            c.clone(),
            AosState::new(params, theta0.frames, theta0.tokens),
        )?),
        MethodConfig::Ft(c) => Box::new(FtLearner::new(model, *c, params)?),
        MethodConfig::Uoe(c) => Box::new(UoeLearner::new(model, *c, params)?),
        MethodConfig::Er(c) => Box::new(ReplayLearner::er(model, *c, params, rng)?),
        MethodConfig::Ogem(c) => Box::new(ReplayLearner::ogem(model, *c, params, rng)?),
        MethodConfig::Ewc(c) => {
            let n = c.fisher_samples.min(ws.initial.train.len());
            let fisher_data: Vec<_> = ws.initial.train[..n].iter().map(|u| u.sample.clone()).collect();
            Box::new(EwcLearner::new(model, *c, params, &fisher_data)?)
        }
    })
}

/// Outcome of feeding a stream to a learner.
pub struct Driven {
    pub initial: EvalReport,
    pub reports: Vec<EvalReport>,
    pub steps: usize,
    pub failure: Option<(usize, Error)>,
}

/// Feeds every batch to `learner` exactly once, in order, evaluating at step 0,
/// every `eval_every` batches, after the last batch of each task and at the
/// end. Task ids are read here for evaluation bookkeeping only; the learner
/// receives unlabeled batches. `on_report` sees each evaluation as it happens.
pub fn drive<L: Learner<f64> + ?Sized>(
    learner: &mut L,
    ws: &Workspace,
    theta0: &Pretrained,
    stream: Vec<Batch<f64>>,
    eval_every: usize,
    on_report: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<Driven> {
    let all_tasks = ws.spec.task_order();
    let t0 = ws.spec.initial.task_id;
    let initial = evaluate(&ws.model, &theta0.params, &ws.eval_sets, &all_tasks, 0)?;
    let mut seen = vec![t0];
    // error of each completed task when it was completed
    let mut at_completion = BTreeMap::from([(t0, initial.per_task_error[&t0])]);
    let mut reports = Vec::new();

    // `completed` names a task whose last batch was just processed
    let mut record = |params: &ParamSet<f64>, step: usize, seen: &[usize], completed: Option<usize>| -> Result<()> {
        let mut r = evaluate(&ws.model, params, &ws.eval_sets, seen, step)?;
        if let Some(task) = completed {
            at_completion.insert(task, r.per_task_error[&task]);
        }
        r.forgetting_t0 = Some(r.per_task_error[&t0] - initial.per_task_error[&t0]);
        r.bwt = Some(-mean(at_completion.iter().map(|(t, e0)| r.per_task_error[t] - e0)));
        on_report(&r)?;
        reports.push(r);
        Ok(())
    };

    record(learner.inference_params(), 0, &seen, None)?;
    let total = stream.len();
    let mut batches = stream.into_iter().peekable();
    let mut step = 0;
    let mut failure = None;
    while let Some(batch) = batches.next() {
        let task = batch.task_id();
        if !seen.contains(&task) {
            seen.push(task);
        }
        if let Err(e) = learner.step(batch.into_learner()) {
            failure = Some((step, e));
            break;
        }
        step += 1;
        let boundary = batches.peek().is_none_or(|b| b.task_id() != task);
        let periodic = eval_every > 0 && step % eval_every == 0;
        if boundary || periodic || step == total {
            record(learner.inference_params(), step, &seen, boundary.then_some(task))?;
        }
    }
    drop(record);
    Ok(Driven {
        initial,
        reports,
        steps: step,
        failure,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Serialize)]
struct MetricsLine<'a> {
    method: &'a str,
    label: &'a str,
    stream: &'a str,
    seed: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Runs one learner over the stream. With `out`, writes `metrics.jsonl`
/// (one evaluation per line, written as the run progresses), `record.json`,
/// `summary.csv` and a checkpoint. A learner failure yields a truncated record
/// marked failed.
pub fn run(config: &RunConfig, ws: &Workspace, theta0: &Pretrained, out: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    if ws.spec != config.spec() || ws.model.config() != &config.model {
        return Err(Error::InvalidConfig("workspace was built for a different stream or model".into()));
    }
    let start = Instant::now();
    let mut learner = build_learner(&config.method, ws, theta0, config.seed)?;

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let label = config.method.label();
    let mut on_report = |r: &EvalReport| -> Result<()> {
        if let Some(f) = metrics.as_mut() {
            let line = MetricsLine {
                method: config.method.method(),
                label: &label,
                stream: config.stream.as_str(),
                seed: config.seed,
                report: r,
            };
            serde_json::to_writer(&mut *f, &line)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    };
    let driven = drive(&mut learner, ws, theta0, ws.stream(), config.eval_every, &mut on_report)?;

    let mut record = RunRecord {
        config: config.clone(),
        tasks: ws.columns(),
        initial: driven.initial,
        reports: driven.reports,
        steps: driven.steps,
        status: match &driven.failure {
            None => RunStatus::Completed,
            Some((step, e)) => RunStatus::Failed {
                step: *step,
                error: e.to_string(),
            },
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    if let Some(dir) = out {
        let base = dir.join("checkpoint");
        checkpoint_archive(&learner.checkpoint(), config).write(&base)?;
        record.checkpoint = Some(base);
        fs::write(dir.join("record.json"), serde_json::to_string_pretty(&record)?)?;
        super::report::write_summary_csv(&dir.join("summary.csv"), std::slice::from_ref(&record))?;
    }
    Ok(record)
}

pub fn checkpoint_archive(cp: &Checkpoint<f64>, config: &RunConfig) -> Archive {
    let mut a = Archive::new("checkpoint");
    a.meta.insert("method".into(), config.method.method().into());
    a.meta.insert("stream".into(), config.stream.as_str().into());
    a.meta.insert("seed".into(), config.seed.to_string());
    for (k, v) in &cp.counters {
        a.meta.insert(k.clone(), v.to_string());
    }
    for (name, params) in &cp.params {
        a.push_params(name, params);
    }
    a
}
