use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aos::harness::cache::{data_dir, dataset_archive, load_or_pretrain, theta0_archive};
use aos::harness::{report, run, sweep, MethodConfig, PretrainConfig, RunConfig, RunRecord, RunStatus, StreamKind, Table, Workspace};
use aos::metrics::task_error;
use aos::seqmodel::ModelConfig;
use aos::{Error, Result};

/// Online continual learning by weight averaging, on a synthetic accent stream.
#[derive(Parser)]
#[command(name = "aos", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the initial model on T₀ (or load it from the cache) and report its errors.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        /// Also write the initial model to DIR/theta0.{bin,manifest}.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one learner over the stream and write metrics, summary and checkpoint.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        method: MethodArgs,
        /// Output directory [default: runs/<method>-<stream>-s<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate every N stream batches (0: only at task boundaries).
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
    },
    /// Grid search on the test experiment, ranked by weighted AWER (T₀ weighted 2:1).
    Sweep {
        #[arg(long, default_value = "test")]
        stream: StreamKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        grid: GridArgs,
        /// Write leaderboard.csv and sweep.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate run records (record.json files or run directories).
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Write the table as CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write every generated utterance as a flat binary archive with manifest.
    ExportData {
        #[command(flatten)]
        data: DataArgs,
        /// Output directory [default: the data cache directory].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value = "seq1")]
    stream: StreamKind,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct MethodArgs {
    /// aos, ft, er, ogem, uoe or ewc.
    #[arg(long, default_value = "aos")]
    method: String,
    /// Encoder plasticity (aos).
    #[arg(long)]
    tau: Option<f64>,
    /// Decoder plasticity (aos).
    #[arg(long)]
    tau2: Option<f64>,
    /// Distillation weight (aos).
    #[arg(long)]
    lambda: Option<f64>,
    /// SGD learning rate.
    #[arg(long)]
    alpha: Option<f64>,
    /// Memory size in utterances (er, ogem).
    #[arg(long)]
    memory: Option<usize>,
    /// Replay loss weight (er).
    #[arg(long)]
    weight_er: Option<f64>,
    /// Penalty strength (ewc).
    #[arg(long)]
    lambda_ewc: Option<f64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value = "aos")]
    method: String,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    tau2: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    memory: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_ewc: Vec<f64>,
}

fn not_for(flag: &str, method: &str) -> Error {
    Error::InvalidConfig(format!("--{flag} does not apply to method `{method}`"))
}

impl MethodArgs {
    fn build(&self) -> Result<MethodConfig> {
        let mut m = MethodConfig::default_for(&self.method)?;
        let name = self.method.as_str();
        if let MethodConfig::Aos(a) = &mut m {
            set(&mut a.tau, self.tau);
            set(&mut a.tau2, self.tau2);
            set(&mut a.lambda, self.lambda);
        } else {
            for (flag, given) in [("tau", self.tau), ("tau2", self.tau2), ("lambda", self.lambda)] {
                if given.is_some() {
                    return Err(not_for(flag, name));
                }
            }
        }
        match &mut m {
            MethodConfig::Er(r) | MethodConfig::Ogem(r) => {
                set(&mut r.memory, self.memory);
                if self.weight_er.is_some() && name != "er" {
                    return Err(not_for("weight-er", name));
                }
                set(&mut r.weight, self.weight_er);
            }
            _ if self.memory.is_some() => return Err(not_for("memory", name)),
            _ if self.weight_er.is_some() => return Err(not_for("weight-er", name)),
            _ => {}
        }
        match &mut m {
            MethodConfig::Ewc(e) => set(&mut e.lambda_ewc, self.lambda_ewc),
            _ if self.lambda_ewc.is_some() => return Err(not_for("lambda-ewc", name)),
            _ => {}
        }
        if let Some(alpha) = self.alpha {
            *alpha_of(&mut m) = alpha;
        }
        m.validate()?;
        Ok(m)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn alpha_of(m: &mut MethodConfig) -> &mut f64 {
    match m {
        MethodConfig::Aos(a) => &mut a.alpha,
        MethodConfig::Ft(s) | MethodConfig::Uoe(s) => &mut s.alpha,
        MethodConfig::Er(r) | MethodConfig::Ogem(r) => &mut r.sgd.alpha,
        MethodConfig::Ewc(e) => &mut e.sgd.alpha,
    }
}

impl GridArgs {
    /// Cartesian product of the given values; empty lists keep the default.
    fn build(&self) -> Result<Vec<MethodConfig>> {
        let opt = |v: &[f64]| -> Vec<Option<f64>> {
            if v.is_empty() {
                vec![None]
            } else {
                v.iter().copied().map(Some).collect()
            }
        };
        let (mut taus, mut lambdas, tau2s) = (opt(&self.tau), opt(&self.lambda), opt(&self.tau2));
        if self.method == "aos" && self.tau.is_empty() && self.lambda.is_empty() && self.tau2.is_empty() {
            taus = vec![Some(1.0), Some(2.0), Some(4.0)];
            lambdas = vec![Some(0.0), Some(0.1), Some(0.3)];
        }
        let memories: Vec<Option<usize>> = if self.memory.is_empty() {
            vec![None]
        } else {
            self.memory.iter().copied().map(Some).collect()
        };
        let mut grid = Vec::new();
        for &tau in &taus {
            for &lambda in &lambdas {
                for &tau2 in &tau2s {
                    for &alpha in &opt(&self.alpha) {
                        for &memory in &memories {
                            for &lambda_ewc in &opt(&self.lambda_ewc) {
                                let args = MethodArgs {
                                    method: self.method.clone(),
                                    tau,
                                    tau2,
                                    lambda,
                                    alpha,
                                    memory,
                                    weight_er: None,
                                    lambda_ewc,
                                };
                                grid.push(args.build()?);
                            }
                        }
                    }
                }
            }
        }
        Ok(grid)
    }
}

fn workspace(stream: StreamKind, seed: u64) -> Result<Workspace> {
    Workspace::new(stream.spec(seed), ModelConfig::default())
}

fn initial_model(ws: &Workspace, seed: u64) -> Result<aos::harness::Pretrained> {
    let dir = data_dir();
    let (theta0, cached) = load_or_pretrain(ws, &PretrainConfig::default(), seed, &dir)?;
    if !cached {
        eprintln!("trained initial model, cached in {}", dir.display());
    }
    Ok(theta0)
}

fn load_record(path: &Path) -> Result<RunRecord> {
    let file = if path.is_dir() { path.join("record.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&fs::read_to_string(&file)?)?)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pretrain { data, out } => {
            let ws = workspace(data.stream, data.seed)?;
            let theta0 = initial_model(&ws, data.seed)?;
            let val = aos::datastream::HeldOut {
                task_id: ws.spec.initial.task_id,
                utterances: ws.initial.validation.clone(),
            };
            let test = aos::datastream::HeldOut {
                task_id: ws.spec.initial.task_id,
                utterances: ws.initial.test.clone(),
            };
            println!(
                "initial model: F0={} W0={} validation TER={:.4} test TER={:.4}",
                theta0.frames,
                theta0.tokens,
                task_error(&ws.model, &theta0.params, &val)?,
                task_error(&ws.model, &theta0.params, &test)?,
            );
            if let Some(dir) = out {
                theta0_archive(&theta0).write(&dir.join("theta0"))?;
            }
        }
        Command::Run {
            data,
            method,
            out,
            eval_every,
        } => {
            let method = method.build()?;
            let mut config = RunConfig::new(method, data.stream, data.seed);
            config.eval_every = eval_every;
            config.validate()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from("runs").join(format!("{}-{}-s{}", config.method.method(), data.stream, data.seed))
            });
            let ws = workspace(data.stream, data.seed)?;
            let theta0 = initial_model(&ws, data.seed)?;
            let record = run(&config, &ws, &theta0, Some(&out))?;
            print!("{}", report(std::slice::from_ref(&record))?.render_text());
            println!("wrote {}", out.display());
            if let RunStatus::Failed { step, error } = &record.status {
                eprintln!("run failed at step {step}: {error}");
                return Ok(ExitCode::from(3));
            }
        }
        Command::Sweep { stream, seed, grid, out } => {
            let candidates = grid.build()?;
            let base = RunConfig::new(candidates[0].clone(), stream, seed);
            base.validate()?;
            let ws = workspace(stream, seed)?;
            let theta0 = initial_model(&ws, seed)?;
            let result = sweep(&base, &candidates, &ws, &theta0)?;
            println!("{:<28} {:>9} {:>9} {:>9} {:>9}", "config", "weighted", "T0", "new", "AWER");
            for e in &result.leaderboard {
                println!(
                    "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    e.label, e.weighted_awer, e.initial_task_error, e.new_task_error, e.awer
                );
            }
            println!("best: {}", result.best.label());
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&result)?)?;
                let mut w = csv::Writer::from_path(dir.join("leaderboard.csv"))?;
                w.write_record(["rank", "config", "weighted_awer", "initial_task_error", "new_task_error", "awer"])?;
                for (i, e) in result.leaderboard.iter().enumerate() {
                    w.write_record([
                        (i + 1).to_string(),
                        e.label.clone(),
                        e.weighted_awer.to_string(),
                        e.initial_task_error.to_string(),
                        e.new_task_error.to_string(),
                        e.awer.to_string(),
                    ])?;
                }
                w.flush()?;
            }
        }
        Command::Report { records, out } => {
            let records: Vec<RunRecord> = records.iter().map(|p| load_record(p)).collect::<Result<_>>()?;
            let table: Table = report(&records)?;
            print!("{}", table.render_text());
            if let Some(path) = out {
                table.write_csv(&path)?;
            }
        }
        Command::ExportData { data, out } => {
            let ws = workspace(data.stream, data.seed)?;
            let dir = out.unwrap_or_else(data_dir);
            let base = dir.join(format!("dataset-{}-s{}", data.stream, data.seed));
            dataset_archive(&ws.spec, &ws.initial, &ws.stream(), &ws.eval_sets).write(&base)?;
            println!("wrote {}.{{bin,manifest}}", base.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
