mod common;

use std::process::Command;
use std::sync::OnceLock;

use aos::harness::cache::{dataset_archive, load_or_pretrain, read_theta0, theta0_key};
use aos::harness::{
    aos_grid, build_learner, drive, report, run, sweep, MethodConfig, PretrainConfig, Pretrained, RunConfig,
    RunRecord, RunStatus, StreamKind, Table, Workspace,
};
use aos::aos::aos_default_config;
use aos::datastream::HeldOut;
use aos::io::Archive;
use aos::metrics::task_error;
use aos::seqmodel::ModelConfig;
use common::Audit;

const SEED: u64 = 5;

fn quick_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    }
}

/// Test-experiment workspace with a briefly trained θ₀, shared by the tests below.
fn lab() -> &'static (Workspace, Pretrained) {
    static LAB: OnceLock<(Workspace, Pretrained)> = OnceLock::new();
    LAB.get_or_init(|| {
        let ws = Workspace::new(StreamKind::Test.spec(SEED), ModelConfig::default()).unwrap();
        let theta0 = ws.pretrain(&quick_pretrain(), SEED).unwrap();
        (ws, theta0)
    })
}

fn config(method: &str) -> RunConfig {
    RunConfig::new(MethodConfig::default_for(method).unwrap(), StreamKind::Test, SEED)
}

#[test]
fn every_method_completes_one_step_per_batch() {
    let (ws, theta0) = lab();
    let batches = ws.stream().len();
    for m in ["aos", "ft", "er", "ogem", "uoe", "ewc"] {
        let rec = run(&config(m), ws, theta0, None).unwrap();
        assert_eq!(rec.status, RunStatus::Completed, "{m}");
        assert_eq!(rec.steps, batches, "{m}");
        assert_eq!(rec.reports[0].step, 0);
        assert_eq!(rec.last().unwrap().step, batches);
        let steps: Vec<usize> = rec.reports.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "{m}: {steps:?}");
    }
}

#[test]
fn evaluations_cover_boundaries_and_seen_tasks_only() {
    let (ws, theta0) = lab();
    let stream = ws.stream();
    let boundaries: Vec<usize> = (1..stream.len())
        .filter(|&i| stream[i].task_id() != stream[i - 1].task_id())
        .collect();
    let rec = run(&config("ft"), ws, theta0, None).unwrap();
    for b in &boundaries {
        assert!(rec.reports.iter().any(|r| r.step == *b), "no evaluation at boundary {b}");
    }
    let first = &rec.reports[0];
    assert_eq!(first.per_task_error.keys().copied().collect::<Vec<_>>(), vec![0]);
    assert_eq!(first.forgetting_t0, Some(0.0));
    let last = rec.last().unwrap();
    assert_eq!(last.per_task_error.len(), ws.spec.all_tasks().count());
}

#[test]
fn learners_see_each_unlabeled_batch_once() {
    let (ws, theta0) = lab();
    let expected = ws.stream();
    for m in ["aos", "ft", "er", "ogem", "uoe", "ewc"] {
        let inner = build_learner(&MethodConfig::default_for(m).unwrap(), ws, theta0, SEED).unwrap();
        let mut audit = Audit::new(inner);
        let driven = drive(&mut audit, ws, theta0, ws.stream(), 0, &mut |_| Ok(())).unwrap();
        assert!(driven.failure.is_none());
        assert_eq!(audit.batches, expected.len());
        assert_eq!(audit.samples, expected.iter().map(|b| b.utterances.len()).sum::<usize>());
        assert_eq!((audit.duplicate_batches, audit.duplicate_samples), (0, 0), "{m}");
    }
}

#[test]
fn runs_are_reproducible_and_write_their_outputs() {
    let (ws, theta0) = lab();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = run(&config("er"), ws, theta0, Some(&a)).unwrap();
    let rb = run(&config("er"), ws, theta0, Some(&b)).unwrap();
    assert_eq!(ra.reports, rb.reports);
    for f in ["metrics.jsonl", "summary.csv", "checkpoint.bin", "checkpoint.manifest"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), ra.reports.len());
    let back: RunRecord = serde_json::from_str(&std::fs::read_to_string(a.join("record.json")).unwrap()).unwrap();
    assert_eq!(back.reports, ra.reports);
    assert_eq!(back.config, ra.config);

    let cp = Archive::read(&a.join("checkpoint")).unwrap();
    assert_eq!(cp.kind, "checkpoint");
    let params = cp.params::<f64>("params").unwrap();
    let learner_params = {
        let mut l = build_learner(&ra.config.method, ws, theta0, SEED).unwrap();
        drive(&mut l, ws, theta0, ws.stream(), 0, &mut |_| Ok(())).unwrap();
        l.inference_params().clone()
    };
    assert_eq!(params, learner_params);
}

#[test]
fn aos_checkpoint_keeps_both_models_and_counters() {
    let (ws, theta0) = lab();
    let tmp = tempfile::tempdir().unwrap();
    let rec = run(&config("aos"), ws, theta0, Some(tmp.path())).unwrap();
    let cp = Archive::read(&tmp.path().join("checkpoint")).unwrap();
    let frames: usize = ws.stream().iter().map(|b| b.frames).sum();
    assert_eq!(cp.meta_usize("frames_seen").unwrap(), theta0.frames + frames);
    assert_eq!(cp.meta_usize("step").unwrap(), rec.steps);
    assert!(cp.params::<f64>("final").is_ok() && cp.params::<f64>("adapted").is_ok());
}

#[test]
fn summary_table_round_trips_through_csv() {
    let (ws, theta0) = lab();
    let records: Vec<RunRecord> = ["aos", "ft", "er"]
        .iter()
        .map(|m| run(&config(m), ws, theta0, None).unwrap())
        .collect();
    let table = report(&records).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows[0].method, "initial");
    assert_eq!(table.tasks, vec!["US", "NZL", "WAL"]);
    let best = table.best.unwrap();
    assert!(table.rows[1..].iter().all(|r| r.awer.unwrap() >= table.rows[best].awer.unwrap()));
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.csv");
    table.write_csv(&path).unwrap();
    assert_eq!(Table::read_csv(&path).unwrap(), table);
    assert!(table.render_text().contains('*'));
}

#[test]
fn report_rejects_mixed_streams_and_empty_input() {
    let (ws, theta0) = lab();
    let rec = run(&config("ft"), ws, theta0, None).unwrap();
    let mut other = rec.clone();
    other.config.stream = StreamKind::Seq1;
    assert!(report(&[rec, other]).is_err());
    assert!(report(&[]).is_err());
}

#[test]
fn sweep_ranks_candidates_by_weighted_error() {
    let (ws, theta0) = lab();
    let base = config("aos");
    let single = aos_grid(&aos_default_config(), &[1.0], &[0.1], &[1.0]);
    let one = sweep(&base, &single, ws, theta0).unwrap();
    assert_eq!(one.leaderboard.len(), 1);
    assert_eq!(one.best, single[0]);

    let grid = aos_grid(&aos_default_config(), &[1.0, 4.0], &[0.0, 0.3], &[1.0]);
    assert_eq!(grid.len(), 4);
    let res = sweep(&base, &grid, ws, theta0).unwrap();
    assert_eq!(res.leaderboard.len(), 4);
    assert!(res.leaderboard.windows(2).all(|w| w[0].weighted_awer <= w[1].weighted_awer));
    assert_eq!(res.best, res.leaderboard[0].method);
    for e in &res.leaderboard {
        let expect = (2.0 * e.initial_task_error + e.new_task_error) / 3.0;
        assert!((e.weighted_awer - expect).abs() < 1e-12);
    }
    assert!(sweep(&base, &[], ws, theta0).is_err());
}

#[test]
fn initial_model_is_cached_and_shared_between_sequences() {
    let (ws, _) = lab();
    let tmp = tempfile::tempdir().unwrap();
    let pc = quick_pretrain();
    let (fresh, cached) = load_or_pretrain(ws, &pc, SEED, tmp.path()).unwrap();
    assert!(!cached);
    let (again, cached) = load_or_pretrain(ws, &pc, SEED, tmp.path()).unwrap();
    assert!(cached);
    assert_eq!(fresh, again);

    let model = ModelConfig::default();
    let key = |stream: StreamKind, seed| theta0_key(&stream.spec(seed), &model, &pc, seed).unwrap();
    assert_eq!(key(StreamKind::Seq1, 3), key(StreamKind::Seq2, 3));
    assert_eq!(key(StreamKind::Seq1, 3), key(StreamKind::Test, 3));
    assert_ne!(key(StreamKind::Seq1, 3), key(StreamKind::Seq1, 4));
    let stored = read_theta0(&tmp.path().join(key(StreamKind::Test, SEED))).unwrap();
    assert_eq!(stored, fresh);
}

#[test]
fn exported_dataset_round_trips() {
    let (ws, _) = lab();
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("data");
    let stream = ws.stream();
    dataset_archive(&ws.spec, &ws.initial, &stream, &ws.eval_sets).write(&base).unwrap();
    let a = Archive::read(&base).unwrap();
    let flat: Vec<_> = stream.iter().flat_map(|b| b.utterances.clone()).collect();
    assert_eq!(a.utterances("stream").unwrap(), flat);
    assert_eq!(a.utterances("initial.train").unwrap(), ws.initial.train);
    assert_eq!(a.meta_usize("initial_frames").unwrap(), ws.initial.frames);
    assert_eq!(a.meta_usize("stream_batches").unwrap(), stream.len());
    for set in &ws.eval_sets {
        assert_eq!(a.utterances(&format!("eval/{}", set.task_id)).unwrap(), set.utterances);
    }
}

#[test]
fn default_pretraining_reaches_target_error() {
    let ws = Workspace::new(StreamKind::Seq1.spec(1), ModelConfig::default()).unwrap();
    let theta0 = ws.pretrain(&PretrainConfig::default(), 1).unwrap();
    assert_eq!(theta0.frames, ws.initial.train.iter().map(|u| u.sample.num_frames()).sum::<usize>());
    let held = |utterances: &[aos::seqmodel::Utterance<f64>]| HeldOut {
        task_id: 0,
        utterances: utterances.to_vec(),
    };
    let val = task_error(&ws.model, &theta0.params, &held(&ws.initial.validation)).unwrap();
    let test = task_error(&ws.model, &theta0.params, &held(&ws.initial.test)).unwrap();
    assert!(val < 0.10, "validation error {val}");
    assert!((val - test).abs() < 0.05, "validation {val} vs test {test}");
}

fn cli(args: &[&str], data: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_aos"))
        .args(args)
        .env("AOS_DATA_DIR", data)
        .output()
        .unwrap()
}

#[test]
fn cli_reports_configuration_errors_with_exit_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--method", "ft", "--tau", "2"][..],
        &["run", "--method", "nope"],
        &["run", "--method", "aos", "--tau", "0.5"],
        &["run", "--method", "aos", "--alpha", "-1"],
        &["run", "--stream", "seq9"],
        &["report", "/does/not/exist/record.json"],
    ] {
        let out = cli(args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(std::fs::read_dir(tmp.path()).map_or(true, |mut d| d.next().is_none()));
}

#[test]
fn cli_exports_data_to_the_cache_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["export-data", "--stream", "test", "--seed", "2"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = Archive::read(&tmp.path().join("dataset-test-s2")).unwrap();
    assert_eq!(a.kind, "dataset");
}
