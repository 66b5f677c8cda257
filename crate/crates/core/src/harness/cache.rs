use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::Workspace;
use super::{PretrainConfig, Pretrained};
use crate::datastream::{Batch, HeldOut, InitialDataset, StreamSpec};
use crate::error::{Error, Result};
use crate::io::Archive;
use crate::seqmodel::ModelConfig;

/// Environment variable naming the data cache directory.
pub const DATA_DIR_ENV: &str = "AOS_DATA_DIR";
const DEFAULT_DATA_DIR: &str = "aos-data";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Serialize)]
struct InitialKey<'a> {
    spec: &'a StreamSpec,
    model: &'a ModelConfig,
    pretrain: &'a PretrainConfig,
    seed: u64,
}

/// Cache file stem for θ₀. Stream tasks do not affect the initial task, so
/// both canonical sequences share an entry for a given seed.
pub fn theta0_key(spec: &StreamSpec, model: &ModelConfig, pretrain: &PretrainConfig, seed: u64) -> Result<String> {
    let mut spec = spec.clone();
    spec.stream_tasks.clear();
    let json = serde_json::to_string(&InitialKey {
        spec: &spec,
        model,
        pretrain,
        seed,
    })?;
    Ok(format!("theta0-{:016x}", fnv1a(json.as_bytes())))
}

pub fn theta0_archive(theta0: &Pretrained) -> Archive {
    let mut a = Archive::new("theta0");
    a.meta.insert("frames".into(), theta0.frames.to_string());
    a.meta.insert("tokens".into(), theta0.tokens.to_string());
    a.push_params("params", &theta0.params);
    a
}

pub fn read_theta0(base: &Path) -> Result<Pretrained> {
    let a = Archive::read(base)?;
    if a.kind != "theta0" {
        return Err(Error::Format(format!("expected an initial-model archive, found `{}`", a.kind)));
    }
    Ok(Pretrained {
        params: a.params("params")?,
        frames: a.meta_usize("frames")?,
        tokens: a.meta_usize("tokens")?,
    })
}

/// Loads θ₀ from `dir` if a matching entry exists, otherwise pretrains and stores it.
/// Returns the model and whether it came from the cache.
pub fn load_or_pretrain(ws: &Workspace, pretrain: &PretrainConfig, seed: u64, dir: &Path) -> Result<(Pretrained, bool)> {
    let base = dir.join(theta0_key(&ws.spec, ws.model.config(), pretrain, seed)?);
    if base.with_extension("manifest").exists() {
        let theta0 = read_theta0(&base)?;
        let fresh = ws.model.init_params::<f64>(0);
        theta0.params.check_compatible(&fresh)?;
        if theta0.frames != ws.initial.frames || theta0.tokens != ws.initial.tokens {
            return Err(Error::Format(format!("cached initial model {} does not match the data", base.display())));
        }
        return Ok((theta0, true));
    }
    let theta0 = ws.pretrain(pretrain, seed)?;
    theta0_archive(&theta0).write(&base)?;
    Ok((theta0, false))
}

/// Every generated utterance: `initial.train/…`, `initial.validation/…`,
/// `initial.test/…`, `stream/…` (with a `batch` attribute) and `eval/<task>/…`.
pub fn dataset_archive(spec: &StreamSpec, initial: &InitialDataset, stream: &[Batch<f64>], eval: &[HeldOut]) -> Archive {
    let mut a = Archive::new("dataset");
    a.meta.insert("seed".into(), spec.seed.to_string());
    a.meta.insert("initial_frames".into(), initial.frames.to_string());
    a.meta.insert("initial_tokens".into(), initial.tokens.to_string());
    a.meta.insert("stream_batches".into(), stream.len().to_string());
    for (split, utts) in [
        ("initial.train", &initial.train),
        ("initial.validation", &initial.validation),
        ("initial.test", &initial.test),
    ] {
        for (i, u) in utts.iter().enumerate() {
            a.push_utterance(format!("{split}/{i:06}"), u, &[]);
        }
    }
    let mut i = 0;
    for (b, batch) in stream.iter().enumerate() {
        for u in &batch.utterances {
            a.push_utterance(format!("stream/{i:06}"), u, &[("batch", b.to_string())]);
            i += 1;
        }
    }
    for set in eval {
        for (i, u) in set.utterances.iter().enumerate() {
            a.push_utterance(format!("eval/{}/{i:06}", set.task_id), u, &[]);
        }
    }
    a
}
