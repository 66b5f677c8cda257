//! Flat binary archives with a plain-text manifest, used for checkpoints,
//! the cached initial model and dataset exports.
//!
//! `<base>.bin` holds the 8-byte magic `AOSFLAT1`, a little-endian `u64` value
//! count, then that many little-endian `f64` values. `<base>.manifest` is UTF-8
//! text, one record per line:
//!
//! ```text
//! aos-archive 1
//! kind checkpoint
//! values 1234
//! meta step 250
//! entry final/enc.0.b offset=0 shape=1x32 group=encoder norm=false
//! ```
//!
//! `offset` counts values from the start of the payload. Names, keys and
//! values never contain whitespace.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::{Group, ParamSet, Tensor};
use crate::scalar::Scalar;
use crate::seqmodel::{Sample, Utterance};

pub const MAGIC: &[u8; 8] = b"AOSFLAT1";
const HEADER: &str = "aos-archive 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub attrs: BTreeMap<String, String>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ArchiveEntry>,
}

pub fn bin_path(base: &Path) -> PathBuf {
    base.with_extension("bin")
}

pub fn manifest_path(base: &Path) -> PathBuf {
    base.with_extension("manifest")
}

fn check_token(s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) || s.contains('=') {
        return Err(Error::Format(format!("invalid archive token `{s}`")));
    }
    Ok(())
}

fn format_shape(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        Archive {
            kind: kind.to_string(),
            ..Archive::default()
        }
    }

    pub fn entry(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Format(format!("archive has no `{key}` field")))?;
        parse_usize(v, key)
    }

    /// Writes `<base>.bin` and `<base>.manifest`.
    pub fn write(&self, base: &Path) -> Result<()> {
        check_token(&self.kind)?;
        let total: usize = self.entries.iter().map(|e| e.data.len()).sum();
        let mut manifest = format!("{HEADER}\nkind {}\nvalues {total}\n", self.kind);
        for (k, v) in &self.meta {
            check_token(k)?;
            check_token(v)?;
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0;
        for e in &self.entries {
            check_token(&e.name)?;
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Format(format!("entry `{}` shape does not match its data", e.name)));
            }
            manifest.push_str(&format!("entry {} offset={offset} shape={}", e.name, format_shape(&e.shape)));
            for (k, v) in &e.attrs {
                check_token(k)?;
                check_token(v)?;
                manifest.push_str(&format!(" {k}={v}"));
            }
            manifest.push('\n');
            offset += e.data.len();
        }

        if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(bin_path(base))?);
        w.write_all(MAGIC)?;
        w.write_all(&(total as u64).to_le_bytes())?;
        for e in &self.entries {
            for v in &e.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        fs::write(manifest_path(base), manifest)?;
        Ok(())
    }

    pub fn read(base: &Path) -> Result<Archive> {
        let bytes = fs::read(bin_path(base))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing archive magic".into()));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() != 16 + 8 * count {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header promises {count} values",
                bytes.len() - 16
            )));
        }
        let values: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let text = fs::read_to_string(manifest_path(base))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::Format("unrecognized manifest header".into()));
        }
        let mut archive = Archive::default();
        let mut declared = None;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut words = line.split_whitespace();
            match words.next() {
                Some("kind") => archive.kind = words.next().unwrap_or_default().to_string(),
                Some("values") => declared = Some(parse_usize(words.next().unwrap_or_default(), "value count")?),
                Some("meta") => {
                    let (Some(k), Some(v)) = (words.next(), words.next()) else {
                        return Err(Error::Format(format!("bad meta line `{line}`")));
                    };
                    archive.meta.insert(k.to_string(), v.to_string());
                }
                Some("entry") => {
                    let name = words
                        .next()
                        .ok_or_else(|| Error::Format(format!("bad entry line `{line}`")))?
                        .to_string();
                    let mut attrs: BTreeMap<String, String> = words
                        .map(|w| {
                            w.split_once('=')
                                .map(|(k, v)| (k.to_string(), v.to_string()))
                                .ok_or_else(|| Error::Format(format!("bad attribute `{w}`")))
                        })
                        .collect::<Result<_>>()?;
                    let offset = parse_usize(&attrs.remove("offset").unwrap_or_default(), "offset")?;
                    let shape: Vec<usize> = attrs
                        .remove("shape")
                        .unwrap_or_default()
                        .split('x')
                        .map(|s| parse_usize(s, "shape"))
                        .collect::<Result<_>>()?;
                    let len: usize = shape.iter().product();
                    let data = values
                        .get(offset..offset + len)
                        .ok_or_else(|| Error::Format(format!("entry `{name}` runs past the payload")))?
                        .to_vec();
                    archive.entries.push(ArchiveEntry { name, shape, attrs, data });
                }
                _ => return Err(Error::Format(format!("unknown manifest line `{line}`"))),
            }
        }
        if declared != Some(count) {
            return Err(Error::Format("manifest value count does not match payload".into()));
        }
        Ok(archive)
    }

    /// Appends every entry of `params` under `<prefix>/`.
    pub fn push_params<T: Scalar>(&mut self, prefix: &str, params: &ParamSet<T>) {
        for e in params.entries() {
            let attrs = BTreeMap::from([
                ("group".to_string(), e.group.as_str().to_string()),
                ("norm".to_string(), e.norm.to_string()),
            ]);
            self.entries.push(ArchiveEntry {
                name: format!("{prefix}/{}", e.name),
                shape: e.tensor.shape().to_vec(),
                attrs,
                data: e.tensor.data().iter().map(|v| v.as_f64()).collect(),
            });
        }
    }

    /// Rebuilds the parameter set stored under `<prefix>/`, in stored order.
    pub fn params<T: Scalar>(&self, prefix: &str) -> Result<ParamSet<T>> {
        let lead = format!("{prefix}/");
        let mut out = ParamSet::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(&lead)) {
            let group = e
                .attrs
                .get("group")
                .and_then(|g| Group::parse(g))
                .ok_or_else(|| Error::Format(format!("entry `{}` has no valid group", e.name)))?;
            let norm = e.attrs.get("norm").map(String::as_str) == Some("true");
            let data = e.data.iter().map(|&v| T::lit(v)).collect();
            out.push(&e.name[lead.len()..], group, norm, Tensor::new(e.shape.clone(), data)?)?;
        }
        if out.is_empty() {
            return Err(Error::Format(format!("archive has no parameters under `{prefix}`")));
        }
        Ok(out)
    }

    /// Appends one utterance as `<name>` with its targets and ids as attributes.
    pub fn push_utterance(&mut self, name: String, u: &Utterance<f64>, extra: &[(&str, String)]) {
        let targets = u.sample.targets.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut attrs = BTreeMap::from([
            ("targets".to_string(), targets),
            ("task".to_string(), u.task_id.to_string()),
            ("speaker".to_string(), u.speaker_id.to_string()),
        ]);
        for (k, v) in extra {
            attrs.insert(k.to_string(), v.clone());
        }
        self.entries.push(ArchiveEntry {
            name,
            shape: u.sample.frames.shape().to_vec(),
            attrs,
            data: u.sample.frames.data().to_vec(),
        });
    }

    /// Utterances stored under `<prefix>/`, in stored order.
    pub fn utterances(&self, prefix: &str) -> Result<Vec<Utterance<f64>>> {
        let lead = format!("{prefix}/");
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(&lead))
            .map(|e| {
                let attr = |k: &str| {
                    e.attrs
                        .get(k)
                        .ok_or_else(|| Error::Format(format!("entry `{}` lacks `{k}`", e.name)))
                };
                let targets = attr("targets")?
                    .split(',')
                    .map(|t| parse_usize(t, "token"))
                    .collect::<Result<_>>()?;
                Ok(Utterance {
                    sample: Sample {
                        frames: Tensor::new(e.shape.clone(), e.data.clone())?,
                        targets,
                    },
                    task_id: parse_usize(attr("task")?, "task id")?,
                    speaker_id: parse_usize(attr("speaker")?, "speaker id")?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("enc.w", Group::Encoder, false, Tensor::matrix(2, 2, vec![1.0, -2.5, 1e-300, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        p.push("enc.ln_g", Group::Encoder, true, Tensor::matrix(1, 2, vec![1.0, 0.1]).unwrap())
            .unwrap();
        p.push("out.b", Group::Decoder, false, Tensor::matrix(1, 3, vec![0.0, -0.0, 3.0]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("ck");
        let mut a = Archive::new("checkpoint");
        a.meta.insert("step".into(), "7".into());
        a.push_params("final", &params());
        a.push_params("adapted", &params().map(|v| v * 2.0));
        a.write(&base).unwrap();
        let b = Archive::read(&base).unwrap();
        assert_eq!(a, b);
        let p: ParamSet<f64> = b.params("final").unwrap();
        assert_eq!(p, params());
        assert_eq!(p.flat()[1].to_bits(), (-2.5f64).to_bits());
        assert_eq!(b.meta_usize("step").unwrap(), 7);
        assert!(b.params::<f64>("missing").is_err());
    }

    #[test]
    fn utterances_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("data");
        let u = Utterance {
            sample: Sample {
                frames: Tensor::matrix(2, 3, vec![0.5, 1.0, -1.0, 2.0, 0.0, 0.25]).unwrap(),
                targets: vec![3, 1, 0],
            },
            speaker_id: 4,
            task_id: 2,
        };
        let mut a = Archive::new("dataset");
        a.push_utterance("train/0".into(), &u, &[("batch", "3".into())]);
        a.write(&base).unwrap();
        let back = Archive::read(&base).unwrap().utterances("train").unwrap();
        assert_eq!(back, vec![u]);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("x");
        let mut a = Archive::new("checkpoint");
        a.push_params("p", &params());
        a.write(&base).unwrap();
        let mut bytes = fs::read(bin_path(&base)).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(bin_path(&base), &bytes).unwrap();
        assert!(matches!(Archive::read(&base), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(bin_path(&base), &bytes).unwrap();
        assert!(Archive::read(&base).is_err());
    }

    #[test]
    fn rejects_whitespace_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new("checkpoint");
        a.meta.insert("bad key".into(), "1".into());
        assert!(a.write(&dir.path().join("y")).is_err());
    }
}
