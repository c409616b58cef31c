//! Versioned binary checkpoint container.
//!
//! ```text
//! magic        b"AIRC"
//! version      u32 LE
//! header_len   u64 LE
//! header       JSON (CheckpointHeader), header_len bytes
//! sections     f64 LE values, concatenated in header order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderSpec, RunningStats};
use crate::error::{io_err, AirError, Result};
use crate::schedule::SchedulerState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AIRC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Encoder,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch to run; all draws are derived from `(seed, epoch, ...)`.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub spec: EncoderSpec,
    pub spec_hash: String,
    pub epoch: usize,
    pub scheduler: Option<SchedulerState>,
    pub rng: RngState,
    /// Free-form metadata (for classifiers: class count and protocol).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub sections: Vec<SectionInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, spec: EncoderSpec, epoch: usize, rng: RngState) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind,
                spec_hash: spec.hash(),
                spec,
                epoch,
                scheduler: None,
                rng,
                meta: serde_json::Value::Null,
                sections: Vec::new(),
            },
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.sections.push((name.to_string(), values));
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    fn require(&self, name: &str, path: &Path) -> Result<&[f64]> {
        self.section(name).ok_or_else(|| AirError::Format {
            path: path.to_path_buf(),
            reason: format!("missing section {name}"),
        })
    }

    /// Adds the encoder's parameters and running statistics.
    pub fn push_encoder(&mut self, encoder: &Encoder) {
        self.push("params", encoder.params().to_vec());
        let running = encoder
            .running_stats()
            .iter()
            .flat_map(|r| r.mean.iter().chain(&r.var).copied())
            .collect();
        self.push("running", running);
    }

    /// Rebuilds the encoder stored by [`Checkpoint::push_encoder`].
    pub fn encoder(&self, path: &Path) -> Result<Encoder> {
        let params = self.require("params", path)?.to_vec();
        let flat = self.require("running", path)?;
        let template = Encoder::new(self.header.spec.clone(), 0)?;
        let mut offset = 0;
        let mut running = Vec::with_capacity(template.running_stats().len());
        for r in template.running_stats() {
            let c = r.mean.len();
            if offset + 2 * c > flat.len() {
                return Err(AirError::Format {
                    path: path.to_path_buf(),
                    reason: "running statistics section too short".into(),
                });
            }
            running.push(RunningStats {
                mean: flat[offset..offset + c].to_vec(),
                var: flat[offset + c..offset + 2 * c].to_vec(),
            });
            offset += 2 * c;
        }
        Encoder::from_parts(self.header.spec.clone(), params, running)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = self.header.clone();
        header.spec_hash = header.spec.hash();
        header.sections = self
            .sections
            .iter()
            .map(|(name, v)| SectionInfo {
                name: name.clone(),
                len: v.len(),
            })
            .collect();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let tmp = path.with_extension("tmp");
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut out = BufWriter::new(file);
        let res: std::io::Result<()> = (|| {
            out.write_all(CHECKPOINT_MAGIC)?;
            out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
            out.write_u64::<LittleEndian>(json.len() as u64)?;
            out.write_all(&json)?;
            for (_, values) in &self.sections {
                for &v in values {
                    out.write_f64::<LittleEndian>(v)?;
                }
            }
            out.flush()
        })();
        res.map_err(io_err(&tmp))?;
        drop(out);
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Reads a checkpoint; when `expected` is given its hash must match.
    pub fn load(path: &Path, expected: Option<&EncoderSpec>) -> Result<Self> {
        let bad = |reason: String| AirError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(io_err(path))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err(path))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err(path))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = r.read_u64::<LittleEndian>().map_err(io_err(path))? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io_err(path))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let actual = header.spec.hash();
        if header.spec_hash != actual {
            return Err(AirError::SpecMismatch {
                expected: actual,
                found: header.spec_hash,
            });
        }
        if let Some(spec) = expected {
            if spec.hash() != header.spec_hash {
                return Err(AirError::SpecMismatch {
                    expected: spec.hash(),
                    found: header.spec_hash,
                });
            }
        }
        let mut sections = Vec::with_capacity(header.sections.len());
        for info in &header.sections {
            let mut values = vec![0.0; info.len];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(io_err(path))?;
            sections.push((info.name.clone(), values));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(io_err(path))?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { header, sections })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BnMode;

    fn sample() -> (Encoder, Checkpoint) {
        let mut enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 4).unwrap();
        enc.running_stats_mut()[1].mean[0] = 0.25;
        let mut ck = Checkpoint::new(
            CheckpointKind::Encoder,
            enc.spec().clone(),
            3,
            RngState { seed: 9, epoch: 3 },
        );
        ck.header.scheduler = Some(SchedulerState::at(3, 50, 1000, 2.0 / 3.0).unwrap());
        ck.push_encoder(&enc);
        ck.push("momentum", vec![0.1; enc.num_params()]);
        (enc, ck)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (enc, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path, Some(enc.spec())).unwrap();
        assert_eq!(loaded.sections, ck.sections);
        assert_eq!(loaded.header.epoch, 3);
        let back = loaded.encoder(&path).unwrap();
        assert_eq!(back.params(), enc.params());
        assert_eq!(back.running_stats(), enc.running_stats());
    }

    #[test]
    fn rejects_other_spec() {
        let (enc, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ck.save(&path).unwrap();
        let other = enc.spec().clone().with_bn_mode(BnMode::Single);
        assert!(matches!(
            Checkpoint::load(&path, Some(&other)),
            Err(AirError::SpecMismatch { .. })
        ));
    }

    #[test]
    fn rejects_truncated_file() {
        let (_, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(Checkpoint::load(&path, None).is_err());
    }
}
