//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: `GLRG`, u32 version, u64 metadata
//! length and JSON metadata, u64 tensor count, then per tensor u64 name
//! length, name bytes, u64 rank, u64 dims and f64 data; finally a CRC32 of
//! every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::write_atomic;
use crate::grad::{ParamStore, Tensor};
use crate::model::{GlobalLocalFeatures, Model, ModelDims, ModelError};
use crate::text::Vocabulary;
use crate::training::{AdamState, Phase};

pub const MAGIC: &[u8; 4] = b"GLRG";
pub const VERSION: u32 = 1;

const CENTER_NAMES: [&str; 3] = ["center.long", "center.short", "center.local"];

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("hyperparameter {field} differs: checkpoint has {checkpoint}, config has {config}")]
    Mismatch {
        field: &'static str,
        checkpoint: usize,
        config: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    dims: ModelDims,
    vocab: Vocabulary,
    phase: Phase,
    epoch: usize,
    adam_t: Option<u64>,
}

/// Model, vocabulary and optimizer state at the end of a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub phase: Phase,
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| CheckpointError::Format(format!("{what} {n} is larger than the file")))
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u64).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.shape().len() as u64).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for x in t.data() {
        out.extend(x.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let n = r.len("name length")?;
    let name = std::str::from_utf8(r.take(n)?)
        .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let rank = r.len("rank")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.len("dimension")?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&c| c <= r.buf.len() / 8)
        .ok_or_else(|| CheckpointError::Format(format!("tensor {name} shape {shape:?} is larger than the file")))?;
    let data = r
        .take(count * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

fn row_of(t: &Tensor, name: &str, len: usize) -> Result<Vec<f64>> {
    if t.shape() != [1, len] {
        return Err(CheckpointError::Format(format!("{name} has shape {:?}, expected [1, {len}]", t.shape())));
    }
    Ok(t.data().to_vec())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            dims: *self.model.dims(),
            vocab: self.vocab.clone(),
            phase: self.phase,
            epoch: self.epoch,
            adam_t: self.adam.as_ref().map(|a| a.t),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut tensors: Vec<(String, &Tensor)> = self.model.params().iter().map(|p| (p.name.clone(), &p.value)).collect();
        let c = self.model.feature_center();
        let center = [Tensor::row(c.long.clone()), Tensor::row(c.short.clone()), Tensor::row(c.local.clone())];
        tensors.extend(CENTER_NAMES.iter().map(|n| n.to_string()).zip(&center));
        if let Some(a) = &self.adam {
            let names: Vec<&str> = self.model.params().iter().map(|p| p.name.as_str()).collect();
            tensors.extend(names.iter().map(|n| format!("adam.m.{n}")).zip(&a.m));
            tensors.extend(names.iter().map(|n| format!("adam.v.{n}")).zip(&a.v));
        }
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((meta.len() as u64).to_le_bytes());
        out.extend(&meta);
        out.extend((tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            put_tensor(&mut out, &name, t);
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    /// Checks magic, then version, then the checksum, then the contents.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        if bytes.len() < 8 {
            return Err(CheckpointError::Format("missing version".into()));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(CheckpointError::Checksum {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: body, pos: 8 };
        let n = r.len("metadata length")?;
        let meta: Meta =
            serde_json::from_slice(r.take(n)?).map_err(|e| CheckpointError::Format(format!("metadata: {e}")))?;
        if meta.vocab.len() != meta.dims.vocab_size {
            return Err(CheckpointError::Format(format!(
                "vocabulary has {} words but vocab_size is {}",
                meta.vocab.len(),
                meta.dims.vocab_size
            )));
        }
        let count = r.len("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(get_tensor(&mut r)?);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }

        let np = crate::model::param_layout(&meta.dims).len();
        let expected = np + CENTER_NAMES.len() + if meta.adam_t.is_some() { 2 * np } else { 0 };
        if tensors.len() != expected {
            return Err(CheckpointError::Format(format!("{} tensors, expected {expected}", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut store = ParamStore::new();
        for (name, t) in it.by_ref().take(np) {
            store.add(name, t);
        }
        let mut model = Model::from_params(meta.dims, store)?;
        let mut center = Vec::with_capacity(3);
        for (want, len) in CENTER_NAMES.iter().zip([meta.dims.k, meta.dims.j, meta.dims.m]) {
            let (name, t) = it.next().expect("counted");
            if name != *want {
                return Err(CheckpointError::Format(format!("found tensor {name}, expected {want}")));
            }
            center.push(row_of(&t, want, len)?);
        }
        let local = center.pop().expect("three");
        let short = center.pop().expect("three");
        let long = center.pop().expect("three");
        model.set_feature_center(GlobalLocalFeatures { long, short, local })?;

        let adam = match meta.adam_t {
            None => None,
            Some(t) => {
                let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
                let mut moments = [Vec::with_capacity(np), Vec::with_capacity(np)];
                for (k, prefix) in ["adam.m.", "adam.v."].iter().enumerate() {
                    for (pname, p) in names.iter().zip(model.params().iter()) {
                        let (name, tensor) = it.next().expect("counted");
                        if name != format!("{prefix}{pname}") || tensor.shape() != p.value.shape() {
                            return Err(CheckpointError::Format(format!(
                                "optimizer tensor {name} {:?} does not match {prefix}{pname} {:?}",
                                tensor.shape(),
                                p.value.shape()
                            )));
                        }
                        moments[k].push(tensor);
                    }
                }
                let [m, v] = moments;
                Some(AdamState { t, m, v })
            }
        };
        Ok(Self {
            model,
            vocab: meta.vocab,
            phase: meta.phase,
            epoch: meta.epoch,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Every dimension must match `config` except the vocabulary, which the
    /// config only bounds from above.
    pub fn check_dims(&self, config: &ModelDims) -> Result<()> {
        let d = self.model.dims();
        for (field, ours, theirs) in [
            ("K", d.k, config.k),
            ("J", d.j, config.j),
            ("M", d.m, config.m),
            ("d_e", d.d_e, config.d_e),
            ("d_w", d.d_w, config.d_w),
            ("d_h", d.d_h, config.d_h),
            ("l", d.max_len, config.max_len),
        ] {
            if ours != theirs {
                return Err(CheckpointError::Mismatch {
                    field,
                    checkpoint: ours,
                    config: theirs,
                });
            }
        }
        if d.vocab_size > config.vocab_size {
            return Err(CheckpointError::Mismatch {
                field: "V",
                checkpoint: d.vocab_size,
                config: config.vocab_size,
            });
        }
        Ok(())
    }
}
