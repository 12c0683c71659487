//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `STDGANCK`, a little-endian `u32` header length,
//! a JSON header describing every stored tensor, then the tensors themselves
//! as little-endian `f32` in header order (weights first, then the Adam
//! moments of the generator and discriminator optimizers).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Group, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::networks::{ArchConfig, ModelWeights, Networks};
use crate::nn::{Adam, Moments};
use crate::tensor::Tensor;
use crate::trainer::{EmaState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"STDGANCK";
pub const FORMAT_VERSION: &str = "1.0.0";
pub const LATEST_MARKER: &str = "latest";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub model: ModelWeights<f32>,
    pub ema: EmaState,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn n_domains(&self) -> usize {
        self.model.arch().n_domains
    }

    /// Fails unless the checkpoint was trained on exactly `n` domains.
    pub fn check_domains(&self, n: usize) -> Result<()> {
        if self.n_domains() != n {
            return Err(Error::Data(format!(
                "checkpoint was trained on {} domains, the dataset has {n}",
                self.n_domains()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    step: u64,
    lr: f64,
    ids: Vec<ParamId>,
}

#[derive(Serialize, Deserialize)]
struct RngEntry {
    seed: Vec<u8>,
    stream: u64,
    /// Decimal string, `u128` does not round-trip through every JSON reader.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    n_domains: usize,
    arch: ArchConfig,
    config: TrainConfig,
    epoch: usize,
    ema: EmaState,
    nets: Networks,
    rng: RngEntry,
    tensors: Vec<TensorEntry>,
    opt_g: OptimizerEntry,
    opt_d: OptimizerEntry,
}

fn push_f32(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ck.model.params;
    let opt = |a: &Adam<f32>| OptimizerEntry {
        step: a.step,
        lr: a.lr,
        ids: a.ids().to_vec(),
    };
    let header = Header {
        version: FORMAT_VERSION.to_string(),
        n_domains: ck.n_domains(),
        arch: ck.model.arch(),
        config: ck.cfg.clone(),
        epoch: ck.epoch,
        ema: ck.ema.clone(),
        nets: ck.model.nets.clone(),
        rng: RngEntry {
            seed: ck.rng.get_seed().to_vec(),
            stream: ck.rng.get_stream(),
            word_pos: ck.rng.get_word_pos().to_string(),
        },
        tensors: params
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        opt_g: opt(&ck.opt_g),
        opt_d: opt(&ck.opt_d),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 12 * params.numel());
    out.extend_from_slice(MAGIC);
    let len =
        u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        push_f32(&mut out, &p.value);
    }
    for a in [&ck.opt_g, &ck.opt_d] {
        for m in a.moments() {
            push_f32(&mut out, &m.m);
            push_f32(&mut out, &m.v);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("archive is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::from_vec(shape, data)
    }
}

fn check_version(found: &str) -> Result<()> {
    let major = |v: &str| v.split('.').next().map(str::to_string);
    if major(found) != major(FORMAT_VERSION) {
        return Err(Error::CheckpointVersion {
            found: found.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&MAGIC[..]) {
        return Err(Error::Checkpoint("missing checkpoint magic".into()));
    }
    let len = r.take(4)?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let header_bytes = r.take(len)?;
    let value: serde_json::Value = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    check_version(value.get("version").and_then(|v| v.as_str()).unwrap_or("0"))?;
    let h: Header = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if h.arch.n_domains != h.n_domains || h.nets.arch != h.arch || h.ema.n_domains() != h.n_domains
    {
        return Err(Error::Checkpoint(
            "inconsistent domain count in header".into(),
        ));
    }

    let mut params = ParamSet::new();
    for t in &h.tensors {
        let value = r.tensor(&t.shape)?;
        params.add(t.name.clone(), t.group, value);
    }
    let mut optimizer = |e: &OptimizerEntry, cfg: &TrainConfig| -> Result<Adam<f32>> {
        let mut moments = Vec::with_capacity(e.ids.len());
        for id in &e.ids {
            if id.0 >= params.len() {
                return Err(Error::Checkpoint(format!(
                    "optimizer refers to missing tensor {}",
                    id.0
                )));
            }
            let shape = params.get(*id).shape().to_vec();
            moments.push(Moments {
                m: r.tensor(&shape)?,
                v: r.tensor(&shape)?,
            });
        }
        Ok(Adam::from_parts(
            e.ids.clone(),
            moments,
            e.step,
            e.lr,
            cfg.beta1,
            cfg.beta2,
        ))
    };
    let opt_g = optimizer(&h.opt_g, &h.config)?;
    let opt_d = optimizer(&h.opt_d, &h.config)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let seed: [u8; 32] = h
        .rng
        .seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Checkpoint("RNG seed must be 32 bytes".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(h.rng.stream);
    let word_pos: u128 = h
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("bad RNG position".into()))?;
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        cfg: h.config,
        model: ModelWeights {
            nets: h.nets,
            params,
        },
        ema: h.ema,
        opt_g,
        opt_d,
        rng,
        epoch: h.epoch,
    })
}

/// Writes to a temporary sibling first and renames it into place.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    write_atomic(path, &bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Points the run directory's `latest` marker at `ckpt`.
pub fn mark_latest(run_dir: &Path, ckpt: &Path) -> Result<()> {
    let name = ckpt
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no file name", ckpt.display())))?;
    write_atomic(
        &run_dir.join(LATEST_MARKER),
        name.to_string_lossy().as_bytes(),
    )
}

/// The checkpoint named by the run directory's `latest` marker, if any.
pub fn latest(run_dir: &Path) -> Result<Option<PathBuf>> {
    let marker = run_dir.join(LATEST_MARKER);
    if !marker.exists() {
        return Ok(None);
    }
    let name = fs::read_to_string(&marker).map_err(|e| Error::io(&marker, e))?;
    let path = run_dir.join(name.trim());
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "latest marker points at missing {}",
            path.display()
        )));
    }
    Ok(Some(path))
}

/// Accepts either a checkpoint file or a run directory with a marker.
pub fn resolve(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        latest(path)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint in {}", path.display())))
    } else {
        Ok(path.to_path_buf())
    }
}
