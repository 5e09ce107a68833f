//! Self-describing binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "SGNETCKP"
//! version      u32      1
//! header_len   u64
//! header       JSON     CheckpointHeader
//! array_count  u32
//! per array:   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim,
//!              values (header.dtype, little-endian)
//! ```
//!
//! Network parameters come first, in [`ParamStore`] order. When optimizer
//! state is present it follows as `adam.m/<param>` then `adam.v/<param>`.

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig, ParamStore, Tensor};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 8] = b"SGNETCKP";
pub const VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub best_val_dsc: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub network: NetworkConfig,
    pub training: Option<TrainingState>,
    pub adam_step: Option<u64>,
    /// Full experiment config the run was started with, if any.
    pub experiment: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub network: Network<T>,
    pub adam: Option<AdamState<T>>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

struct ArchiveWriter<W> {
    out: W,
    path: PathBuf,
}

impl<W: Write> ArchiveWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.out.write_all(bytes).map_err(Error::io(&self.path))
    }

    fn array<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) -> Result<()> {
        self.put(&(name.len() as u32).to_le_bytes())?;
        self.put(name.as_bytes())?;
        self.put(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            self.put(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * T::BYTES);
        for v in data {
            v.to_le_bytes_into(&mut buf);
        }
        self.put(&buf)
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    network: &Network<T>,
    adam: Option<&AdamState<T>>,
    training: Option<&TrainingState>,
    experiment: Option<&serde_json::Value>,
) -> Result<()> {
    let header = CheckpointHeader {
        dtype: T::NAME.to_string(),
        network: network.config().clone(),
        training: training.cloned(),
        adam_step: adam.map(|a| a.step),
        experiment: experiment.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(Error::json(path))?;
    let params = network.params();
    let tmp = path.with_extension("tmp");
    let file = std::fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    let mut w = ArchiveWriter { out: BufWriter::new(file), path: tmp.clone() };
    w.put(MAGIC)?;
    w.put(&VERSION.to_le_bytes())?;
    w.put(&(json.len() as u64).to_le_bytes())?;
    w.put(&json)?;
    let count = params.len() * if adam.is_some() { 3 } else { 1 };
    w.put(&(count as u32).to_le_bytes())?;
    for (name, t) in params.names().iter().zip(params.tensors()) {
        w.array(name, &t.shape, &t.data)?;
    }
    if let Some(state) = adam {
        for (prefix, moments) in [("adam.m/", &state.m), ("adam.v/", &state.v)] {
            for ((name, t), values) in params.names().iter().zip(params.tensors()).zip(moments) {
                w.array(&format!("{prefix}{name}"), &t.shape, values)?;
            }
        }
    }
    w.out.flush().map_err(Error::io(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(Error::io(path))
}

struct ArchiveReader<R> {
    inp: R,
    path: PathBuf,
}

impl<R: Read> ArchiveReader<R> {
    fn take(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inp.read_exact(&mut buf).map_err(|e| bad(&self.path, format!("truncated archive ({e})")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?).map_err(|_| bad(&self.path, "array name is not UTF-8"))?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(bad(&self.path, format!("array {name} claims {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.filter(|&l| l <= (1 << 32)).ok_or_else(|| bad(&self.path, format!("array {name} too large")))?;
        let bytes = self.take(len * T::BYTES)?;
        let data = bytes.chunks_exact(T::BYTES).map(T::from_le_slice).collect();
        Ok((name, Tensor { shape, data }))
    }
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut r = ArchiveReader { inp: BufReader::new(file), path: path.to_path_buf() };
    read_header_from(&mut r)
}

fn read_header_from<R: Read>(r: &mut ArchiveReader<R>) -> Result<CheckpointHeader> {
    if r.take(8)? != MAGIC {
        return Err(bad(&r.path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(&r.path, format!("unsupported version {version}")));
    }
    let len = r.u64()?;
    if len > 1 << 24 {
        return Err(bad(&r.path, format!("header length {len} is implausible")));
    }
    let json = r.take(len as usize)?;
    serde_json::from_slice(&json).map_err(Error::json(&r.path))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut r = ArchiveReader { inp: BufReader::new(file), path: path.to_path_buf() };
    let header = read_header_from(&mut r)?;
    if header.dtype != T::NAME {
        return Err(bad(path, format!("stored as {}, requested {}", header.dtype, T::NAME)));
    }
    let mut network = Network::<T>::build(header.network.clone(), 0)?;
    let n = network.params().len();
    let count = r.u32()? as usize;
    let with_adam = match (count, header.adam_step) {
        (c, None) if c == n => false,
        (c, Some(_)) if c == 3 * n => true,
        _ => return Err(bad(path, format!("{count} arrays do not fit a network with {n} parameters"))),
    };
    let params: Vec<(String, Tensor<T>)> = (0..n).map(|_| r.array()).collect::<Result<_>>()?;
    network.params_mut().load(params).map_err(|e| bad(path, e.to_string()))?;
    let adam = if with_adam {
        let m = read_moments(&mut r, "adam.m/", network.params())?;
        let v = read_moments(&mut r, "adam.v/", network.params())?;
        Some(AdamState { step: header.adam_step.unwrap_or(0), m, v })
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.inp.read(&mut rest).map_err(Error::io(path))? != 0 {
        return Err(bad(path, "trailing bytes after last array"));
    }
    Ok(Checkpoint { header, network, adam })
}

fn read_moments<T: Scalar, R: Read>(
    r: &mut ArchiveReader<R>,
    prefix: &str,
    params: &ParamStore<T>,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let (got, tensor) = r.array::<T>()?;
        if got != format!("{prefix}{name}") || tensor.shape != t.shape {
            return Err(bad(&r.path, format!("expected {prefix}{name}, found {got}")));
        }
        out.push(tensor.data);
    }
    Ok(out)
}
