//! `CPTA` tensor archives, used for datasets, sample sets and checkpoints.
//!
//! Layout (little-endian): magic `CPTA`, `u32` version, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u8` dtype (1 = f32,
//! 2 = f64), `u32` ndim, `ndim × u64` dims and the raw values; finally a
//! `u32` metadata length and the UTF-8 metadata.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{ClassifierParams, DenoiserParams, MlpSpec, Params};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPTA";
pub const VERSION: u32 = 1;
/// Prefix of shadow (EMA) weights inside a checkpoint.
pub const EMA_PREFIX: &str = "ema.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Archive(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub entries: Vec<Entry>,
    pub metadata: String,
}

impl TensorArchive {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            metadata: metadata.into(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> &mut Self {
        self.push_as(name, tensor, Dtype::F64)
    }

    pub fn push_as(&mut self, name: impl Into<String>, tensor: Tensor, dtype: Dtype) -> &mut Self {
        self.entries.push(Entry {
            name: name.into(),
            dtype,
            tensor,
        });
        self
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Archive(format!("duplicate tensor name `{}`", e.name)));
            }
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype as u8);
            let shape = e.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match e.dtype {
                Dtype::F64 => e.tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Dtype::F32 => e
                    .tensor
                    .data()
                    .iter()
                    .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            if !seen.insert(name.clone()) {
                return Err(Error::Archive(format!("duplicate tensor name `{name}`")));
            }
            let dtype = Dtype::from_byte(r.take(1)?[0])?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(64));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Archive("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Archive("shape overflow".into()))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::Archive("size overflow".into()))?)?;
            let data: Vec<f64> = match dtype {
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        let len = r.u32()? as usize;
        let metadata = r.string(len)?;
        if r.pos != bytes.len() {
            return Err(Error::Archive(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries, metadata })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Archive("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Archive("invalid UTF-8".into()))
    }
}

/// Writes atomically: the file appears complete or not at all.
pub fn write_archive(path: &Path, archive: &TensorArchive) -> Result<()> {
    let bytes = archive.to_bytes()?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<TensorArchive> {
    TensorArchive::from_bytes(&fs::read(path)?)
}

fn push_params(a: &mut TensorArchive, params: &Params, prefix: &str) {
    for (k, v) in params {
        a.push(format!("{prefix}{k}"), v.clone());
    }
}

fn take_params(a: &TensorArchive, model_prefix: &str, prefix: &str) -> Params {
    let full = format!("{prefix}{model_prefix}.");
    a.entries
        .iter()
        .filter(|e| e.name.starts_with(&full))
        .map(|e| (e.name[prefix.len()..].to_string(), e.tensor.clone()))
        .collect::<BTreeMap<_, _>>()
}

/// Raw and EMA weights of one model. The metadata holds the layer spec as
/// JSON.
fn checkpoint(spec: &MlpSpec, raw: &Params, ema: &Params, extra: &str) -> Result<TensorArchive> {
    let meta = serde_json::json!({ "spec": spec, "extra": extra });
    let mut a = TensorArchive::new(serde_json::to_string(&meta)?);
    push_params(&mut a, raw, "");
    push_params(&mut a, ema, EMA_PREFIX);
    Ok(a)
}

fn restore(a: &TensorArchive, model_prefix: &str) -> Result<(MlpSpec, Params, Params)> {
    let meta: serde_json::Value = serde_json::from_str(&a.metadata)?;
    let spec: MlpSpec = serde_json::from_value(meta["spec"].clone())?;
    let raw = take_params(a, model_prefix, "");
    let ema = take_params(a, model_prefix, EMA_PREFIX);
    if raw.is_empty() || raw.keys().ne(ema.keys()) {
        return Err(Error::Archive(format!("checkpoint lacks matching `{model_prefix}` weights")));
    }
    Ok((spec, raw, ema))
}

pub fn denoiser_checkpoint(raw: &DenoiserParams, ema: &DenoiserParams, extra: &str) -> Result<TensorArchive> {
    checkpoint(&raw.spec, &raw.params, &ema.params, extra)
}

pub fn classifier_checkpoint(raw: &ClassifierParams, ema: &ClassifierParams, extra: &str) -> Result<TensorArchive> {
    checkpoint(&raw.spec, &raw.params, &ema.params, extra)
}

/// `(raw, ema)` denoiser weights.
pub fn load_denoiser(a: &TensorArchive) -> Result<(DenoiserParams, DenoiserParams)> {
    let (spec, raw, ema) = restore(a, crate::models::DENOISER_PREFIX)?;
    Ok((
        DenoiserParams { spec: spec.clone(), params: raw },
        DenoiserParams { spec, params: ema },
    ))
}

/// `(raw, ema)` classifier weights.
pub fn load_classifier(a: &TensorArchive) -> Result<(ClassifierParams, ClassifierParams)> {
    let (spec, raw, ema) = restore(a, crate::models::CLASSIFIER_PREFIX)?;
    Ok((
        ClassifierParams { spec: spec.clone(), params: raw },
        ClassifierParams { spec, params: ema },
    ))
}
