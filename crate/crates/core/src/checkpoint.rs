//! Binary checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SIPA" | version u8 = 1 | entry count u32
//! per entry: name len u16 | name (UTF-8) | dtype u8 | rank u8 | rank x u32 shape | raw values
//! ```
//!
//! dtype 0 is f32, 1 is f16 and 2 is u8. Prune masks are stored as separate
//! u8 entries named `<tensor>.mask` holding 0/1 values; on write each mask
//! directly follows its tensor.

use crate::model::LayerGraph;
use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"SIPA";
pub const VERSION: u8 = 1;
const MASK_SUFFIX: &str = ".mask";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("unknown dtype code {code} for {name}")]
    DType { name: String, code: u8 },
    #[error("entry name is not valid UTF-8")]
    Utf8,
    #[error("duplicate tensor name {0}")]
    Duplicate(String),
    #[error("{name}: {detail}")]
    Shape { name: String, detail: String },
    #[error("mask {name} holds value {value}; masks must be 0 or 1")]
    MaskValue { name: String, value: u8 },
    #[error("mask {0} has no matching tensor")]
    OrphanMask(String),
    #[error("{0} is too large for the file format")]
    TooLarge(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            DType::F32 => 32,
            DType::F16 => 16,
        }
    }
}

/// Binary keep-mask over a tensor: 1 keeps a weight, 0 prunes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub shape: Vec<usize>,
    keep: Vec<u8>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, keep: Vec<u8>) -> Result<Mask, CheckpointError> {
        if shape.iter().product::<usize>() != keep.len() {
            return Err(CheckpointError::Shape {
                name: "mask".into(),
                detail: format!("shape {shape:?} does not hold {} elements", keep.len()),
            });
        }
        if let Some(&v) = keep.iter().find(|&&v| v > 1) {
            return Err(CheckpointError::MaskValue {
                name: "mask".into(),
                value: v,
            });
        }
        Ok(Mask { shape, keep })
    }

    pub fn dense(shape: Vec<usize>) -> Mask {
        let n = shape.iter().product();
        Mask {
            shape,
            keep: vec![1; n],
        }
    }

    pub fn values(&self) -> &[u8] {
        &self.keep
    }

    pub fn is_kept(&self, idx: usize) -> bool {
        self.keep[idx] == 1
    }

    pub fn prune(&mut self, idx: usize) {
        self.keep[idx] = 0;
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&v| v == 1).count()
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    values: Vec<f32>,
    pub mask: Option<Mask>,
}

impl Tensor {
    /// Builds a tensor; f16 tensors have their values rounded to half precision.
    pub fn new(
        name: impl Into<String>,
        dtype: DType,
        shape: Vec<usize>,
        values: Vec<f32>,
    ) -> Result<Tensor, CheckpointError> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(CheckpointError::Shape {
                name,
                detail: format!("shape {shape:?} does not hold {} values", values.len()),
            });
        }
        let values = match dtype {
            DType::F32 => values,
            DType::F16 => values.into_iter().map(|v| f16::from_f32(v).to_f32()).collect(),
        };
        Ok(Tensor {
            name,
            dtype,
            shape,
            values,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Tensor, CheckpointError> {
        if mask.shape != self.shape {
            return Err(CheckpointError::Shape {
                name: self.name,
                detail: format!("mask shape {:?} differs from tensor shape", mask.shape),
            });
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value as seen through the mask (pruned positions read as zero).
    pub fn effective(&self, idx: usize) -> f32 {
        match &self.mask {
            Some(m) if !m.is_kept(idx) => 0.0,
            _ => self.values[idx],
        }
    }

    pub fn kept(&self) -> usize {
        self.mask.as_ref().map_or(self.values.len(), Mask::kept)
    }

    /// Zeroes every masked-out value.
    pub fn apply_mask(&mut self) {
        if let Some(m) = &self.mask {
            for (v, &k) in self.values.iter_mut().zip(m.values()) {
                if k == 0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Ordered, uniquely named tensors with optional prune masks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(tensors: Vec<Tensor>) -> Result<Checkpoint, CheckpointError> {
        let mut seen = HashMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if seen.insert(t.name.as_str(), i).is_some() || t.name.ends_with(MASK_SUFFIX) {
                return Err(CheckpointError::Duplicate(t.name.clone()));
            }
        }
        Ok(Checkpoint { tensors })
    }

    /// Random normal weights for every tensor of `graph`; biases start at zero.
    pub fn from_graph(graph: &LayerGraph, dtype: DType, seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let tensors = graph
            .tensors()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let values: Vec<f32> = if name.ends_with(".bias") {
                    vec![0.0; n]
                } else {
                    let fan_in = (n / shape[0].max(1)).max(1) as f32;
                    (0..n).map(|_| rng.sample::<f32, _>(normal) / fan_in.sqrt()).collect()
                };
                Tensor::new(name, dtype, shape, values).expect("shape matches")
            })
            .collect();
        Checkpoint { tensors }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn apply_masks(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::apply_mask);
    }

    /// Masks keyed by tensor name.
    pub fn masks(&self) -> BTreeMap<String, Mask> {
        self.tensors
            .iter()
            .filter_map(|t| t.mask.clone().map(|m| (t.name.clone(), m)))
            .collect()
    }

    /// Bit width of each tensor implied by its dtype.
    pub fn bits(&self) -> BTreeMap<String, u8> {
        self.tensors.iter().map(|t| (t.name.clone(), t.dtype.bits())).collect()
    }

    pub fn read_from(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u8(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = read_u32(r)?;
        let mut tensors: Vec<Tensor> = Vec::new();
        let mut masks: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for _ in 0..count {
            let len = read_u16(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Utf8)?;
            let code = read_u8(r)?;
            let rank = read_u8(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            match code {
                0 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf)?;
                    let values = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    tensors.push(Tensor::new(name, DType::F32, shape, values)?);
                }
                1 => {
                    let mut buf = vec![0u8; n * 2];
                    r.read_exact(&mut buf)?;
                    let values = buf
                        .chunks_exact(2)
                        .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                        .collect();
                    tensors.push(Tensor::new(name, DType::F16, shape, values)?);
                }
                2 => {
                    let mut buf = vec![0u8; n];
                    r.read_exact(&mut buf)?;
                    let Some(base) = name.strip_suffix(MASK_SUFFIX) else {
                        return Err(CheckpointError::DType { name, code });
                    };
                    if let Some(&value) = buf.iter().find(|&&v| v > 1) {
                        return Err(CheckpointError::MaskValue { name, value });
                    }
                    masks.push((base.to_string(), shape, buf));
                }
                _ => return Err(CheckpointError::DType { name, code }),
            }
        }
        let mut ckpt = Checkpoint::new(tensors)?;
        for (base, shape, keep) in masks {
            let t = ckpt
                .tensors
                .iter_mut()
                .find(|t| t.name == base)
                .ok_or_else(|| CheckpointError::OrphanMask(format!("{base}{MASK_SUFFIX}")))?;
            if t.mask.is_some() {
                return Err(CheckpointError::Duplicate(format!("{base}{MASK_SUFFIX}")));
            }
            if shape != t.shape {
                return Err(CheckpointError::Shape {
                    name: base,
                    detail: format!("mask shape {shape:?} differs from tensor shape {:?}", t.shape),
                });
            }
            t.mask = Some(Mask { shape, keep });
        }
        Ok(ckpt)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        let entries = self.tensors.len() + self.tensors.iter().filter(|t| t.mask.is_some()).count();
        w.write_all(
            &u32::try_from(entries)
                .map_err(|_| CheckpointError::TooLarge("entry count".into()))?
                .to_le_bytes(),
        )?;
        for t in &self.tensors {
            write_header(w, &t.name, t.dtype.code(), &t.shape)?;
            match t.dtype {
                DType::F32 => {
                    for v in &t.values {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                DType::F16 => {
                    for v in &t.values {
                        w.write_all(&f16::from_f32(*v).to_le_bytes())?;
                    }
                }
            }
            if let Some(m) = &t.mask {
                write_header(w, &format!("{}{MASK_SUFFIX}", t.name), 2, &m.shape)?;
                w.write_all(&m.keep)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        Checkpoint::read_from(&mut bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Checkpoint::read_from(&mut f)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn write_header(w: &mut impl Write, name: &str, code: u8, shape: &[usize]) -> Result<(), CheckpointError> {
    let len = u16::try_from(name.len()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
    let rank = u8::try_from(shape.len()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[code, rank])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| CheckpointError::TooLarge(name.into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
