//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "DMPN" | u32 version | u64 meta_len | meta JSON | u32 tensor_count
//! per tensor: u16 name_len | name | u8 dtype (0 f32, 1 f64) | u8 ndim | ndim x u64 dims | payload
//! u32 CRC32 of every byte after the magic
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{DType, Scalar, Shape, Tensor};
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"DMPN";
pub const VERSION: u32 = 1;

/// JSON header of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default)]
    pub step: usize,
    /// Seed of the stateless batch/crop streams; with `step` it fixes the
    /// next draw.
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// Something that can be stored with a given element type.
pub trait Storable: Scalar {
    fn wrap(data: Vec<Self>) -> TensorData;
    fn unwrap(data: &TensorData) -> Option<&[Self]>;
}

impl Storable for f32 {
    fn wrap(data: Vec<f32>) -> TensorData {
        TensorData::F32(data)
    }
    fn unwrap(data: &TensorData) -> Option<&[f32]> {
        match data {
            TensorData::F32(v) => Some(v),
            TensorData::F64(_) => None,
        }
    }
}

impl Storable for f64 {
    fn wrap(data: Vec<f64>) -> TensorData {
        TensorData::F64(data)
    }
    fn unwrap(data: &TensorData) -> Option<&[f64]> {
        match data {
            TensorData::F64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }
}

impl StoredTensor {
    pub fn from_tensor<T: Storable>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        StoredTensor {
            name: name.into(),
            dims: t.shape().0.to_vec(),
            data: T::wrap(t.data().to_vec()),
        }
    }

    pub fn to_tensor<T: Storable>(&self, expected: Shape) -> Result<Tensor<T>, CheckpointError> {
        if self.dims != expected.0 {
            return Err(CheckpointError::TensorShape {
                name: self.name.clone(),
                expected: expected.0.to_vec(),
                found: self.dims.clone(),
            });
        }
        let data = T::unwrap(&self.data).ok_or_else(|| CheckpointError::DType {
            name: self.name.clone(),
        })?;
        Ok(Tensor::from_vec(expected, data.to_vec()).expect("dims checked"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Parameters of `model` under their own names.
    pub fn from_model<T: Storable>(model: &Model<T>, meta: CheckpointMeta) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(n, t)| StoredTensor::from_tensor(n, t))
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Builds the model described by the metadata and loads its parameters.
    pub fn to_model<T: Storable>(&self) -> Result<Model<T>> {
        let mut model = Model::init(&self.meta.model, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies every parameter of `model` from the tensor of the same name.
    /// The model is left untouched on error.
    pub fn load_into<T: Storable>(&self, model: &mut Model<T>) -> Result<()> {
        let loaded = model
            .named_params()
            .into_iter()
            .map(|(name, t)| {
                let stored = self.get(&name).ok_or_else(|| CheckpointError::TensorShape {
                    name: name.clone(),
                    expected: t.shape().0.to_vec(),
                    found: Vec::new(),
                })?;
                stored.to_tensor::<T>(t.shape())
            })
            .collect::<Result<Vec<_>, CheckpointError>>()?;
        for (dst, src) in model.params_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| CheckpointError::Malformed(format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(match t.data {
                TensorData::F32(_) => 0,
                TensorData::F64(_) => 1,
            });
            out.push(
                u8::try_from(t.dims.len())
                    .map_err(|_| CheckpointError::Malformed(format!("tensor {} has too many dims", t.name)))?,
            );
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out[MAGIC.len()..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let meta_len = r.len_u64("metadata length")?;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let ctx = format!("tensor {i}");
            let name_len = r.u16(&ctx)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &ctx)?)
                .map_err(|_| CheckpointError::Malformed(format!("{ctx}: name is not UTF-8")))?
                .to_string();
            let dtype = match r.u8(&name)? {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(CheckpointError::Malformed(format!("{name}: unknown dtype {other}")).into()),
            };
            let ndim = r.u8(&name)? as usize;
            let raw_dims = (0..ndim).map(|_| r.u64(&name)).collect::<Result<Vec<u64>, _>>()?;
            let overflow = || CheckpointError::DimensionOverflow {
                name: name.clone(),
                dims: raw_dims.clone(),
            };
            let dims = raw_dims
                .iter()
                .map(|&d| usize::try_from(d).map_err(|_| overflow()))
                .collect::<Result<Vec<usize>, _>>()?;
            let bytes_needed = dims
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(overflow)?;
            let payload = r.take(bytes_needed, &name)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            tensors.push(StoredTensor { name, dims, data });
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} unexpected trailing bytes",
                bytes.len() - r.pos
            ))
            .into());
        }
        let computed = crc32fast::hash(&bytes[MAGIC.len()..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes via a temporary file in the same directory and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
                needed: n - left,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u16(&mut self, ctx: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, ctx)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self, ctx: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(ctx)?;
        usize::try_from(v).map_err(|_| CheckpointError::Truncated {
            context: ctx.to_string(),
            needed: usize::MAX,
        })
    }
}
