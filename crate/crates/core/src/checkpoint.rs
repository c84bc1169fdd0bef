//! Binary checkpoints.
//!
//! ```text
//! "QLAB" | u32 version
//! u32 n_layer | u32 n_head | u32 d_hidden | u32 d_inter | u32 vocab | u32 max_seq | u8 rms_before_linear
//! u8 precision (0 fp, 1 quantized, 2 ternary) | u8 bits
//! u32 entry_count, then per entry: u8 kind followed by
//!   kind 0/1: u32 name_len | name | u32 ndim | u32 dims | f32/f64 LE data
//!   kind 2:   a packed quantized block
//! u32 CRC32 of every preceding byte
//! ```
//! Entries not part of the model layout are returned as extras.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, Precision};
use crate::quant::{QuantError, QuantizedLinear};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"QLAB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// A model together with packed layers and auxiliary tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    /// Packed form of projections; on load these replace the fp entries.
    pub quantized: BTreeMap<String, QuantizedLinear>,
    pub extras: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>) -> Self {
        Self {
            model,
            quantized: BTreeMap::new(),
            extras: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let c = self.model.config();
        for v in [c.n_layer, c.n_head, c.d_hidden, c.d_inter, c.vocab_size, c.max_seq_len] {
            out.extend((v as u32).to_le_bytes());
        }
        out.push(c.use_rms_norm_before_linear as u8);
        let (tag, bits) = match self.model.precision() {
            Precision::Fp => (0, 0),
            Precision::Quantized { bits } => (1, bits),
            Precision::Ternary => (2, 0),
        };
        out.extend([tag, bits]);
        let count = self.model.names().len() + self.extras.len();
        out.extend((count as u32).to_le_bytes());
        for (name, t) in self.model.iter() {
            match self.quantized.get(name) {
                Some(q) => {
                    out.push(2);
                    q.write_block(name, &mut out);
                }
                None => write_tensor(name, t, &mut out),
            }
        }
        for (name, t) in &self.extras {
            write_tensor(name, t, &mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            n_layer: dims[0],
            n_head: dims[1],
            d_hidden: dims[2],
            d_inter: dims[3],
            vocab_size: dims[4],
            max_seq_len: dims[5],
            use_rms_norm_before_linear: r.u8()? != 0,
        };
        let precision = match (r.u8()?, r.u8()?) {
            (0, _) => Precision::Fp,
            (1, bits) => Precision::Quantized { bits },
            (2, _) => Precision::Ternary,
            (t, _) => return Err(CheckpointError::Format(format!("unknown precision tag {t}"))),
        };
        let count = r.u32()? as usize;
        let layout = Model::<T>::layout(&config);
        let mut named = Vec::with_capacity(layout.len());
        let mut quantized = BTreeMap::new();
        let mut extras = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = match r.u8()? {
                2 => {
                    let (name, q, used) = QuantizedLinear::read_block(&r.bytes[r.pos..])?;
                    r.pos += used;
                    let t = q.dequantize::<T>();
                    quantized.insert(name.clone(), q);
                    (name, t)
                }
                k @ (0 | 1) => read_tensor::<T>(&mut r, k == 1)?,
                k => return Err(CheckpointError::Format(format!("unknown entry kind {k}"))),
            };
            if layout.iter().any(|(n, _)| *n == name) {
                named.push((name, t));
            } else {
                extras.insert(name, t);
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes".into()));
        }
        let model = Model::from_params(config, named, precision)?;
        Ok(Self {
            model,
            quantized,
            extras,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn write_tensor<T: Real>(name: &str, t: &Tensor<T>, out: &mut Vec<u8>) {
    let wide = T::DTYPE == "f64";
    out.push(wide as u8);
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &x in t.data() {
        if wide {
            out.extend(x.as_f64().to_le_bytes());
        } else {
            out.extend((x.as_f64() as f32).to_le_bytes());
        }
    }
}

fn read_tensor<T: Real>(r: &mut Reader<'_>, wide: bool) -> Result<(String, Tensor<T>), CheckpointError> {
    let len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(len)?)
        .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
        .to_string();
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let width = if wide { 8 } else { 4 };
    let raw = r.take(n.checked_mul(width).ok_or_else(|| CheckpointError::Format("size overflow".into()))?)?;
    let data = raw
        .chunks_exact(width)
        .map(|c| {
            if wide {
                T::of(f64::from_le_bytes(c.try_into().unwrap()))
            } else {
                T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)
            }
        })
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
    Ok((name, t))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
