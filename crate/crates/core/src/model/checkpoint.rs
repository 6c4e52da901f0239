//! Binary checkpoints: config JSON plus raw tensors, CRC-sealed.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "SVCP" | version u32 | precision u8 | config_len u32 | config JSON
//! n_tensors u32 | tensors... | crc32 u32 over everything before it
//! per tensor: name_len u16 | name | ndim u8 | dims u64... | element data
//! ```
//!
//! Tensors appear in [`ModelParams::for_each`] order and the loader insists
//! on it; a reordered or reshaped file is a format error, never a reshape.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;

use crate::numerics::{Precision, Real};

use super::{ModelConfig, ModelError, ModelParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SVCP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 1,
        Precision::F64 => 2,
    }
}

fn tag_precision(tag: u8) -> Result<Precision, ModelError> {
    match tag {
        1 => Ok(Precision::F32),
        2 => Ok(Precision::F64),
        other => Err(ModelError::Format(format!("unknown precision tag {other}"))),
    }
}

pub fn save_checkpoint<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<(), ModelError> {
    let config_json =
        serde_json::to_vec(&params.config).expect("config serializes");
    let mut n_tensors: u32 = 0;
    let mut payload: usize = 0;
    params.for_each(|name, _, v| {
        n_tensors += 1;
        payload += 2 + name.len() + 1 + 8 * v.ndim() + v.len() * std::mem::size_of::<T>();
    });
    let mut buf = Vec::with_capacity(17 + config_json.len() + payload + 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(precision_tag(T::PRECISION));
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);
    buf.extend_from_slice(&n_tensors.to_le_bytes());
    params.for_each(|name, _, v| {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(v.ndim() as u8);
        for &dim in v.shape() {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        match T::PRECISION {
            Precision::F32 => {
                for &x in v.iter() {
                    buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
                }
            }
            Precision::F64 => {
                for &x in v.iter() {
                    buf.extend_from_slice(&x.to_f64().to_le_bytes());
                }
            }
        }
    });
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, &buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Format("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header contents without the tensor data. Runs the same CRC gate as a full
/// load so a corrupt file is rejected either way.
pub fn checkpoint_meta(path: &Path) -> Result<(ModelConfig, Precision), ModelError> {
    let bytes = fs::read(path)?;
    let mut r = verified_body(&bytes)?;
    let (config, precision) = read_header(&mut r)?;
    Ok((config, precision))
}

fn verified_body(bytes: &[u8]) -> Result<Reader<'_>, ModelError> {
    if bytes.len() < 4 {
        return Err(ModelError::Format("truncated checkpoint".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let recorded = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if recorded != computed {
        return Err(ModelError::ChecksumMismatch(format!(
            "recorded {recorded:08x}, computed {computed:08x}"
        )));
    }
    Ok(Reader { buf: body, pos: 0 })
}

fn read_header(r: &mut Reader<'_>) -> Result<(ModelConfig, Precision), ModelError> {
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let precision = tag_precision(r.u8()?)?;
    let config_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| ModelError::Format(format!("bad config block: {e}")))?;
    config.validate()?;
    Ok((config, precision))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ModelParams<T>, ModelError> {
    let bytes = fs::read(path)?;
    let mut r = verified_body(&bytes)?;
    let (config, precision) = read_header(&mut r)?;
    if precision != T::PRECISION {
        return Err(ModelError::ConfigMismatch(format!(
            "checkpoint precision {precision}, requested {}",
            T::PRECISION
        )));
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors: Vec<(String, ArrayD<T>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Format("tensor name not utf-8".into()))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * std::mem::size_of::<T>())?;
        let mut data = Vec::with_capacity(numel);
        match T::PRECISION {
            Precision::F32 => {
                for chunk in raw.chunks_exact(4) {
                    data.push(T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
                }
            }
            Precision::F64 => {
                for chunk in raw.chunks_exact(8) {
                    data.push(T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
                }
            }
        }
        let arr = ArrayD::from_shape_vec(shape, data)
            .map_err(|e| ModelError::Format(format!("tensor {name}: {e}")))?;
        tensors.push((name, arr));
    }
    if r.pos != r.buf.len() {
        return Err(ModelError::Format("trailing bytes after tensors".into()));
    }

    let mut params = ModelParams::<T>::zeros(&config);
    let mut cursor = 0usize;
    let mut problem: Option<ModelError> = None;
    params.for_each_mut(|name, _, mut view| {
        if problem.is_some() {
            return;
        }
        let Some((stored_name, stored)) = tensors.get(cursor) else {
            problem = Some(ModelError::Format(format!("missing tensor {name}")));
            return;
        };
        if stored_name != name {
            problem = Some(ModelError::Format(format!(
                "tensor order mismatch: expected {name}, found {stored_name}"
            )));
        } else if stored.shape() != view.shape() {
            problem = Some(ModelError::Format(format!(
                "tensor {name}: stored shape {:?}, expected {:?}",
                stored.shape(),
                view.shape()
            )));
        } else {
            view.assign(stored);
        }
        cursor += 1;
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if cursor != tensors.len() {
        return Err(ModelError::Format(format!(
            "unexpected tensor {}",
            tensors[cursor].0
        )));
    }
    params.ensure_finite()?;
    Ok(params)
}

/// Load gated on an expected architecture.
pub fn load_checkpoint_expecting<T: Real>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelParams<T>, ModelError> {
    let params = load_checkpoint::<T>(path)?;
    if params.config != *expected {
        return Err(ModelError::ConfigMismatch(
            "checkpoint architecture differs from the requested config".into(),
        ));
    }
    Ok(params)
}
