//! Checkpoint layout (integers 32-bit little-endian):
//!
//! ```text
//! "SPCK" | version | config_len | config JSON | tensor_count |
//!   per tensor: name_len | name | ndim | dims... | f32 values
//! ```
//!
//! Tensors appear in parameter declaration order.

use super::{ModelConfig, ModelParams};
use crate::autodiff::Parameters;
use crate::error::{Result, SpanError};
use crate::format::{put_f32s, put_u32, Reader};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(cfg: &ModelConfig, params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let json = serde_json::to_vec(cfg).expect("config serializes");
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let mut tensors = Vec::new();
    params.visit("", &mut |name, a| tensors.push((name.to_string(), a.shape().to_vec(), a.iter().copied().collect::<Vec<T>>())));
    put_u32(&mut out, tensors.len() as u32);
    for (name, shape, values) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len() as u32);
        for d in shape {
            put_u32(&mut out, d as u32);
        }
        put_f32s(&mut out, values);
    }
    out
}

pub fn load_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<T>)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SpanError::VersionUnsupported(version));
    }
    let len = r.u32("config")? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| SpanError::MalformedStream(format!("config: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..count {
        let n = r.u32("tensor name")? as usize;
        let name = String::from_utf8(r.take(n, "tensor name")?.to_vec())
            .map_err(|_| SpanError::MalformedStream("tensor name is not UTF-8".into()))?;
        let ndim = r.u32("tensor shape")? as usize;
        let shape = (0..ndim).map(|_| r.u32("tensor shape").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let values = r.f32s(shape.iter().product(), "tensor values")?;
        stored.insert(name, (shape, values));
    }
    r.finish()?;
    let mut params = ModelParams::<T>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut err = None;
    params.visit_mut("", &mut |name, mut a| {
        if err.is_some() {
            return;
        }
        match stored.remove(name) {
            Some((shape, values)) if shape == a.shape() => {
                a.iter_mut().zip(values).for_each(|(d, v)| *d = T::lit(v as f64));
            }
            Some((shape, _)) => {
                err = Some(SpanError::DimensionMismatch(format!("{name}: stored {shape:?}, expected {:?}", a.shape())))
            }
            None => err = Some(SpanError::MalformedStream(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = stored.keys().next() {
        return Err(SpanError::UnknownParam(name.clone()));
    }
    Ok((cfg, params))
}

pub fn write_checkpoint<T: Scalar>(path: &Path, cfg: &ModelConfig, params: &ModelParams<T>) -> std::io::Result<()> {
    std::fs::write(path, save_checkpoint(cfg, params))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> std::result::Result<(ModelConfig, ModelParams<T>), Box<dyn std::error::Error + Send + Sync>> {
    Ok(load_checkpoint(&std::fs::read(path)?)?)
}
