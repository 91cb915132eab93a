//! Binary checkpoint container.
//!
//! Layout (little endian): magic, `u32` version, `u64` metadata length,
//! metadata JSON, `u64` tensor count, then per tensor `u32` name length,
//! name, `u64` rows, `u64` cols and `rows·cols` `f64` values.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Normalizer, OmniTft};
use crate::diffcore::Tensor;
use crate::schema::DatasetSchema;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OMNITFT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    schema: DatasetSchema,
    normalizer: Normalizer,
    extra: serde_json::Value,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl OmniTft {
    /// Writes the model with caller metadata `extra` (must serialize deterministically).
    pub fn write_checkpoint<W: Write>(
        &self,
        mut out: W,
        extra: &serde_json::Value,
    ) -> Result<(), ModelError> {
        let meta = Meta {
            config: self.config.clone(),
            schema: self.schema.doc().clone(),
            normalizer: self.normalizer.clone(),
            extra: extra.clone(),
        };
        let meta = serde_json::to_vec(&meta)?;
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        out.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (_, name, t) in self.params.iter() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.rows() as u64).to_le_bytes())?;
            out.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self, extra: &serde_json::Value) -> Result<Vec<u8>, ModelError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, extra)?;
        Ok(buf)
    }

    /// Reads a checkpoint, returning the model and its `extra` metadata.
    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(Self, serde_json::Value), ModelError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint file"));
        }
        let version = read_u32(&mut input)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let meta_len = read_u64(&mut input)? as usize;
        let mut meta = vec![0u8; meta_len];
        input.read_exact(&mut meta)?;
        let meta: Meta = serde_json::from_slice(&meta)?;
        let schema = meta.schema.validate().map_err(|e| err(e.to_string()))?;
        let mut model = OmniTft::new(schema, meta.config, meta.normalizer)?;
        let n = read_u64(&mut input)? as usize;
        if n != model.params.len() {
            return Err(err(format!(
                "{n} tensors, model has {}",
                model.params.len()
            )));
        }
        for i in 0..n {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| err("tensor name is not UTF-8"))?;
            let rows = read_u64(&mut input)? as usize;
            let cols = read_u64(&mut input)? as usize;
            let id = crate::diffcore::ParamId(i);
            if model.params.name(id) != name {
                return Err(err(format!(
                    "tensor {i} is {name:?}, expected {:?}",
                    model.params.name(id)
                )));
            }
            if model.params.get(id).shape() != [rows, cols] {
                return Err(err(format!("tensor {name:?} has shape {rows}x{cols}")));
            }
            let mut data = vec![0.0; rows * cols];
            let mut b = [0u8; 8];
            for v in &mut data {
                input.read_exact(&mut b)?;
                *v = f64::from_le_bytes(b);
            }
            *model.params.get_mut(id) = Tensor::new(rows, cols, data)?;
        }
        Ok((model, meta.extra))
    }
}
