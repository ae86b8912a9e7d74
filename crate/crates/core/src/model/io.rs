//! Weight files: an 8-byte little-endian header length, a JSON header naming each tensor and
//! its shape, then every tensor as flat little-endian f32 in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyDlm};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements from the start of the data section.
    offset: usize,
}

pub fn save_weights<W: Write>(model: &ToyDlm, mut out: W) -> Result<()> {
    let tensors = model.tensors();
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += data.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors: entries,
    })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, _, data) in &tensors {
        for &w in *data {
            out.write_all(&w.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_weights<R: Read>(mut input: R) -> Result<ToyDlm> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    if data.len() % 4 != 0 {
        return Err(Error::InvalidConfig("weight data is not a whole number of f32s".into()));
    }
    let floats: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    // Build a model of the right shape, then overwrite every tensor from the file.
    let mut model = ToyDlm::new(header.config)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::InvalidConfig(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for ((slot, (name, shape)), entry) in model.tensors_mut().into_iter().zip(&expected).zip(&header.tensors) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::InvalidConfig(format!(
                "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                entry.name, entry.shape
            )));
        }
        let n: usize = shape.iter().product();
        let src = floats
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::InvalidConfig(format!("tensor `{name}` runs past end of data")))?;
        slot.copy_from_slice(src);
    }
    Ok(model)
}
