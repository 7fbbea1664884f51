//! JSON checkpoints of named `f64` blocks (little-endian, base64).

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(s)
        .map_err(|e| Error::parse("<checkpoint>", e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(
            "<checkpoint>",
            format!("{} bytes is not a whole number of f64", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            meta,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.blocks.push(Block {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: encode_f64(values),
        });
    }

    /// Values of `name`, checked against the expected shape.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let b = self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no block {name}")))?;
        if b.shape != shape {
            return Err(Error::Shape(format!("block {name}: shape {:?}, expected {shape:?}", b.shape)));
        }
        let v = decode_f64(&b.data)?;
        if v.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("block {name}: {} values for {shape:?}", v.len())));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&s).map_err(|e| Error::parse(path, e))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::parse(path, format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, std::f64::consts::PI];
        let mut c = Checkpoint::new(serde_json::json!({"arch": "test"}));
        c.push("w", &[2, 3], &v);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        let got = back.get("w", &[2, 3]).unwrap();
        assert!(got.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back.get("w", &[3, 2]).is_err());
        assert!(back.get("missing", &[1]).is_err());
    }
}
