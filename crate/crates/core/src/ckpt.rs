//! Bit-exact tensor serialization for checkpoints: little-endian float32
//! payloads wrapped in base64 so checkpoints stay valid JSON.

use crate::nn::Tensor;
use base64::Engine;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorBlob {
    pub rows: usize,
    pub cols: usize,
    pub data_b64: String,
}

pub fn to_blob(t: &Tensor) -> TensorBlob {
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        rows: t.rows,
        cols: t.cols,
        data_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    }
}

pub fn from_blob(b: &TensorBlob) -> Result<Tensor, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(&b.data_b64)
        .map_err(|e| e.to_string())?;
    if bytes.len() != b.rows * b.cols * 4 {
        return Err(format!("expected {} bytes, got {}", b.rows * b.cols * 4, bytes.len()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(b.rows, b.cols, data))
}
