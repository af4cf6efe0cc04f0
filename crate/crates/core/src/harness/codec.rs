//! Compact text encoding of perturbations for result rows.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid3D, Image, Perturbation};

/// Perturbation stored as base-64 of little-endian f32 values in
/// height × width × channel order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPerturbation {
    pub shape: [usize; 3],
    pub f32le_b64: String,
}

impl EncodedPerturbation {
    pub fn encode(delta: &Perturbation) -> Self {
        let mut bytes = Vec::with_capacity(delta.len() * 4);
        for &v in delta.values() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let (h, w, c) = delta.dims();
        Self { shape: [h, w, c], f32le_b64: STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Perturbation> {
        let bytes = STANDARD.decode(&self.f32le_b64).map_err(|e| Error::invalid(format!("perturbation base64: {e}")))?;
        let [h, w, c] = self.shape;
        if bytes.len() != h * w * c * 4 {
            return Err(Error::shape(format!("{} bytes for a {h}x{w}x{c} perturbation", bytes.len())));
        }
        let values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Grid3D::new(h, w, c, values)
    }

    /// Decode and re-project onto `[−x, 1−x]`, undoing f32 rounding at the box edges.
    pub fn decode_for(&self, x: &Image) -> Result<Perturbation> {
        let mut d = self.decode()?;
        d.clip_to_box(x)?;
        Ok(d)
    }
}
