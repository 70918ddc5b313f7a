//! Seed derivation, digests and little-endian tensor encoding shared across modules.

use ndarray::{ArrayBase, Data, Dimension};
use sha2::{Digest, Sha256};

/// Derives a child seed from a master seed and a stream index.
///
/// SplitMix64 over `master ^ f(index)`; cheap, stateless and stable across
/// platforms, so every artifact can record the one master seed it came from.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Streaming digest over a sequence of f64 tensors (standard logical order).
pub struct TensorDigest {
    hasher: Sha256,
}

impl TensorDigest {
    pub fn new() -> Self {
        TensorDigest {
            hasher: Sha256::new(),
        }
    }

    pub fn update<S, D>(&mut self, a: &ArrayBase<S, D>)
    where
        S: Data<Elem = f64>,
        D: Dimension,
    {
        for &v in a.iter() {
            self.hasher.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

impl Default for TensorDigest {
    fn default() -> Self {
        Self::new()
    }
}

/// Encodes an f64 tensor as little-endian f32 bytes in logical order.
pub fn encode_f32_le<S, D>(a: &ArrayBase<S, D>) -> Vec<u8>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let mut out = Vec::with_capacity(a.len() * 4);
    for &v in a.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decodes little-endian f32 bytes into an f64 vector.
pub fn decode_f32_le(bytes: &[u8]) -> crate::Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(crate::Error::Io(format!(
            "f32 archive length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Encodes an f64 tensor as little-endian f64 bytes (lossless, for checkpoints).
pub fn encode_f64_le<S, D>(a: &ArrayBase<S, D>) -> Vec<u8>
where
    S: Data<Elem = f64>,
    D: Dimension,
{
    let mut out = Vec::with_capacity(a.len() * 8);
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes bytes to `path` atomically (temp file in the same directory, then
/// rename), creating parent directories as needed.
pub fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> crate::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension(format!(
        "tmp.{}",
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Decodes little-endian f64 bytes.
pub fn decode_f64_le(bytes: &[u8]) -> crate::Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(crate::Error::Io(format!(
            "f64 archive length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect())
}
