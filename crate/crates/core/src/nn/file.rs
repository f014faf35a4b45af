//! `NNW1` weights container.
//!
//! ```text
//! 0   magic "NNW1"
//! 4   format version      u16
//! 6   reserved            u16 (0)
//! 8   body length         u64
//! 16  body:
//!       layer count       u32
//!       per layer         kind u8 | activation u8 | reserved u16 | input u32 | output u32
//!       normalization     input offset[5], input scale[5], output offset[4], output scale[4] (f64)
//!       parameter count   u64
//!       parameters        f64 * count
//! ..  CRC32 (IEEE) of every preceding byte, u32
//! ```
//! All fields little-endian.

use std::path::Path;

use thiserror::Error;

use super::{Activation, LayerKind, LayerSpec, NetworkSpec, NetworkWeights, NnError, Normalization, N_INPUTS, N_OUTPUTS};

pub const MAGIC: [u8; 4] = *b"NNW1";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;
const TRAILER_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum WeightsFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("file truncated: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed weights file: {0}")]
    Malformed(String),
    #[error("invalid network: {0}")]
    Network(#[from] NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NetworkWeights {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(8 * self.params.len() + 256);
        body.extend((self.spec.layers.len() as u32).to_le_bytes());
        for l in &self.spec.layers {
            body.push(match l.kind {
                LayerKind::Dense => 0,
                LayerKind::Lstm => 1,
            });
            body.push(match l.activation {
                Activation::Linear => 0,
                Activation::Tanh => 1,
                Activation::Sigmoid => 2,
            });
            body.extend(0u16.to_le_bytes());
            body.extend((l.input_width as u32).to_le_bytes());
            body.extend((l.output_width as u32).to_le_bytes());
        }
        let n = &self.norm;
        for v in n
            .input_offset
            .iter()
            .chain(&n.input_scale)
            .chain(&n.output_offset)
            .chain(&n.output_scale)
        {
            body.extend(v.to_le_bytes());
        }
        body.extend((self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            body.extend(p.to_le_bytes());
        }

        let mut out = Vec::with_capacity(HEADER_LEN + body.len() + TRAILER_LEN);
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(0u16.to_le_bytes());
        out.extend((body.len() as u64).to_le_bytes());
        out.extend(body);
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightsFileError> {
        if bytes.len() < HEADER_LEN {
            return Err(WeightsFileError::Truncated {
                expected: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(WeightsFileError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let total = usize::try_from(body_len)
            .ok()
            .and_then(|b| b.checked_add(HEADER_LEN + TRAILER_LEN))
            .ok_or_else(|| WeightsFileError::Malformed("body length overflows".into()))?;
        if bytes.len() < total {
            return Err(WeightsFileError::Truncated {
                expected: total,
                got: bytes.len(),
            });
        }
        if bytes.len() > total {
            return Err(WeightsFileError::Malformed(format!(
                "{} trailing bytes after checksum",
                bytes.len() - total
            )));
        }
        let (payload, trailer) = bytes.split_at(total - TRAILER_LEN);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(WeightsFileError::Checksum { stored, computed });
        }
        if version != FORMAT_VERSION {
            return Err(WeightsFileError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut r = Reader {
            buf: &payload[HEADER_LEN..],
        };
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n_layers.min(1024));
        for i in 0..n_layers {
            let kind = match r.u8()? {
                0 => LayerKind::Dense,
                1 => LayerKind::Lstm,
                k => return Err(WeightsFileError::Malformed(format!("layer {i}: unknown kind {k}"))),
            };
            let activation = match r.u8()? {
                0 => Activation::Linear,
                1 => Activation::Tanh,
                2 => Activation::Sigmoid,
                a => {
                    return Err(WeightsFileError::Malformed(format!(
                        "layer {i}: unknown activation {a}"
                    )))
                }
            };
            r.u16()?;
            let input_width = r.u32()? as usize;
            let output_width = r.u32()? as usize;
            layers.push(LayerSpec {
                kind,
                input_width,
                output_width,
                activation,
            });
        }
        let mut norm = Normalization::identity();
        for v in norm.input_offset.iter_mut().chain(norm.input_scale.iter_mut()) {
            *v = r.f64()?;
        }
        for v in norm.output_offset.iter_mut().chain(norm.output_scale.iter_mut()) {
            *v = r.f64()?;
        }
        debug_assert_eq!(norm.input_offset.len(), N_INPUTS);
        debug_assert_eq!(norm.output_offset.len(), N_OUTPUTS);
        let n_params = r.u64()? as usize;
        if n_params.checked_mul(8) != Some(r.buf.len()) {
            return Err(WeightsFileError::Malformed(format!(
                "parameter count {n_params} does not match {} remaining bytes",
                r.buf.len()
            )));
        }
        let params = (0..n_params).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(NetworkWeights::new(NetworkSpec { layers }, norm, params)?)
    }

    /// Lossless JSON rendering for diffing.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("weights serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, WeightsFileError> {
        let w: NetworkWeights = serde_json::from_str(s)?;
        Ok(NetworkWeights::new(w.spec, w.norm, w.params)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], WeightsFileError> {
        if self.buf.len() < N {
            return Err(WeightsFileError::Malformed("body ends mid-field".into()));
        }
        let (head, rest) = self.buf.split_at(N);
        self.buf = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, WeightsFileError> {
        Ok(self.take::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsFileError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, WeightsFileError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64, WeightsFileError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, WeightsFileError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<(), WeightsFileError> {
    std::fs::write(path, weights.to_bytes())?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights, WeightsFileError> {
    NetworkWeights::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> NetworkWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = NetworkWeights::random(NetworkSpec::default(), Normalization::identity(), &mut rng).unwrap();
        w.norm.output_offset = [3.0, 6.0, 120.0, 4.0];
        w.norm.output_scale = [1.1, 3.5, 80.0, 2.5];
        w
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nnw");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.spec, w.spec);
        assert_eq!(back.norm, w.norm);
        assert!(back.params.iter().zip(&w.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.param_count(), 2300);
    }

    #[test]
    fn json_export_is_lossless() {
        let w = sample();
        let back = NetworkWeights::from_json(&w.to_json()).unwrap();
        assert!(back.params.iter().zip(&w.params).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.norm, w.norm);
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            NetworkWeights::from_bytes(&bytes),
            Err(WeightsFileError::Checksum { .. })
        ));
    }

    #[test]
    fn truncation_is_distinct() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            NetworkWeights::from_bytes(&bytes[..bytes.len() - 9]),
            Err(WeightsFileError::Truncated { .. })
        ));
        assert!(matches!(
            NetworkWeights::from_bytes(&bytes[..10]),
            Err(WeightsFileError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 2;
        let n = bytes.len() - TRAILER_LEN;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            NetworkWeights::from_bytes(&bytes),
            Err(WeightsFileError::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(NetworkWeights::from_bytes(&bytes), Err(WeightsFileError::BadMagic(_))));
    }
}
