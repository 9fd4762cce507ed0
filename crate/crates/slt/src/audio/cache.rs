//! Feature cache file: magic "SLTF", u32 utterance count, then per
//! utterance a length-prefixed id, u32 T_x, u32 n, and T_x*n little-endian
//! f32 values, row-major.

use std::path::Path;

use super::FeatureMatrix;
use crate::bytesio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLTF";

pub fn cache_bytes(utterances: &[FeatureMatrix]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(utterances.len() as u32);
    for u in utterances {
        w.string(&u.utterance_id);
        w.u32(u.num_frames() as u32);
        w.u32(u.feature_dim() as u32);
        for &v in u.frames.data() {
            w.f32(v);
        }
    }
    w.into_bytes()
}

pub fn parse_cache(bytes: &[u8]) -> Result<Vec<FeatureMatrix>> {
    let mut r = Reader::new(bytes, "feature cache");
    r.magic(MAGIC)?;
    let count = r.u32()? as usize;
    // every utterance needs at least its three length fields
    r.check_count(count, 12)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.string()?;
        let t = r.u32()? as usize;
        let n = r.u32()? as usize;
        if t == 0 || n == 0 {
            return Err(Error::Format(format!(
                "feature cache: utterance {id:?} declares empty shape {t}x{n}"
            )));
        }
        let numel = t
            .checked_mul(n)
            .ok_or_else(|| Error::Format("feature cache: shape overflow".into()))?;
        let data = r.f32_vec(numel)?;
        let frames = Tensor::from_vec(vec![t, n], data)?;
        out.push(FeatureMatrix { utterance_id: id, frames });
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "feature cache: {} trailing bytes after last utterance",
            r.remaining()
        )));
    }
    Ok(out)
}

pub fn write_cache(path: &Path, utterances: &[FeatureMatrix]) -> Result<()> {
    std::fs::write(path, cache_bytes(utterances)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<Vec<FeatureMatrix>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<FeatureMatrix> {
        vec![
            FeatureMatrix {
                utterance_id: "utt-a".into(),
                frames: Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            },
            FeatureMatrix {
                utterance_id: "utt-b".into(),
                frames: Tensor::from_vec(vec![1, 3], vec![-1.0, 0.5, 0.25]).unwrap(),
            },
        ]
    }

    #[test]
    fn round_trip_is_bitwise() {
        let utts = sample();
        let bytes = cache_bytes(&utts);
        let back = parse_cache(&bytes).unwrap();
        assert_eq!(utts, back);
        assert_eq!(bytes, cache_bytes(&back));
    }

    #[test]
    fn truncated_cache_is_rejected() {
        let bytes = cache_bytes(&sample());
        for cut in [3, 8, 15, bytes.len() - 1] {
            assert!(parse_cache(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn hostile_count_does_not_allocate() {
        let mut bytes = cache_bytes(&sample());
        // inflate the utterance count field
        bytes[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(parse_cache(&bytes).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = cache_bytes(&sample());
        bytes[0] = b'X';
        let err = parse_cache(&bytes).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
    }
}
