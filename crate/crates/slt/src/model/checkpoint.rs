//! Checkpoint file: magic "SLTC", u32 format version, u32 parameter count,
//! then per parameter a length-prefixed name, u32 rank, u32 extents and
//! little-endian f32 values. Names are the stable identifiers used by
//! pre-training transfer.

use std::path::Path;

use crate::bytesio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SLTC";
pub const VERSION: u32 = 1;

pub fn checkpoint_bytes(store: &ParamStore<f32>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(store.len() as u32);
    for (name, tensor) in store.iter() {
        w.string(name);
        w.u32(tensor.rank() as u32);
        for &e in tensor.shape() {
            w.u32(e as u32);
        }
        for &v in tensor.data() {
            w.f32(v);
        }
    }
    w.into_bytes()
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(bytes, "checkpoint");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint: unsupported format version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    r.check_count(count, 12)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!(
                "checkpoint: parameter {name:?} declares implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = r.u32()? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::Format(format!("checkpoint: {name:?} shape overflow")))?;
            shape.push(e);
        }
        let data = r.f32_vec(numel)?;
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| Error::Format(format!("checkpoint: parameter {name:?}: {e}")))?;
        store.insert(&name, tensor).map_err(|_| {
            Error::Format(format!("checkpoint: duplicate parameter {name:?}"))
        })?;
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint: {} trailing bytes after last parameter",
            r.remaining()
        )));
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Copy every parameter of `store` from `source` by name; shapes must match.
/// Extra parameters in `source` are ignored.
pub fn load_into(store: &mut ParamStore<f32>, source: &ParamStore<f32>) -> Result<()> {
    let mut missing = Vec::new();
    for i in 0..store.len() {
        let name = store.name(i).to_string();
        match source.id(&name) {
            Some(sid) => {
                if source.tensor(sid).shape() != store.tensor(i).shape() {
                    return Err(Error::Transfer(format!(
                        "parameter {name:?}: checkpoint shape {:?} does not match model shape {:?}",
                        source.tensor(sid).shape(),
                        store.tensor(i).shape()
                    )));
                }
                *store.tensor_mut(i) = source.tensor(sid).clone();
            }
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Transfer(format!(
            "checkpoint is missing parameters: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("enc.w", Tensor::from_vec(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        s.insert("dec.b", Tensor::from_vec(vec![2], vec![-0.5, 0.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let store = sample_store();
        let bytes = checkpoint_bytes(&store);
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(store.len(), back.len());
        for i in 0..store.len() {
            assert_eq!(store.name(i), back.name(i));
            assert_eq!(store.tensor(i), back.tensor(i));
        }
        assert_eq!(bytes, checkpoint_bytes(&back));
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let bytes = checkpoint_bytes(&sample_store());
        assert!(parse_checkpoint(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(parse_checkpoint(&bad).is_err());
    }

    #[test]
    fn hostile_extents_do_not_allocate() {
        let mut w = crate::bytesio::Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(1);
        w.string("p");
        w.u32(2);
        w.u32(u32::MAX);
        w.u32(u32::MAX);
        assert!(parse_checkpoint(&w.into_bytes()).is_err());
    }

    #[test]
    fn load_into_copies_and_reports_offenders() {
        let src = sample_store();
        let mut dst = ParamStore::new();
        dst.insert("enc.w", Tensor::zeros(vec![2, 3])).unwrap();
        dst.insert("dec.b", Tensor::zeros(vec![2])).unwrap();
        load_into(&mut dst, &src).unwrap();
        assert_eq!(dst.tensor(0), src.tensor(0));

        let mut wrong_shape = ParamStore::new();
        wrong_shape.insert("enc.w", Tensor::zeros(vec![3, 2])).unwrap();
        let err = load_into(&mut wrong_shape, &src).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");

        let mut missing = ParamStore::new();
        missing.insert("nope", Tensor::zeros(vec![1])).unwrap();
        let err = load_into(&mut missing, &src).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }
}
