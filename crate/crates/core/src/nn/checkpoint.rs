//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `ADLB`, version `u16`, entry count `u32`,
//! then per entry: name length `u16` + UTF-8 bytes, trainable `u8`,
//! dtype `u8`, rank `u8`, `rank` extents as `u32`, raw element values.

use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADLB";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode<S: Scalar>(store: &ParamStore<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.iter() {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Malformed(format!("parameter name too long: {}", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(e.trainable as u8);
        out.push(S::DTYPE.tag());
        let shape = e.tensor.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Malformed(format!("rank too large: {}", e.name)))?;
        out.push(rank);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Malformed(format!("extent too large: {}", e.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ParamStore<S>> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let count = r.u32("entry count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(Error::Malformed(format!("{name}: trainable flag {other}"))),
        };
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Malformed(format!("{name}: dtype tag {tag}")))?;
        if dtype != S::DTYPE {
            return Err(Error::Malformed(format!(
                "{name}: stored as {dtype:?}, requested {:?}",
                S::DTYPE
            )));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = numel(&shape);
        let width = dtype.size();
        let raw = r.take(n * width, "values")?;
        let data = raw.chunks_exact(width).map(S::read_le).collect();
        store.insert(name, Tensor::new(&shape, data)?, trainable)?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write_checkpoint<S: Scalar>(store: &ParamStore<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store)?)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<S>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitRng;
    use proptest::prelude::*;

    fn sample(seed: u64) -> ParamStore<f32> {
        let mut rng = SplitRng::new(seed).stream();
        let mut s = ParamStore::new();
        s.insert("layers.0.w", Tensor::randn(&[3, 4], 1.0, &mut rng), true).unwrap();
        s.insert("b", Tensor::randn(&[5], 1.0, &mut rng), false).unwrap();
        s.insert("scalar", Tensor::scalar(-0.0), true).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample(0)).unwrap();
        assert_eq!(&bytes[..4], b"ADLB");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        // first entry: name, flag, dtype, rank, extents, values
        let expect = 10 + 2 + 10 + 3 + 2 * 4 + 12 * 4;
        let second_name_len = u16::from_le_bytes([bytes[expect], bytes[expect + 1]]);
        assert_eq!(second_name_len, 1);
    }

    #[test]
    fn errors_are_named() {
        let mut bytes = encode(&sample(1)).unwrap();
        assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Malformed(_))));
        bytes[4] = 9;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::VersionMismatch { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::BadMagic { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>()) {
            let s = sample(seed);
            let bytes = encode(&s).unwrap();
            let back: ParamStore<f32> = decode(&bytes).unwrap();
            prop_assert!(back.bit_eq(&s));
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
