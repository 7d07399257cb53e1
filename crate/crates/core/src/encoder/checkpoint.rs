//! Binary checkpoint format.
//!
//! ```text
//! magic          8 bytes  "IBBRENC\0"
//! version        u32 LE
//! dim            u64 LE
//! emb_dim        u64 LE
//! vocab_buckets  u64 LE
//! shared_towers  u8 (0 or 1)
//! seed           u64 LE
//! matrices       f64 LE, row-major: query embedding, query projection,
//!                then passage embedding and projection if not shared
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderConfig, EncoderParams, Tower};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IBBRENC\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::InvalidInput(format!("bad checkpoint: {}", msg.into()))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => corrupt("truncated"),
        _ => corrupt(e.to_string()),
    })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    read_exact(r, &mut bytes)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    Ok(values)
}

fn write_matrix<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

impl EncoderParams {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(c.dim as u64).to_le_bytes())?;
        w.write_all(&(c.emb_dim as u64).to_le_bytes())?;
        w.write_all(&(c.vocab_buckets as u64).to_le_bytes())?;
        w.write_all(&[u8::from(c.shared_towers)])?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in self.slices() {
            write_matrix(w, s)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("wrong magic bytes"));
        }
        let mut v = [0u8; 4];
        read_exact(r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let dim = read_u64(r)? as usize;
        let emb_dim = read_u64(r)? as usize;
        let vocab_buckets = read_u64(r)? as usize;
        let mut flag = [0u8; 1];
        read_exact(r, &mut flag)?;
        let shared_towers = match flag[0] {
            0 => false,
            1 => true,
            other => return Err(corrupt(format!("bad shared-tower flag {other}"))),
        };
        let seed = read_u64(r)?;
        let config = EncoderConfig {
            dim,
            emb_dim,
            vocab_buckets,
            shared_towers,
        };
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        let read_tower = |r: &mut R| -> Result<Tower> {
            Ok(Tower {
                embedding: read_matrix(r, vocab_buckets * emb_dim)?,
                projection: read_matrix(r, emb_dim * dim)?,
            })
        };
        let query = read_tower(r)?;
        let passage = if shared_towers {
            None
        } else {
            Some(read_tower(r)?)
        };
        Ok(Self {
            config,
            seed,
            query,
            passage,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(shared: bool) -> EncoderConfig {
        EncoderConfig {
            dim: 6,
            emb_dim: 4,
            vocab_buckets: 31,
            shared_towers: shared,
        }
    }

    #[test]
    fn round_trip_both_tower_layouts() {
        for shared in [true, false] {
            let p = EncoderParams::new(cfg(shared), 9).unwrap();
            let mut bytes = Vec::new();
            p.write_to(&mut bytes).unwrap();
            let expected_len = 8 + 4 + 8 * 3 + 1 + 8 + (31 * 4 + 4 * 6) * 8 * if shared { 1 } else { 2 };
            assert_eq!(bytes.len(), expected_len);
            let q = EncoderParams::read_from(&mut bytes.as_slice()).unwrap();
            assert_eq!(p, q);
        }
    }

    #[test]
    fn header_layout_is_little_endian() {
        let p = EncoderParams::new(cfg(true), 0x0102030405060708).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(&bytes[8..12], &[1, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &6u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &4u64.to_le_bytes());
        assert_eq!(&bytes[28..36], &31u64.to_le_bytes());
        assert_eq!(bytes[36], 1);
        assert_eq!(&bytes[37..45], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[45..53], &p.query.embedding[0].to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let p = EncoderParams::new(cfg(true), 1).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(EncoderParams::read_from(&mut bad.as_slice()).is_err());

        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(EncoderParams::read_from(&mut bad.as_slice()).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(EncoderParams::read_from(&mut &truncated[..]).is_err());

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(EncoderParams::read_from(&mut bad.as_slice()).is_err());
    }
}
