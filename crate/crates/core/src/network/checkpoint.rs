//! Self-describing binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "SGTCKPT\0"
//! version    u32
//! header     u64 length + UTF-8 JSON {config, n_t, n_r, constellation}
//! count      u32 number of parameter tensors
//! per tensor u32 name length, name bytes, u32 rank, u64 per dimension,
//!            f64 values row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SgtConfig, SgtModel};
use crate::channel::{Constellation, SystemDims};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SGTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: SgtConfig,
    n_t: usize,
    n_r: usize,
    constellation: String,
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

impl SgtModel {
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            n_t: self.dims.n_t,
            n_r: self.dims.n_r,
            constellation: self.constellation.name().to_string(),
        })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.store.len() as u32).to_le_bytes())?;
        for (name, t) in self.store.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        if &read_array::<8>(&mut r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u64(&mut r)?;
        let header: Header = serde_json::from_slice(&read_bytes(&mut r, len)?)?;
        let constellation = Constellation::from_name(&header.constellation)?;
        let dims = SystemDims::new(header.n_t, header.n_r);
        let mut model = SgtModel::new(header.config, dims, constellation, 0)?;
        let count = read_u32(&mut r)? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                model.store.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as u64;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let target = model.store.get_mut(id);
            if shape != target.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    target.shape()
                )));
            }
            for v in target.data_mut() {
                *v = f64::from_le_bytes(read_array(&mut r)?);
            }
            seen[id.0] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Checkpoint("duplicate tensor entries".into()));
        }
        if !model.store.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(model)
    }

    pub fn save_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.save(BufWriter::new(File::create(path)?))
    }

    pub fn load_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        for variant in Variant::ALL {
            let cfg = SgtConfig::new(16, 2).with_variant(variant);
            let m = SgtModel::new(cfg, SystemDims::new(2, 3), Constellation::qam16(), 9).unwrap();
            let mut buf = Vec::new();
            m.save(&mut buf).unwrap();
            assert_eq!(&buf[..8], MAGIC);
            let back = SgtModel::load(buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let m = SgtModel::new(SgtConfig::new(16, 1), SystemDims::new(2, 2), Constellation::qpsk(), 1).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(SgtModel::load(bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(SgtModel::load(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[8] = 7;
        assert!(matches!(SgtModel::load(bad.as_slice()), Err(Error::Checkpoint(_))));
    }
}
