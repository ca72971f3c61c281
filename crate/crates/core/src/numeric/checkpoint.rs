use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"PGCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    Format(String),
}

/// Writes every tensor as (name, shape, little-endian f64 data).
pub fn write_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<(), CheckpointError> {
    let mut b = Vec::with_capacity(16 + store.num_scalars() * 8);
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&(t.rows as u64).to_le_bytes());
        b.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for x in &t.data {
            b.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&b)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamStore, CheckpointError> {
    let mut b = Vec::new();
    r.read_to_end(&mut b)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
        if b.len() - pos < n {
            return Err(CheckpointError::Format("truncated".into()));
        }
        pos += n;
        Ok(&b[pos - n..pos])
    };
    if take(8)? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_of = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_of(take(4)?);
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = u32_of(take(4)?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = u32_of(take(4)?) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec())
            .map_err(|_| CheckpointError::Format("name is not UTF-8".into()))?;
        let ndim = u32_of(take(4)?);
        if ndim != 2 {
            return Err(CheckpointError::Format(format!("{name}: rank {ndim}")));
        }
        let rows = u64_of(take(8)?) as usize;
        let cols = u64_of(take(8)?) as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::Format(format!("{name}: shape overflow")))?;
        let raw = take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.id(&name).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
        store.add(name, Tensor::new(rows, cols, data));
    }
    if pos != b.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(store)
}

/// Atomic write via a sibling temp file.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        write_checkpoint(store, &mut f)?;
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_rows(&[vec![1.0, -2.5], vec![3.0, f64::MIN_POSITIVE]]));
        s.add("b.bias", Tensor::row(vec![0.125; 3]));
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, s);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}
