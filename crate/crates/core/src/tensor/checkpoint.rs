//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "OPCK"
//! version  u8       1
//! count    u32      number of records
//! record*  name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, data f64 × product(dims)
//! ```

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OPCK";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    let records: Vec<_> = records.into_iter().collect();
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    if take::<4>(&mut r)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let [version] = take::<1>(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Data(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(take(&mut r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("w", &t)]).unwrap();
        assert_eq!(&buf[..4], b"OPCK");
        assert_eq!(buf[4], 1);
        assert_eq!(u32::from_le_bytes(buf[5..9].try_into().unwrap()), 1);
        // 9 header + 4 + 1 name + 4 ndim + 16 dims + 16 data
        assert_eq!(buf.len(), 9 + 4 + 1 + 4 + 16 + 16);
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back[0].0, "w");
        assert_eq!(back[0].1.data(), t.data());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01"[..]).is_err());
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
