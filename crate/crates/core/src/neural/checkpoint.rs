//! Flat binary parameter file: the magic `rtcnn v1`, then for each tensor a
//! little-endian u32 name length, the UTF-8 name, u32 rows, u32 cols and
//! `rows * cols` little-endian f64 values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::graph::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"rtcnn v1";
const MAX_NAME: u32 = 4096;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, t) in store.names().iter().zip(store.tensors()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(tensor: &str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_string(),
        msg: msg.into(),
    }
}

/// Fill `buf` completely; `Ok(false)` on a clean EOF before the first byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_u32<R: Read>(r: &mut R, tensor: &str, field: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| corrupt(tensor, format!("truncated {field}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("<header>", "file shorter than the header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("<header>", "bad magic, expected `rtcnn v1`"));
    }
    let mut store = ParamStore::new();
    loop {
        let position = format!("#{}", store.len());
        let mut len = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len)
            .map_err(|_| corrupt(&position, "truncated name length"))?
        {
            break;
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_NAME {
            return Err(corrupt(&position, format!("name length {len} is implausible")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|_| corrupt(&position, "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| corrupt(&position, "name is not UTF-8"))?;
        let rows = read_u32(&mut r, &name, "rows")? as usize;
        let cols = read_u32(&mut r, &name, "cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 28)
            .ok_or_else(|| corrupt(&name, format!("shape {rows}x{cols} is implausible")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| corrupt(&name, format!("truncated values, expected {n}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.push(name, Tensor2::from_vec(rows, cols, data));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = File::create(path)?;
    write_checkpoint(store, BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let f = File::open(path)?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.push("a.w", Tensor2::from_vec(2, 2, vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300]));
        s.push("b", Tensor2::scalar(-1.0));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(&buf[..8], CHECKPOINT_MAGIC);
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.names(), s.names());
        for (a, b) in back.tensors().iter().zip(s.tensors()) {
            let bits = |t: &Tensor2| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_names_the_tensor() {
        let mut buf = Vec::new();
        write_checkpoint(&sample(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { ref tensor, .. } if tensor == "b"), "{err}");
    }

    #[test]
    fn bad_magic_is_rejected() {
        let err = read_checkpoint(&b"rtcnn v2"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { .. }));
    }
}
