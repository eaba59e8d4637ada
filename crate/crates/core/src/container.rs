//! Flat binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "SPRNTPRM"
//! version  u32      1
//! cfg_len  u64      length of the config JSON
//! cfg      cfg_len  UTF-8 JSON
//! count    u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8), ndim u32, dims u64 × ndim, data f64 × Π dims
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"SPRNTPRM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_json: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Container {
    pub fn new(config_json: String) -> Self {
        Self { config_json, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Matrix) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write<W: Write>(mut w: W, c: &Container) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(c.config_json.len() as u64).to_le_bytes())?;
    w.write_all(c.config_json.as_bytes())?;
    w.write_all(&(c.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &c.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

pub fn read<R: Read>(mut r: R) -> Result<Container> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let config_json = read_string(&mut r, cfg_len)?;
    let count = read_u32(&mut r)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)?;
        let dims: Vec<usize> = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(Error::Format(format!("{name}: {ndim}-d tensors unsupported"))),
        };
        let mut data = vec![0.0; rows * cols];
        let mut b = [0u8; 8];
        for x in &mut data {
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        tensors.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(Container { config_json, tensors })
}

pub fn write_file(path: &Path, c: &Container) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, c)?;
    w.flush()?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Container> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout() {
        let mut c = Container::new("{}".into());
        c.push("w", Matrix::from_vec(1, 2, vec![1.0, -2.5]));
        let mut buf = Vec::new();
        write(&mut buf, &c).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..20], &2u64.to_le_bytes());
        assert_eq!(&buf[20..22], b"{}");
        assert_eq!(buf.len(), 22 + 4 + 4 + 1 + 4 + 16 + 16);
        assert_eq!(&buf[buf.len() - 8..], &(-2.5f64).to_le_bytes());
        assert_eq!(read(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read(&b"NOTMAGIC\x01\0\0\0"[..]).is_err());
    }
}
