//! Flat binary tensor container shared by feature import and scorer
//! parameter files.
//!
//! Layout of one record (all integers and floats little-endian):
//!
//! ```text
//! "MFI2P\0"            6-byte magic
//! u32                  number of dimensions
//! u32 × ndims          dimension sizes
//! f32 × prod(dims)     values, row-major
//! ```
//!
//! A file may hold several records back to back.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"MFI2P\0";

/// A decoded tensor record. Values are widened to `f64` on read.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::TensorFormat(format!(
                "dims {dims:?} imply {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::TensorFormat(format!(
                "{what}: expected rank {rank}, got dims {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

pub fn write_tensor<W: Write>(w: &mut W, dims: &[usize], data: &[f64]) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != data.len() {
        return Err(Error::TensorFormat(format!(
            "dims {dims:?} imply {n} values, got {}",
            data.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::TensorFormat(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &x in data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one record; `Ok(None)` on clean end of input.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    let mut magic = [0u8; 6];
    match r.read(&mut magic[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(e.into()),
    }
    r.read_exact(&mut magic[1..]).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::TensorFormat(format!("bad magic {magic:?}")));
    }
    let ndims = read_u32(r).map_err(truncated_err)? as usize;
    if ndims > 16 {
        return Err(Error::TensorFormat(format!("implausible rank {ndims}")));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(read_u32(r).map_err(truncated_err)? as usize);
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("tensor value at flat index {i}")));
    }
    Ok(Some(Tensor { dims, data }))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::TensorFormat("truncated record".into())
    } else {
        e.into()
    }
}

fn truncated_err(e: Error) -> Error {
    match e {
        Error::Io(io) => truncated(io),
        other => other,
    }
}

pub fn read_all<R: Read>(r: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    while let Some(t) = read_tensor(r)? {
        out.push(t);
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, &t.dims, &t.data)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>> {
    read_all(&mut BufReader::new(File::open(path)?))
}

/// Loads a file that must hold exactly one record.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let mut all = load_tensors(path)?;
    if all.len() != 1 {
        return Err(Error::TensorFormat(format!(
            "{}: expected one tensor, found {}",
            path.display(),
            all.len()
        )));
    }
    Ok(all.remove(0))
}
