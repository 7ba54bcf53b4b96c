//! Tensor file format: an 8-byte little-endian header length `N`, `N` bytes
//! of JSON `{"name": .., "shape": [..]}`, then the row-major payload as
//! little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    shape: Vec<usize>,
}

pub fn write_tensor<W: Write>(mut w: W, name: &str, t: &Tensor) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        name: name.to_string(),
        shape: t.shape().to_vec(),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<(String, Tensor)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 20 {
        return Err(Error::Contract(format!("tensor header of {len} bytes")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let n: usize = header.shape.iter().product();
    let mut payload = vec![0u8; n * 8];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header.name, Tensor::new(&header.shape, data)?))
}

pub fn write_tensor_file(path: impl AsRef<Path>, name: &str, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, name, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<(String, Tensor)> {
    read_tensor(BufReader::new(File::open(path)?))
}
