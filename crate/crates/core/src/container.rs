//! Flat binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "HEMC"
//! version  u32      1
//! count    u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (rank x u32)
//!   data     prod(dims) x f32, row-major
//! ```

use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HEMC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub data: ArrayD<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, data: ArrayD<f32>) -> Self {
        Tensor {
            name: name.into(),
            data,
        }
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(name: impl Into<String>, data: &ArrayD<f64>) -> Self {
        Tensor::new(name, data.mapv(|v| v as f32))
    }

    pub fn to_f64(&self) -> ArrayD<f64> {
        self.data.mapv(f64::from)
    }
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Container(format!("{what} {n} exceeds u32")))
}

pub fn write_container(mut out: impl Write, tensors: &[Tensor]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&u32_of(tensors.len(), "tensor count")?.to_le_bytes())?;
    for t in tensors {
        let name = t.name.as_bytes();
        out.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&u32_of(t.data.ndim(), "rank")?.to_le_bytes())?;
        for &d in t.data.shape() {
            out.write_all(&u32_of(d, "dimension")?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in t.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Container("truncated container".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_container(mut input: impl Read) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut input)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Container("tensor size overflows".into()))?;
        let mut raw = vec![
            0u8;
            len.checked_mul(4)
                .ok_or_else(|| Error::Container("tensor size overflows".into()))?
        ];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims");
        tensors.push(Tensor { name, data });
    }
    Ok(tensors)
}

/// Looks up a tensor by name.
pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Container(format!("missing tensor {name:?}")))
}
