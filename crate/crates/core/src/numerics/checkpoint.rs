//! `LMTN` tensor files: magic, `u32` version, `u32` count, then per tensor a
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims and `f64` payload.
//! Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::Scalar;

use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 4] = b"LMTN";
pub const VERSION: u32 = 1;

pub fn write_tensors_to<T: Scalar, W: Write>(mut w: W, tensors: &[(String, Tensor<T>)]) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<(), NumericsError> {
    write_tensors_to(BufWriter::new(File::create(path)?), tensors)
}

fn u32_from<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_from<R: Read>(r: &mut R) -> Result<u64, NumericsError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors_from<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>, NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let version = u32_from(&mut r)?;
    if version != VERSION {
        return Err(NumericsError::Format(format!("unsupported version {version}")));
    }
    let count = u32_from(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32_from(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumericsError::Format("name is not UTF-8".into()))?;
        let rank = u32_from(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64_from(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::of(f64::from_bits(u64_from(&mut r)?)));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, NumericsError> {
    read_tensors_from(BufReader::new(File::open(path)?))
}
