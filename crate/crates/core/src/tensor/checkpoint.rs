//! Checkpoint tensor serialization.
//!
//! Layout: magic "RRTC1", then per tensor: name length (u32), name bytes,
//! dtype tag (u8), rank (u8), dims (u64 each), raw little-endian values.
//! Identical bytes imply identical parameters.

use std::io::{Read, Write};

use super::{Dtype, Element, Result, Tensor, TensorError};

const MAGIC: &[u8; 5] = b"RRTC1";

/// A tensor payload of one of the supported dtypes.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorValue {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: TensorValue,
}

impl NamedTensor {
    pub fn from_elem<E: Element>(name: &str, t: &Tensor<E>) -> Self {
        let value = match E::DTYPE {
            Dtype::F32 => TensorValue::F32(t.cast::<f32>()),
            Dtype::F64 => TensorValue::F64(t.cast::<f64>()),
            Dtype::U8 => unreachable!("Element is float"),
        };
        NamedTensor {
            name: name.to_string(),
            value,
        }
    }

    pub fn bytes(name: &str, data: Vec<u8>) -> Self {
        NamedTensor {
            name: name.to_string(),
            value: TensorValue::Bytes(data),
        }
    }

    pub fn as_elem<E: Element>(&self) -> Result<Tensor<E>> {
        match &self.value {
            TensorValue::F32(t) => Ok(t.cast()),
            TensorValue::F64(t) => Ok(t.cast()),
            TensorValue::Bytes(_) => Err(TensorError::Format(format!(
                "tensor {} is a byte blob, not a float tensor",
                self.name
            ))),
        }
    }
}

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    for t in tensors {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        match &t.value {
            TensorValue::F32(tensor) => write_float(w, Dtype::F32, tensor)?,
            TensorValue::F64(tensor) => write_float(w, Dtype::F64, tensor)?,
            TensorValue::Bytes(data) => {
                w.write_all(&[Dtype::U8 as u8, 1u8])?;
                w.write_all(&(data.len() as u64).to_le_bytes())?;
                w.write_all(data)?;
            }
        }
    }
    Ok(())
}

fn write_float<W: Write, E: Element>(w: &mut W, tag: Dtype, t: &Tensor<E>) -> Result<()> {
    w.write_all(&[tag as u8, t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * E::BYTES);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected RRTC1",
            magic
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        match r.read_exact(&mut len4) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("non-utf8 tensor name".into()))?;
        let mut hdr = [0u8; 2];
        r.read_exact(&mut hdr)?;
        let (tag, rank) = (hdr[0], hdr[1] as usize);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            r.read_exact(&mut d8)?;
            dims.push(u64::from_le_bytes(d8) as usize);
        }
        let count: usize = dims.iter().product();
        let value = match tag {
            0 => {
                let mut buf = vec![0u8; count * 4];
                r.read_exact(&mut buf)?;
                let data = buf.chunks_exact(4).map(f32::read_le).collect();
                TensorValue::F32(Tensor::from_vec(&dims, data)?)
            }
            1 => {
                let mut buf = vec![0u8; count * 8];
                r.read_exact(&mut buf)?;
                let data = buf.chunks_exact(8).map(f64::read_le).collect();
                TensorValue::F64(Tensor::from_vec(&dims, data)?)
            }
            2 => {
                let mut buf = vec![0u8; count];
                r.read_exact(&mut buf)?;
                TensorValue::Bytes(buf)
            }
            t => return Err(TensorError::Format(format!("unknown dtype tag {t}"))),
        };
        out.push(NamedTensor { name, value });
    }
    Ok(out)
}
