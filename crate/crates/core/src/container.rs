//! Self-describing binary tensor container shared by datasets, embeddings
//! and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "PTAC"
//! version  u16      = 1
//! count    u32      number of records
//! record:
//!   name_len u16, name (UTF-8)
//!   rank     u8
//!   dims     rank × u64
//!   dtype    u8     0 = f32, 1 = f64
//!   payload  row-major, product(dims) elements
//! ```
//!
//! `f32` is the storage type for signals and images. Checkpoints use `f64`
//! so that a save/load round trip reproduces parameters bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"PTAC";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl Tensor {
    /// Values are rounded to `f32` on construction so the in-memory tensor
    /// equals what a reader will see.
    pub fn f32(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor dims/data mismatch");
        let data = data.into_iter().map(|x| x as f32 as f64).collect();
        Tensor { dims, dtype: DType::F32, data }
    }

    pub fn f64(dims: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "tensor dims/data mismatch");
        Tensor { dims, dtype: DType::F64, data }
    }

    pub fn from_mat(m: &Mat, dtype: DType) -> Self {
        let dims = vec![m.rows(), m.cols()];
        match dtype {
            DType::F32 => Tensor::f32(dims, m.data().to_vec()),
            DType::F64 => Tensor::f64(dims, m.data().to_vec()),
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        match self.dims.as_slice() {
            [r, c] => Ok(Mat::from_vec(*r, *c, self.data.clone())),
            [n] => Ok(Mat::from_vec(1, *n, self.data.clone())),
            d => Err(Error::shape(format!("expected rank 1 or 2 tensor, got dims {d:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    records: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces an existing record with the same name, keeping its position.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(slot) = self.records.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.records.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::validation(format!("container has no record `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.push(t.dtype.tag());
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "truncated header")?;
        if &magic != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let count = u32::from_le_bytes(take(&mut r)?);
        let mut records = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(&mut r)?) as usize;
            if r.len() < nlen {
                return Err("truncated name".into());
            }
            let name = std::str::from_utf8(&r[..nlen]).map_err(|_| "name is not UTF-8")?.to_string();
            r = &r[nlen..];
            let rank = u8::from_le_bytes(take(&mut r)?) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(take(&mut r)?) as usize);
            }
            let dtype = DType::from_tag(u8::from_le_bytes(take(&mut r)?)).ok_or("unknown dtype tag")?;
            let n: usize = dims.iter().product();
            let data = match dtype {
                DType::F32 => (0..n).map(|_| take(&mut r).map(|b| f32::from_le_bytes(b) as f64)).collect::<Result<_, _>>()?,
                DType::F64 => (0..n).map(|_| take(&mut r).map(f64::from_le_bytes)).collect::<Result<_, _>>()?,
            };
            records.push((name, Tensor { dims, dtype, data }));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Container { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Container::from_bytes(&bytes).map_err(|msg| Error::Format { path: path.to_path_buf(), msg })
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> std::result::Result<[u8; N], String> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| "truncated record".to_string())?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let mut c = Container::new();
        c.insert("x", Tensor::f32(vec![2], vec![1.0, -2.5]));
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"PTAC");
        assert_eq!(&b[4..6], &1u16.to_le_bytes());
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..12], &1u16.to_le_bytes());
        assert_eq!(b[12], b'x');
        assert_eq!(b[13], 1);
        assert_eq!(&b[14..22], &2u64.to_le_bytes());
        assert_eq!(b[22], 0);
        assert_eq!(&b[23..27], &1.0f32.to_le_bytes());
        assert_eq!(&b[27..31], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 31);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::from_bytes(b"NOPE").is_err());
        let mut b = Container::new().to_bytes();
        b.push(0);
        assert!(Container::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            a in prop::collection::vec(-1e6f64..1e6, 0..40),
            b in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..40),
        ) {
            let mut c = Container::new();
            c.insert("a32", Tensor::f32(vec![a.len()], a.clone()));
            c.insert("b64", Tensor::f64(vec![1, b.len()], b.clone()));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            let got: Vec<u64> = back.get("b64").unwrap().data.iter().map(|x| x.to_bits()).collect();
            let want: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
