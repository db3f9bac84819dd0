//! The `RGT1` tensor dump format and the named-entry container built on it.
//!
//! A single tensor blob is:
//!
//! ```text
//! magic "RGT1" | u32 LE rank | rank x u32 LE extents | dtype byte | raw LE row-major payload
//! ```
//!
//! dtype byte: 0 = f32, 1 = f64, 2 = u8.
//!
//! A container file is a plain-text header (key=value lines, UTF-8),
//! a separator line `---`, a u32 LE entry count, then entries of
//! `u32 LE name length | name | tensor blob`. Record files, checkpoints and
//! synthetic batches all use this container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"RGT1";

/// A decoded tensor payload before committing to an element type.
#[derive(Debug, Clone, PartialEq)]
pub enum RawTensor {
    F32(Shape, Vec<f32>),
    F64(Shape, Vec<f64>),
    U8(Shape, Vec<u8>),
}

impl RawTensor {
    pub fn shape(&self) -> &Shape {
        match self {
            RawTensor::F32(s, _) | RawTensor::F64(s, _) | RawTensor::U8(s, _) => s,
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            RawTensor::F32(..) => Dtype::F32,
            RawTensor::F64(..) => Dtype::F64,
            RawTensor::U8(..) => Dtype::U8,
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> RawTensor {
        match T::DTYPE {
            Dtype::F32 => RawTensor::F32(
                t.shape().clone(),
                t.data().iter().map(|v| v.to_f64() as f32).collect(),
            ),
            Dtype::F64 => RawTensor::F64(
                t.shape().clone(),
                t.data().iter().map(|v| v.to_f64()).collect(),
            ),
            Dtype::U8 => unreachable!("no u8 Scalar impl"),
        }
    }

    /// Convert to a float tensor, widening/narrowing as needed. u8 converts
    /// to the float value of each byte.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            RawTensor::F32(s, d) => {
                Tensor::new(s.clone(), d.iter().map(|&v| T::from_f64(v as f64)).collect()).unwrap()
            }
            RawTensor::F64(s, d) => {
                Tensor::new(s.clone(), d.iter().map(|&v| T::from_f64(v)).collect()).unwrap()
            }
            RawTensor::U8(s, d) => {
                Tensor::new(s.clone(), d.iter().map(|&v| T::from_f64(v as f64)).collect()).unwrap()
            }
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match self {
            RawTensor::U8(_, d) => Ok(d),
            other => Err(Error::format(format!(
                "expected u8 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

pub fn write_blob(out: &mut Vec<u8>, t: &RawTensor) {
    out.extend_from_slice(MAGIC);
    let dims = t.shape().dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(t.dtype() as u8);
    match t {
        RawTensor::F32(_, d) => f32::write_le(d, out),
        RawTensor::F64(_, d) => f64::write_le(d, out),
        RawTensor::U8(_, d) => out.extend_from_slice(d),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_blob(cur: &mut Cursor) -> Result<RawTensor> {
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}")));
    }
    let rank = cur.u32()? as usize;
    if rank > 8 {
        return Err(Error::format(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u32()? as usize);
    }
    let shape = Shape::new(&dims);
    let dtype = Dtype::from_byte(cur.take(1)?[0])?;
    let payload = cur.take(shape.numel() * dtype.byte_width())?;
    Ok(match dtype {
        Dtype::F32 => RawTensor::F32(shape, f32::read_le(payload)),
        Dtype::F64 => RawTensor::F64(shape, f64::read_le(payload)),
        Dtype::U8 => RawTensor::U8(shape, payload.to_vec()),
    })
}

/// Decode a single-tensor RGT1 dump.
pub fn decode_blob(bytes: &[u8]) -> Result<RawTensor> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    read_blob(&mut cur)
}

/// Encode a single-tensor RGT1 dump.
pub fn encode_blob(t: &RawTensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_blob(&mut out, t);
    out
}

/// A header plus ordered named tensors.
#[derive(Debug, Default, Clone)]
pub struct Container {
    /// key=value header lines, in insertion order of `BTreeMap` (sorted);
    /// deterministic on disk.
    pub header: BTreeMap<String, String>,
    pub entries: Vec<(String, RawTensor)>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.header.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::format(format!("missing header key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::format(format!("header key `{key}` has unparseable value")))
    }

    pub fn push<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> &mut Self {
        self.entries
            .push((name.to_string(), RawTensor::from_tensor(t)));
        self
    }

    pub fn push_raw(&mut self, name: &str, t: RawTensor) -> &mut Self {
        self.entries.push((name.to_string(), t));
        self
    }

    pub fn entry(&self, name: &str) -> Result<&RawTensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(format!("missing container entry `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.header {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(b"---\n");
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_blob(&mut out, t);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        // Header: UTF-8 lines until `---`.
        let sep = b"---\n";
        let header_end = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| Error::format("missing header separator"))?;
        // The separator must start a line.
        if header_end != 0 && bytes[header_end - 1] != b'\n' {
            return Err(Error::format("header separator not at line start"));
        }
        let header_text = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::format("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for (i, line) in header_text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("header line {} lacks `=`", i + 1)))?;
            header.insert(k.to_string(), v.to_string());
        }
        let mut cur = Cursor {
            buf: bytes,
            pos: header_end + sep.len(),
        };
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::format("entry name is not UTF-8"))?
                .to_string();
            let t = read_blob(&mut cur)?;
            entries.push((name, t));
        }
        Ok(Container { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Container::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_bitwise() {
        let t = Tensor::<f32>::from_fn([2, 3], |i| (i as f32) * 0.5 - 1.0);
        let raw = RawTensor::from_tensor(&t);
        let bytes = encode_blob(&raw);
        assert_eq!(&bytes[..4], MAGIC);
        let back = decode_blob(&bytes).unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn blob_layout_is_exact() {
        // 1-D tensor [2] of f32 [1.0, 2.0]
        let raw = RawTensor::F32(Shape::new(&[2]), vec![1.0, 2.0]);
        let bytes = encode_blob(&raw);
        let mut want = Vec::new();
        want.extend_from_slice(b"RGT1");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.push(0u8);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&2.0f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn truncated_blob_is_format_error() {
        let raw = RawTensor::U8(Shape::new(&[4]), vec![1, 2, 3, 4]);
        let bytes = encode_blob(&raw);
        for cut in [1, 5, bytes.len() - 1] {
            let err = decode_blob(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut={cut} gave {err:?}");
        }
    }

    #[test]
    fn bad_magic_and_bad_dtype() {
        let raw = RawTensor::U8(Shape::new(&[1]), vec![7]);
        let mut bytes = encode_blob(&raw);
        bytes[0] = b'X';
        assert!(matches!(decode_blob(&bytes), Err(Error::Format(_))));

        let mut bytes = encode_blob(&raw);
        // dtype byte sits right before the 1-byte payload
        let n = bytes.len();
        bytes[n - 2] = 9;
        assert!(matches!(decode_blob(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn container_round_trip() {
        let mut c = Container::new();
        c.set("id", "rec_0001").set("class", 2);
        c.push("image", &Tensor::<f32>::filled([1, 2, 2], 0.25));
        c.push_raw("mask", RawTensor::U8(Shape::new(&[2, 2]), vec![0, 1, 1, 0]));
        let bytes = c.encode();
        let back = Container::decode(&bytes).unwrap();
        assert_eq!(back.get("id").unwrap(), "rec_0001");
        assert_eq!(back.get_parsed::<usize>("class").unwrap(), 2);
        assert_eq!(back.entries.len(), 2);
        assert_eq!(back.entry("mask").unwrap().as_u8().unwrap(), &[0, 1, 1, 0]);

        // container truncation is a format error, not a partial read
        for cut in [bytes.len() - 3, 10] {
            assert!(matches!(
                Container::decode(&bytes[..cut]),
                Err(Error::Format(_))
            ));
        }
    }
}
