//! Lossless float storage.
//!
//! Single tensor (`.uvpt`), all integers little-endian:
//!
//! ```text
//! "UVPT" | version u16 | dtype u8 (0 = f32) | ndim u8 | dims u32 × ndim
//!        | payload f32 × product(dims) | sha256 of all preceding bytes (32 B)
//! ```
//!
//! Checkpoint container (`.uvpk`): `"UVPK" | version u16 | header_len u32 |
//! JSON header | one UVPT record per named entry | sha256 (32 B)`. The header
//! lists entry names in payload order plus free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use uvpaint_nn::Module;

use crate::error::{Error, Result};
use crate::image::{ImageGrid, Semantics};

pub const TENSOR_MAGIC: &[u8; 4] = b"UVPT";
pub const CONTAINER_MAGIC: &[u8; 4] = b"UVPK";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const CHECKSUM_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} do not match {} values", data.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape("too many dimensions".into()));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len() + CHECKSUM_LEN);
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses one record from the front of `bytes`; returns it and the number
    /// of bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let fail = |m: &str| Error::Format(format!("tensor record: {m}"));
        if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        if bytes[6] != DTYPE_F32 {
            return Err(fail(&format!("unsupported dtype tag {}", bytes[6])));
        }
        let ndim = bytes[7] as usize;
        let mut off = 8;
        if bytes.len() < off + 4 * ndim {
            return Err(fail("truncated dims"));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = dims.iter().product();
        let end = off + 4 * n;
        if bytes.len() < end + CHECKSUM_LEN {
            return Err(fail("truncated payload"));
        }
        let data = bytes[off..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if Sha256::digest(&bytes[..end]).as_slice() != &bytes[end..end + CHECKSUM_LEN] {
            return Err(fail("checksum mismatch"));
        }
        Ok((Self { dims, data }, end + CHECKSUM_LEN))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (t, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor record".into()));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Images persist as `[height, width, channels]`.
impl From<&ImageGrid> for RawTensor {
    fn from(img: &ImageGrid) -> Self {
        RawTensor { dims: vec![img.height, img.width, img.channels()], data: img.data.clone() }
    }
}

impl RawTensor {
    pub fn into_image(self, semantics: Semantics) -> Result<ImageGrid> {
        match self.dims.as_slice() {
            [h, w, c] if *c == semantics.channels() => ImageGrid::new(*h, *w, semantics, self.data),
            d => Err(Error::Shape(format!("{d:?} is not an image with {} channels", semantics.channels()))),
        }
    }
}

pub fn save_image(img: &ImageGrid, path: &Path) -> Result<()> {
    RawTensor::from(&img.clamped()).save(path)
}

pub fn load_image(path: &Path, semantics: Semantics) -> Result<ImageGrid> {
    RawTensor::load(path)?.into_image(semantics)
}

/// Short hex SHA-256 of a value's JSON form; identifies configurations.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    hex::encode(&Sha256::digest(json)[..8])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ContainerHeader {
    entries: Vec<String>,
    meta: serde_json::Value,
}

/// Named tensors plus JSON metadata, stored in entry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub entries: Vec<(String, RawTensor)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: RawTensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// SHA-256 over entry names and payloads, independent of metadata.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in &t.dims {
                h.update((*d as u32).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ContainerHeader { entries: self.entries.iter().map(|(n, _)| n.clone()).collect(), meta: self.meta.clone() };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.to_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(format!("container: {m}"));
        if bytes.len() < 10 + CHECKSUM_LEN || &bytes[..4] != CONTAINER_MAGIC {
            return Err(fail("bad magic"));
        }
        let body = bytes.len() - CHECKSUM_LEN;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(fail("checksum mismatch"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let header: ContainerHeader =
            serde_json::from_slice(bytes.get(10..10 + hlen).ok_or_else(|| fail("truncated header"))?)
                .map_err(|e| fail(&format!("header: {e}")))?;
        let mut off = 10 + hlen;
        let mut entries = Vec::with_capacity(header.entries.len());
        for name in header.entries {
            let (t, used) = RawTensor::from_bytes_prefix(&bytes[off..body])?;
            off += used;
            entries.push((name, t));
        }
        if off != body {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { meta: header.meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn push_module(&mut self, prefix: &str, module: &dyn Module) {
        module.visit(prefix, &mut |name, p| {
            self.entries.push((name.to_string(), RawTensor { dims: p.shape.clone(), data: p.value.clone() }));
        });
    }

    /// Overwrites the parameters of `module` from entries under `prefix`;
    /// every parameter must be present with a matching shape.
    pub fn restore_module(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        let mut err = None;
        module.visit_mut(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.get(name) {
                Some(t) if t.dims == p.shape => p.value.copy_from_slice(&t.data),
                Some(t) => err = Some(Error::Shape(format!("{name}: checkpoint {:?} vs model {:?}", t.dims, p.shape))),
                None => err = Some(Error::Format(format!("checkpoint lacks parameter {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_as_documented() {
        let t = RawTensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"UVPT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), 24 + 32);
    }

    #[test]
    fn corruption_is_detected() {
        let mut b = RawTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().to_bytes();
        b[13] ^= 1;
        assert!(RawTensor::from_bytes(&b).is_err());
        assert!(RawTensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn container_roundtrip_and_hash() {
        let mut c = Container::new(serde_json::json!({"kind": "test", "step": 3}));
        c.push("a.weight", RawTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        c.push("b", RawTensor::new(vec![1], vec![0.5]).unwrap());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
        let mut d = c.clone();
        d.entries[1].1.data[0] = 0.25;
        assert_ne!(d.content_hash(), c.content_hash());
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = RawTensor::new(dims, data).unwrap();
            let back = RawTensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(back.dims, t.dims);
            prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
