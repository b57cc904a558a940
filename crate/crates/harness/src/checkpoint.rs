//! Binary container for models, datasets and cached attack features.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "SHDRALN1"
//! version   u16      1
//! arch      u32 length + UTF-8 architecture text (empty when not a model)
//! tensors   u32 count, then per tensor:
//!             u16 name length + UTF-8 name
//!             u8 dtype (1 = f32, 2 = u64, 3 = f64)
//!             u8 rank, rank x u64 dims
//!             u64 payload length in bytes, payload
//! metadata  u32 length + UTF-8 `key = value` lines
//! digest    32 bytes SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use shadowalign_core::nn::{ArchSpec, Model};
use shadowalign_core::{DType, Scalar, SeedBundle, Tensor};

use crate::error::{HarnessError, Result, StageExt};

pub const MAGIC: &[u8; 8] = b"SHDRALN1";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemType {
    F32,
    U64,
    F64,
}

impl ElemType {
    fn code(self) -> u8 {
        match self {
            ElemType::F32 => DType::F32.code(),
            ElemType::U64 => 2,
            ElemType::F64 => DType::F64.code(),
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [ElemType::F32, ElemType::U64, ElemType::F64].into_iter().find(|t| t.code() == c)
    }

    fn width(self) -> usize {
        match self {
            ElemType::F32 => 4,
            _ => 8,
        }
    }

    fn of<T: Scalar>() -> Self {
        match T::DTYPE {
            DType::F32 => ElemType::F32,
            DType::F64 => ElemType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub elem: ElemType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.width());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.into(),
            elem: ElemType::of::<T>(),
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn from_u64(name: &str, values: &[u64]) -> Self {
        Self {
            name: name.into(),
            elem: ElemType::U64,
            shape: vec![values.len()],
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> std::result::Result<Tensor<T>, String> {
        if self.elem != ElemType::of::<T>() {
            return Err(format!("tensor {} has element type {:?}, expected {:?}", self.name, self.elem, ElemType::of::<T>()));
        }
        let data = self.bytes.chunks_exact(self.elem.width()).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| format!("tensor {}: {e}", self.name))
    }

    pub fn to_u64(&self) -> std::result::Result<Vec<u64>, String> {
        if self.elem != ElemType::U64 {
            return Err(format!("tensor {} is not u64", self.name));
        }
        Ok(self
            .bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub arch: String,
    pub blobs: Vec<Blob>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str32(&mut out, &self.arch);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.elem.code());
            out.push(b.shape.len() as u8);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&b.bytes);
        }
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        put_str32(&mut out, &meta);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(format!("truncated: {} bytes", bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err("bad magic".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (truncated or corrupted)".into());
        }
        let arch = r.str32("architecture")?;
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
            let code = r.take(1)?[0];
            let elem = ElemType::from_code(code).ok_or_else(|| format!("tensor {name}: unknown dtype code {code}"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| format!("tensor {name}: dimension too large"))?);
            }
            let len = r.u64()? as usize;
            let expected = shape.iter().try_fold(elem.width(), |a, &d| a.checked_mul(d));
            if expected != Some(len) {
                return Err(format!("tensor {name}: payload of {len} bytes does not match shape {shape:?}"));
            }
            let bytes = r.take(len)?.to_vec();
            blobs.push(Blob { name, elem, shape, bytes });
        }
        let meta = r.str32("metadata")?;
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        let metadata = meta
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        Ok(Self { arch, blobs, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        // write-then-rename so concurrent readers never see a partial file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, self.encode()).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str32(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format!("{what} block is not UTF-8"))
    }
}

fn put_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn model_container<T: Scalar>(model: &Model<T>, seeds: Option<&SeedBundle>, log_digest: Option<&str>) -> Container {
    let mut c = Container {
        arch: model.arch_spec().to_string(),
        ..Container::default()
    };
    for (l, p) in model.params().enumerate() {
        c.blobs.push(Blob::from_tensor(&format!("layer{l}.weight"), &p.weight));
        c.blobs.push(Blob::from_tensor(&format!("layer{l}.bias"), &p.bias));
    }
    if let Some(s) = seeds {
        c.metadata.insert("seed_wi".into(), s.weight_init.to_string());
        c.metadata.insert("seed_bo".into(), s.batch_order.to_string());
        c.metadata.insert("seed_ds".into(), s.dropout.to_string());
    }
    if let Some(d) = log_digest {
        c.metadata.insert("train_log_sha256".into(), d.to_string());
    }
    c
}

pub fn model_from_container<T: Scalar>(c: &Container, path: &Path) -> Result<Model<T>> {
    let bad = |reason: String| HarnessError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let spec = ArchSpec::parse(&c.arch).map_err(|e| bad(format!("architecture block: {e}")))?;
    let mut model: Model<T> = Model::zeros(&spec).stage("load checkpoint")?;
    let expected = 2 * model.depth();
    if c.blobs.len() != expected {
        return Err(bad(format!("{} tensors for {} parameterised layers", c.blobs.len(), model.depth())));
    }
    for l in 0..model.depth() {
        for (suffix, bias) in [("weight", false), ("bias", true)] {
            let name = format!("layer{l}.{suffix}");
            let blob = c.blob(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let t = blob.to_tensor::<T>().map_err(bad)?;
            let p = model.param_mut(l);
            let slot = if bias { &mut p.bias } else { &mut p.weight };
            if slot.shape() != t.shape() {
                return Err(bad(format!("tensor {name} has shape {:?}, architecture needs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, seeds: Option<&SeedBundle>, log_digest: Option<&str>, path: &Path) -> Result<()> {
    model_container(model, seeds, log_digest).write(path)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_container(&Container::read(path)?, path)
}

/// Hex SHA-256 of a text, used to fingerprint training logs and cache keys.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use shadowalign_core::train::init_weights;

    fn model() -> Model<f32> {
        init_weights(&ArchSpec::mlp("ck", 5, &[4], 3, 0.1), 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let seeds = SeedBundle::new(1, 2, 3);
        let c = model_container(&m, Some(&seeds), Some("abc"));
        let back = Container::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let m2: Model<f32> = model_from_container(&back, Path::new("mem")).unwrap();
        assert!(m2.bit_eq(&m));
        assert_eq!(back.metadata["seed_bo"], "2");
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = model_container(&model(), None, None).encode();
        for cut in 0..bytes.len() {
            assert!(Container::decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn flipped_bits_and_versions_are_rejected() {
        let bytes = model_container(&model(), None, None).encode();
        let mut b = bytes.clone();
        b[40] ^= 1;
        assert!(Container::decode(&b).unwrap_err().contains("checksum"));
        let mut b = bytes.clone();
        b[0] = b'X';
        assert_eq!(Container::decode(&b).unwrap_err(), "bad magic");
        let mut b = bytes;
        b[8] = 9;
        assert!(Container::decode(&b).unwrap_err().contains("version"));
    }

    #[test]
    fn u64_blobs_round_trip() {
        let b = Blob::from_u64("ids", &[1, u64::MAX, 7]);
        assert_eq!(b.to_u64().unwrap(), vec![1, u64::MAX, 7]);
        assert!(b.to_tensor::<f32>().is_err());
    }
}
