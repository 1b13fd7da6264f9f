//! Binary checkpoint container.
//!
//! Layout: magic bytes `UALN`, format version `u32` LE, a manifest of
//! sections (each a list of named tensors with shape and payload offset),
//! then one payload of raw little-endian `f64` values. Writing is fully
//! deterministic, so save -> load -> save round-trips byte-identically.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"UALN";
pub const VERSION: u32 = 1;

/// One named tensor inside a section.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> TensorEntry {
        let len: usize = shape.iter().product();
        assert_eq!(len, data.len(), "tensor {name}: shape/data mismatch");
        TensorEntry {
            name: name.to_string(),
            shape,
            data,
        }
    }

    pub fn vector(name: &str, data: Vec<f64>) -> TensorEntry {
        let len = data.len();
        TensorEntry::new(name, vec![len], data)
    }
}

/// A named group of tensors ("adapter", "llm", "trainer").
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

impl Section {
    pub fn new(name: &str) -> Section {
        Section {
            name: name.to_string(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: TensorEntry) {
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Fetch a tensor and check its shape against the expectation.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&TensorEntry> {
        let t = self.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor {name} in section {}", self.name))
        })?;
        if t.shape != shape {
            return Err(Error::CheckpointShape {
                tensor: format!("{}/{}", self.name, name),
                expected: format!("{shape:?}"),
                found: format!("{:?}", t.shape),
            });
        }
        Ok(t)
    }
}

/// In-memory checkpoint: ordered list of sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn section(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    /// Serialize to the container byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::new();
        manifest.extend_from_slice(&MAGIC);
        manifest.extend_from_slice(&VERSION.to_le_bytes());
        manifest.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());

        let mut payload: Vec<u8> = Vec::new();
        let mut offset: u64 = 0;
        for section in &self.sections {
            write_str(&mut manifest, &section.name);
            manifest.extend_from_slice(&(section.tensors.len() as u32).to_le_bytes());
            for t in &section.tensors {
                write_str(&mut manifest, &t.name);
                manifest.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    manifest.extend_from_slice(&(d as u64).to_le_bytes());
                }
                manifest.extend_from_slice(&offset.to_le_bytes());
                for &v in &t.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                offset += t.data.len() as u64;
            }
        }
        manifest.extend_from_slice(&payload);
        manifest
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic: expected {:?}, found {:?}",
                MAGIC, magic
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version: expected {VERSION}, found {version}"
            )));
        }
        let n_sections = cur.u32()? as usize;
        // First pass: manifest.
        struct RawTensor {
            name: String,
            shape: Vec<usize>,
            offset: u64,
        }
        let mut raw: Vec<(String, Vec<RawTensor>)> = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let sname = cur.string()?;
            let n_tensors = cur.u32()? as usize;
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                let tname = cur.string()?;
                let ndim = cur.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(cur.u64()? as usize);
                }
                let offset = cur.u64()?;
                tensors.push(RawTensor {
                    name: tname,
                    shape,
                    offset,
                });
            }
            raw.push((sname, tensors));
        }
        let payload = &bytes[cur.pos..];
        if payload.len() % 8 != 0 {
            return Err(Error::Checkpoint("payload is not f64-aligned".into()));
        }
        let n_values = payload.len() / 8;
        let mut checkpoint = Checkpoint::new();
        for (sname, tensors) in raw {
            let mut section = Section::new(&sname);
            for t in tensors {
                let len: usize = t.shape.iter().product();
                let start = t.offset as usize;
                if start + len > n_values {
                    return Err(Error::Checkpoint(format!(
                        "tensor {}/{} overruns payload: offset {} len {} of {}",
                        sname, t.name, start, len, n_values
                    )));
                }
                let mut data = Vec::with_capacity(len);
                for k in 0..len {
                    let b = &payload[(start + k) * 8..(start + k + 1) * 8];
                    data.push(f64::from_le_bytes(b.try_into().unwrap()));
                }
                section.push(TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    data,
                });
            }
            checkpoint.sections.push(section);
        }
        Ok(checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf8 in manifest".into()))
    }
}
