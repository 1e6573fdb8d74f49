//! Binary checkpoint container.
//!
//! Layout: `b"LDLB"`, format version (`u32` LE), header length (`u64` LE),
//! UTF-8 JSON header, then each buffer as little-endian `f32` values in the
//! order listed in the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LDLB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedBuffer {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata: shapes, hyperparameters, counters.
    pub meta: Value,
    pub buffers: Vec<NamedBuffer>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    buffers: Vec<BufferEntry>,
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    len: u64,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            meta,
            buffers: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: Vec<f32>) {
        self.buffers.push(NamedBuffer {
            name: name.into(),
            data,
        });
    }

    /// Buffers in order, for sequential restoration.
    pub fn reader(&self) -> BufferReader<'_> {
        BufferReader { ck: self, next: 0 }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            meta: self.meta.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|b| BufferEntry {
                    name: b.name.clone(),
                    len: b.data.len() as u64,
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(hjson.len() as u64).to_le_bytes())?;
        w.write_all(&hjson)?;
        for b in &self.buffers {
            let mut bytes = Vec::with_capacity(4 * b.data.len());
            for v in &b.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut r, &mut u32b, "version")?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut u64b = [0u8; 8];
        read_exact(&mut r, &mut u64b, "header length")?;
        let hlen = u64::from_le_bytes(u64b);
        if hlen > 1 << 30 {
            return Err(Error::Format(format!("implausible header length {hlen}")));
        }
        let mut hjson = vec![0u8; hlen as usize];
        read_exact(&mut r, &mut hjson, "header")?;
        let header: Header = serde_json::from_slice(&hjson)?;
        let mut buffers = Vec::with_capacity(header.buffers.len());
        for e in header.buffers {
            let mut bytes = vec![0u8; 4 * e.len as usize];
            read_exact(&mut r, &mut bytes, &e.name)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            buffers.push(NamedBuffer { name: e.name, data });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last buffer".into()));
        }
        Ok(Checkpoint {
            meta: header.meta,
            buffers,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let f = fs::File::create(&tmp)?;
            self.write_to(std::io::BufWriter::new(f))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

/// Sequential access to checkpoint buffers with name and length checks.
pub struct BufferReader<'a> {
    ck: &'a Checkpoint,
    next: usize,
}

impl BufferReader<'_> {
    pub fn take(&mut self, name: &str, len: usize) -> Result<&[f32]> {
        let b = self
            .ck
            .buffers
            .get(self.next)
            .ok_or_else(|| Error::Format(format!("missing buffer `{name}`")))?;
        if b.name != name {
            return Err(Error::Format(format!("expected buffer `{name}`, found `{}`", b.name)));
        }
        if b.data.len() != len {
            return Err(Error::Format(format!(
                "buffer `{name}` has {} values, expected {len}",
                b.data.len()
            )));
        }
        self.next += 1;
        Ok(&b.data)
    }

    pub fn finish(self) -> Result<()> {
        if self.next != self.ck.buffers.len() {
            return Err(Error::Format(format!(
                "{} unread buffers",
                self.ck.buffers.len() - self.next
            )));
        }
        Ok(())
    }
}
