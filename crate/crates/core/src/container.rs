//! Checksummed single-file container shared by image stacks, checkpoints and pose caches.
//!
//! Layout (all integers little-endian):
//!
//! | bytes    | content                                   |
//! |----------|-------------------------------------------|
//! | 0..8     | magic                                     |
//! | 8..12    | format version (u32)                      |
//! | 12..16   | section count (u32)                       |
//! | 16..24   | metadata length in bytes (u64)            |
//! | 24..56   | SHA-256 of the metadata block             |
//! | 56..64   | reserved, zero                            |
//!
//! The JSON metadata block follows, holding the caller's metadata under `meta`
//! and a `sections` table with absolute offsets, lengths and SHA-256 digests.
//! Section payloads follow contiguously in table order.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HEADER_LEN: u64 = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
struct MetadataBlock<T> {
    meta: T,
    sections: Vec<SectionEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First eight bytes of a file, to tell container kinds apart.
pub fn peek_magic(path: &Path) -> Result<[u8; 8]> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Format(format!("{}: file is shorter than a container header", path.display())))?;
    Ok(magic)
}

/// Writes a container atomically (temporary file, then rename).
pub fn write_container<T: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    version: u32,
    meta: &T,
    sections: &[(&str, &[u8])],
) -> Result<()> {
    // offsets depend on the metadata length, which depends on the offsets' digits;
    // iterate until the encoded length is stable
    let mut meta_len = 0usize;
    let encoded = loop {
        let mut offset = HEADER_LEN + meta_len as u64;
        let table: Vec<SectionEntry> = sections
            .iter()
            .map(|(name, bytes)| {
                let e = SectionEntry {
                    name: name.to_string(),
                    offset,
                    length: bytes.len() as u64,
                    sha256: sha256_hex(bytes),
                };
                offset += bytes.len() as u64;
                e
            })
            .collect();
        let block = MetadataBlock { meta, sections: table };
        let encoded = serde_json::to_vec(&block).map_err(|e| Error::Format(e.to_string()))?;
        if encoded.len() == meta_len {
            break encoded;
        }
        meta_len = encoded.len();
    };

    let mut header = [0u8; HEADER_LEN as usize];
    header[0..8].copy_from_slice(magic);
    header[8..12].copy_from_slice(&version.to_le_bytes());
    header[12..16].copy_from_slice(&(sections.len() as u32).to_le_bytes());
    header[16..24].copy_from_slice(&(encoded.len() as u64).to_le_bytes());
    header[24..56].copy_from_slice(&Sha256::digest(&encoded));

    let tmp = temp_path(path);
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        f.write_all(&header)?;
        f.write_all(&encoded)?;
        for (_, bytes) in sections {
            f.write_all(bytes)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Open container: header and metadata are read eagerly, payloads on demand.
#[derive(Debug)]
pub struct Container {
    path: PathBuf,
    version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionEntry>,
}

impl Container {
    pub fn open(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let mut f = File::open(path)?;
        let file_len = f.metadata()?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        f.read_exact(&mut header)
            .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
        if &header[0..8] != magic {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                path.display(),
                String::from_utf8_lossy(&header[0..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        let count = u32::from_le_bytes(header[12..16].try_into().expect("4 bytes")) as usize;
        let meta_len = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes"));
        if HEADER_LEN + meta_len > file_len {
            return Err(Error::Format(format!("{}: truncated metadata block", path.display())));
        }
        let mut encoded = vec![0u8; meta_len as usize];
        f.read_exact(&mut encoded)?;
        if Sha256::digest(&encoded).as_slice() != &header[24..56] {
            return Err(Error::Checksum {
                section: "metadata".into(),
                offset: HEADER_LEN,
            });
        }
        let block: MetadataBlock<serde_json::Value> =
            serde_json::from_slice(&encoded).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if block.sections.len() != count {
            return Err(Error::Format(format!("{}: section table disagrees with header", path.display())));
        }
        if let Some(last) = block.sections.last() {
            if last.offset + last.length > file_len {
                return Err(Error::Format(format!(
                    "{}: truncated, section '{}' ends at byte {} but the file has {file_len}",
                    path.display(),
                    last.name,
                    last.offset + last.length
                )));
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            version,
            meta: block.meta,
            sections: block.sections,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Format(format!("{}: {e}", self.path.display())))
    }

    pub fn raw_meta(&self) -> &serde_json::Value {
        &self.meta
    }

    pub fn sections(&self) -> &[SectionEntry] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&SectionEntry> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Reads and verifies a whole section.
    pub fn read_section(&self, name: &str) -> Result<Vec<u8>> {
        let entry = self
            .section(name)
            .ok_or_else(|| Error::Format(format!("{}: missing section '{name}'", self.path.display())))?;
        let bytes = self.read_range(entry, 0, entry.length)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum {
                section: name.to_string(),
                offset: entry.offset,
            });
        }
        Ok(bytes)
    }

    /// Reads part of a section without verifying its digest.
    pub fn read_range(&self, entry: &SectionEntry, start: u64, len: u64) -> Result<Vec<u8>> {
        if start + len > entry.length {
            return Err(Error::Format(format!("read past the end of section '{}'", entry.name)));
        }
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start(entry.offset + start))?;
        let mut buf = vec![0u8; len as usize];
        f.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Verifies every section digest.
    pub fn verify(&self) -> Result<()> {
        for s in &self.sections {
            self.read_section(&s.name)?;
        }
        Ok(())
    }
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Format("f64 payload length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format("f32 payload length is not a multiple of 4".into()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}
