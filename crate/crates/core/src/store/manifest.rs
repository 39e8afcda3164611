//! Per-table manifest: the commit point of the store. A table's state is a
//! pure function of its manifest plus the segment files the manifest
//! lists; files not listed do not exist as far as readers are concerned.
//!
//! The manifest is written whole to a temp file, fsynced and renamed over
//! the old one. A crash after segments are written but before the rename
//! leaves the previous manifest in place, so the table reopens at the
//! previous head seq with a stray (ignored, later overwritten) segment on
//! disk.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "MANIFEST";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ReleaseMeta {
    pub seq: u64,
    pub label: String,
    /// Informational ingest wall time (unix seconds).
    pub wall_time: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SegmentMeta {
    pub file_id: u64,
    pub seq_lo: u64,
    pub seq_hi: u64,
    /// Hex-encoded inclusive key bounds; absent for empty segments.
    pub key_lo: Option<String>,
    pub key_hi: Option<String>,
    pub records: u64,
    pub compressed: u64,
    pub uncompressed: u64,
    pub checksum: String,
    pub codec: String,
}

impl SegmentMeta {
    pub fn file_name(&self) -> String {
        format!("seg-{:06}.seg", self.file_id)
    }

    pub fn key_range_overlaps(&self, lo: Option<&[u8]>, hi: Option<&[u8]>) -> bool {
        let (seg_lo, seg_hi) = match (&self.key_lo, &self.key_hi) {
            (Some(l), Some(h)) => (decode_hex_key(l), decode_hex_key(h)),
            _ => return false, // empty segment holds no keys
        };
        if let Some(hi) = hi {
            if seg_lo.as_slice() > hi {
                return false;
            }
        }
        if let Some(lo) = lo {
            if seg_hi.as_slice() < lo {
                return false;
            }
        }
        true
    }
}

pub fn encode_hex_key(key: &[u8]) -> String {
    let mut s = String::with_capacity(key.len() * 2);
    for b in key {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn decode_hex_key(s: &str) -> Vec<u8> {
    let bytes = s.as_bytes();
    bytes
        .chunks(2)
        .map(|pair| {
            let hi = (pair[0] as char).to_digit(16).unwrap_or(0) as u8;
            let lo = pair.get(1).and_then(|c| (*c as char).to_digit(16)).unwrap_or(0) as u8;
            (hi << 4) | lo
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    /// Monotone manifest version, bumped on every commit.
    pub version: u64,
    pub table: String,
    pub format_id: String,
    /// Field universe: seeded at registration, grown by ingests that
    /// observe new fields.
    pub fields: BTreeSet<String>,
    pub schema_note: String,
    pub head_seq: u64,
    /// Count of distinct row keys ever written.
    pub row_count: u64,
    pub releases: Vec<ReleaseMeta>,
    pub segments: Vec<SegmentMeta>,
}

impl Manifest {
    pub fn new(table: &str, format_id: &str, fields: BTreeSet<String>, schema_note: &str) -> Manifest {
        Manifest {
            version: 1,
            table: table.to_string(),
            format_id: format_id.to_string(),
            fields,
            schema_note: schema_note.to_string(),
            head_seq: 0,
            row_count: 0,
            releases: Vec::new(),
            segments: Vec::new(),
        }
    }

    pub fn resolve_label(&self, label: &str) -> Option<u64> {
        self.releases.iter().find(|r| r.label == label).map(|r| r.seq)
    }

    /// Atomic durable write: temp file, fsync, rename, directory fsync.
    pub fn store(&self, table_dir: &Path) -> Result<()> {
        let body = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::validation(format!("manifest serialize: {e}")))?;
        let digest = format!("{:x}", Sha256::digest(&body));
        let tmp = table_dir.join("MANIFEST.tmp");
        {
            let mut f = OpenOptions::new().write(true).create(true).truncate(true).open(&tmp)?;
            f.write_all(b"sha256 ")?;
            f.write_all(digest.as_bytes())?;
            f.write_all(b"\n")?;
            f.write_all(&body)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, table_dir.join(MANIFEST_FILE))?;
        if let Ok(dir) = File::open(table_dir) {
            let _ = dir.sync_all();
        }
        Ok(())
    }

    pub fn load(table_dir: &Path) -> Result<Manifest> {
        let path = table_dir.join(MANIFEST_FILE);
        let mut raw = Vec::new();
        File::open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::not_found(format!("no manifest in {}", table_dir.display()))
                } else {
                    Error::Io(e)
                }
            })?
            .read_to_end(&mut raw)?;
        let newline = raw
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::corruption(&path, "manifest missing checksum header"))?;
        let header = &raw[..newline];
        let body = &raw[newline + 1..];
        let expected = header
            .strip_prefix(b"sha256 ")
            .ok_or_else(|| Error::corruption(&path, "manifest checksum header malformed"))?;
        let got = format!("{:x}", Sha256::digest(body));
        if got.as_bytes() != expected {
            return Err(Error::corruption(&path, "manifest checksum mismatch"));
        }
        serde_json::from_slice(body)
            .map_err(|e| Error::corruption(&path, format!("manifest decode: {e}")))
    }
}
