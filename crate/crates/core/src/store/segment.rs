//! Immutable segment files: one per committed release, holding that
//! release's EXISTS marks and changed field cells as length-prefixed
//! records sorted by row key, behind an optional streaming compression
//! codec. The whole file is checksummed; scans verify the digest as a side
//! effect of reading to the end.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"RSSEG1";

/// Block compression codec for segment payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    None,
    Snappy,
}

impl Codec {
    pub fn id(&self) -> &'static str {
        match self {
            Codec::None => "none",
            Codec::Snappy => "snappy",
        }
    }

    pub fn from_id(id: &str) -> Result<Codec> {
        match id {
            "none" => Ok(Codec::None),
            "snappy" => Ok(Codec::Snappy),
            other => Err(Error::validation(format!("unknown codec {other:?}"))),
        }
    }

    fn byte(&self) -> u8 {
        match self {
            Codec::None => 0,
            Codec::Snappy => 1,
        }
    }

    fn from_byte(b: u8, path: &Path) -> Result<Codec> {
        match b {
            0 => Ok(Codec::None),
            1 => Ok(Codec::Snappy),
            other => Err(Error::corruption(path, format!("unknown codec byte {other}"))),
        }
    }
}

/// One row's contribution to one release.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRecord {
    pub key: Vec<u8>,
    /// EXISTS mark: the row is present in this release.
    pub exists: bool,
    /// Changed cells, sorted by field name. An empty value is a tombstone
    /// for a dropped field.
    pub cells: Vec<(String, Vec<u8>)>,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
    bytes: u64,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        self.bytes += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

enum PayloadWriter {
    Plain(HashingWriter<BufWriter<File>>),
    Snappy(snap::write::FrameEncoder<HashingWriter<BufWriter<File>>>),
}

impl PayloadWriter {
    fn as_write(&mut self) -> &mut dyn Write {
        match self {
            PayloadWriter::Plain(w) => w,
            PayloadWriter::Snappy(w) => w,
        }
    }

    fn finish(self) -> Result<HashingWriter<BufWriter<File>>> {
        match self {
            PayloadWriter::Plain(w) => Ok(w),
            PayloadWriter::Snappy(enc) => enc
                .into_inner()
                .map_err(|e| Error::Io(io::Error::other(format!("snappy finish: {e}")))),
        }
    }
}

/// Streaming segment writer; records must arrive in strictly ascending key
/// order.
pub struct SegmentWriter {
    writer: Option<PayloadWriter>,
    record_buf: Vec<u8>,
    last_key: Option<Vec<u8>>,
    pub records: u64,
    pub field_cells: u64,
    pub exists_marks: u64,
    pub uncompressed: u64,
    pub key_lo: Option<Vec<u8>>,
    pub key_hi: Option<Vec<u8>>,
}

/// Summary of a finished segment file.
pub struct SegmentSummary {
    pub records: u64,
    pub field_cells: u64,
    pub exists_marks: u64,
    pub compressed: u64,
    pub uncompressed: u64,
    pub checksum: String,
    pub key_lo: Option<Vec<u8>>,
    pub key_hi: Option<Vec<u8>>,
}

impl SegmentWriter {
    pub fn create(path: &Path, codec: Codec) -> Result<SegmentWriter> {
        let file = File::create(path)?;
        let mut hashing = HashingWriter {
            inner: BufWriter::new(file),
            hasher: Sha256::new(),
            bytes: 0,
        };
        hashing.write_all(MAGIC)?;
        hashing.write_all(&[codec.byte()])?;
        let writer = match codec {
            Codec::None => PayloadWriter::Plain(hashing),
            Codec::Snappy => PayloadWriter::Snappy(snap::write::FrameEncoder::new(hashing)),
        };
        Ok(SegmentWriter {
            writer: Some(writer),
            record_buf: Vec::new(),
            last_key: None,
            records: 0,
            field_cells: 0,
            exists_marks: 0,
            uncompressed: 0,
            key_lo: None,
            key_hi: None,
        })
    }

    pub fn append(&mut self, record: &SegmentRecord) -> Result<()> {
        if let Some(last) = &self.last_key {
            if record.key <= *last {
                return Err(Error::Contract(format!(
                    "segment records out of key order: {:?} after {:?}",
                    String::from_utf8_lossy(&record.key),
                    String::from_utf8_lossy(last)
                )));
            }
        }
        self.record_buf.clear();
        encode_record(record, &mut self.record_buf);
        self.uncompressed += self.record_buf.len() as u64;
        self.writer
            .as_mut()
            .expect("writer open")
            .as_write()
            .write_all(&self.record_buf)?;
        self.records += 1;
        self.field_cells += record.cells.len() as u64;
        if record.exists {
            self.exists_marks += 1;
        }
        if self.key_lo.is_none() {
            self.key_lo = Some(record.key.clone());
        }
        self.key_hi = Some(record.key.clone());
        self.last_key = Some(record.key.clone());
        Ok(())
    }

    /// Flush, fsync and return the summary for the manifest.
    pub fn finish(mut self) -> Result<SegmentSummary> {
        let writer = self.writer.take().expect("writer open");
        let mut hashing = writer.finish()?;
        hashing.flush()?;
        let checksum = format!("{:x}", hashing.hasher.finalize());
        let compressed = hashing.bytes;
        let file = hashing.inner.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
        Ok(SegmentSummary {
            records: self.records,
            field_cells: self.field_cells,
            exists_marks: self.exists_marks,
            compressed,
            uncompressed: self.uncompressed,
            checksum,
            key_lo: self.key_lo,
            key_hi: self.key_hi,
        })
    }
}

fn encode_record(record: &SegmentRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&(record.key.len() as u32).to_le_bytes());
    out.extend_from_slice(&record.key);
    out.push(u8::from(record.exists));
    out.extend_from_slice(&(record.cells.len() as u32).to_le_bytes());
    for (field, value) in &record.cells {
        out.extend_from_slice(&(field.len() as u16).to_le_bytes());
        out.extend_from_slice(field.as_bytes());
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        out.extend_from_slice(value);
    }
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> Read for HashingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

enum PayloadReader {
    Plain(HashingReader<BufReader<File>>),
    Snappy(Box<snap::read::FrameDecoder<HashingReader<BufReader<File>>>>),
}

impl PayloadReader {
    fn as_read(&mut self) -> &mut dyn Read {
        match self {
            PayloadReader::Plain(r) => r,
            PayloadReader::Snappy(r) => r,
        }
    }

    fn into_hashing(self) -> HashingReader<BufReader<File>> {
        match self {
            PayloadReader::Plain(r) => r,
            PayloadReader::Snappy(dec) => dec.into_inner(),
        }
    }
}

/// Streaming segment reader. Yields records in stored (key) order; after
/// the last record the file digest is checked against the manifest's
/// expectation.
pub struct SegmentReader {
    path: PathBuf,
    reader: Option<PayloadReader>,
    expected_checksum: String,
    verified: bool,
}

impl SegmentReader {
    pub fn open(path: &Path, expected_checksum: &str) -> Result<SegmentReader> {
        let file = File::open(path)
            .map_err(|e| Error::corruption(path, format!("cannot open segment: {e}")))?;
        let mut hashing = HashingReader { inner: BufReader::new(file), hasher: Sha256::new() };
        let mut header = [0u8; 7];
        hashing
            .read_exact(&mut header)
            .map_err(|_| Error::corruption(path, "segment shorter than header"))?;
        if &header[..6] != MAGIC {
            return Err(Error::corruption(path, "bad segment magic"));
        }
        let codec = Codec::from_byte(header[6], path)?;
        let reader = match codec {
            Codec::None => PayloadReader::Plain(hashing),
            Codec::Snappy => {
                PayloadReader::Snappy(Box::new(snap::read::FrameDecoder::new(hashing)))
            }
        };
        Ok(SegmentReader {
            path: path.to_path_buf(),
            reader: Some(reader),
            expected_checksum: expected_checksum.to_string(),
            verified: false,
        })
    }

    /// Next record, or None at a clean end of payload (at which point the
    /// checksum has been verified).
    pub fn next_record(&mut self) -> Result<Option<SegmentRecord>> {
        let reader = match self.reader.as_mut() {
            Some(r) => r,
            None => return Ok(None),
        };
        let r = reader.as_read();
        let mut len4 = [0u8; 4];
        if !read_exact_or_eof(r, &mut len4)? {
            self.verify()?;
            return Ok(None);
        }
        let key_len = u32::from_le_bytes(len4) as usize;
        let mut key = vec![0u8; key_len];
        r.read_exact(&mut key)
            .map_err(|_| Error::corruption(&self.path, "truncated record key"))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)
            .map_err(|_| Error::corruption(&self.path, "truncated record flags"))?;
        r.read_exact(&mut len4)
            .map_err(|_| Error::corruption(&self.path, "truncated cell count"))?;
        let n_cells = u32::from_le_bytes(len4) as usize;
        let mut cells = Vec::with_capacity(n_cells);
        for _ in 0..n_cells {
            let mut len2 = [0u8; 2];
            r.read_exact(&mut len2)
                .map_err(|_| Error::corruption(&self.path, "truncated field length"))?;
            let mut field = vec![0u8; u16::from_le_bytes(len2) as usize];
            r.read_exact(&mut field)
                .map_err(|_| Error::corruption(&self.path, "truncated field name"))?;
            r.read_exact(&mut len4)
                .map_err(|_| Error::corruption(&self.path, "truncated value length"))?;
            let mut value = vec![0u8; u32::from_le_bytes(len4) as usize];
            r.read_exact(&mut value)
                .map_err(|_| Error::corruption(&self.path, "truncated value"))?;
            let field = String::from_utf8(field)
                .map_err(|_| Error::corruption(&self.path, "field name not utf-8"))?;
            cells.push((field, value));
        }
        Ok(Some(SegmentRecord { key, exists: flag[0] != 0, cells }))
    }

    fn verify(&mut self) -> Result<()> {
        if self.verified {
            return Ok(());
        }
        if let Some(reader) = self.reader.take() {
            let mut hashing = reader.into_hashing();
            // Drain whatever the decoder did not consume so the digest
            // covers the whole file.
            let mut rest = Vec::new();
            hashing.read_to_end(&mut rest)?;
            let got = format!("{:x}", hashing.hasher.finalize());
            if got != self.expected_checksum {
                return Err(Error::corruption(
                    &self.path,
                    format!("segment checksum mismatch: expected {}, got {got}", self.expected_checksum),
                ));
            }
        }
        self.verified = true;
        Ok(())
    }
}

fn read_exact_or_eof(r: &mut dyn Read, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "truncated record header",
            )));
        }
        filled += n;
    }
    Ok(true)
}
