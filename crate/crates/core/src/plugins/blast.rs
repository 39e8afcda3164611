//! BLAST tabular (12-column, `-outfmt 6` style) parser.
//!
//! One hit per line. Record identity is the (qseqid, sseqid, qstart,
//! sstart) tuple: a query/subject pair is not unique per hit. Columns are
//! kept as verbatim strings except `evalue`, which is normalized to
//! lowercase scientific notation so corrected values serialize uniformly.

use std::io::BufRead;

use crate::error::{Error, Result};
use crate::model::{EntryId, FieldMap};

use super::{EntryIter, LineReader, ParsedEntry, ParserPlugin, RawEntry};

pub const COLUMNS: [&str; 12] = [
    "qseqid", "sseqid", "pident", "length", "mismatch", "gapopen", "qstart", "qend", "sstart",
    "send", "evalue", "bitscore",
];

pub struct BlastTabParser;

impl BlastTabParser {
    /// Field holding the subject sequence id; deletion filtering at merge
    /// time matches against this column.
    pub const SUBJECT_FIELD: &'static str = "sseqid";
}

impl ParserPlugin for BlastTabParser {
    fn format_id(&self) -> &'static str {
        "blast-tab"
    }

    fn entry_bounds<'a>(&self, input: Box<dyn BufRead + 'a>) -> Box<dyn EntryIter + 'a> {
        Box::new(BlastBounds { lines: LineReader::new(input), skipped: 0 })
    }

    fn split_entry(&self, raw: &[u8]) -> Result<ParsedEntry> {
        let line = raw.strip_suffix(b"\n").unwrap_or(raw);
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        let cols: Vec<&[u8]> = line.split(|b| *b == b'\t').collect();
        if cols.len() != COLUMNS.len() {
            return Err(Error::MalformedEntry {
                id: String::from_utf8_lossy(line).into_owned(),
                reason: format!("expected {} tab-separated columns, got {}", COLUMNS.len(), cols.len()),
            });
        }
        let mut fields = FieldMap::new();
        for (name, value) in COLUMNS.iter().zip(&cols) {
            let value = if *name == "evalue" {
                normalize_evalue(value)?
            } else {
                value.to_vec()
            };
            fields.insert((*name).to_string(), value);
        }
        let id = identity_key(&cols);
        Ok(ParsedEntry { id: EntryId::new(id)?, fields, complete: true })
    }

    fn export_entry(&self, _id: &EntryId, fields: &FieldMap, format: &str) -> Result<Vec<u8>> {
        if format != "blast-tab" {
            return Err(Error::Format {
                format: format.to_string(),
                reason: "blast-tab parser can only export blast-tab".into(),
            });
        }
        let mut out = Vec::new();
        for (i, name) in COLUMNS.iter().enumerate() {
            if i > 0 {
                out.push(b'\t');
            }
            match fields.get(*name) {
                Some(v) => out.extend_from_slice(v),
                None => {
                    return Err(Error::Format {
                        format: "blast-tab".into(),
                        reason: format!("missing column {name}"),
                    })
                }
            }
        }
        out.push(b'\n');
        Ok(out)
    }

    fn export_formats(&self) -> &'static [&'static str] {
        &["blast-tab"]
    }

    fn default_fields(&self) -> &'static [&'static str] {
        &COLUMNS
    }
}

/// Tab-joined (qseqid, sseqid, qstart, sstart); tabs cannot occur inside
/// columns, so the key is unambiguous and sorts deterministically.
fn identity_key(cols: &[&[u8]]) -> Vec<u8> {
    let mut key = Vec::new();
    for (i, idx) in [0usize, 1, 6, 8].iter().enumerate() {
        if i > 0 {
            key.push(b'\t');
        }
        key.extend_from_slice(cols[*idx]);
    }
    key
}

/// Shortest round-trip scientific notation, lowercase `e`.
pub fn format_evalue(v: f64) -> Vec<u8> {
    format!("{v:e}").into_bytes()
}

fn normalize_evalue(raw: &[u8]) -> Result<Vec<u8>> {
    let text = std::str::from_utf8(raw).map_err(|_| malformed_evalue(raw))?;
    let v: f64 = text.trim().parse().map_err(|_| malformed_evalue(raw))?;
    if !v.is_finite() || v < 0.0 {
        return Err(malformed_evalue(raw));
    }
    Ok(format_evalue(v))
}

fn malformed_evalue(raw: &[u8]) -> Error {
    Error::MalformedEntry {
        id: String::new(),
        reason: format!("evalue {:?} is not a non-negative finite number", String::from_utf8_lossy(raw)),
    }
}

struct BlastBounds<'a> {
    lines: LineReader<'a>,
    skipped: u64,
}

impl Iterator for BlastBounds<'_> {
    type Item = Result<RawEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match self.lines.next_line() {
                Err(e) => return Some(Err(e)),
                Ok(None) => return None,
                Ok(Some(line)) => {
                    // '#' comment lines and blank lines sit outside entries.
                    let t = line.trimmed();
                    if t.is_empty() || t.first() == Some(&b'#') {
                        self.skipped += line.bytes.len() as u64;
                        continue;
                    }
                    return Some(Ok(RawEntry { bytes: line.bytes, offset: line.offset }));
                }
            }
        }
    }
}

impl EntryIter for BlastBounds<'_> {
    fn skipped_bytes(&self) -> u64 {
        self.skipped
    }
}
