//! FASTA parser.
//!
//! Canonical form: uppercase sequence, line folds removed, 60-column wrap
//! on export, single space between id and description.

use std::io::BufRead;

use crate::error::{Error, Result};
use crate::model::{EntryId, FieldMap};

use super::{EntryIter, Line, LineReader, ParsedEntry, ParserPlugin, RawEntry};

pub const WRAP_COLUMNS: usize = 60;

pub struct FastaParser;

impl ParserPlugin for FastaParser {
    fn format_id(&self) -> &'static str {
        "fasta"
    }

    fn entry_bounds<'a>(&self, input: Box<dyn BufRead + 'a>) -> Box<dyn EntryIter + 'a> {
        Box::new(FastaBounds {
            lines: LineReader::new(input),
            pending: None,
            skipped: 0,
            done: false,
        })
    }

    fn split_entry(&self, raw: &[u8]) -> Result<ParsedEntry> {
        let mut lines = raw.split(|b| *b == b'\n');
        let header = lines.next().unwrap_or(b"");
        let header = header.strip_suffix(b"\r").unwrap_or(header);
        let header = header.strip_prefix(b">").ok_or_else(|| Error::MalformedEntry {
            id: String::from_utf8_lossy(header).into_owned(),
            reason: "entry does not start with '>'".into(),
        })?;
        let header = header.trim_ascii();
        let (id_bytes, desc) = match header.iter().position(|b| b.is_ascii_whitespace()) {
            Some(pos) => (&header[..pos], header[pos..].trim_ascii()),
            None => (header, &b""[..]),
        };
        if id_bytes.is_empty() {
            return Err(Error::MalformedEntry {
                id: String::new(),
                reason: "missing id token after '>'".into(),
            });
        }
        let mut seq = Vec::new();
        for line in lines {
            seq.extend(
                line.iter()
                    .filter(|b| !b.is_ascii_whitespace())
                    .map(|b| b.to_ascii_uppercase()),
            );
        }
        let mut fields = FieldMap::new();
        if !desc.is_empty() {
            fields.insert("desc".into(), desc.to_vec());
        }
        let complete = !seq.is_empty();
        if complete {
            fields.insert("seq".into(), seq);
        }
        Ok(ParsedEntry { id: EntryId::new(id_bytes.to_vec())?, fields, complete })
    }

    fn export_entry(&self, id: &EntryId, fields: &FieldMap, format: &str) -> Result<Vec<u8>> {
        if format != "fasta" {
            return Err(Error::Format {
                format: format.to_string(),
                reason: "fasta parser can only export fasta".into(),
            });
        }
        Ok(export_fasta(id, fields.get("desc"), fields.get("seq")))
    }

    fn export_formats(&self) -> &'static [&'static str] {
        &["fasta"]
    }

    fn default_fields(&self) -> &'static [&'static str] {
        &["desc", "seq"]
    }

    fn residue_field(&self) -> Option<&'static str> {
        Some("seq")
    }
}

pub(crate) fn export_fasta(id: &EntryId, desc: Option<&Vec<u8>>, seq: Option<&Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.push(b'>');
    out.extend_from_slice(id.as_bytes());
    if let Some(desc) = desc {
        if !desc.is_empty() {
            out.push(b' ');
            out.extend_from_slice(desc);
        }
    }
    out.push(b'\n');
    if let Some(seq) = seq {
        for chunk in seq.chunks(WRAP_COLUMNS) {
            out.extend_from_slice(chunk);
            out.push(b'\n');
        }
    }
    out
}

struct FastaBounds<'a> {
    lines: LineReader<'a>,
    /// Header line of the next entry, already read.
    pending: Option<Line>,
    skipped: u64,
    done: bool,
}

impl FastaBounds<'_> {
    fn read_entry(&mut self) -> Result<Option<RawEntry>> {
        // Skip anything before the first header: blank lines and ';'
        // comments, but also stray content, all reported via the counter.
        let header = loop {
            let line = match self.pending.take() {
                Some(l) => l,
                None => match self.lines.next_line()? {
                    Some(l) => l,
                    None => return Ok(None),
                },
            };
            if line.bytes.first() == Some(&b'>') {
                break line;
            }
            self.skipped += line.bytes.len() as u64;
        };
        let offset = header.offset;
        let mut entry = header.bytes;
        loop {
            match self.lines.next_line()? {
                None => break,
                Some(line) => {
                    if line.bytes.first() == Some(&b'>') {
                        self.pending = Some(line);
                        break;
                    }
                    entry.extend_from_slice(&line.bytes);
                }
            }
        }
        Ok(Some(RawEntry { bytes: entry, offset }))
    }
}

impl Iterator for FastaBounds<'_> {
    type Item = Result<RawEntry>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.read_entry() {
            Ok(Some(e)) => Some(Ok(e)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

impl EntryIter for FastaBounds<'_> {
    fn skipped_bytes(&self) -> u64 {
        self.skipped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FieldMask;

    fn bounds(bytes: &[u8]) -> (Vec<RawEntry>, u64) {
        let mut it = FastaParser.entry_bounds(Box::new(std::io::Cursor::new(bytes.to_vec())));
        let mut out = Vec::new();
        while let Some(r) = it.next() {
            out.push(r.unwrap());
        }
        (out, it.skipped_bytes())
    }

    #[test]
    fn bounds_split_on_headers() {
        let f0_r1 = b">A desc1\nACGT\n>B desc2\nGGGG\n>C desc3\nTTTT\n";
        let (entries, skipped) = bounds(f0_r1);
        assert_eq!(entries.len(), 3);
        assert!(entries.iter().all(|e| e.bytes.starts_with(b">")));
        assert_eq!(skipped, 0);
        assert_eq!(entries[1].offset, 14);
    }

    #[test]
    fn bounds_empty_file() {
        let (entries, skipped) = bounds(b"");
        assert!(entries.is_empty());
        assert_eq!(skipped, 0);
    }

    #[test]
    fn bounds_skip_and_report_leading_junk() {
        let (entries, skipped) = bounds(b"; comment\n\n>A x\nACGT\n");
        assert_eq!(entries.len(), 1);
        assert_eq!(skipped, 11);
        assert_eq!(entries[0].offset, 11);
    }

    #[test]
    fn split_basic() {
        let e = FastaParser.split_entry(b">A desc1\nAC\nGT\n").unwrap();
        assert_eq!(e.id.as_bytes(), b"A");
        assert_eq!(e.fields["desc"], b"desc1");
        assert_eq!(e.fields["seq"], b"ACGT");
        assert!(e.complete);
    }

    #[test]
    fn split_normalizes_case_and_folds() {
        let e = FastaParser.split_entry(b">A\nacg t\ngt\n").unwrap();
        assert_eq!(e.fields["seq"], b"ACGTGT");
        assert!(e.fields.get("desc").is_none());
    }

    #[test]
    fn split_missing_id_errors() {
        assert!(matches!(
            FastaParser.split_entry(b">\nACGT\n"),
            Err(Error::MalformedEntry { .. })
        ));
    }

    #[test]
    fn export_wraps_at_sixty() {
        let id = EntryId::new("X").unwrap();
        let mut fields = FieldMap::new();
        fields.insert("seq".into(), vec![b'A'; 61]);
        let out = FastaParser.export_entry(&id, &fields, "fasta").unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].len(), 60);
        assert_eq!(lines[2].len(), 1);
    }

    #[test]
    fn export_unknown_format_errors() {
        let id = EntryId::new("X").unwrap();
        assert!(matches!(
            FastaParser.export_entry(&id, &FieldMap::new(), "xml"),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn round_trip_canonical() {
        let raw = b">A desc here\nacgt\nACGTACGT\n";
        let p = FastaParser;
        let e = p.split_entry(raw).unwrap();
        let exported = p.export_entry(&e.id, &e.fields, "fasta").unwrap();
        let e2 = p.split_entry(&exported).unwrap();
        assert_eq!(e, e2);
        // second export is a fixpoint
        let exported2 = p.export_entry(&e2.id, &e2.fields, "fasta").unwrap();
        assert_eq!(exported, exported2);
    }

    #[test]
    fn batch_drops_nothing_and_counts_fields() {
        let e = FastaParser.split_entry(b">A desc1\nACGT\n").unwrap();
        let batch = FastaParser.to_store_batch(&e);
        assert_eq!(batch.len(), 2);
        let empty = FastaParser.split_entry(b">E\n").unwrap();
        assert!(FastaParser.to_store_batch(&empty).is_empty());
        assert!(!empty.complete);
        let mask = FieldMask::new(["seq"], ["seq"]).unwrap();
        assert!(!FastaParser.is_complete(&empty, &mask));
    }
}
