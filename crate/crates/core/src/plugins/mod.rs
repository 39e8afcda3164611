//! Plugin framework: the six-method parser contract and the built-in
//! parsers (FASTA, a UniProt-style DAT flat format, BLAST tabular output).
//!
//! Parsers own canonicalization: values are normalized at `split_entry`
//! time (case, line folds, numeric form), so byte equality over stored
//! values is the engine's change-detection primitive. `export_entry` is the
//! inverse in canonical space: `split(export(f)) == f` exactly, and
//! `export(split(x))` is the canonical form of `x`.

mod blast;
mod dat;
mod fasta;

pub use blast::{format_evalue, BlastTabParser};
pub use dat::DatParser;
pub use fasta::FastaParser;

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{EntryId, FieldMap, FieldMask};

/// One raw entry slice as delimited by `entry_bounds`.
#[derive(Debug, Clone)]
pub struct RawEntry {
    pub bytes: Vec<u8>,
    /// Byte offset of the entry start within the input stream.
    pub offset: u64,
}

/// Streaming iterator over raw entries. Memory is bounded by the largest
/// single entry, never by file size.
pub trait EntryIter: Iterator<Item = Result<RawEntry>> {
    /// Bytes outside any entry (leading comments, blank lines) skipped so far.
    fn skipped_bytes(&self) -> u64;
}

/// One parsed entry: a table-unique id derived solely from entry content,
/// plus normalized field values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedEntry {
    pub id: EntryId,
    pub fields: FieldMap,
    /// True iff every field the format intrinsically requires is present.
    pub complete: bool,
}

/// Result of comparing two versions of an entry under a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Comparison {
    Equal,
    /// Every differing masked field, sorted.
    Differing(Vec<String>),
}

/// The parser contract. Implementations are stateless after construction
/// and shared freely across workers.
pub trait ParserPlugin: Send + Sync {
    fn format_id(&self) -> &'static str;

    /// Delimit entries in a byte stream.
    fn entry_bounds<'a>(&self, input: Box<dyn BufRead + 'a>) -> Box<dyn EntryIter + 'a>;

    /// Split one raw entry into normalized columns.
    fn split_entry(&self, raw: &[u8]) -> Result<ParsedEntry>;

    /// Byte comparison over masked fields; both entries must share an id.
    fn compare_entries(&self, a: &ParsedEntry, b: &ParsedEntry, mask: &FieldMask) -> Result<Comparison> {
        if a.id != b.id {
            return Err(Error::Contract(format!(
                "compare_entries id mismatch: {} vs {}",
                a.id, b.id
            )));
        }
        let differing: Vec<String> = mask
            .fields
            .iter()
            .filter(|f| a.fields.get(*f) != b.fields.get(*f))
            .cloned()
            .collect();
        Ok(if differing.is_empty() {
            Comparison::Equal
        } else {
            Comparison::Differing(differing)
        })
    }

    /// True iff every `mask.required` field is present and non-empty.
    fn is_complete(&self, e: &ParsedEntry, mask: &FieldMask) -> bool {
        mask.required
            .iter()
            .all(|f| e.fields.get(f).map(|v| !v.is_empty()).unwrap_or(false))
    }

    /// Flatten an entry into a store write batch; lossless w.r.t.
    /// `split_entry` (empty values are dropped at split time, never here).
    fn to_store_batch(&self, e: &ParsedEntry) -> Vec<(EntryId, String, Vec<u8>)> {
        e.fields
            .iter()
            .map(|(k, v)| (e.id.clone(), k.clone(), v.clone()))
            .collect()
    }

    /// Serialize materialized fields into the requested export format.
    fn export_entry(&self, id: &EntryId, fields: &FieldMap, format: &str) -> Result<Vec<u8>>;

    /// Export formats this parser can emit, its own first.
    fn export_formats(&self) -> &'static [&'static str];

    /// Field universe this format produces for a conforming file.
    fn default_fields(&self) -> &'static [&'static str];

    /// Field whose byte length counts as residue letters (database size
    /// bookkeeping for e-value correction), if the format has one.
    fn residue_field(&self) -> Option<&'static str> {
        None
    }
}

/// Maps format_id to a parser. New plugins register by id.
#[derive(Clone)]
pub struct Registry {
    plugins: BTreeMap<String, Arc<dyn ParserPlugin>>,
}

impl Registry {
    /// Registry with the three built-in parsers.
    pub fn builtin() -> Self {
        let mut r = Registry { plugins: BTreeMap::new() };
        r.register(Arc::new(FastaParser));
        r.register(Arc::new(DatParser));
        r.register(Arc::new(BlastTabParser));
        r
    }

    pub fn register(&mut self, plugin: Arc<dyn ParserPlugin>) {
        self.plugins.insert(plugin.format_id().to_string(), plugin);
    }

    pub fn get(&self, format_id: &str) -> Result<Arc<dyn ParserPlugin>> {
        self.plugins.get(format_id).cloned().ok_or_else(|| Error::Format {
            format: format_id.to_string(),
            reason: "no parser registered under this id".to_string(),
        })
    }

    pub fn format_ids(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }
}

/// Compose bounds + split into a streaming entry parser.
pub fn parse_stream<'a>(
    plugin: Arc<dyn ParserPlugin>,
    input: Box<dyn BufRead + 'a>,
) -> impl Iterator<Item = Result<ParsedEntry>> + 'a
where
{
    let bounds = plugin.clone().entry_bounds(input);
    bounds.map(move |raw| raw.and_then(|r| plugin.split_entry(&r.bytes)))
}

/// Canonical form of a whole file: every entry re-exported in its parser's
/// own format, sorted by row key. Two files with the same logical content
/// canonicalize identically regardless of layout or entry order.
pub fn canonical_file(plugin: &dyn ParserPlugin, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut entries: BTreeMap<EntryId, FieldMap> = BTreeMap::new();
    let bounds = plugin.entry_bounds(Box::new(std::io::Cursor::new(bytes.to_vec())));
    for raw in bounds {
        let e = plugin.split_entry(&raw?.bytes)?;
        entries.insert(e.id, e.fields);
    }
    let mut out = Vec::new();
    for (id, fields) in &entries {
        out.extend_from_slice(&plugin.export_entry(id, fields, plugin.format_id())?);
    }
    Ok(out)
}

/// Reads lines preserving byte offsets; shared by the format parsers.
pub(crate) struct LineReader<'a> {
    input: Box<dyn BufRead + 'a>,
    offset: u64,
}

pub(crate) struct Line {
    /// Line content including its newline byte, when present.
    pub bytes: Vec<u8>,
    pub offset: u64,
}

impl Line {
    /// Content with trailing `\n` / `\r\n` removed.
    pub fn trimmed(&self) -> &[u8] {
        let mut end = self.bytes.len();
        if end > 0 && self.bytes[end - 1] == b'\n' {
            end -= 1;
        }
        if end > 0 && self.bytes[end - 1] == b'\r' {
            end -= 1;
        }
        &self.bytes[..end]
    }
}

impl<'a> LineReader<'a> {
    pub fn new(input: Box<dyn BufRead + 'a>) -> Self {
        LineReader { input, offset: 0 }
    }

    pub fn next_line(&mut self) -> Result<Option<Line>> {
        let mut buf = Vec::new();
        let n = self.input.read_until(b'\n', &mut buf)?;
        if n == 0 {
            return Ok(None);
        }
        let offset = self.offset;
        self.offset += n as u64;
        Ok(Some(Line { bytes: buf, offset }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trip_and_unknown() {
        let r = Registry::builtin();
        assert!(r.get("fasta").is_ok());
        assert!(r.get("dat").is_ok());
        assert!(r.get("blast-tab").is_ok());
        assert!(matches!(r.get("xyz"), Err(Error::Format { .. })));
        assert_eq!(r.format_ids(), vec!["blast-tab", "dat", "fasta"]);
    }

    #[test]
    fn compare_requires_matching_ids() {
        let p = FastaParser;
        let a = p.split_entry(b">A one\nACGT\n").unwrap();
        let b = p.split_entry(b">B two\nACGT\n").unwrap();
        let mask = FieldMask::all_of(["seq"]).unwrap();
        assert!(matches!(p.compare_entries(&a, &b, &mask), Err(Error::Contract(_))));
    }

    #[test]
    fn compare_reports_differing_masked_fields() {
        let p = FastaParser;
        let a = p.split_entry(b">A one\nACGT\n").unwrap();
        let b = p.split_entry(b">A two\nACGT\n").unwrap();
        let seq_mask = FieldMask::all_of(["seq"]).unwrap();
        assert_eq!(p.compare_entries(&a, &b, &seq_mask).unwrap(), Comparison::Equal);
        let desc_mask = FieldMask::all_of(["desc"]).unwrap();
        assert_eq!(
            p.compare_entries(&a, &b, &desc_mask).unwrap(),
            Comparison::Differing(vec!["desc".into()])
        );
        assert_eq!(p.compare_entries(&a, &a, &desc_mask).unwrap(), Comparison::Equal);
    }

    #[test]
    fn completeness_follows_required_subset() {
        let p = FastaParser;
        let e = p.split_entry(b">A one\nACGT\n").unwrap();
        let all = FieldMask::new(["seq", "desc"], ["seq", "desc"]).unwrap();
        assert!(p.is_complete(&e, &all));
        let headerless = p.split_entry(b">B\nACGT\n").unwrap();
        assert!(!p.is_complete(&headerless, &all));
        let vacuous = FieldMask::all_of(["seq", "desc"]).unwrap();
        assert!(p.is_complete(&headerless, &vacuous));
    }
}
