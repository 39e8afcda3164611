//! Shared vocabulary of the engine: entries, fields, versions, masks, diffs,
//! and generation requests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Map of field name to opaque byte value. Field typing lives in plugins;
/// the engine treats values as bytes after plugin normalization.
pub type FieldMap = BTreeMap<String, Vec<u8>>;

/// One ingested release of one table: a dense per-table ordinal plus an
/// informational label and wall-clock time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionStamp {
    pub table: String,
    /// 1-based, contiguous per table.
    pub seq: u64,
    /// Free-text release label, unique within a table (e.g. "2014_09").
    pub label: String,
    /// Informational only; never used for version resolution.
    pub wall_time: i64,
}

/// Table-unique row key, a deterministic function of the parsed entry.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntryId(pub Vec<u8>);

impl EntryId {
    pub fn new(key: impl Into<Vec<u8>>) -> Result<Self> {
        let key = key.into();
        if key.is_empty() {
            return Err(Error::validation("entry id must be non-empty"));
        }
        Ok(EntryId(key))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", String::from_utf8_lossy(&self.0))
    }
}

/// One logical entry with its full cell history and presence marks.
///
/// `exists_stamps` contains seq S iff the entry appeared in release S's
/// source file; every field cell stamp is a member of `exists_stamps`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VersionedRow {
    pub id: EntryId,
    /// Per field, cells ordered by stamp ascending.
    pub cells: BTreeMap<String, Vec<(u64, Vec<u8>)>>,
    pub exists_stamps: BTreeSet<u64>,
}

impl Default for EntryId {
    fn default() -> Self {
        EntryId(vec![0])
    }
}

impl VersionedRow {
    /// Point-in-time reconstruction: for each field, the latest cell with
    /// stamp <= `at_seq`. Absent iff the row was not present at `at_seq`.
    /// An empty cell value is a tombstone (the field was dropped in that
    /// release) and yields no entry in the map.
    pub fn materialize_at(&self, at_seq: u64, mask: &FieldMask) -> Option<FieldMap> {
        if !self.exists_stamps.contains(&at_seq) {
            return None;
        }
        let mut out = FieldMap::new();
        for field in &mask.fields {
            if let Some(cells) = self.cells.get(field) {
                if let Some((_, value)) = cells.iter().rev().find(|(s, _)| *s <= at_seq) {
                    if !value.is_empty() {
                        out.insert(field.clone(), value.clone());
                    }
                }
            }
        }
        Some(out)
    }

    /// True iff presence was gained at some seq in `[from, to]`: the row has
    /// an EXISTS mark at s with no mark at s-1.
    pub fn gained_presence_in(&self, from: u64, to: u64) -> bool {
        self.exists_stamps
            .iter()
            .filter(|s| **s >= from && **s <= to)
            .any(|s| !self.exists_stamps.contains(&(s - 1)))
    }

    /// True iff any masked field has a cell stamped within `[from, to]`.
    pub fn masked_cell_in(&self, from: u64, to: u64, mask: &FieldMask) -> bool {
        mask.fields.iter().any(|f| {
            self.cells
                .get(f)
                .map(|cs| cs.iter().any(|(s, _)| *s >= from && *s <= to))
                .unwrap_or(false)
        })
    }
}

/// The set of fields a downstream tool actually reads. Changes outside the
/// mask are invisible to that tool, for both change detection and projection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMask {
    pub fields: BTreeSet<String>,
    /// Fields that must be present and non-empty for an entry to be emitted.
    pub required: BTreeSet<String>,
}

impl FieldMask {
    pub fn new<I, J>(fields: I, required: J) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Into<String>,
        J: IntoIterator,
        J::Item: Into<String>,
    {
        let fields: BTreeSet<String> = fields.into_iter().map(Into::into).collect();
        let required: BTreeSet<String> = required.into_iter().map(Into::into).collect();
        if fields.is_empty() {
            return Err(Error::Mask("mask fields must be non-empty".into()));
        }
        if !required.is_subset(&fields) {
            return Err(Error::Mask(format!(
                "required fields {:?} not a subset of masked fields {:?}",
                required, fields
            )));
        }
        Ok(FieldMask { fields, required })
    }

    /// Mask over the given fields with nothing required.
    pub fn all_of<I>(fields: I) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: Into<String>,
    {
        Self::new(fields, Vec::<String>::new())
    }

    pub fn contains(&self, field: &str) -> bool {
        self.fields.contains(field)
    }

    /// Stable 8-hex-digit digest over the sorted field list and required
    /// subset; the mask segment of canonical cache keys.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update(f.as_bytes());
            h.update([0u8]);
        }
        h.update([1u8]);
        for r in &self.required {
            h.update(r.as_bytes());
            h.update([0u8]);
        }
        let out = h.finalize();
        hex_prefix(&out, 8)
    }
}

fn hex_prefix(bytes: &[u8], digits: usize) -> String {
    let mut s = String::with_capacity(digits);
    for b in bytes {
        for d in [b >> 4, b & 0xf] {
            s.push(char::from_digit(u32::from(d), 16).unwrap());
            if s.len() == digits {
                return s;
            }
        }
    }
    s
}

/// Classification of one entry across a release pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiffClass {
    Added,
    Updated,
    Unchanged,
    Deleted,
}

impl fmt::Display for DiffClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiffClass::Added => "ADDED",
            DiffClass::Updated => "UPDATED",
            DiffClass::Unchanged => "UNCHANGED",
            DiffClass::Deleted => "DELETED",
        };
        f.write_str(s)
    }
}

/// Field-aware change classification between two versions of an entry.
///
/// Differences outside the mask are ignored: a present/present pair whose
/// masked fields are byte-equal is UNCHANGED no matter what else changed.
pub fn classify(
    old_entry: Option<&FieldMap>,
    new_entry: Option<&FieldMap>,
    mask: &FieldMask,
) -> Result<DiffClass> {
    match (old_entry, new_entry) {
        (None, None) => Err(Error::Contract("classify called with both entries absent".into())),
        (None, Some(_)) => Ok(DiffClass::Added),
        (Some(_), None) => Ok(DiffClass::Deleted),
        (Some(old), Some(new)) => {
            let differs = mask.fields.iter().any(|f| old.get(f) != new.get(f));
            Ok(if differs { DiffClass::Updated } else { DiffClass::Unchanged })
        }
    }
}

/// Kind of a generation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenerationKind {
    Full,
    Increment,
}

impl GenerationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GenerationKind::Full => "full",
            GenerationKind::Increment => "incr",
        }
    }
}

/// Canonical, hashable description of a generation request; the cache key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub table: String,
    pub kind: GenerationKind,
    /// FULL requests always start at 1.
    pub from_seq: u64,
    pub to_seq: u64,
    pub mask: FieldMask,
    pub format: String,
    pub splits: u32,
}

impl GenerationSpec {
    pub fn full(table: &str, to_seq: u64, mask: FieldMask, format: &str, splits: u32) -> Result<Self> {
        let spec = GenerationSpec {
            table: table.to_string(),
            kind: GenerationKind::Full,
            from_seq: 1,
            to_seq,
            mask,
            format: format.to_string(),
            splits,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn increment(
        table: &str,
        from_seq: u64,
        to_seq: u64,
        mask: FieldMask,
        format: &str,
        splits: u32,
    ) -> Result<Self> {
        let spec = GenerationSpec {
            table: table.to_string(),
            kind: GenerationKind::Increment,
            from_seq,
            to_seq,
            mask,
            format: format.to_string(),
            splits,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        validate_table_name(&self.table)?;
        validate_format_id(&self.format)?;
        if self.splits == 0 {
            return Err(Error::validation("splits must be a positive integer"));
        }
        match self.kind {
            GenerationKind::Full => {
                if self.from_seq != 1 {
                    return Err(Error::validation("full generation must start at seq 1"));
                }
                if self.to_seq < 1 {
                    return Err(Error::Range("to_seq must be >= 1".into()));
                }
            }
            GenerationKind::Increment => {
                if self.from_seq < 1 {
                    return Err(Error::Range("from_seq must be >= 1".into()));
                }
                if self.from_seq >= self.to_seq {
                    return Err(Error::Range(format!(
                        "increment window requires from_seq < to_seq, got ({}, {}]",
                        self.from_seq, self.to_seq
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Canonical, filesystem-safe cache key:
/// `<table>.<full|incr>.<from>-<to>.<8-hex maskhash>.<format>.s<splits>`.
///
/// Table names and format ids cannot contain '.', so the key parses back
/// unambiguously; the mask is folded in via its stable digest.
pub fn canonical_key(spec: &GenerationSpec) -> Result<String> {
    spec.validate()?;
    Ok(format!(
        "{}.{}.{}-{}.{}.{}.s{}",
        spec.table,
        spec.kind.as_str(),
        spec.from_seq,
        spec.to_seq,
        spec.mask.digest(),
        spec.format,
        spec.splits
    ))
}

/// Table names are path components and canonical-key segments: letters,
/// digits, `_` and `-` only.
pub fn validate_table_name(name: &str) -> Result<()> {
    if name.is_empty() || name.len() > 128 {
        return Err(Error::validation(format!(
            "table name {:?} must be 1..=128 characters",
            name
        )));
    }
    if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::validation(format!(
            "table name {:?} may only contain ASCII letters, digits, '_' and '-'",
            name
        )));
    }
    Ok(())
}

/// Format ids follow the same character rules as table names.
pub fn validate_format_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    {
        return Err(Error::validation(format!("invalid format id {:?}", id)));
    }
    Ok(())
}

/// Stable 64-bit FNV-1a hash, used wherever routing must be deterministic
/// across runs and platforms (split assignment, ingest partitioning).
pub fn stable_hash64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
