//! Embedded versioned table store.
//!
//! Layout under the store root: one directory per table holding a
//! checksummed `MANIFEST` and numbered immutable segment files (one per
//! committed release), plus a `blobs/` subtree for raw unparsed files.
//! All writes are append-only: a release commit writes a new segment, then
//! atomically replaces the manifest. Readers only ever see manifest-listed
//! segments, which gives release-granularity crash consistency for free.

mod manifest;
mod segment;

pub use manifest::{Manifest, ReleaseMeta, SegmentMeta};
pub use segment::{Codec, SegmentRecord};

pub(crate) use segment::{SegmentReader, SegmentWriter};

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{validate_table_name, EntryId, FieldMap, FieldMask, VersionedRow};

use self::manifest::encode_hex_key;

/// Environment variable consulted at commit points; setting it to a fault
/// point name makes the process abort there. Used by crash-consistency
/// tests to kill a writer between segment write and manifest commit.
pub const FAULT_POINT_ENV: &str = "RELSTORE_FAULT_POINT";
pub const FAULT_BEFORE_MANIFEST: &str = "before-manifest-commit";

fn fault_point(name: &str) {
    if let Some(v) = std::env::var_os(FAULT_POINT_ENV) {
        if v == name {
            std::process::abort();
        }
    }
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub codec: Codec,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { codec: Codec::Snappy }
    }
}

struct StoreInner {
    root: PathBuf,
    codec: Codec,
    scan_counter: AtomicU64,
}

/// Handle to a store root. Cheap to clone; any number of concurrent
/// readers, one writer per table at a time.
#[derive(Clone)]
pub struct Store {
    inner: Arc<StoreInner>,
}

/// Public summary of a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableHandle {
    pub name: String,
    pub schema_note: String,
    pub head_seq: u64,
    pub row_count: u64,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        Store::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl Into<PathBuf>, options: StoreOptions) -> Result<Store> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        fs::create_dir_all(root.join("blobs"))?;
        Ok(Store {
            inner: Arc::new(StoreInner {
                root,
                codec: options.codec,
                scan_counter: AtomicU64::new(0),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    /// Number of row scans served since this handle was opened.
    pub fn scan_count(&self) -> u64 {
        self.inner.scan_counter.load(Ordering::Relaxed)
    }

    pub fn table_dir(&self, name: &str) -> PathBuf {
        self.inner.root.join(name)
    }

    pub fn table_exists(&self, name: &str) -> bool {
        self.table_dir(name).join(manifest::MANIFEST_FILE).is_file()
    }

    pub fn create_table(
        &self,
        name: &str,
        format_id: &str,
        fields: BTreeSet<String>,
        schema_note: &str,
    ) -> Result<Table> {
        validate_table_name(name)?;
        if self.table_exists(name) {
            return Err(Error::AlreadyExists(format!("table {name}")));
        }
        let dir = self.table_dir(name);
        fs::create_dir_all(&dir)?;
        let manifest = Manifest::new(name, format_id, fields, schema_note);
        manifest.store(&dir)?;
        Ok(Table { store: self.clone(), dir, manifest })
    }

    pub fn open_table(&self, name: &str) -> Result<Table> {
        validate_table_name(name)?;
        let dir = self.table_dir(name);
        let manifest = Manifest::load(&dir)
            .map_err(|e| match e {
                Error::NotFound(_) => Error::not_found(format!("table {name}")),
                other => other,
            })?;
        Ok(Table { store: self.clone(), dir, manifest })
    }

    pub fn table_names(&self) -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.inner.root)? {
            let entry = entry?;
            if entry.path().join(manifest::MANIFEST_FILE).is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    }

    fn blob_dir(&self, name: &str) -> Result<PathBuf> {
        validate_blob_name(name)?;
        Ok(self.inner.root.join("blobs").join(name))
    }

    /// Store an unparsed file unmodified; returns its dense version ordinal.
    pub fn put_blob(&self, name: &str, bytes: &[u8]) -> Result<u64> {
        let dir = self.blob_dir(name)?;
        fs::create_dir_all(&dir)?;
        let mut version = self.blob_head(name)? + 1;
        loop {
            match OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(dir.join(format!("v{version:06}.blob")))
            {
                Ok(mut f) => {
                    f.write_all(bytes)?;
                    f.sync_all()?;
                    let digest = format!("{:x}", Sha256::digest(bytes));
                    let sha_path = dir.join(format!("v{version:06}.sha256"));
                    fs::write(&sha_path, format!("{digest}\n"))?;
                    return Ok(version);
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    version += 1;
                }
                Err(e) => return Err(Error::Io(e)),
            }
        }
    }

    /// Byte-exact retrieval of a stored blob version.
    pub fn get_blob(&self, name: &str, version: u64) -> Result<Vec<u8>> {
        if version == 0 {
            return Err(Error::not_found(format!("blob {name} has no version 0")));
        }
        let dir = self.blob_dir(name)?;
        let path = dir.join(format!("v{version:06}.blob"));
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::not_found(format!("blob {name} version {version}"))
            } else {
                Error::Io(e)
            }
        })?;
        let sha_path = dir.join(format!("v{version:06}.sha256"));
        let expected = fs::read_to_string(&sha_path)
            .map_err(|_| Error::not_found(format!("blob {name} version {version}")))?;
        let got = format!("{:x}", Sha256::digest(&bytes));
        if got != expected.trim() {
            return Err(Error::corruption(&path, "blob checksum mismatch"));
        }
        Ok(bytes)
    }

    /// Highest committed version of a blob, 0 when absent.
    pub fn blob_head(&self, name: &str) -> Result<u64> {
        let dir = self.blob_dir(name)?;
        let mut head = 0;
        if let Ok(entries) = fs::read_dir(&dir) {
            for entry in entries {
                let entry = entry?;
                let file = entry.file_name().to_string_lossy().into_owned();
                if let Some(v) = file.strip_prefix('v').and_then(|f| f.strip_suffix(".sha256")) {
                    if let Ok(n) = v.parse::<u64>() {
                        head = head.max(n);
                    }
                }
            }
        }
        Ok(head)
    }
}

fn validate_blob_name(name: &str) -> Result<()> {
    if name.is_empty()
        || name.len() > 255
        || name == "."
        || name == ".."
        || name.contains('/')
        || name.contains('\0')
    {
        return Err(Error::validation(format!("invalid blob name {name:?}")));
    }
    Ok(())
}

/// Inclusive row-key range for scans.
#[derive(Debug, Clone, Default)]
pub struct KeyRange {
    pub lo: Option<Vec<u8>>,
    pub hi: Option<Vec<u8>>,
}

impl KeyRange {
    pub fn single(key: &[u8]) -> KeyRange {
        KeyRange { lo: Some(key.to_vec()), hi: Some(key.to_vec()) }
    }

    fn contains(&self, key: &[u8]) -> bool {
        if let Some(lo) = &self.lo {
            if key < lo.as_slice() {
                return false;
            }
        }
        if let Some(hi) = &self.hi {
            if key > hi.as_slice() {
                return false;
            }
        }
        true
    }
}

/// One row's contribution to one release commit. Cells must be sorted by
/// field name; an empty value is a tombstone for a dropped field.
pub struct CommitRecord {
    pub key: Vec<u8>,
    pub exists: bool,
    pub cells: Vec<(String, Vec<u8>)>,
}

/// How a commit learns the number of never-before-seen row keys it wrote
/// (row_count maintenance).
pub enum NewRows<'a> {
    /// Count internally by merging the stream against existing keys.
    Auto,
    /// The caller already knows (an ingest merge join counted them).
    Known(u64),
    /// Read this cell once the record stream is exhausted; for callers
    /// whose stream counts as it is consumed.
    CountedAfter(&'a std::cell::Cell<u64>),
}

/// Write statistics for one committed release.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteStats {
    pub field_cells: u64,
    pub exists_marks: u64,
    /// Compressed segment size on disk.
    pub bytes_written: u64,
    pub new_rows: u64,
    pub duration: Duration,
}

/// Small-batch release write: cells plus EXISTS marks, deduplicated and
/// ordered internally.
#[derive(Default)]
pub struct ReleaseBatch {
    marks: BTreeSet<EntryId>,
    cells: std::collections::BTreeMap<EntryId, std::collections::BTreeMap<String, Vec<u8>>>,
}

impl ReleaseBatch {
    pub fn new() -> ReleaseBatch {
        ReleaseBatch::default()
    }

    /// Record that the row is present in this release.
    pub fn mark_exists(&mut self, id: EntryId) {
        self.marks.insert(id);
    }

    /// Add one changed cell. At most one cell per (row, field) per release.
    pub fn put(&mut self, id: EntryId, field: &str, value: Vec<u8>) -> Result<()> {
        let row = self.cells.entry(id.clone()).or_default();
        if row.insert(field.to_string(), value).is_some() {
            return Err(Error::DuplicateCell { id: id.to_string(), field: field.to_string() });
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty() && self.cells.is_empty()
    }

    fn into_records(self) -> Result<Vec<CommitRecord>> {
        for id in self.cells.keys() {
            if !self.marks.contains(id) {
                return Err(Error::validation(format!(
                    "cells written for row {id} without an EXISTS mark in the same release"
                )));
            }
        }
        let mut cells = self.cells;
        Ok(self
            .marks
            .into_iter()
            .map(|id| {
                let row_cells = cells
                    .remove(&id)
                    .map(|m| m.into_iter().collect::<Vec<_>>())
                    .unwrap_or_default();
                CommitRecord { key: id.0, exists: true, cells: row_cells }
            })
            .collect())
    }
}

pub struct Table {
    store: Store,
    dir: PathBuf,
    manifest: Manifest,
}

impl Table {
    pub fn name(&self) -> &str {
        &self.manifest.table
    }

    pub fn head_seq(&self) -> u64 {
        self.manifest.head_seq
    }

    pub fn format_id(&self) -> &str {
        &self.manifest.format_id
    }

    pub fn fields(&self) -> &BTreeSet<String> {
        &self.manifest.fields
    }

    pub fn releases(&self) -> &[ReleaseMeta] {
        &self.manifest.releases
    }

    pub fn resolve_label(&self, label: &str) -> Option<u64> {
        self.manifest.resolve_label(label)
    }

    pub fn handle(&self) -> TableHandle {
        TableHandle {
            name: self.manifest.table.clone(),
            schema_note: self.manifest.schema_note.clone(),
            head_seq: self.manifest.head_seq,
            row_count: self.manifest.row_count,
        }
    }

    /// Re-read the manifest from disk.
    pub fn refresh(&mut self) -> Result<()> {
        self.manifest = Manifest::load(&self.dir)?;
        Ok(())
    }

    /// Commit one release from a small in-memory batch.
    pub fn put_cells(&mut self, seq: u64, label: &str, batch: ReleaseBatch) -> Result<WriteStats> {
        let records = batch.into_records()?;
        self.commit_release(seq, label, records.into_iter().map(Ok), NewRows::Auto)
    }

    /// Commit one release from a sorted record stream.
    pub fn commit_release(
        &mut self,
        seq: u64,
        label: &str,
        records: impl Iterator<Item = Result<CommitRecord>>,
        new_rows: NewRows<'_>,
    ) -> Result<WriteStats> {
        let start = Instant::now();
        self.refresh()?;
        if seq != self.manifest.head_seq + 1 {
            return Err(Error::Sequencing {
                table: self.manifest.table.clone(),
                expected: self.manifest.head_seq + 1,
                got: seq,
            });
        }
        if label.is_empty() {
            return Err(Error::validation("release label must be non-empty"));
        }
        if self.manifest.resolve_label(label).is_some() {
            return Err(Error::AlreadyExists(format!(
                "label {label:?} in table {}",
                self.manifest.table
            )));
        }

        // Existing distinct keys, for row_count maintenance when the caller
        // has not already counted new rows.
        let mut existing_keys: Option<std::iter::Peekable<KeyScan>> = match new_rows {
            NewRows::Auto => {
                if self.manifest.head_seq == 0 {
                    Some(KeyScan::empty().peekable())
                } else {
                    Some(KeyScan::over(self)?.peekable())
                }
            }
            _ => None,
        };
        let mut counted_new = 0u64;
        let mut observed_fields: BTreeSet<String> = BTreeSet::new();
        let mut last_key: Option<Vec<u8>> = None;

        let file_id = seq;
        let seg_name = format!("seg-{file_id:06}.seg");
        let seg_path = self.dir.join(&seg_name);
        let mut writer = SegmentWriter::create(&seg_path, self.store.inner.codec)?;
        for record in records {
            let record = record?;
            if !record.cells.is_empty() && !record.exists {
                return Err(Error::validation(format!(
                    "cells written for row {:?} without an EXISTS mark in the same release",
                    String::from_utf8_lossy(&record.key)
                )));
            }
            for (field, _) in &record.cells {
                observed_fields.insert(field.clone());
            }
            if let Some(keys) = existing_keys.as_mut() {
                let mut known = false;
                while let Some(next) = keys.peek() {
                    match next {
                        Err(_) => return Err(keys.next().unwrap().unwrap_err()),
                        Ok(k) => match k.as_slice().cmp(record.key.as_slice()) {
                            std::cmp::Ordering::Less => {
                                keys.next();
                            }
                            std::cmp::Ordering::Equal => {
                                known = true;
                                break;
                            }
                            std::cmp::Ordering::Greater => break,
                        },
                    }
                }
                if !known {
                    counted_new += 1;
                }
            }
            if last_key.as_deref() == Some(record.key.as_slice()) {
                return Err(Error::DuplicateId {
                    id: String::from_utf8_lossy(&record.key).into_owned(),
                });
            }
            last_key = Some(record.key.clone());
            writer.append(&segment::SegmentRecord {
                key: record.key,
                exists: record.exists,
                cells: record.cells,
            })?;
        }
        let summary = writer.finish()?;

        fault_point(FAULT_BEFORE_MANIFEST);

        let new_rows = match new_rows {
            NewRows::Auto => counted_new,
            NewRows::Known(n) => n,
            NewRows::CountedAfter(cell) => cell.get(),
        };
        let mut next = self.manifest.clone();
        next.version += 1;
        next.head_seq = seq;
        next.row_count += new_rows;
        next.fields.extend(observed_fields);
        next.releases.push(ReleaseMeta {
            seq,
            label: label.to_string(),
            wall_time: chrono::Utc::now().timestamp(),
        });
        next.segments.push(SegmentMeta {
            file_id,
            seq_lo: seq,
            seq_hi: seq,
            key_lo: summary.key_lo.as_deref().map(encode_hex_key),
            key_hi: summary.key_hi.as_deref().map(encode_hex_key),
            records: summary.records,
            compressed: summary.compressed,
            uncompressed: summary.uncompressed,
            checksum: summary.checksum.clone(),
            codec: self.store.inner.codec.id().to_string(),
        });
        next.store(&self.dir)?;
        self.manifest = next;

        Ok(WriteStats {
            field_cells: summary.field_cells,
            exists_marks: summary.exists_marks,
            bytes_written: summary.compressed,
            new_rows,
            duration: start.elapsed(),
        })
    }

    /// Stream rows having a masked cell or a presence gain within
    /// `[from_seq, to_seq]`, in ascending row-key order, as views
    /// restricted to that window. A `None` mask means all fields.
    pub fn scan_rows(
        &self,
        from_seq: u64,
        to_seq: u64,
        mask: Option<FieldMask>,
        range: Option<KeyRange>,
    ) -> Result<RowScan> {
        if from_seq < 1 || from_seq > to_seq || to_seq > self.manifest.head_seq {
            return Err(Error::Range(format!(
                "scan window [{from_seq}, {to_seq}] outside ingested range [1, {}]",
                self.manifest.head_seq
            )));
        }
        self.store.inner.scan_counter.fetch_add(1, Ordering::Relaxed);
        let range = range.unwrap_or_default();
        let mut readers = Vec::new();
        for seg in &self.manifest.segments {
            if seg.seq_lo > to_seq {
                continue;
            }
            if !seg.key_range_overlaps(range.lo.as_deref(), range.hi.as_deref()) {
                continue;
            }
            let reader = SegmentReader::open(&self.dir.join(seg.file_name()), &seg.checksum)?;
            readers.push(ReaderState { seq: seg.seq_lo, reader, current: None, primed: false });
        }
        readers.sort_by_key(|r| r.seq);
        Ok(RowScan { readers, from_seq, to_seq, mask, range })
    }

    /// Point-in-time reconstruction of one row; absent if the row was not
    /// present in release `at_seq`.
    pub fn materialize_row(
        &self,
        id: &EntryId,
        at_seq: u64,
        mask: &FieldMask,
    ) -> Result<Option<FieldMap>> {
        let mut scan = self.scan_rows(1, at_seq, None, Some(KeyRange::single(id.as_bytes())))?;
        match scan.next() {
            None => Ok(None),
            Some(row) => Ok(row?.materialize_at(at_seq, mask)),
        }
    }
}

struct ReaderState {
    seq: u64,
    reader: SegmentReader,
    current: Option<segment::SegmentRecord>,
    primed: bool,
}

impl ReaderState {
    fn advance(&mut self, range: &KeyRange) -> Result<()> {
        self.primed = true;
        loop {
            match self.reader.next_record()? {
                None => {
                    self.current = None;
                    return Ok(());
                }
                Some(rec) => {
                    if let Some(hi) = &range.hi {
                        if rec.key.as_slice() > hi.as_slice() {
                            // Past the range: nothing further is relevant,
                            // but keep records out rather than erroring.
                            self.current = None;
                            return Ok(());
                        }
                    }
                    if range.contains(&rec.key) {
                        self.current = Some(rec);
                        return Ok(());
                    }
                }
            }
        }
    }
}

/// Streaming merge over segment files in ascending row-key order.
pub struct RowScan {
    readers: Vec<ReaderState>,
    from_seq: u64,
    to_seq: u64,
    mask: Option<FieldMask>,
    range: KeyRange,
}

impl RowScan {
    fn next_row(&mut self) -> Result<Option<VersionedRow>> {
        loop {
            for state in &mut self.readers {
                if !state.primed {
                    state.advance(&self.range)?;
                }
            }
            let min_key: Option<Vec<u8>> = self
                .readers
                .iter()
                .filter_map(|s| s.current.as_ref().map(|r| r.key.clone()))
                .min();
            let key = match min_key {
                None => return Ok(None),
                Some(k) => k,
            };
            let mut row = VersionedRow {
                id: EntryId(key.clone()),
                ..Default::default()
            };
            for state in &mut self.readers {
                let matches = state.current.as_ref().map(|r| r.key == key).unwrap_or(false);
                if !matches {
                    continue;
                }
                let rec = state.current.take().expect("matched record");
                if rec.exists {
                    row.exists_stamps.insert(state.seq);
                }
                for (field, value) in rec.cells {
                    row.cells.entry(field).or_default().push((state.seq, value));
                }
                state.advance(&self.range)?;
            }
            let relevant = match &self.mask {
                Some(mask) => row.masked_cell_in(self.from_seq, self.to_seq, mask),
                None => row.cells.values().any(|cs| {
                    cs.iter().any(|(s, _)| *s >= self.from_seq && *s <= self.to_seq)
                }),
            } || row.gained_presence_in(self.from_seq, self.to_seq);
            if !relevant {
                continue;
            }
            // Restrict the view to the window (a pure filter).
            if let Some(mask) = &self.mask {
                row.cells.retain(|f, _| mask.contains(f));
            }
            for cells in row.cells.values_mut() {
                cells.retain(|(s, _)| *s >= self.from_seq && *s <= self.to_seq);
            }
            row.cells.retain(|_, cs| !cs.is_empty());
            row.exists_stamps.retain(|s| *s >= self.from_seq && *s <= self.to_seq);
            return Ok(Some(row));
        }
    }
}

impl Iterator for RowScan {
    type Item = Result<VersionedRow>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_row().transpose()
    }
}

/// Distinct row keys of a table, ascending, by merging all segments.
struct KeyScan {
    inner: Option<RowScan>,
}

impl KeyScan {
    fn empty() -> KeyScan {
        KeyScan { inner: None }
    }

    fn over(table: &Table) -> Result<KeyScan> {
        Ok(KeyScan { inner: Some(table.scan_rows(1, table.head_seq(), None, None)?) })
    }
}

impl Iterator for KeyScan {
    type Item = Result<Vec<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        let scan = self.inner.as_mut()?;
        scan.next().map(|r| r.map(|row| row.id.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn id(s: &str) -> EntryId {
        EntryId::new(s).unwrap()
    }

    fn mask(fields: &[&str]) -> FieldMask {
        FieldMask::all_of(fields.iter().copied()).unwrap()
    }

    fn open_store(dir: &Path) -> Store {
        Store::open(dir).unwrap()
    }

    /// Ingest F0 by hand through the cell-level API: release 1 with A, B,
    /// C; release 2 updates B's seq, drops C, adds D.
    fn load_f0(store: &Store) -> Table {
        let mut table = store
            .create_table("upkb", "fasta", BTreeSet::from(["desc".into(), "seq".into()]), "")
            .unwrap();
        let mut r1 = ReleaseBatch::new();
        for (k, seq, desc) in [("A", "ACGT", "desc1"), ("B", "GGGG", "desc2"), ("C", "TTTT", "desc3")] {
            r1.mark_exists(id(k));
            r1.put(id(k), "seq", seq.into()).unwrap();
            r1.put(id(k), "desc", desc.into()).unwrap();
        }
        let stats = table.put_cells(1, "r1", r1).unwrap();
        assert_eq!(stats.field_cells, 6);
        assert_eq!(stats.exists_marks, 3);
        assert_eq!(stats.new_rows, 3);

        let mut r2 = ReleaseBatch::new();
        for k in ["A", "B", "D"] {
            r2.mark_exists(id(k));
        }
        r2.put(id("B"), "seq", "GGCC".into()).unwrap();
        r2.put(id("D"), "seq", "AAAA".into()).unwrap();
        r2.put(id("D"), "desc", "desc4".into()).unwrap();
        let stats = table.put_cells(2, "r2", r2).unwrap();
        assert_eq!(stats.field_cells, 3);
        assert_eq!(stats.exists_marks, 3);
        assert_eq!(stats.new_rows, 1);
        table
    }

    #[test]
    fn create_reopen_duplicate_invalid() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let t = store.create_table("upkb", "fasta", BTreeSet::new(), "note").unwrap();
        assert_eq!(t.head_seq(), 0);
        assert_eq!(t.handle().schema_note, "note");

        let reopened = store.open_table("upkb").unwrap();
        assert_eq!(reopened.handle(), t.handle());

        assert!(matches!(
            store.create_table("upkb", "fasta", BTreeSet::new(), ""),
            Err(Error::AlreadyExists(_))
        ));
        assert!(matches!(
            store.create_table("up.kb", "fasta", BTreeSet::new(), ""),
            Err(Error::Validation(_))
        ));
        assert!(matches!(store.open_table("nope"), Err(Error::NotFound(_))));
        assert_eq!(store.table_names().unwrap(), vec!["upkb"]);
    }

    #[test]
    fn f0_delta_counts_and_reopen() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        assert_eq!(table.head_seq(), 2);
        assert_eq!(table.handle().row_count, 4);
        drop(table);

        let table = Store::open(dir.path()).unwrap().open_table("upkb").unwrap();
        assert_eq!(table.head_seq(), 2);
        assert_eq!(table.handle().row_count, 4);
    }

    #[test]
    fn scan_window_filters_unchanged_rows() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        let rows: Vec<VersionedRow> = table
            .scan_rows(2, 2, Some(mask(&["seq"])), None)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        let keys: Vec<&[u8]> = rows.iter().map(|r| r.id.as_bytes()).collect();
        // A carries only its EXISTS mark in the window; C has nothing.
        assert_eq!(keys, vec![b"B".as_ref(), b"D".as_ref()]);
    }

    #[test]
    fn scan_full_window_yields_all_rows_ever() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        let rows: Vec<VersionedRow> = table
            .scan_rows(1, table.head_seq(), None, None)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        let keys: Vec<&[u8]> = rows.iter().map(|r| r.id.as_bytes()).collect();
        assert_eq!(keys, vec![b"A".as_ref(), b"B".as_ref(), b"C".as_ref(), b"D".as_ref()]);
    }

    #[test]
    fn scan_empty_table_and_bad_ranges() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = store.create_table("t", "fasta", BTreeSet::new(), "").unwrap();
        assert!(matches!(table.scan_rows(1, 1, None, None), Err(Error::Range(_))));
        let full = load_f0(&store);
        assert!(matches!(full.scan_rows(2, 1, None, None), Err(Error::Range(_))));
        assert!(matches!(full.scan_rows(0, 2, None, None), Err(Error::Range(_))));
        assert!(matches!(full.scan_rows(1, 3, None, None), Err(Error::Range(_))));
    }

    #[test]
    fn materialize_matches_f0_oracle() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        let m = mask(&["seq"]);
        let b = table.materialize_row(&id("B"), 2, &m).unwrap().unwrap();
        assert_eq!(b["seq"], b"GGCC");
        assert!(table.materialize_row(&id("C"), 2, &m).unwrap().is_none());
        // carried forward from seq 1
        let a = table.materialize_row(&id("A"), 2, &m).unwrap().unwrap();
        assert_eq!(a["seq"], b"ACGT");
        let c1 = table.materialize_row(&id("C"), 1, &m).unwrap().unwrap();
        assert_eq!(c1["seq"], b"TTTT");
    }

    #[test]
    fn sequencing_and_label_errors() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let mut table = store.create_table("t", "fasta", BTreeSet::new(), "").unwrap();
        let mut b = ReleaseBatch::new();
        b.mark_exists(id("A"));
        assert!(matches!(
            table.put_cells(2, "r2", ReleaseBatch::new()),
            Err(Error::Sequencing { expected: 1, got: 2, .. })
        ));
        table.put_cells(1, "r1", b).unwrap();
        assert!(matches!(
            table.put_cells(2, "r1", ReleaseBatch::new()),
            Err(Error::AlreadyExists(_))
        ));
    }

    #[test]
    fn duplicate_cell_within_batch() {
        let mut b = ReleaseBatch::new();
        b.put(id("A"), "seq", "X".into()).unwrap();
        assert!(matches!(
            b.put(id("A"), "seq", "Y".into()),
            Err(Error::DuplicateCell { .. })
        ));
    }

    #[test]
    fn cells_require_exists_mark() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let mut table = store.create_table("t", "fasta", BTreeSet::new(), "").unwrap();
        let mut b = ReleaseBatch::new();
        b.put(id("A"), "seq", "X".into()).unwrap();
        assert!(matches!(table.put_cells(1, "r1", b), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_release_advances_head() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let mut table = store.create_table("t", "fasta", BTreeSet::new(), "").unwrap();
        let stats = table.put_cells(1, "r1", ReleaseBatch::new()).unwrap();
        assert_eq!(stats.field_cells, 0);
        assert_eq!(stats.exists_marks, 0);
        assert_eq!(table.head_seq(), 1);
    }

    #[test]
    fn field_universe_grows_with_observed_cells() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let mut table = store
            .create_table("t", "dat", BTreeSet::from(["ID".into()]), "")
            .unwrap();
        let mut b = ReleaseBatch::new();
        b.mark_exists(id("A"));
        b.put(id("A"), "KW", "kw".into()).unwrap();
        table.put_cells(1, "r1", b).unwrap();
        assert!(table.fields().contains("KW"));
        assert!(table.fields().contains("ID"));
    }

    #[test]
    fn blobs_round_trip_and_versioning() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        assert_eq!(store.put_blob("raw.gz", b"hello").unwrap(), 1);
        assert_eq!(store.put_blob("raw.gz", b"world").unwrap(), 2);
        assert_eq!(store.get_blob("raw.gz", 1).unwrap(), b"hello");
        assert_eq!(store.get_blob("raw.gz", 2).unwrap(), b"world");
        assert!(matches!(store.get_blob("raw.gz", 0), Err(Error::NotFound(_))));
        assert!(matches!(store.get_blob("raw.gz", 3), Err(Error::NotFound(_))));
        assert!(matches!(store.get_blob("other", 1), Err(Error::NotFound(_))));
        assert_eq!(store.blob_head("raw.gz").unwrap(), 2);
        assert!(store.put_blob("../evil", b"x").is_err());
    }

    #[test]
    fn compression_is_semantics_free() {
        let collect = |codec: Codec| -> Vec<VersionedRow> {
            let dir = tempdir().unwrap();
            let store = Store::open_with(dir.path(), StoreOptions { codec }).unwrap();
            let table = load_f0(&store);
            table
                .scan_rows(1, 2, None, None)
                .unwrap()
                .map(|r| r.unwrap())
                .collect()
        };
        assert_eq!(collect(Codec::Snappy), collect(Codec::None));
    }

    #[test]
    fn scan_counter_counts_scans() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        let before = store.scan_count();
        let _ = table.scan_rows(1, 2, None, None).unwrap();
        let _ = table.scan_rows(1, 1, None, None).unwrap();
        assert_eq!(store.scan_count(), before + 2);
    }

    #[test]
    fn append_only_reads_are_repeatable() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        let read = || -> Vec<VersionedRow> {
            table
                .scan_rows(1, 2, None, None)
                .unwrap()
                .map(|r| r.unwrap())
                .collect()
        };
        assert_eq!(read(), read());
    }

    #[test]
    fn snapshot_readers_do_not_see_later_releases() {
        let dir = tempdir().unwrap();
        let store = open_store(dir.path());
        let table = load_f0(&store);
        // A handle opened (or refreshed) at head 2 keeps serving head 2
        // even after another writer commits release 3.
        let mut writer = store.open_table("upkb").unwrap();
        let mut b = ReleaseBatch::new();
        b.mark_exists(id("A"));
        writer.put_cells(3, "r3", b).unwrap();
        assert_eq!(table.head_seq(), 2);
        let rows: Vec<VersionedRow> = table
            .scan_rows(1, 2, None, None)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert!(rows.iter().all(|r| r.exists_stamps.iter().all(|s| *s <= 2)));
    }
}
