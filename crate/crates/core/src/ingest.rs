//! Table creation and release ingestion: parse a release file, detect
//! per-field changes against the stored previous release, and write only
//! the delta.
//!
//! The previous release is never loaded whole: parsed entries are sorted
//! into bounded spill runs, then merge-joined against a store scan on
//! ascending row keys. Memory is bounded by the largest entry plus the
//! per-worker run buffers.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::model::{FieldMap, FieldMask};
use crate::plugins::{ParserPlugin, Registry};
use crate::store::{
    Codec, CommitRecord, NewRows, SegmentReader, SegmentRecord, SegmentWriter, Store, TableHandle,
};

/// Per-worker in-memory buffer before a sorted run spills to disk.
const DEFAULT_RUN_BYTES: usize = 32 << 20;
/// Raw entries per channel message when fanning out to workers.
const DISPATCH_BATCH: usize = 64;

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub workers: usize,
    pub run_bytes_limit: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { workers: 1, run_bytes_limit: DEFAULT_RUN_BYTES }
    }
}

/// Outcome of one release ingest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub table: String,
    pub seq: u64,
    pub label: String,
    pub added: u64,
    pub updated: u64,
    pub unchanged: u64,
    pub deleted: u64,
    /// Field cells written (tombstones included, EXISTS marks excluded).
    pub cells_written: u64,
    pub exists_marks: u64,
    /// Compressed segment bytes.
    pub bytes_written: u64,
    /// Bytes outside any entry, skipped by the parser.
    pub skipped_bytes: u64,
    pub duration: Duration,
}

impl IngestReport {
    /// Entries in the ingested file.
    pub fn entries(&self) -> u64 {
        self.added + self.updated + self.unchanged
    }
}

/// Create a table bound to a parser. The field set defaults to the
/// parser's field universe and grows as later releases observe new fields.
pub fn register_table(
    store: &Store,
    registry: &Registry,
    name: &str,
    format_id: &str,
    fields: Option<Vec<String>>,
) -> Result<TableHandle> {
    let plugin = registry.get(format_id)?;
    let fields: BTreeSet<String> = match fields {
        Some(fs) => fs.into_iter().collect(),
        None => plugin.default_fields().iter().map(|s| s.to_string()).collect(),
    };
    let table = store.create_table(name, format_id, fields, "")?;
    Ok(table.handle())
}

/// Ingest one release file (plain or gzip) as the table's next version.
pub fn add_release(
    store: &Store,
    registry: &Registry,
    table: &str,
    source: impl Read,
    label: &str,
) -> Result<IngestReport> {
    ingest_with_options(store, registry, table, source, label, &IngestOptions::default())
}

/// As `add_release`, with explicit parallelism. Store state and report are
/// byte-identical for any worker count.
pub fn ingest_partitioned(
    store: &Store,
    registry: &Registry,
    table: &str,
    source: impl Read,
    label: &str,
    workers: usize,
) -> Result<IngestReport> {
    ingest_with_options(
        store,
        registry,
        table,
        source,
        label,
        &IngestOptions { workers, ..IngestOptions::default() },
    )
}

pub fn ingest_with_options(
    store: &Store,
    registry: &Registry,
    table_name: &str,
    source: impl Read,
    label: &str,
    options: &IngestOptions,
) -> Result<IngestReport> {
    if options.workers == 0 {
        return Err(Error::validation("workers must be >= 1"));
    }
    let start = Instant::now();
    let mut table = store.open_table(table_name)?;
    let _lock = IngestLock::acquire(&store.table_dir(table_name), table_name)?;
    // The lock holder owns the head; re-read in case another ingest
    // finished between open and lock.
    table.refresh()?;
    let plugin = registry.get(table.format_id())?;
    let seq = table.head_seq() + 1;
    if table.resolve_label(label).is_some() {
        return Err(Error::AlreadyExists(format!("label {label:?} in table {table_name}")));
    }

    let run_dir = RunDir::create(&store.table_dir(table_name), label)?;
    let input = maybe_gunzip(source)?;
    let (runs, skipped_bytes) =
        build_sorted_runs(plugin.as_ref(), input, options, &run_dir)?;

    let new_side = MergedRuns::new(runs)?;
    let old_side: Box<dyn Iterator<Item = Result<(Vec<u8>, Option<FieldMap>)>>> =
        if table.head_seq() == 0 {
            Box::new(std::iter::empty())
        } else {
            let head = table.head_seq();
            let mask = FieldMask::all_of(table.fields().iter().cloned())?;
            let scan = table.scan_rows(1, head, None, None)?;
            Box::new(scan.map(move |row| {
                row.map(|r| {
                    let materialized = r.materialize_at(head, &mask);
                    (r.id.0, materialized)
                })
            }))
        };

    let new_rows = Cell::new(0u64);
    let mut join = ChangeJoin {
        new_side: new_side.peekable(),
        old_side: old_side.peekable(),
        counts: Counts::default(),
        new_rows: &new_rows,
        done: false,
    };
    let stats = table.commit_release(seq, label, &mut join, NewRows::CountedAfter(&new_rows))?;
    // commit_release drained the join before reading the cell.
    debug_assert!(join.done);
    let counts = join.counts;

    Ok(IngestReport {
        table: table_name.to_string(),
        seq,
        label: label.to_string(),
        added: counts.added,
        updated: counts.updated,
        unchanged: counts.unchanged,
        deleted: counts.deleted,
        cells_written: stats.field_cells,
        exists_marks: stats.exists_marks,
        bytes_written: stats.bytes_written,
        skipped_bytes,
        duration: start.elapsed(),
    })
}

#[derive(Default, Debug)]
struct Counts {
    added: u64,
    updated: u64,
    unchanged: u64,
    deleted: u64,
}

/// Sniff gzip magic bytes and transparently decompress.
pub fn maybe_gunzip<'a>(mut source: impl Read + 'a) -> Result<Box<dyn BufRead + 'a>> {
    let mut magic = [0u8; 2];
    let mut filled = 0;
    while filled < 2 {
        let n = source.read(&mut magic[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    let prefix = Cursor::new(magic[..filled].to_vec());
    let chained = prefix.chain(source);
    if filled == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(flate2::read::MultiGzDecoder::new(chained))))
    } else {
        Ok(Box::new(BufReader::new(chained)))
    }
}

/// Temp directory for spill runs, removed on drop.
struct RunDir {
    path: PathBuf,
}

impl RunDir {
    fn create(table_dir: &Path, label: &str) -> Result<RunDir> {
        // label may repeat across failed attempts; pid keeps paths distinct
        let path = table_dir.join(format!(".ingest-{}-{label}", std::process::id()));
        if path.exists() {
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(&path)?;
        Ok(RunDir { path })
    }

    fn run_path(&self, worker: usize, n: usize) -> PathBuf {
        self.path.join(format!("run-{worker}-{n}.seg"))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.path);
    }
}

type EntryRecord = (Vec<u8>, FieldMap);

enum Run {
    Mem(Vec<EntryRecord>),
    File { path: PathBuf, checksum: String },
}

/// Parse, sort and spill the release file into per-worker runs.
fn build_sorted_runs(
    plugin: &dyn ParserPlugin,
    input: Box<dyn BufRead + '_>,
    options: &IngestOptions,
    run_dir: &RunDir,
) -> Result<(Vec<Run>, u64)> {
    if options.workers == 1 {
        let mut bounds = plugin.entry_bounds(input);
        let mut builder = RunBuilder::new(0, options.run_bytes_limit);
        for raw in &mut bounds {
            let entry = plugin.split_entry(&raw?.bytes)?;
            builder.push(entry.id.0, entry.fields, run_dir)?;
        }
        let skipped = bounds.skipped_bytes();
        return Ok((builder.finish()?, skipped));
    }

    std::thread::scope(|scope| {
        let mut senders = Vec::new();
        let mut handles = Vec::new();
        for worker in 0..options.workers {
            let (tx, rx) = mpsc::sync_channel::<Vec<Vec<u8>>>(2);
            senders.push(tx);
            let limit = options.run_bytes_limit;
            handles.push(scope.spawn(move || -> Result<Vec<Run>> {
                let mut builder = RunBuilder::new(worker, limit);
                for batch in rx {
                    for raw in batch {
                        let entry = plugin.split_entry(&raw)?;
                        builder.push(entry.id.0, entry.fields, run_dir)?;
                    }
                }
                builder.finish()
            }));
        }

        let mut bounds = plugin.entry_bounds(input);
        let mut batches: Vec<Vec<Vec<u8>>> = vec![Vec::new(); options.workers];
        let mut i = 0usize;
        let mut dispatch_err = None;
        for raw in &mut bounds {
            match raw {
                Err(e) => {
                    dispatch_err = Some(e);
                    break;
                }
                Ok(raw) => {
                    let w = i % options.workers;
                    batches[w].push(raw.bytes);
                    if batches[w].len() >= DISPATCH_BATCH {
                        let batch = std::mem::take(&mut batches[w]);
                        if senders[w].send(batch).is_err() {
                            break; // worker bailed; its join reports why
                        }
                    }
                    i += 1;
                }
            }
        }
        for (w, batch) in batches.into_iter().enumerate() {
            if !batch.is_empty() {
                let _ = senders[w].send(batch);
            }
        }
        drop(senders);
        let skipped = bounds.skipped_bytes();

        let mut runs = Vec::new();
        let mut first_err = dispatch_err;
        for handle in handles {
            match handle.join().expect("ingest worker panicked") {
                Ok(mut rs) => runs.append(&mut rs),
                Err(e) => {
                    if first_err.is_none() {
                        first_err = Some(e);
                    }
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok((runs, skipped)),
        }
    })
}

struct RunBuilder {
    worker: usize,
    limit: usize,
    buf: Vec<EntryRecord>,
    buf_bytes: usize,
    runs: Vec<Run>,
    spills: usize,
}

impl RunBuilder {
    fn new(worker: usize, limit: usize) -> RunBuilder {
        RunBuilder { worker, limit, buf: Vec::new(), buf_bytes: 0, runs: Vec::new(), spills: 0 }
    }

    fn push(&mut self, key: Vec<u8>, fields: FieldMap, run_dir: &RunDir) -> Result<()> {
        self.buf_bytes += key.len() + fields.iter().map(|(f, v)| f.len() + v.len() + 16).sum::<usize>();
        self.buf.push((key, fields));
        if self.buf_bytes >= self.limit {
            self.spill(run_dir)?;
        }
        Ok(())
    }

    fn sort_and_check(buf: &mut [EntryRecord]) -> Result<()> {
        buf.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        for pair in buf.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::DuplicateId {
                    id: String::from_utf8_lossy(&pair[0].0).into_owned(),
                });
            }
        }
        Ok(())
    }

    fn spill(&mut self, run_dir: &RunDir) -> Result<()> {
        Self::sort_and_check(&mut self.buf)?;
        let path = run_dir.run_path(self.worker, self.spills);
        self.spills += 1;
        let mut writer = SegmentWriter::create(&path, Codec::None)?;
        for (key, fields) in self.buf.drain(..) {
            writer.append(&SegmentRecord {
                key,
                exists: true,
                cells: fields.into_iter().collect(),
            })?;
        }
        let summary = writer.finish()?;
        self.runs.push(Run::File { path, checksum: summary.checksum });
        self.buf_bytes = 0;
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<Run>> {
        Self::sort_and_check(&mut self.buf)?;
        if !self.buf.is_empty() || self.runs.is_empty() {
            let buf = std::mem::take(&mut self.buf);
            self.runs.push(Run::Mem(buf));
        }
        Ok(self.runs)
    }
}

/// K-way merge over sorted runs; duplicate ids across runs are an error.
struct MergedRuns {
    states: Vec<RunState>,
}

enum RunState {
    Mem(std::vec::IntoIter<EntryRecord>, Option<EntryRecord>),
    File(SegmentReader, Option<EntryRecord>),
}

impl RunState {
    fn advance(&mut self) -> Result<()> {
        match self {
            RunState::Mem(iter, slot) => {
                *slot = iter.next();
            }
            RunState::File(reader, slot) => {
                *slot = reader
                    .next_record()?
                    .map(|r| (r.key, r.cells.into_iter().collect::<FieldMap>()));
            }
        }
        Ok(())
    }

    fn current(&self) -> Option<&EntryRecord> {
        match self {
            RunState::Mem(_, slot) | RunState::File(_, slot) => slot.as_ref(),
        }
    }

    fn take(&mut self) -> Option<EntryRecord> {
        match self {
            RunState::Mem(_, slot) | RunState::File(_, slot) => slot.take(),
        }
    }
}

impl MergedRuns {
    fn new(runs: Vec<Run>) -> Result<MergedRuns> {
        let mut states = Vec::with_capacity(runs.len());
        for run in runs {
            let mut state = match run {
                Run::Mem(v) => RunState::Mem(v.into_iter(), None),
                Run::File { path, checksum } => {
                    RunState::File(SegmentReader::open(&path, &checksum)?, None)
                }
            };
            state.advance()?;
            states.push(state);
        }
        Ok(MergedRuns { states })
    }
}

impl Iterator for MergedRuns {
    type Item = Result<EntryRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut min_idx: Option<usize> = None;
        for (i, s) in self.states.iter().enumerate() {
            if let Some((key, _)) = s.current() {
                let better = match min_idx {
                    None => true,
                    Some(m) => {
                        let (mk, _) = self.states[m].current().expect("min current");
                        key < mk
                    }
                };
                if better {
                    min_idx = Some(i);
                }
            }
        }
        let idx = min_idx?;
        let record = self.states[idx].take().expect("current record");
        if let Err(e) = self.states[idx].advance() {
            return Some(Err(e));
        }
        // duplicate id across runs: another state now holds the same key
        for s in &self.states {
            if let Some((key, _)) = s.current() {
                if *key == record.0 {
                    return Some(Err(Error::DuplicateId {
                        id: String::from_utf8_lossy(&record.0).into_owned(),
                    }));
                }
            }
        }
        Some(Ok(record))
    }
}

/// Merge join of the sorted new-release stream against the sorted
/// previous-state stream, emitting commit records for changes only.
struct ChangeJoin<'a, N, O>
where
    N: Iterator<Item = Result<EntryRecord>>,
    O: Iterator<Item = Result<(Vec<u8>, Option<FieldMap>)>>,
{
    new_side: std::iter::Peekable<N>,
    old_side: std::iter::Peekable<O>,
    counts: Counts,
    /// Keys never seen by the table before, shared with the commit.
    new_rows: &'a Cell<u64>,
    done: bool,
}

impl<N, O> ChangeJoin<'_, N, O>
where
    N: Iterator<Item = Result<EntryRecord>>,
    O: Iterator<Item = Result<(Vec<u8>, Option<FieldMap>)>>,
{
    fn next_record(&mut self) -> Result<Option<CommitRecord>> {
        loop {
            let new_key = match self.new_side.peek() {
                Some(Err(_)) => return Err(self.new_side.next().unwrap().unwrap_err()),
                Some(Ok((k, _))) => Some(k.clone()),
                None => None,
            };
            let old_key = match self.old_side.peek() {
                Some(Err(_)) => return Err(self.old_side.next().unwrap().unwrap_err()),
                Some(Ok((k, _))) => Some(k.clone()),
                None => None,
            };
            match (new_key, old_key) {
                (None, None) => {
                    self.done = true;
                    return Ok(None);
                }
                (Some(_), None) => {
                    let (key, fields) = self.new_side.next().unwrap()?;
                    self.counts.added += 1;
                    self.new_rows.set(self.new_rows.get() + 1);
                    return Ok(Some(added_record(key, fields)));
                }
                (None, Some(_)) => {
                    let (_, old) = self.old_side.next().unwrap()?;
                    if old.is_some() {
                        self.counts.deleted += 1;
                    }
                    continue;
                }
                (Some(nk), Some(ok)) => match nk.cmp(&ok) {
                    std::cmp::Ordering::Less => {
                        let (key, fields) = self.new_side.next().unwrap()?;
                        self.counts.added += 1;
                        self.new_rows.set(self.new_rows.get() + 1);
                        return Ok(Some(added_record(key, fields)));
                    }
                    std::cmp::Ordering::Greater => {
                        let (_, old) = self.old_side.next().unwrap()?;
                        if old.is_some() {
                            self.counts.deleted += 1;
                        }
                        continue;
                    }
                    std::cmp::Ordering::Equal => {
                        let (key, fields) = self.new_side.next().unwrap()?;
                        let (_, old) = self.old_side.next().unwrap()?;
                        match old {
                            // row key known to the store but absent at
                            // head: a re-add, classified ADDED
                            None => {
                                self.counts.added += 1;
                                return Ok(Some(added_record(key, fields)));
                            }
                            Some(old_fields) => {
                                let mut cells: Vec<(String, Vec<u8>)> = Vec::new();
                                for (f, v) in &fields {
                                    if old_fields.get(f) != Some(v) {
                                        cells.push((f.clone(), v.clone()));
                                    }
                                }
                                for f in old_fields.keys() {
                                    if !fields.contains_key(f) {
                                        cells.push((f.clone(), Vec::new()));
                                    }
                                }
                                cells.sort_by(|a, b| a.0.cmp(&b.0));
                                if cells.is_empty() {
                                    self.counts.unchanged += 1;
                                } else {
                                    self.counts.updated += 1;
                                }
                                return Ok(Some(CommitRecord { key, exists: true, cells }));
                            }
                        }
                    }
                },
            }
        }
    }
}

fn added_record(key: Vec<u8>, fields: FieldMap) -> CommitRecord {
    CommitRecord { key, exists: true, cells: fields.into_iter().collect() }
}

impl<N, O> Iterator for ChangeJoin<'_, N, O>
where
    N: Iterator<Item = Result<EntryRecord>>,
    O: Iterator<Item = Result<(Vec<u8>, Option<FieldMap>)>>,
{
    type Item = Result<CommitRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}

/// Per-table ingest lock file. Stale locks from dead processes are broken.
pub struct IngestLock {
    path: PathBuf,
}

impl IngestLock {
    pub fn acquire(table_dir: &Path, table: &str) -> Result<IngestLock> {
        let path = table_dir.join("ingest.lock");
        loop {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(IngestLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path)
                        .ok()
                        .and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if !process_alive(pid) => {
                            let _ = std::fs::remove_file(&path);
                            continue;
                        }
                        _ => return Err(Error::Locked(table.to_string())),
                    }
                }
                Err(e) => return Err(Error::Io(e)),
            }
        }
    }
}

impl Drop for IngestLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn process_alive(pid: u32) -> bool {
    Path::new(&format!("/proc/{pid}")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::fixtures;
    use std::io::Cursor;
    use tempfile::tempdir;

    fn setup(dir: &Path) -> (Store, Registry) {
        let store = Store::open(dir).unwrap();
        let registry = Registry::builtin();
        register_table(&store, &registry, "upkb", "fasta", None).unwrap();
        (store, registry)
    }

    fn counts(r: &IngestReport) -> (u64, u64, u64, u64) {
        (r.added, r.updated, r.unchanged, r.deleted)
    }

    #[test]
    fn register_binds_parser_and_rejects_unknown() {
        let dir = tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let registry = Registry::builtin();
        let handle = register_table(&store, &registry, "t", "fasta", None).unwrap();
        assert_eq!(handle.head_seq, 0);
        assert!(matches!(
            register_table(&store, &registry, "x", "xyz", None),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            register_table(&store, &registry, "t", "fasta", None),
            Err(Error::AlreadyExists(_))
        ));
        let t = store.open_table("t").unwrap();
        assert_eq!(t.format_id(), "fasta");
        assert!(t.fields().contains("seq"));
    }

    #[test]
    fn f0_first_release_all_added() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        let r = add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1").unwrap();
        assert_eq!(counts(&r), (3, 0, 0, 0));
        assert_eq!(r.entries(), 3);
        assert_eq!(r.cells_written, 6);
        assert_eq!(r.exists_marks, 3);
        assert_eq!(r.seq, 1);
    }

    #[test]
    fn f0_second_release_delta_counts() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1").unwrap();
        let r = add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R2), "r2").unwrap();
        assert_eq!(counts(&r), (1, 1, 1, 1));
        // B's seq cell, D's desc and seq cells
        assert_eq!(r.cells_written, 3);
        assert_eq!(r.exists_marks, 3);
        let table = store.open_table("upkb").unwrap();
        assert_eq!(table.handle().row_count, 4);
    }

    #[test]
    fn reingesting_identical_content_writes_nothing() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1").unwrap();
        add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R2), "r2").unwrap();
        let r = add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R2), "r3").unwrap();
        assert_eq!(counts(&r), (0, 0, 3, 0));
        assert_eq!(r.cells_written, 0);
        assert_eq!(r.exists_marks, 3);
    }

    #[test]
    fn standard_churn_report_matches_generator_exactly() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        let profile = crate::synth::ChurnProfile {
            seq_len: (30, 50),
            ..crate::synth::ChurnProfile::standard(1000, 99)
        };
        let releases = crate::synth::generate_releases(&profile, 2, "fasta").unwrap();
        add_release(&store, &registry, "upkb", Cursor::new(&releases[0].bytes), "r1").unwrap();
        let r = add_release(&store, &registry, "upkb", Cursor::new(&releases[1].bytes), "r2").unwrap();
        assert_eq!(r.added, 50);
        assert_eq!(r.updated, 450);
        assert_eq!(r.deleted, 0);
        assert_eq!(r.unchanged, 1000 - 450);
    }

    #[test]
    fn duplicate_id_aborts_without_advancing_head() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1").unwrap();
        let dup = b">A one\nACGT\n>B x\nGG\n>A two\nTTTT\n";
        let err = add_release(&store, &registry, "upkb", Cursor::new(&dup[..]), "r2");
        match err {
            Err(Error::DuplicateId { id }) => assert_eq!(id, "A"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
        let table = store.open_table("upkb").unwrap();
        assert_eq!(table.head_seq(), 1);
        assert_eq!(table.resolve_label("r2"), None);
    }

    #[test]
    fn parse_failure_is_atomic() {
        let dir = tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let registry = Registry::builtin();
        register_table(&store, &registry, "prot", "dat", None).unwrap();
        let unterminated = b"ID   X\nAC   Q1;\n";
        assert!(add_release(&store, &registry, "prot", Cursor::new(&unterminated[..]), "r1").is_err());
        let table = store.open_table("prot").unwrap();
        assert_eq!(table.head_seq(), 0);
    }

    #[test]
    fn worker_counts_do_not_change_state_or_report() {
        let profile = crate::synth::ChurnProfile {
            p_delete: 0.05,
            p_seq_update: 0.3,
            seq_len: (30, 50),
            ..crate::synth::ChurnProfile::standard(300, 5)
        };
        let releases = crate::synth::generate_releases(&profile, 3, "fasta").unwrap();

        let run = |workers: usize, run_bytes_limit: usize| -> (Vec<IngestReport>, Vec<Vec<u8>>) {
            let dir = tempdir().unwrap();
            let (store, registry) = setup(dir.path());
            let mut reports = Vec::new();
            for rel in &releases {
                reports.push(
                    ingest_with_options(
                        &store,
                        &registry,
                        "upkb",
                        Cursor::new(&rel.bytes),
                        &rel.label,
                        &IngestOptions { workers, run_bytes_limit },
                    )
                    .unwrap(),
                );
            }
            let table = store.open_table("upkb").unwrap();
            let mut segments = Vec::new();
            for seq in 1..=table.head_seq() {
                segments.push(
                    std::fs::read(store.table_dir("upkb").join(format!("seg-{seq:06}.seg")))
                        .unwrap(),
                );
            }
            (reports, segments)
        };

        let (reports1, segs1) = run(1, DEFAULT_RUN_BYTES);
        let (reports8, segs8) = run(8, DEFAULT_RUN_BYTES);
        // tiny run limit forces the external-sort spill path
        let (reports_spill, segs_spill) = run(3, 512);

        let strip = |rs: &[IngestReport]| -> Vec<(u64, u64, u64, u64, u64, u64)> {
            rs.iter()
                .map(|r| (r.added, r.updated, r.unchanged, r.deleted, r.cells_written, r.exists_marks))
                .collect()
        };
        assert_eq!(strip(&reports1), strip(&reports8));
        assert_eq!(strip(&reports1), strip(&reports_spill));
        assert_eq!(segs1, segs8);
        assert_eq!(segs1, segs_spill);
    }

    #[test]
    fn zero_workers_rejected() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        assert!(matches!(
            ingest_with_options(
                &store,
                &registry,
                "upkb",
                Cursor::new(fixtures::F0_R1),
                "r1",
                &IngestOptions { workers: 0, run_bytes_limit: DEFAULT_RUN_BYTES }
            ),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn single_entry_many_workers() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        let r = ingest_partitioned(
            &store,
            &registry,
            "upkb",
            Cursor::new(&b">only x\nACGT\n"[..]),
            "r1",
            8,
        )
        .unwrap();
        assert_eq!(counts(&r), (1, 0, 0, 0));
    }

    #[test]
    fn gzip_input_is_sniffed() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(fixtures::F0_R1).unwrap();
        let compressed = gz.finish().unwrap();
        let r = add_release(&store, &registry, "upkb", Cursor::new(&compressed), "r1").unwrap();
        assert_eq!(r.added, 3);
    }

    #[test]
    fn ingest_lock_excludes_and_breaks_stale() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        let table_dir = store.table_dir("upkb");
        let lock = IngestLock::acquire(&table_dir, "upkb").unwrap();
        assert!(matches!(
            add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1"),
            Err(Error::Locked(_))
        ));
        drop(lock);
        // stale lock from a dead pid is broken
        std::fs::write(table_dir.join("ingest.lock"), "999999999").unwrap();
        add_release(&store, &registry, "upkb", Cursor::new(fixtures::F0_R1), "r1").unwrap();
    }

    #[test]
    fn field_drop_writes_tombstone_and_materializes_as_absent() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        add_release(&store, &registry, "upkb", Cursor::new(&b">A note\nACGT\n"[..]), "r1").unwrap();
        let r = add_release(&store, &registry, "upkb", Cursor::new(&b">A\nACGT\n"[..]), "r2").unwrap();
        assert_eq!(r.updated, 1);
        assert_eq!(r.cells_written, 1);
        let table = store.open_table("upkb").unwrap();
        let mask = FieldMask::all_of(["desc", "seq"]).unwrap();
        let id = crate::model::EntryId::new("A").unwrap();
        let at2 = table.materialize_row(&id, 2, &mask).unwrap().unwrap();
        assert!(!at2.contains_key("desc"));
        let at1 = table.materialize_row(&id, 1, &mask).unwrap().unwrap();
        assert_eq!(at1["desc"], b"note");
    }

    #[test]
    fn delete_then_readd_keeps_history() {
        let dir = tempdir().unwrap();
        let (store, registry) = setup(dir.path());
        add_release(&store, &registry, "upkb", Cursor::new(&b">A x\nACGT\n"[..]), "r1").unwrap();
        let r2 = add_release(&store, &registry, "upkb", Cursor::new(&b">B y\nGG\n"[..]), "r2").unwrap();
        assert_eq!(r2.deleted, 1);
        let r3 = add_release(
            &store,
            &registry,
            "upkb",
            Cursor::new(&b">A x\nACGT\n>B y\nGG\n"[..]),
            "r3",
        )
        .unwrap();
        // A returns as ADDED but is not a new row
        assert_eq!(r3.added, 1);
        let table = store.open_table("upkb").unwrap();
        assert_eq!(table.handle().row_count, 2);
        let mask = FieldMask::all_of(["desc", "seq"]).unwrap();
        let id = crate::model::EntryId::new("A").unwrap();
        // materialization before the re-add still shows the old values
        assert!(table.materialize_row(&id, 2, &mask).unwrap().is_none());
        assert_eq!(table.materialize_row(&id, 1, &mask).unwrap().unwrap()["seq"], b"ACGT");
        assert_eq!(table.materialize_row(&id, 3, &mask).unwrap().unwrap()["seq"], b"ACGT");
    }
}
