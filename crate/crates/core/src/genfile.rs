//! Meta-database file generation: full historical versions, changed-only
//! increment slices with deletion sidecars, and hash-assigned N-way
//! splits, all streamed from a single store scan.
//!
//! `generate` is the cache-aware front door: identical requests are served
//! byte-for-byte from the cache without touching the store.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::catalog::{CacheEntry, Catalog, EventKind};
use crate::error::{Error, Result};
use crate::model::{
    canonical_key, stable_hash64, EntryId, FieldMask, GenerationKind, GenerationSpec,
};
use crate::plugins::{ParsedEntry, ParserPlugin, Registry};
use crate::store::{Store, Table};

/// A generated meta-database artifact, on disk in the cache directory.
#[derive(Debug, Clone)]
pub struct GeneratedArtifact {
    pub spec: GenerationSpec,
    pub key: String,
    /// One file per split, `<key>.p<k>`.
    pub files: Vec<PathBuf>,
    /// Sidecar listing entries deleted in the window (increments only).
    pub deletions_file: Option<PathBuf>,
    pub deletions: Vec<EntryId>,
    pub entry_count: u64,
    pub byte_size: u64,
    /// Total residue letters across emitted entries.
    pub letters: u64,
    /// Entries silently excluded for missing required fields.
    pub excluded_incomplete: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Turn incomplete-entry exclusion into an error.
    pub strict_completeness: bool,
    /// Tool-execution id for the provenance trail.
    pub run_id: Option<String>,
}

/// Cache-aware generation front door.
pub fn generate(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    spec: &GenerationSpec,
    options: &GenerateOptions,
) -> Result<GeneratedArtifact> {
    let key = canonical_key(spec)?;
    if let Some(entry) = catalog.cache_lookup(&key)? {
        let artifact = artifact_from_cache(spec, &key, entry)?;
        catalog.record(EventKind::CacheHit, &spec.table, &key, options.run_id.as_deref(), "")?;
        record_access(catalog, spec, &key, options.run_id.as_deref(), &artifact)?;
        return Ok(artifact);
    }

    let _lease = catalog.acquire_lease(&key)?;
    let artifact = generate_into_cache(store, registry, catalog, spec, &key, options)?;
    catalog.record(
        EventKind::Generate,
        &spec.table,
        &key,
        options.run_id.as_deref(),
        &format!("entries={} bytes={}", artifact.entry_count, artifact.byte_size),
    )?;
    record_access(catalog, spec, &key, options.run_id.as_deref(), &artifact)?;
    Ok(artifact)
}

fn record_access(
    catalog: &Catalog,
    spec: &GenerationSpec,
    key: &str,
    run_id: Option<&str>,
    artifact: &GeneratedArtifact,
) -> Result<()> {
    if run_id.is_none() {
        return Ok(());
    }
    let files: Vec<String> = artifact
        .files
        .iter()
        .chain(artifact.deletions_file.iter())
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    catalog.record(EventKind::Access, &spec.table, key, run_id, &format!("files={}", files.join(",")))?;
    Ok(())
}

/// Generate a full version of the table at `to_seq`.
pub fn get_version(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    table: &str,
    to_seq: u64,
    mask: FieldMask,
    format: &str,
    splits: u32,
    options: &GenerateOptions,
) -> Result<GeneratedArtifact> {
    let spec = GenerationSpec::full(table, to_seq, mask, format, splits)?;
    generate(store, registry, catalog, &spec, options)
}

/// Generate the changed-only slice for the window `(from_seq, to_seq]`.
#[allow(clippy::too_many_arguments)]
pub fn get_increment(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    table: &str,
    from_seq: u64,
    to_seq: u64,
    mask: FieldMask,
    format: &str,
    splits: u32,
    options: &GenerateOptions,
) -> Result<GeneratedArtifact> {
    let spec = GenerationSpec::increment(table, from_seq, to_seq, mask, format, splits)?;
    generate(store, registry, catalog, &spec, options)
}

/// As `get_version`, resolving a release label to its seq.
pub fn get_version_labeled(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    table: &str,
    label: &str,
    mask: FieldMask,
    format: &str,
    splits: u32,
    options: &GenerateOptions,
) -> Result<GeneratedArtifact> {
    let seq = resolve_version(store, table, label)?;
    get_version(store, registry, catalog, table, seq, mask, format, splits, options)
}

/// Resolve `label-or-seq` to a seq: decimal strings resolve as seqs,
/// anything else as a release label.
pub fn resolve_version(store: &Store, table: &str, label_or_seq: &str) -> Result<u64> {
    let t = store.open_table(table)?;
    if let Ok(seq) = label_or_seq.parse::<u64>() {
        return Ok(seq);
    }
    t.resolve_label(label_or_seq)
        .ok_or_else(|| Error::not_found(format!("label {label_or_seq:?} in table {table}")))
}

/// The table's full field universe as a mask with nothing required.
pub fn full_mask(table: &Table) -> Result<FieldMask> {
    FieldMask::all_of(table.fields().iter().cloned())
}

/// Total residue letters of the table's release `seq`: the database-size
/// denominator for e-value correction.
pub fn release_letters(store: &Store, registry: &Registry, table: &str, seq: u64) -> Result<u64> {
    let t = store.open_table(table)?;
    let plugin = registry.get(t.format_id())?;
    let residue_field = match plugin.residue_field() {
        Some(f) => f,
        None => return Ok(0),
    };
    if seq < 1 || seq > t.head_seq() {
        return Err(Error::Range(format!(
            "release {seq} outside ingested range [1, {}]",
            t.head_seq()
        )));
    }
    let mask = FieldMask::all_of([residue_field])?;
    let mut letters = 0u64;
    for row in t.scan_rows(1, seq, Some(mask.clone()), None)? {
        let row = row?;
        if let Some(fields) = row.materialize_at(seq, &mask) {
            if let Some(v) = fields.get(residue_field) {
                letters += v.len() as u64;
            }
        }
    }
    Ok(letters)
}

fn artifact_from_cache(
    spec: &GenerationSpec,
    key: &str,
    entry: CacheEntry,
) -> Result<GeneratedArtifact> {
    let deletions = match &entry.deletions_file {
        None => Vec::new(),
        Some(path) => read_deletions(path)?,
    };
    Ok(GeneratedArtifact {
        spec: spec.clone(),
        key: key.to_string(),
        files: entry.files,
        deletions_file: entry.deletions_file,
        deletions,
        entry_count: entry.entry_count,
        byte_size: entry.byte_size,
        letters: entry.letters,
        excluded_incomplete: entry.excluded_incomplete,
        from_cache: true,
    })
}

pub fn read_deletions(path: &std::path::Path) -> Result<Vec<EntryId>> {
    let text = fs::read(path)?;
    let mut out = Vec::new();
    for line in text.split(|b| *b == b'\n') {
        if !line.is_empty() {
            out.push(EntryId::new(line.to_vec())?);
        }
    }
    Ok(out)
}

struct SplitWriter {
    tmp: PathBuf,
    final_path: PathBuf,
    writer: BufWriter<File>,
    hasher: Sha256,
    bytes: u64,
}

impl SplitWriter {
    fn create(dir: &std::path::Path, key: &str, name: &str) -> Result<SplitWriter> {
        let final_path = dir.join(format!("{key}.{name}"));
        let tmp = dir.join(format!("{key}.{name}.tmp{}", std::process::id()));
        let writer = BufWriter::new(File::create(&tmp)?);
        Ok(SplitWriter { tmp, final_path, writer, hasher: Sha256::new(), bytes: 0 })
    }

    fn write(&mut self, bytes: &[u8]) -> Result<()> {
        self.writer.write_all(bytes)?;
        self.hasher.update(bytes);
        self.bytes += bytes.len() as u64;
        Ok(())
    }

    /// Flush, fsync and atomically move into place.
    fn commit(self) -> Result<(PathBuf, String, u64)> {
        let file = self.writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        file.sync_all()?;
        drop(file);
        fs::rename(&self.tmp, &self.final_path)?;
        let digest = format!("{:x}", self.hasher.finalize());
        Ok((self.final_path, digest, self.bytes))
    }
}

fn generate_into_cache(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    spec: &GenerationSpec,
    key: &str,
    options: &GenerateOptions,
) -> Result<GeneratedArtifact> {
    let table = store.open_table(&spec.table)?;
    if spec.to_seq > table.head_seq() {
        return Err(Error::Range(format!(
            "to_seq {} beyond head {} of table {}",
            spec.to_seq,
            table.head_seq(),
            spec.table
        )));
    }
    let plugin = registry.get(table.format_id())?;
    if !plugin.export_formats().contains(&spec.format.as_str()) {
        return Err(Error::Format {
            format: spec.format.clone(),
            reason: format!("table {} parser ({}) cannot export it", spec.table, table.format_id()),
        });
    }
    let unknown: Vec<&String> =
        spec.mask.fields.iter().filter(|f| !table.fields().contains(*f)).collect();
    if !unknown.is_empty() {
        return Err(Error::Mask(format!(
            "mask names unknown fields {:?} (table has {:?})",
            unknown,
            table.fields()
        )));
    }
    let residue_field = plugin.residue_field().filter(|f| spec.mask.contains(f));

    let cache_dir = catalog.cache_dir();
    let mut writers = Vec::with_capacity(spec.splits as usize);
    for k in 0..spec.splits {
        writers.push(SplitWriter::create(&cache_dir, key, &format!("p{k}"))?);
    }

    let mut deletions: Vec<EntryId> = Vec::new();
    let mut entry_count = 0u64;
    let mut letters = 0u64;
    let mut excluded_incomplete = 0u64;

    let scan = table.scan_rows(1, spec.to_seq, Some(spec.mask.clone()), None)?;
    for row in scan {
        let row = row?;
        let present_at_to = row.exists_stamps.contains(&spec.to_seq);
        if spec.kind == GenerationKind::Increment {
            let present_at_from = row.exists_stamps.contains(&spec.from_seq);
            if present_at_from && !present_at_to {
                deletions.push(row.id.clone());
                continue;
            }
            if !present_at_to {
                continue;
            }
            let added_in_window = !present_at_from;
            let changed_in_window = row.masked_cell_in(spec.from_seq + 1, spec.to_seq, &spec.mask);
            if !added_in_window && !changed_in_window {
                continue;
            }
        } else if !present_at_to {
            continue;
        }
        let fields = match row.materialize_at(spec.to_seq, &spec.mask) {
            Some(f) => f,
            None => continue,
        };
        let entry = ParsedEntry { id: row.id, fields, complete: true };
        if !plugin.is_complete(&entry, &spec.mask) {
            if options.strict_completeness {
                return Err(Error::validation(format!(
                    "entry {} lacks required fields {:?}",
                    entry.id, spec.mask.required
                )));
            }
            excluded_incomplete += 1;
            continue;
        }
        let bytes = plugin.export_entry(&entry.id, &entry.fields, &spec.format)?;
        let split = (stable_hash64(entry.id.as_bytes()) % u64::from(spec.splits)) as usize;
        writers[split].write(&bytes)?;
        entry_count += 1;
        if let Some(rf) = residue_field {
            if let Some(v) = entry.fields.get(rf) {
                letters += v.len() as u64;
            }
        }
    }

    let mut files = Vec::with_capacity(writers.len());
    let mut checksums = std::collections::BTreeMap::new();
    let mut byte_size = 0u64;
    for w in writers {
        let (path, digest, bytes) = w.commit()?;
        checksums.insert(path.file_name().unwrap().to_string_lossy().into_owned(), digest);
        byte_size += bytes;
        files.push(path);
    }

    let deletions_file = if spec.kind == GenerationKind::Increment {
        let mut w = SplitWriter::create(&cache_dir, key, "deleted")?;
        for id in &deletions {
            w.write(id.as_bytes())?;
            w.write(b"\n")?;
        }
        let (path, digest, bytes) = w.commit()?;
        checksums.insert(path.file_name().unwrap().to_string_lossy().into_owned(), digest);
        byte_size += bytes;
        Some(path)
    } else {
        None
    };

    let now = chrono::Utc::now().timestamp();
    catalog.cache_insert(&CacheEntry {
        key: key.to_string(),
        splits: spec.splits,
        files: files.clone(),
        deletions_file: deletions_file.clone(),
        checksums,
        created_at: now,
        last_access: now,
        byte_size,
        entry_count,
        letters,
        excluded_incomplete,
        deletion_count: deletions.len() as u64,
    })?;

    Ok(GeneratedArtifact {
        spec: spec.clone(),
        key: key.to_string(),
        files,
        deletions_file,
        deletions,
        entry_count,
        byte_size,
        letters,
        excluded_incomplete,
        from_cache: false,
    })
}

/// Concatenated split contents as a set of exported entries, keyed by id.
/// The per-split files are each internally sorted; the union is invariant
/// over the split count.
pub fn read_artifact_entries(
    artifact: &GeneratedArtifact,
    plugin: &dyn ParserPlugin,
) -> Result<std::collections::BTreeMap<EntryId, crate::model::FieldMap>> {
    let mut out = std::collections::BTreeMap::new();
    for path in &artifact.files {
        let bytes = fs::read(path)?;
        for (id, fields) in crate::synth::full_parse(plugin, &bytes)? {
            if out.insert(id.clone(), fields).is_some() {
                return Err(Error::Contract(format!("entry {id} appears in two splits")));
            }
        }
    }
    Ok(out)
}

