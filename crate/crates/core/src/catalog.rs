//! Generated-file cache and provenance ledger.
//!
//! The cache lives under `<root>/cache/`: per artifact, split part files
//! `<key>.p<k>`, an optional `<key>.deleted` sidecar and a `<key>.meta`
//! key-value sidecar whose presence marks the entry committed. Lookups
//! verify checksums; a mismatch quarantines the entry and reports a miss.
//!
//! Provenance is an append-only tab-separated log at
//! `<root>/provenance.log`: kind, table, key-or-seq, run id, ISO
//! timestamp, detail.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One committed cache entry, as described by its `.meta` sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: String,
    pub splits: u32,
    pub files: Vec<PathBuf>,
    pub deletions_file: Option<PathBuf>,
    /// file name (not path) -> sha256 hex
    pub checksums: BTreeMap<String, String>,
    pub created_at: i64,
    pub last_access: i64,
    pub byte_size: u64,
    pub entry_count: u64,
    /// Total residue letters across emitted entries.
    pub letters: u64,
    pub excluded_incomplete: u64,
    pub deletion_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Ingest,
    Generate,
    CacheHit,
    Merge,
    Access,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Ingest => "INGEST",
            EventKind::Generate => "GENERATE",
            EventKind::CacheHit => "CACHE_HIT",
            EventKind::Merge => "MERGE",
            EventKind::Access => "ACCESS",
        }
    }

    pub fn parse(s: &str) -> Result<EventKind> {
        match s {
            "INGEST" => Ok(EventKind::Ingest),
            "GENERATE" => Ok(EventKind::Generate),
            "CACHE_HIT" => Ok(EventKind::CacheHit),
            "MERGE" => Ok(EventKind::Merge),
            "ACCESS" => Ok(EventKind::Access),
            other => Err(Error::validation(format!("unknown event kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvenanceEvent {
    pub kind: EventKind,
    pub table: String,
    /// Canonical key or release seq the event refers to.
    pub subject: String,
    /// Caller-supplied tool-execution id; "-" when absent.
    pub run_id: String,
    /// RFC 3339 UTC timestamp.
    pub timestamp: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ProvenanceFilter {
    pub run_id: Option<String>,
    pub table: Option<String>,
    pub kind: Option<EventKind>,
    /// Inclusive RFC 3339 bounds.
    pub since: Option<String>,
    pub until: Option<String>,
}

pub struct Catalog {
    root: PathBuf,
    log: Mutex<LogWriter>,
}

struct LogWriter {
    last_ts: Option<DateTime<Utc>>,
}

impl Catalog {
    pub fn open(root: impl Into<PathBuf>) -> Result<Catalog> {
        let root = root.into();
        fs::create_dir_all(root.join("cache"))?;
        Ok(Catalog { root, log: Mutex::new(LogWriter { last_ts: None }) })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    fn quarantine_dir(&self) -> PathBuf {
        self.cache_dir().join("quarantine")
    }

    fn meta_path(&self, key: &str) -> PathBuf {
        self.cache_dir().join(format!("{key}.meta"))
    }

    /// Hit iff the meta sidecar exists and every listed file matches its
    /// checksum. Hits update last_access; corrupt entries are moved to
    /// quarantine and reported as a miss.
    pub fn cache_lookup(&self, key: &str) -> Result<Option<CacheEntry>> {
        let meta_path = self.meta_path(key);
        if !meta_path.is_file() {
            return Ok(None);
        }
        let mut entry = match self.read_meta(&meta_path) {
            Ok(e) => e,
            Err(_) => {
                self.quarantine(key)?;
                return Ok(None);
            }
        };
        for path in entry.files.iter().chain(entry.deletions_file.iter()) {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let expected = entry.checksums.get(&name);
            let ok = match (expected, fs::read(path)) {
                (Some(sum), Ok(bytes)) => format!("{:x}", Sha256::digest(&bytes)) == *sum,
                _ => false,
            };
            if !ok {
                self.quarantine(key)?;
                return Ok(None);
            }
        }
        entry.last_access = Utc::now().timestamp();
        self.write_meta(&entry)?;
        Ok(Some(entry))
    }

    /// Move every file of a corrupt entry aside for inspection.
    fn quarantine(&self, key: &str) -> Result<()> {
        let qdir = self.quarantine_dir();
        fs::create_dir_all(&qdir)?;
        for path in self.entry_files_on_disk(key)? {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let _ = fs::rename(&path, qdir.join(name));
        }
        Ok(())
    }

    fn entry_files_on_disk(&self, key: &str) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.cache_dir())? {
            let entry = entry?;
            if !entry.path().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let is_part = name
                .strip_prefix(key)
                .map(|rest| {
                    rest == ".meta"
                        || rest == ".deleted"
                        || rest == ".lease"
                        || (rest.starts_with(".p") && rest[2..].chars().all(|c| c.is_ascii_digit()))
                })
                .unwrap_or(false);
            if is_part {
                out.push(entry.path());
            }
        }
        Ok(out)
    }

    /// Commit an entry whose files are already atomically in place.
    pub fn cache_insert(&self, entry: &CacheEntry) -> Result<()> {
        self.write_meta(entry)
    }

    fn write_meta(&self, entry: &CacheEntry) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("key={}\n", entry.key));
        text.push_str(&format!("splits={}\n", entry.splits));
        text.push_str(&format!("created_at={}\n", entry.created_at));
        text.push_str(&format!("last_access={}\n", entry.last_access));
        text.push_str(&format!("byte_size={}\n", entry.byte_size));
        text.push_str(&format!("entry_count={}\n", entry.entry_count));
        text.push_str(&format!("letters={}\n", entry.letters));
        text.push_str(&format!("excluded_incomplete={}\n", entry.excluded_incomplete));
        if entry.deletions_file.is_some() {
            text.push_str(&format!("deletions={}\n", entry.deletion_count));
        }
        for (name, sum) in &entry.checksums {
            text.push_str(&format!("checksum.{name}={sum}\n"));
        }
        let tmp = self.cache_dir().join(format!("{}.meta.tmp{}", entry.key, std::process::id()));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.meta_path(&entry.key))?;
        Ok(())
    }

    fn read_meta(&self, path: &Path) -> Result<CacheEntry> {
        let text = fs::read_to_string(path)?;
        let mut kv = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k).cloned().ok_or_else(|| Error::corruption(path, format!("meta missing {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::corruption(path, format!("meta field {k} not numeric")))
        };
        let key = get("key")?;
        let splits: u32 = num("splits")? as u32;
        let files = (0..splits)
            .map(|k| self.cache_dir().join(format!("{key}.p{k}")))
            .collect();
        let deletions_file = if kv.contains_key("deletions") {
            Some(self.cache_dir().join(format!("{key}.deleted")))
        } else {
            None
        };
        let checksums = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("checksum.").map(|n| (n.to_string(), v.clone())))
            .collect();
        Ok(CacheEntry {
            key,
            splits,
            files,
            deletions_file,
            checksums,
            created_at: num("created_at")? as i64,
            last_access: num("last_access")? as i64,
            byte_size: num("byte_size")?,
            entry_count: num("entry_count")?,
            letters: num("letters")?,
            excluded_incomplete: num("excluded_incomplete")?,
            deletion_count: kv.get("deletions").and_then(|v| v.parse().ok()).unwrap_or(0),
        })
    }

    /// All committed entries, ascending by creation time.
    pub fn cache_entries(&self) -> Result<Vec<CacheEntry>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(self.cache_dir())? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.ends_with(".meta") && entry.path().is_file() {
                if let Ok(e) = self.read_meta(&entry.path()) {
                    out.push(e);
                }
            }
        }
        out.sort_by(|a, b| (a.created_at, &a.key).cmp(&(b.created_at, &b.key)));
        Ok(out)
    }

    /// Remove oldest entries (by creation time) until the cache fits the
    /// budget. Entries with a live generation lease are never evicted.
    pub fn cache_evict_oldest(&self, max_total_bytes: u64) -> Result<Vec<String>> {
        let entries = self.cache_entries()?;
        let mut total: u64 = entries.iter().map(|e| e.byte_size).sum();
        let mut evicted = Vec::new();
        for entry in entries {
            if total <= max_total_bytes {
                break;
            }
            if self.cache_dir().join(format!("{}.lease", entry.key)).exists() {
                continue;
            }
            for path in self.entry_files_on_disk(&entry.key)? {
                fs::remove_file(&path)?;
            }
            total = total.saturating_sub(entry.byte_size);
            evicted.push(entry.key);
        }
        Ok(evicted)
    }

    /// Re-verify every committed entry; returns (key, ok) pairs.
    pub fn cache_verify(&self) -> Result<Vec<(String, bool)>> {
        let mut out = Vec::new();
        for entry in self.cache_entries()? {
            let mut ok = true;
            for path in entry.files.iter().chain(entry.deletions_file.iter()) {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                let matches = match (entry.checksums.get(&name), fs::read(path)) {
                    (Some(sum), Ok(bytes)) => format!("{:x}", Sha256::digest(&bytes)) == *sum,
                    _ => false,
                };
                if !matches {
                    ok = false;
                }
            }
            out.push((entry.key, ok));
        }
        Ok(out)
    }

    /// Eviction protection for a generation in flight.
    pub fn acquire_lease(&self, key: &str) -> Result<Lease> {
        let path = self.cache_dir().join(format!("{key}.lease"));
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lease { path, owned: true }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Ok(Lease { path, owned: false })
            }
            Err(e) => Err(Error::Io(e)),
        }
    }

    fn log_path(&self) -> PathBuf {
        self.root.join("provenance.log")
    }

    /// Append one event. Timestamps are monotone per catalog handle.
    pub fn record(&self, kind: EventKind, table: &str, subject: &str, run_id: Option<&str>, detail: &str) -> Result<ProvenanceEvent> {
        let mut guard = self.log.lock().expect("provenance log lock");
        let mut now = Utc::now();
        if let Some(last) = guard.last_ts {
            if now < last {
                now = last;
            }
        }
        guard.last_ts = Some(now);
        let event = ProvenanceEvent {
            kind,
            table: table.to_string(),
            subject: subject.to_string(),
            run_id: run_id.filter(|r| !r.is_empty()).unwrap_or("-").to_string(),
            timestamp: now.to_rfc3339_opts(SecondsFormat::Micros, true),
            detail: detail.replace(['\t', '\n'], " "),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(self.log_path())?;
        writeln!(
            file,
            "{}\t{}\t{}\t{}\t{}\t{}",
            event.kind.as_str(),
            event.table,
            event.subject,
            event.run_id,
            event.timestamp,
            event.detail
        )?;
        Ok(event)
    }

    /// Events matching the filter, in append (timestamp) order.
    pub fn query(&self, filter: &ProvenanceFilter) -> Result<Vec<ProvenanceEvent>> {
        let since = parse_bound(filter.since.as_deref())?;
        let until = parse_bound(filter.until.as_deref())?;
        if let (Some(s), Some(u)) = (since, until) {
            if s > u {
                return Err(Error::validation("time range since > until"));
            }
        }
        let path = self.log_path();
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for line in BufReader::new(fs::File::open(&path)?).lines() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(6, '\t').collect();
            if parts.len() != 6 {
                return Err(Error::corruption(&path, format!("malformed event line {line:?}")));
            }
            let event = ProvenanceEvent {
                kind: EventKind::parse(parts[0])?,
                table: parts[1].to_string(),
                subject: parts[2].to_string(),
                run_id: parts[3].to_string(),
                timestamp: parts[4].to_string(),
                detail: parts[5].to_string(),
            };
            if let Some(rid) = &filter.run_id {
                if event.run_id != *rid {
                    continue;
                }
            }
            if let Some(t) = &filter.table {
                if event.table != *t {
                    continue;
                }
            }
            if let Some(k) = &filter.kind {
                if event.kind != *k {
                    continue;
                }
            }
            if since.is_some() || until.is_some() {
                let ts = DateTime::parse_from_rfc3339(&event.timestamp)
                    .map_err(|_| Error::corruption(&path, "bad event timestamp"))?
                    .with_timezone(&Utc);
                if let Some(s) = since {
                    if ts < s {
                        continue;
                    }
                }
                if let Some(u) = until {
                    if ts > u {
                        continue;
                    }
                }
            }
            out.push(event);
        }
        Ok(out)
    }
}

fn parse_bound(bound: Option<&str>) -> Result<Option<DateTime<Utc>>> {
    match bound {
        None => Ok(None),
        Some(s) => DateTime::parse_from_rfc3339(s)
            .map(|t| Some(t.with_timezone(&Utc)))
            .map_err(|e| Error::validation(format!("bad RFC 3339 timestamp {s:?}: {e}"))),
    }
}

/// Held while a generation is writing its artifact; blocks eviction of the
/// key. Dropped (and the lease file removed) when generation finishes.
pub struct Lease {
    path: PathBuf,
    owned: bool,
}

impl Drop for Lease {
    fn drop(&mut self) {
        if self.owned {
            let _ = fs::remove_file(&self.path);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn make_entry(cat: &Catalog, key: &str, bytes: &[u8], created_at: i64) -> CacheEntry {
        let p0 = cat.cache_dir().join(format!("{key}.p0"));
        fs::write(&p0, bytes).unwrap();
        let mut checksums = BTreeMap::new();
        checksums.insert(format!("{key}.p0"), format!("{:x}", Sha256::digest(bytes)));
        let entry = CacheEntry {
            key: key.to_string(),
            splits: 1,
            files: vec![p0],
            deletions_file: None,
            checksums,
            created_at,
            last_access: created_at,
            byte_size: bytes.len() as u64,
            entry_count: 1,
            letters: 0,
            excluded_incomplete: 0,
            deletion_count: 0,
        };
        cat.cache_insert(&entry).unwrap();
        entry
    }

    #[test]
    fn lookup_after_insert_and_unknown_miss() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        make_entry(&cat, "t.full.1-1.abcd1234.fasta.s1", b"data", 100);
        let hit = cat.cache_lookup("t.full.1-1.abcd1234.fasta.s1").unwrap().unwrap();
        assert_eq!(hit.byte_size, 4);
        assert!(hit.last_access >= 100);
        assert!(cat.cache_lookup("unknown.key").unwrap().is_none());
    }

    #[test]
    fn tampered_entry_is_quarantined() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        let entry = make_entry(&cat, "k.full.1-1.aaaaaaaa.fasta.s1", b"data", 100);
        fs::write(&entry.files[0], b"tampered").unwrap();
        assert!(cat.cache_lookup(&entry.key).unwrap().is_none());
        // entry is gone from the cache dir, preserved in quarantine
        assert!(!entry.files[0].exists());
        assert!(cat.quarantine_dir().join("k.full.1-1.aaaaaaaa.fasta.s1.p0").exists());
        assert!(cat.cache_entries().unwrap().is_empty());
    }

    #[test]
    fn eviction_by_age_until_budget() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        make_entry(&cat, "a.full.1-1.aaaaaaaa.fasta.s1", &[0u8; 10], 1);
        make_entry(&cat, "b.full.1-1.aaaaaaaa.fasta.s1", &[0u8; 10], 2);
        make_entry(&cat, "c.full.1-1.aaaaaaaa.fasta.s1", &[0u8; 10], 3);
        let evicted = cat.cache_evict_oldest(15).unwrap();
        assert_eq!(
            evicted,
            vec!["a.full.1-1.aaaaaaaa.fasta.s1", "b.full.1-1.aaaaaaaa.fasta.s1"]
        );
        assert_eq!(cat.cache_entries().unwrap().len(), 1);
        // budget >= total: nothing to do
        assert!(cat.cache_evict_oldest(1000).unwrap().is_empty());
        // budget 0 drops the rest
        assert_eq!(cat.cache_evict_oldest(0).unwrap().len(), 1);
    }

    #[test]
    fn leased_entries_survive_eviction() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        make_entry(&cat, "a.full.1-1.aaaaaaaa.fasta.s1", &[0u8; 10], 1);
        make_entry(&cat, "b.full.1-1.aaaaaaaa.fasta.s1", &[0u8; 10], 2);
        let lease = cat.acquire_lease("a.full.1-1.aaaaaaaa.fasta.s1").unwrap();
        let evicted = cat.cache_evict_oldest(0).unwrap();
        assert_eq!(evicted, vec!["b.full.1-1.aaaaaaaa.fasta.s1"]);
        drop(lease);
        assert_eq!(cat.cache_evict_oldest(0).unwrap().len(), 1);
    }

    #[test]
    fn record_and_query_events() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        cat.record(EventKind::Ingest, "upkb", "1", None, "added=3").unwrap();
        cat.record(EventKind::Generate, "upkb", "upkb.full.1-1.x.fasta.s1", Some("run7"), "").unwrap();
        cat.record(EventKind::CacheHit, "upkb", "upkb.full.1-1.x.fasta.s1", Some("run8"), "").unwrap();

        let all = cat.query(&ProvenanceFilter::default()).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].kind, EventKind::Ingest);
        assert_eq!(all[0].run_id, "-");

        let by_run = cat
            .query(&ProvenanceFilter { run_id: Some("run7".into()), ..Default::default() })
            .unwrap();
        assert_eq!(by_run.len(), 1);
        assert_eq!(by_run[0].kind, EventKind::Generate);

        let by_kind = cat
            .query(&ProvenanceFilter { kind: Some(EventKind::CacheHit), ..Default::default() })
            .unwrap();
        assert_eq!(by_kind.len(), 1);

        let none = cat
            .query(&ProvenanceFilter { run_id: Some("nope".into()), ..Default::default() })
            .unwrap();
        assert!(none.is_empty());

        // timestamps are monotone in file order
        let stamps: Vec<&String> = all.iter().map(|e| &e.timestamp).collect();
        let mut sorted = stamps.clone();
        sorted.sort();
        assert_eq!(stamps, sorted);
    }

    #[test]
    fn detail_is_flattened_to_one_line() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        cat.record(EventKind::Merge, "t", "s", None, "line1\nline2\tcol").unwrap();
        let all = cat.query(&ProvenanceFilter::default()).unwrap();
        assert_eq!(all[0].detail, "line1 line2 col");
    }

    #[test]
    fn malformed_filter_errors() {
        let dir = tempdir().unwrap();
        let cat = Catalog::open(dir.path()).unwrap();
        assert!(cat
            .query(&ProvenanceFilter { since: Some("yesterday".into()), ..Default::default() })
            .is_err());
        assert!(cat
            .query(&ProvenanceFilter {
                since: Some("2030-01-01T00:00:00Z".into()),
                until: Some("2020-01-01T00:00:00Z".into()),
                ..Default::default()
            })
            .is_err());
        assert!(EventKind::parse("NOPE").is_err());
    }
}
