//! Synthetic release-sequence generator and the brute-force diff oracle.
//!
//! The oracle is the trusted reference every storage and generation test
//! checks against: it parses whole files into memory and compares entries
//! field by field, touching none of the store or generation code paths.

use std::collections::{BTreeMap, BTreeSet};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{classify, DiffClass, EntryId, FieldMap, FieldMask};
use crate::plugins::{ParserPlugin, Registry};

/// Built-in fixtures used across the test suites.
pub mod fixtures {
    /// F0: four entries across two FASTA releases. Release 1 holds A, B, C;
    /// release 2 keeps A, rewrites B's sequence, drops C and adds D.
    pub const F0_R1: &[u8] = include_bytes!("../fixtures/f0_r1.fasta");
    pub const F0_R2: &[u8] = include_bytes!("../fixtures/f0_r2.fasta");
    /// Three-entry DAT releases: one annotation update, one delete, one add.
    pub const DAT_R1: &[u8] = include_bytes!("../fixtures/dat_r1.dat");
    pub const DAT_R2: &[u8] = include_bytes!("../fixtures/dat_r2.dat");
    /// Eight BLAST tabular hit rows over subjects s_A..s_E.
    pub const BLAST_8: &[u8] = include_bytes!("../fixtures/hits_8.blast-tab");
}

/// Workload parameters for one synthetic release sequence.
///
/// Fractions apply to the current entry count, rounded down, and target
/// disjoint entry sets. Updates mutate the annotation field unless
/// `p_seq_update` routes a share of them to the sequence field, matching
/// how reference databases churn in practice (annotations change far more
/// often than sequences).
#[derive(Debug, Clone)]
pub struct ChurnProfile {
    pub n_entries: usize,
    pub p_new: f64,
    pub p_update: f64,
    pub p_delete: f64,
    pub seed: u64,
    /// Inclusive sequence-length range for generated entries.
    pub seq_len: (usize, usize),
    /// Fraction of updates that mutate the sequence instead of the
    /// annotation.
    pub p_seq_update: f64,
}

impl ChurnProfile {
    /// The default churn shape: 5% new entries and 45% updated entries per
    /// release, no deletions.
    pub fn standard(n_entries: usize, seed: u64) -> Self {
        ChurnProfile {
            n_entries,
            p_new: 0.05,
            p_update: 0.45,
            p_delete: 0.0,
            seed,
            seq_len: (500, 700),
            p_seq_update: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_new", self.p_new),
            ("p_update", self.p_update),
            ("p_delete", self.p_delete),
            ("p_seq_update", self.p_seq_update),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if self.p_update + self.p_delete > 1.0 {
            return Err(Error::validation(
                "p_update + p_delete cannot exceed 1 (disjoint target sets)",
            ));
        }
        if self.n_entries == 0 {
            return Err(Error::validation("n_entries must be positive"));
        }
        if self.seq_len.0 == 0 || self.seq_len.0 > self.seq_len.1 {
            return Err(Error::validation("seq_len range must be non-empty and positive"));
        }
        Ok(())
    }
}

/// One generated release.
#[derive(Debug, Clone)]
pub struct ReleaseFile {
    pub label: String,
    pub bytes: Vec<u8>,
}

struct GenEntry {
    desc: String,
    seq: Vec<u8>,
}

/// Deterministic in seed: the same profile always yields byte-identical
/// releases. Entries are emitted in id order, which is already the
/// engine's canonical file order.
pub fn generate_releases(profile: &ChurnProfile, k: usize, format: &str) -> Result<Vec<ReleaseFile>> {
    profile.validate()?;
    let plugin = match format {
        "fasta" | "dat" => Registry::builtin().get(format)?,
        other => {
            return Err(Error::Format {
                format: other.to_string(),
                reason: "release generator emits fasta or dat".into(),
            })
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let mut entries: BTreeMap<String, GenEntry> = BTreeMap::new();
    let mut next_id: u64 = 1;
    let mut out = Vec::with_capacity(k);
    for release in 1..=k {
        if release == 1 {
            for _ in 0..profile.n_entries {
                let id = format!("E{next_id:08}");
                next_id += 1;
                entries.insert(id, random_entry(&mut rng, profile));
            }
        } else {
            apply_churn(&mut entries, &mut next_id, &mut rng, profile);
        }
        let mut bytes = Vec::new();
        for (id, e) in &entries {
            let mut fields = FieldMap::new();
            fields.insert("desc".into(), e.desc.clone().into_bytes());
            fields.insert("seq".into(), e.seq.clone());
            if format == "dat" {
                let mut dat_fields = FieldMap::new();
                dat_fields.insert("ID".into(), format!("{id} Generated; {} AA.", e.seq.len()).into_bytes());
                dat_fields.insert("DE".into(), e.desc.clone().into_bytes());
                dat_fields.insert("SQ".into(), format!("SEQUENCE {} AA;", e.seq.len()).into_bytes());
                dat_fields.insert("seq".into(), e.seq.clone());
                bytes.extend_from_slice(&plugin.export_entry(
                    &EntryId::new(id.as_bytes().to_vec())?,
                    &dat_fields,
                    format,
                )?);
            } else {
                bytes.extend_from_slice(&plugin.export_entry(
                    &EntryId::new(id.as_bytes().to_vec())?,
                    &fields,
                    format,
                )?);
            }
        }
        out.push(ReleaseFile { label: format!("r{release}"), bytes });
    }
    Ok(out)
}

fn apply_churn(
    entries: &mut BTreeMap<String, GenEntry>,
    next_id: &mut u64,
    rng: &mut ChaCha8Rng,
    profile: &ChurnProfile,
) {
    let current: Vec<String> = entries.keys().cloned().collect();
    let n = current.len();
    let n_delete = (profile.p_delete * n as f64).floor() as usize;
    let n_update = (profile.p_update * n as f64).floor() as usize;
    let n_new = (profile.p_new * n as f64).floor() as usize;

    let victims = rand::seq::index::sample(rng, n, n_delete + n_update).into_vec();
    let (delete_idx, update_idx) = victims.split_at(n_delete);

    for i in delete_idx {
        entries.remove(&current[*i]);
    }
    for i in update_idx {
        let id = &current[*i];
        let mutate_seq = rng.gen::<f64>() < profile.p_seq_update;
        let e = entries.get_mut(id).expect("update target exists");
        if mutate_seq {
            let old = std::mem::take(&mut e.seq);
            loop {
                e.seq = random_seq(rng, profile);
                if e.seq != old {
                    break;
                }
            }
        } else {
            let old = std::mem::take(&mut e.desc);
            loop {
                e.desc = random_desc(rng);
                if e.desc != old {
                    break;
                }
            }
        }
    }
    for _ in 0..n_new {
        let id = format!("E{:08}", *next_id);
        *next_id += 1;
        entries.insert(id, random_entry(rng, profile));
    }
}

fn random_entry(rng: &mut ChaCha8Rng, profile: &ChurnProfile) -> GenEntry {
    GenEntry { desc: random_desc(rng), seq: random_seq(rng, profile) }
}

fn random_desc(rng: &mut ChaCha8Rng) -> String {
    format!("desc-{:08x}", rng.gen::<u32>())
}

fn random_seq(rng: &mut ChaCha8Rng, profile: &ChurnProfile) -> Vec<u8> {
    const ALPHABET: &[u8; 4] = b"ACGT";
    let len = rng.gen_range(profile.seq_len.0..=profile.seq_len.1);
    (0..len).map(|_| ALPHABET[rng.gen_range(0..4)]).collect()
}

/// Exhaustive field-aware diff between two release files, computed by full
/// in-memory parse; the independent reference for every delta the engine
/// claims to detect.
#[derive(Debug, Clone, Default)]
pub struct OracleDiff {
    pub classes: BTreeMap<EntryId, DiffClass>,
    /// Differing masked fields for entries present on both sides.
    pub changed_fields: BTreeMap<EntryId, BTreeSet<String>>,
}

impl OracleDiff {
    pub fn count(&self, class: DiffClass) -> usize {
        self.classes.values().filter(|c| **c == class).count()
    }

    pub fn ids_of(&self, class: DiffClass) -> Vec<EntryId> {
        self.classes
            .iter()
            .filter(|(_, c)| **c == class)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Parse a whole release file into id -> fields.
pub fn full_parse(plugin: &dyn ParserPlugin, bytes: &[u8]) -> Result<BTreeMap<EntryId, FieldMap>> {
    let mut out = BTreeMap::new();
    let bounds = plugin.entry_bounds(Box::new(std::io::Cursor::new(bytes.to_vec())));
    for raw in bounds {
        let e = plugin.split_entry(&raw?.bytes)?;
        if out.insert(e.id.clone(), e.fields).is_some() {
            return Err(Error::DuplicateId { id: e.id.to_string() });
        }
    }
    Ok(out)
}

pub fn oracle_diff(
    file_a: &[u8],
    file_b: &[u8],
    plugin: &dyn ParserPlugin,
    mask: &FieldMask,
) -> Result<OracleDiff> {
    let old = full_parse(plugin, file_a)?;
    let new = full_parse(plugin, file_b)?;
    Ok(oracle_diff_parsed(&old, &new, mask))
}

/// Diff over already-parsed maps; used when files were parsed once and
/// diffed under many masks.
pub fn oracle_diff_parsed(
    old: &BTreeMap<EntryId, FieldMap>,
    new: &BTreeMap<EntryId, FieldMap>,
    mask: &FieldMask,
) -> OracleDiff {
    let mut diff = OracleDiff::default();
    let ids: BTreeSet<&EntryId> = old.keys().chain(new.keys()).collect();
    for id in ids {
        let o = old.get(id);
        let n = new.get(id);
        let class = classify(o, n, mask).expect("at least one side present");
        if let (Some(o), Some(n)) = (o, n) {
            let changed: BTreeSet<String> = mask
                .fields
                .iter()
                .filter(|f| o.get(*f) != n.get(*f))
                .cloned()
                .collect();
            diff.changed_fields.insert(id.clone(), changed);
        }
        diff.classes.insert(id.clone(), class);
    }
    diff
}

/// Changed-cell count the store is expected to write when moving from
/// `old` to `new`: every field of an added entry plus, for survivors,
/// every field whose value differs over the union of both field sets
/// (a dropped field costs one tombstone cell).
pub fn oracle_changed_cells(
    old: &BTreeMap<EntryId, FieldMap>,
    new: &BTreeMap<EntryId, FieldMap>,
) -> u64 {
    let mut cells = 0u64;
    for (id, n_fields) in new {
        match old.get(id) {
            None => cells += n_fields.len() as u64,
            Some(o_fields) => {
                let union: BTreeSet<&String> = o_fields.keys().chain(n_fields.keys()).collect();
                cells += union.iter().filter(|f| o_fields.get(**f) != n_fields.get(**f)).count()
                    as u64;
            }
        }
    }
    cells
}

/// The mask every field of a parsed corpus participates in.
pub fn union_mask(parsed: &BTreeMap<EntryId, FieldMap>) -> Result<FieldMask> {
    let fields: BTreeSet<String> = parsed.values().flat_map(|f| f.keys().cloned()).collect();
    FieldMask::all_of(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plugins::FastaParser;

    fn mask(fields: &[&str]) -> FieldMask {
        FieldMask::all_of(fields.iter().copied()).unwrap()
    }

    #[test]
    fn f0_diff_matches_hand_check() {
        let d = oracle_diff(fixtures::F0_R1, fixtures::F0_R2, &FastaParser, &mask(&["seq"]))
            .unwrap();
        let get = |id: &str| d.classes[&EntryId::new(id).unwrap()];
        assert_eq!(get("A"), DiffClass::Unchanged);
        assert_eq!(get("B"), DiffClass::Updated);
        assert_eq!(get("C"), DiffClass::Deleted);
        assert_eq!(get("D"), DiffClass::Added);
        assert_eq!(
            d.changed_fields[&EntryId::new("B").unwrap()],
            BTreeSet::from(["seq".to_string()])
        );
    }

    #[test]
    fn diff_against_self_is_all_unchanged() {
        let d = oracle_diff(fixtures::F0_R1, fixtures::F0_R1, &FastaParser, &mask(&["seq", "desc"]))
            .unwrap();
        assert_eq!(d.count(DiffClass::Unchanged), 3);
        assert_eq!(d.classes.len(), 3);
    }

    #[test]
    fn mask_suppresses_overdetection() {
        // The full-field diff flags an annotation-only change as UPDATED;
        // a sequence-only mask sees nothing. This is the whole point of
        // field-aware change detection.
        let r1 = b">X old note\nACGT\n".to_vec();
        let r2 = b">X new note\nACGT\n".to_vec();
        let full = oracle_diff(&r1, &r2, &FastaParser, &mask(&["seq", "desc"])).unwrap();
        assert_eq!(full.count(DiffClass::Updated), 1);
        let seq_only = oracle_diff(&r1, &r2, &FastaParser, &mask(&["seq"])).unwrap();
        assert_eq!(seq_only.count(DiffClass::Updated), 0);
        assert_eq!(seq_only.count(DiffClass::Unchanged), 1);
    }

    #[test]
    fn generator_is_deterministic_in_seed() {
        let profile = ChurnProfile { seq_len: (40, 60), ..ChurnProfile::standard(20, 7) };
        let a = generate_releases(&profile, 3, "fasta").unwrap();
        let b = generate_releases(&profile, 3, "fasta").unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.bytes, y.bytes);
            assert_eq!(x.label, y.label);
        }
        let other = generate_releases(
            &ChurnProfile { seed: 8, ..profile.clone() },
            3,
            "fasta",
        )
        .unwrap();
        assert_ne!(a[0].bytes, other[0].bytes);
    }

    #[test]
    fn generator_churn_counts_match_request_exactly() {
        let profile = ChurnProfile { seq_len: (40, 60), ..ChurnProfile::standard(1000, 42) };
        let releases = generate_releases(&profile, 2, "fasta").unwrap();
        let d = oracle_diff(
            &releases[0].bytes,
            &releases[1].bytes,
            &FastaParser,
            &mask(&["seq", "desc"]),
        )
        .unwrap();
        assert_eq!(d.count(DiffClass::Added), 50);
        assert_eq!(d.count(DiffClass::Updated), 450);
        assert_eq!(d.count(DiffClass::Deleted), 0);
    }

    #[test]
    fn generator_zero_update_profile() {
        let profile = ChurnProfile {
            p_update: 0.0,
            seq_len: (40, 60),
            ..ChurnProfile::standard(50, 3)
        };
        let releases = generate_releases(&profile, 3, "fasta").unwrap();
        for pair in releases.windows(2) {
            let d = oracle_diff(
                &pair[0].bytes,
                &pair[1].bytes,
                &FastaParser,
                &mask(&["seq", "desc"]),
            )
            .unwrap();
            assert_eq!(d.count(DiffClass::Updated), 0);
        }
    }

    #[test]
    fn generator_handles_deletes_and_seq_updates() {
        let profile = ChurnProfile {
            p_delete: 0.1,
            p_seq_update: 1.0,
            seq_len: (40, 60),
            ..ChurnProfile::standard(100, 11)
        };
        let releases = generate_releases(&profile, 2, "dat").unwrap();
        let plugin = Registry::builtin().get("dat").unwrap();
        let d = oracle_diff(
            &releases[0].bytes,
            &releases[1].bytes,
            plugin.as_ref(),
            &mask(&["seq"]),
        )
        .unwrap();
        assert_eq!(d.count(DiffClass::Deleted), 10);
        assert_eq!(d.count(DiffClass::Updated), 45);
        assert_eq!(d.count(DiffClass::Added), 5);
    }

    #[test]
    fn oracle_inverse_symmetry() {
        let m = mask(&["seq", "desc"]);
        let fwd = oracle_diff(fixtures::F0_R1, fixtures::F0_R2, &FastaParser, &m).unwrap();
        let rev = oracle_diff(fixtures::F0_R2, fixtures::F0_R1, &FastaParser, &m).unwrap();
        for (id, class) in &fwd.classes {
            let expected = match class {
                DiffClass::Added => DiffClass::Deleted,
                DiffClass::Deleted => DiffClass::Added,
                other => *other,
            };
            assert_eq!(rev.classes[id], expected, "id {id}");
        }
    }

    #[test]
    fn changed_cells_on_f0() {
        let old = full_parse(&FastaParser, fixtures::F0_R1).unwrap();
        let new = full_parse(&FastaParser, fixtures::F0_R2).unwrap();
        // B: one field; D: two fields.
        assert_eq!(oracle_changed_cells(&old, &new), 3);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dup = b">A one\nACGT\n>A two\nGGGG\n";
        assert!(matches!(
            full_parse(&FastaParser, dup),
            Err(Error::DuplicateId { .. })
        ));
    }

    #[test]
    fn profile_validation() {
        let mut p = ChurnProfile::standard(10, 1);
        p.p_update = 0.7;
        p.p_delete = 0.4;
        assert!(p.validate().is_err());
        p = ChurnProfile::standard(10, 1);
        p.p_new = 1.5;
        assert!(p.validate().is_err());
        assert!(ChurnProfile::standard(10, 1).validate().is_ok());
    }
}
