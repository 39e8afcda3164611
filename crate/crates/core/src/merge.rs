//! Output merging for incremental computation: combine a tool's partial
//! output with its previous full output, discard records invalidated by
//! deletions, and rescale e-values that were computed against a partial
//! database.
//!
//! The e-value of a hit is linear in database size, so a record computed
//! against `partial_db_letters` residues is rescaled by
//! `full_db_letters / partial_db_letters` to be comparable with records
//! computed against the full database. Rescaling by a positive scalar
//! never changes the ranking of records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::catalog::Catalog;
use crate::error::{Error, Result};
use crate::genfile::{self, GenerateOptions};
use crate::model::{EntryId, FieldMap, GenerationKind, GenerationSpec};
use crate::plugins::{format_evalue, BlastTabParser, ParserPlugin, Registry};
use crate::store::Store;

/// Database-size rescaling factors for e-values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EValueCorrection {
    /// Total residues in the full meta-database the merged output should
    /// be comparable against.
    pub full_db_letters: u64,
    /// Residues in the partial (incremental) meta-database the tool ran on.
    pub partial_db_letters: u64,
}

impl EValueCorrection {
    pub fn validate(&self) -> Result<()> {
        if self.full_db_letters == 0 || self.partial_db_letters == 0 {
            return Err(Error::Plan("correction letters must both be positive".into()));
        }
        if self.partial_db_letters > self.full_db_letters {
            return Err(Error::Plan(format!(
                "partial database ({}) larger than full database ({})",
                self.partial_db_letters, self.full_db_letters
            )));
        }
        Ok(())
    }

    fn ratio(&self) -> f64 {
        self.full_db_letters as f64 / self.partial_db_letters as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStrategy {
    Append,
    AppendWithCorrection,
}

/// Instructions for one merge.
#[derive(Debug, Clone)]
pub struct MergePlan {
    pub format: String,
    pub strategy: MergeStrategy,
    /// Entries deleted in the increment window; previous records whose
    /// subject matches are discarded.
    pub deletions: Vec<EntryId>,
    /// Applied to partial records under AppendWithCorrection.
    pub correction: Option<EValueCorrection>,
    /// Optional rescale of previous records from the database size they
    /// were originally computed against to `full_db_letters`, so a chain
    /// of incremental merges stays on one scale. Plans built by
    /// `build_merge_plan` carry this; hand-built plans may leave previous
    /// records untouched.
    pub previous_correction: Option<EValueCorrection>,
}

impl MergePlan {
    pub fn append(format: &str, deletions: Vec<EntryId>) -> MergePlan {
        MergePlan { format: format.into(), strategy: MergeStrategy::Append, deletions, correction: None, previous_correction: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            MergeStrategy::Append => Ok(()),
            MergeStrategy::AppendWithCorrection => match &self.correction {
                None => Err(Error::Plan("correction required for APPEND_WITH_CORRECTION".into())),
                Some(c) => {
                    c.validate()?;
                    if let Some(p) = &self.previous_correction {
                        p.validate()?;
                    }
                    Ok(())
                }
            },
        }
    }
}

/// Rescale one e-value by the database-size ratio. Serialization keeps
/// full precision; rounding happens only when records are written out.
pub fn correct_evalue(e: f64, corr: &EValueCorrection) -> Result<f64> {
    if !e.is_finite() || e < 0.0 {
        return Err(Error::validation(format!("e-value {e} is not a non-negative finite number")));
    }
    corr.validate()?;
    Ok(e * corr.ratio())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeStats {
    pub records: u64,
    pub from_previous: u64,
    pub from_partial: u64,
    pub dropped_deleted: u64,
    /// Records present in both inputs where the newer computation won.
    pub superseded: u64,
    pub corrected: u64,
}

/// Merge `partial` into `previous`, writing the combined output to `out`.
///
/// Records sharing an identity key appear once, the partial side winning;
/// output is sorted by identity key. Both inputs must parse under the
/// plan's format.
pub fn merge_outputs(
    previous: &Path,
    partial: &Path,
    plan: &MergePlan,
    registry: &Registry,
    out: &Path,
) -> Result<MergeStats> {
    plan.validate()?;
    let plugin = registry.get(&plan.format)?;
    let prev_records = parse_records(plugin.as_ref(), previous)?;
    let part_records = parse_records(plugin.as_ref(), partial)?;
    let deleted: BTreeSet<&[u8]> = plan.deletions.iter().map(|d| d.as_bytes()).collect();
    let subject_field = (plan.format == "blast-tab").then_some(BlastTabParser::SUBJECT_FIELD);

    let mut stats = MergeStats::default();
    let mut merged: BTreeMap<EntryId, FieldMap> = BTreeMap::new();

    for (id, mut fields) in prev_records {
        if is_deleted(&id, &fields, subject_field, &deleted) {
            stats.dropped_deleted += 1;
            continue;
        }
        if let (MergeStrategy::AppendWithCorrection, Some(corr)) =
            (plan.strategy, &plan.previous_correction)
        {
            apply_correction(&mut fields, corr)?;
        }
        merged.insert(id, fields);
        stats.from_previous += 1;
    }
    for (id, mut fields) in part_records {
        if is_deleted(&id, &fields, subject_field, &deleted) {
            stats.dropped_deleted += 1;
            continue;
        }
        if let (MergeStrategy::AppendWithCorrection, Some(corr)) = (plan.strategy, &plan.correction)
        {
            apply_correction(&mut fields, corr)?;
            stats.corrected += 1;
        }
        if merged.insert(id, fields).is_some() {
            stats.superseded += 1;
            stats.from_previous -= 1;
        }
        stats.from_partial += 1;
    }

    let mut bytes = Vec::new();
    for (id, fields) in &merged {
        bytes.extend_from_slice(&plugin.export_entry(id, fields, &plan.format)?);
    }
    stats.records = merged.len() as u64;
    std::fs::write(out, &bytes)?;
    Ok(stats)
}

fn is_deleted(
    id: &EntryId,
    fields: &FieldMap,
    subject_field: Option<&str>,
    deleted: &BTreeSet<&[u8]>,
) -> bool {
    if deleted.is_empty() {
        return false;
    }
    match subject_field {
        Some(f) => fields.get(f).map(|v| deleted.contains(v.as_slice())).unwrap_or(false),
        None => deleted.contains(id.as_bytes()),
    }
}

fn apply_correction(fields: &mut FieldMap, corr: &EValueCorrection) -> Result<()> {
    if let Some(raw) = fields.get("evalue") {
        let text = std::str::from_utf8(raw)
            .map_err(|_| Error::validation("evalue field is not utf-8"))?;
        let e: f64 = text
            .parse()
            .map_err(|_| Error::validation(format!("evalue {text:?} is not a number")))?;
        let corrected = correct_evalue(e, corr)?;
        fields.insert("evalue".into(), format_evalue(corrected));
    }
    Ok(())
}

fn parse_records(plugin: &dyn ParserPlugin, path: &Path) -> Result<BTreeMap<EntryId, FieldMap>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Merge {
        file: path.to_path_buf(),
        offset: 0,
        reason: format!("cannot open: {e}"),
    })?;
    let mut out = BTreeMap::new();
    let bounds = plugin.entry_bounds(Box::new(std::io::BufReader::new(file)));
    for raw in bounds {
        let raw = raw.map_err(|e| merge_error(path, &e))?;
        let offset = raw.offset;
        let entry = plugin.split_entry(&raw.bytes).map_err(|e| Error::Merge {
            file: path.to_path_buf(),
            offset,
            reason: e.to_string(),
        })?;
        // Same identity twice within one file: keep the later record, the
        // file's own newer computation.
        out.insert(entry.id, entry.fields);
    }
    Ok(out)
}

fn merge_error(path: &Path, e: &Error) -> Error {
    let offset = match e {
        Error::Parse { offset, .. } => *offset,
        _ => 0,
    };
    Error::Merge { file: path.to_path_buf(), offset, reason: e.to_string() }
}

/// Wire an increment artifact into a merge plan: deletions from the
/// sidecar, correction letters from artifact metadata and store scans.
pub fn build_merge_plan(
    store: &Store,
    registry: &Registry,
    catalog: &Catalog,
    increment_spec: &GenerationSpec,
    merge_format: &str,
) -> Result<MergePlan> {
    if increment_spec.kind != GenerationKind::Increment {
        return Err(Error::Plan("merge plans are defined for increments only".into()));
    }
    let artifact = genfile::generate(
        store,
        registry,
        catalog,
        increment_spec,
        &GenerateOptions::default(),
    )?;
    let correction_applies = merge_format == "blast-tab" && artifact.letters > 0;
    if !correction_applies {
        return Ok(MergePlan::append(merge_format, artifact.deletions));
    }
    let full = genfile::release_letters(store, registry, &increment_spec.table, increment_spec.to_seq)?;
    let previous =
        genfile::release_letters(store, registry, &increment_spec.table, increment_spec.from_seq)?;
    Ok(MergePlan {
        format: merge_format.to_string(),
        strategy: MergeStrategy::AppendWithCorrection,
        deletions: artifact.deletions,
        correction: Some(EValueCorrection {
            full_db_letters: full,
            partial_db_letters: artifact.letters,
        }),
        previous_correction: (previous > 0 && previous != full).then_some(EValueCorrection {
            full_db_letters: full,
            partial_db_letters: previous,
        }),
    })
}

/// Output path for merged results when the caller wants it persisted in
/// the store; the blob store keeps every merged version.
pub fn persist_merged(store: &Store, name: &str, path: &Path) -> Result<(u64, PathBuf)> {
    let bytes = std::fs::read(path)?;
    let version = store.put_blob(name, &bytes)?;
    Ok((version, path.to_path_buf()))
}
