//! One handle over a store root: store, parser registry, cache and
//! provenance, with the operations workflow managers and data feeders
//! call.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::catalog::{Catalog, EventKind, ProvenanceEvent, ProvenanceFilter};
use crate::error::Result;
use crate::genfile::{self, GenerateOptions, GeneratedArtifact};
use crate::ingest::{self, IngestOptions, IngestReport};
use crate::merge::{self, MergePlan, MergeStats};
use crate::model::{FieldMask, GenerationSpec};
use crate::plugins::Registry;
use crate::store::{Store, StoreOptions, TableHandle};

pub struct Engine {
    store: Store,
    registry: Registry,
    catalog: Catalog,
}

impl Engine {
    pub fn open(root: impl Into<PathBuf>) -> Result<Engine> {
        Engine::open_with(root, StoreOptions::default(), Registry::builtin())
    }

    pub fn open_with(
        root: impl Into<PathBuf>,
        options: StoreOptions,
        registry: Registry,
    ) -> Result<Engine> {
        let root = root.into();
        let store = Store::open_with(&root, options)?;
        let catalog = Catalog::open(&root)?;
        Ok(Engine { store, registry, catalog })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn root(&self) -> &Path {
        self.store.root()
    }

    pub fn register_table(
        &self,
        name: &str,
        format_id: &str,
        fields: Option<Vec<String>>,
    ) -> Result<TableHandle> {
        ingest::register_table(&self.store, &self.registry, name, format_id, fields)
    }

    /// Ingest one release file; records an INGEST provenance event.
    pub fn add_release(
        &self,
        table: &str,
        source: impl Read,
        label: &str,
        run_id: Option<&str>,
        workers: usize,
    ) -> Result<IngestReport> {
        let report = ingest::ingest_with_options(
            &self.store,
            &self.registry,
            table,
            source,
            label,
            &IngestOptions { workers, ..IngestOptions::default() },
        )?;
        self.catalog.record(
            EventKind::Ingest,
            table,
            &report.seq.to_string(),
            run_id,
            &format!(
                "label={} added={} updated={} unchanged={} deleted={} cells={}",
                report.label,
                report.added,
                report.updated,
                report.unchanged,
                report.deleted,
                report.cells_written
            ),
        )?;
        Ok(report)
    }

    pub fn generate(&self, spec: &GenerationSpec, options: &GenerateOptions) -> Result<GeneratedArtifact> {
        genfile::generate(&self.store, &self.registry, &self.catalog, spec, options)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn get_version(
        &self,
        table: &str,
        to_seq: u64,
        mask: FieldMask,
        format: &str,
        splits: u32,
        options: &GenerateOptions,
    ) -> Result<GeneratedArtifact> {
        genfile::get_version(
            &self.store, &self.registry, &self.catalog, table, to_seq, mask, format, splits, options,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn get_increment(
        &self,
        table: &str,
        from_seq: u64,
        to_seq: u64,
        mask: FieldMask,
        format: &str,
        splits: u32,
        options: &GenerateOptions,
    ) -> Result<GeneratedArtifact> {
        genfile::get_increment(
            &self.store,
            &self.registry,
            &self.catalog,
            table,
            from_seq,
            to_seq,
            mask,
            format,
            splits,
            options,
        )
    }

    pub fn resolve_version(&self, table: &str, label_or_seq: &str) -> Result<u64> {
        genfile::resolve_version(&self.store, table, label_or_seq)
    }

    pub fn build_merge_plan(
        &self,
        increment_spec: &GenerationSpec,
        merge_format: &str,
    ) -> Result<MergePlan> {
        merge::build_merge_plan(&self.store, &self.registry, &self.catalog, increment_spec, merge_format)
    }

    /// Merge a partial output into a previous output; records a MERGE
    /// provenance event.
    pub fn merge_outputs(
        &self,
        previous: &Path,
        partial: &Path,
        plan: &MergePlan,
        out: &Path,
        table: &str,
        run_id: Option<&str>,
    ) -> Result<MergeStats> {
        let stats = merge::merge_outputs(previous, partial, plan, &self.registry, out)?;
        self.catalog.record(
            EventKind::Merge,
            table,
            &out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            run_id,
            &format!(
                "records={} previous={} partial={} dropped_deleted={} superseded={} corrected={}",
                stats.records,
                stats.from_previous,
                stats.from_partial,
                stats.dropped_deleted,
                stats.superseded,
                stats.corrected
            ),
        )?;
        Ok(stats)
    }

    pub fn query_provenance(&self, filter: &ProvenanceFilter) -> Result<Vec<ProvenanceEvent>> {
        self.catalog.query(filter)
    }
}
