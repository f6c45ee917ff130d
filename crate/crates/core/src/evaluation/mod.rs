//! Effectiveness metrics over TREC files and effect-size meta-analysis.

mod meta;
mod metrics;
mod trec;

pub use meta::{
    dl_random_effects, pool, smd_effect, ForestExport, ForestRow, MetaInput, MetaResult,
    StudyEffect, StudyInput, Z_95,
};
pub use metrics::{
    compute_metrics, condense_judged_only, query_metrics, MeanMetric, MetricCutoffs,
    MetricsReport, QueryMetrics,
};
pub use trec::{
    format_qrels, format_run, parse_qrels, parse_qrels_reporting, parse_run, read_qrels,
    read_run, write_run, Qrels, RunEntry, RunFile, DEFAULT_BINARIZATION,
};

use crate::retrieve::RankedList;

/// Appends a ranked list as one query of a run.
pub fn add_to_run(run: &mut RunFile, qid: &str, list: &RankedList) {
    run.queries.insert(
        qid.to_string(),
        list.entries
            .iter()
            .map(|e| RunEntry {
                doc_id: e.doc_id.clone(),
                score: e.breakdown.s_total,
            })
            .collect(),
    );
}
