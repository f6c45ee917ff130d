//! Query-time workflows over an [`IndexSet`].
//!
//! | workflow          | candidates from         | scored with            |
//! |-------------------|-------------------------|------------------------|
//! | `HYBRID`          | dense ∪ inverted index  | full aggregated score  |
//! | `SPARSE_THEN_CLS` | inverted index          | full aggregated score  |
//! | `DENSE_THEN_TOKEN`| dense CLS index         | full aggregated score  |
//! | `DENSE_ONLY`      | dense CLS index         | CLS score alone        |
//! | `SPARSE_ONLY`     | inverted index          | token score alone      |

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::index::IndexSet;
use crate::reduce::{encode_text, EncodedText, ReductionHeads, TextKind};
use crate::score::{score_pair, score_tokens_exact_match, ScoreBreakdown};
use crate::tokenizer::tokenize;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowKind {
    Hybrid,
    SparseThenCls,
    #[default]
    DenseThenToken,
    DenseOnly,
    SparseOnly,
}

impl WorkflowKind {
    pub const ALL: [WorkflowKind; 5] = [
        WorkflowKind::Hybrid,
        WorkflowKind::SparseThenCls,
        WorkflowKind::DenseThenToken,
        WorkflowKind::DenseOnly,
        WorkflowKind::SparseOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkflowKind::Hybrid => "HYBRID",
            WorkflowKind::SparseThenCls => "SPARSE_THEN_CLS",
            WorkflowKind::DenseThenToken => "DENSE_THEN_TOKEN",
            WorkflowKind::DenseOnly => "DENSE_ONLY",
            WorkflowKind::SparseOnly => "SPARSE_ONLY",
        }
    }

    /// Circled-numeral label following the results-table numbering.
    pub fn alias(self) -> &'static str {
        match self {
            WorkflowKind::Hybrid => "①",
            WorkflowKind::SparseThenCls => "②",
            WorkflowKind::DenseThenToken => "③",
            WorkflowKind::DenseOnly => "④",
            WorkflowKind::SparseOnly => "⑤",
        }
    }

    pub fn requires_em(self) -> bool {
        matches!(
            self,
            WorkflowKind::Hybrid | WorkflowKind::SparseThenCls | WorkflowKind::SparseOnly
        )
    }
}

impl fmt::Display for WorkflowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorkflowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        WorkflowKind::ALL
            .into_iter()
            .find(|w| w.name() == norm || w.alias() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown workflow {s:?}")))
    }
}

pub fn default_k_cand(k: usize) -> usize {
    (10 * k).max(1000)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchParams {
    pub workflow: WorkflowKind,
    pub k: usize,
    pub k_cand: usize,
}

impl SearchParams {
    pub fn new(workflow: WorkflowKind, k: usize) -> Self {
        Self {
            workflow,
            k,
            k_cand: default_k_cand(k),
        }
    }

    pub fn with_k_cand(mut self, k_cand: usize) -> Self {
        self.k_cand = k_cand;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub ordinal: u32,
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub workflow: WorkflowKind,
    pub candidate_count: usize,
    pub entries: Vec<RankedEntry>,
}

/// Tokenizes and encodes a query with the index's vocabulary and settings.
pub fn encode_query(
    index: &IndexSet,
    heads: &ReductionHeads,
    encoder: &dyn Encoder,
    key: &str,
    text: &str,
) -> Result<EncodedText> {
    let t = tokenize(text, &index.vocab, index.manifest.stemming);
    let e = encoder.encode(key, &t)?;
    encode_text(&t, &e, heads, TextKind::Query, index.manifest.reduce_config())
}

pub fn search(
    q_text: &str,
    index: &IndexSet,
    heads: &ReductionHeads,
    encoder: &dyn Encoder,
    params: SearchParams,
) -> Result<RankedList> {
    let q = encode_query(index, heads, encoder, q_text, q_text)?;
    search_encoded(&q, index, heads, params)
}

pub fn search_encoded(
    q: &EncodedText,
    index: &IndexSet,
    heads: &ReductionHeads,
    params: SearchParams,
) -> Result<RankedList> {
    let SearchParams { workflow, k, k_cand } = params;
    if k == 0 || k > k_cand {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= k_cand, got k={k}, k_cand={k_cand}"
        )));
    }
    index.manifest.check_heads(heads)?;
    if workflow.requires_em() && !index.manifest.em_enabled {
        return Err(Error::SparseRequiresExactMatch);
    }
    let sigma_gamma = heads.sigma_gamma();

    match workflow {
        WorkflowKind::DenseOnly => {
            let hits = index.dense_topk(&q.cls, k)?;
            let entries = hits
                .into_iter()
                .map(|(ord, s)| RankedEntry {
                    doc_id: index.ids[ord as usize].clone(),
                    ordinal: ord,
                    breakdown: ScoreBreakdown {
                        s_cls: s,
                        s_token: 0.0,
                        sigma_gamma,
                        s_total: s,
                        attributions: Vec::new(),
                    },
                })
                .collect::<Vec<_>>();
            Ok(RankedList {
                workflow,
                candidate_count: entries.len(),
                entries,
            })
        }
        WorkflowKind::SparseOnly => {
            let hits = index.sparse_topk(q, k)?;
            let entries = hits
                .into_iter()
                .map(|(ord, s)| {
                    let (_, attributions) =
                        score_tokens_exact_match(q, &index.fetch_ordinal(ord).to_encoded());
                    RankedEntry {
                        doc_id: index.ids[ord as usize].clone(),
                        ordinal: ord,
                        breakdown: ScoreBreakdown {
                            s_cls: 0.0,
                            s_token: s,
                            sigma_gamma,
                            s_total: s,
                            attributions,
                        },
                    }
                })
                .collect::<Vec<_>>();
            Ok(RankedList {
                workflow,
                candidate_count: entries.len(),
                entries,
            })
        }
        WorkflowKind::DenseThenToken => {
            let cands = index.dense_topk(&q.cls, k_cand)?;
            refine(q, index, heads, ordinals(&cands), k, workflow)
        }
        WorkflowKind::SparseThenCls => {
            let cands = index.sparse_topk(q, k_cand)?;
            refine(q, index, heads, ordinals(&cands), k, workflow)
        }
        WorkflowKind::Hybrid => {
            let dense = index.dense_topk(&q.cls, k_cand)?;
            let sparse = index.sparse_topk(q, k_cand)?;
            merge_hybrid(q, &dense, &sparse, index, heads, k)
        }
    }
}

fn ordinals(hits: &[(u32, f64)]) -> Vec<u32> {
    hits.iter().map(|&(o, _)| o).collect()
}

/// Unions both candidate lists and scores every member with both components.
pub fn merge_hybrid(
    q: &EncodedText,
    dense: &[(u32, f64)],
    sparse: &[(u32, f64)],
    index: &IndexSet,
    heads: &ReductionHeads,
    k: usize,
) -> Result<RankedList> {
    let union: BTreeSet<u32> = dense.iter().chain(sparse).map(|&(o, _)| o).collect();
    refine(q, index, heads, union.into_iter().collect(), k, WorkflowKind::Hybrid)
}

/// Scores candidates with the full aggregated score and keeps the best `k`.
fn refine(
    q: &EncodedText,
    index: &IndexSet,
    heads: &ReductionHeads,
    candidates: Vec<u32>,
    k: usize,
    workflow: WorkflowKind,
) -> Result<RankedList> {
    let em = index.manifest.em_enabled;
    let candidate_count = candidates.len();
    let mut entries = candidates
        .into_par_iter()
        .map(|ord| {
            let p = index.fetch_ordinal(ord).to_encoded();
            Ok(RankedEntry {
                doc_id: index.ids[ord as usize].clone(),
                ordinal: ord,
                breakdown: score_pair(q, &p, heads, em)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_entries(&mut entries);
    entries.truncate(k);
    Ok(RankedList {
        workflow,
        candidate_count,
        entries,
    })
}

/// `s_total` descending, ties to the lower ordinal.
pub fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.breakdown
            .s_total
            .total_cmp(&a.breakdown.s_total)
            .then(a.ordinal.cmp(&b.ordinal))
    });
}
