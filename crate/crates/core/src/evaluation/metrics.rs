use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::trec::{Qrels, RunFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCutoffs {
    pub ndcg: usize,
    pub mrr: usize,
    pub recall: usize,
    /// Grades at or above this count as relevant for MRR and recall.
    pub binarization: u32,
}

impl Default for MetricCutoffs {
    fn default() -> Self {
        Self {
            ndcg: 10,
            mrr: 10,
            recall: 1000,
            binarization: super::trec::DEFAULT_BINARIZATION,
        }
    }
}

/// `None` marks a metric that is undefined for the query (no ideal gain or no
/// relevant document) and therefore left out of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub ndcg: Option<f64>,
    pub mrr: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanMetric {
    pub value: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cutoffs: MetricCutoffs,
    pub ndcg: MeanMetric,
    pub mrr: MeanMetric,
    pub recall: MeanMetric,
    pub per_query: BTreeMap<String, QueryMetrics>,
    /// Run queries without any judgments.
    pub skipped_unjudged: Vec<String>,
    /// Judged queries without a relevant document.
    pub no_relevant: Vec<String>,
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(rank: usize) -> f64 {
    ((rank + 1) as f64).log2()
}

/// nDCG, MRR and recall for one ranked list of doc ids.
pub fn query_metrics<'a>(
    ranking: impl IntoIterator<Item = &'a str>,
    judged: &BTreeMap<String, u32>,
    cut: &MetricCutoffs,
) -> QueryMetrics {
    let ranking: Vec<&str> = ranking.into_iter().collect();
    let grade = |d: &str| judged.get(d).copied().unwrap_or(0);

    let dcg: f64 = ranking
        .iter()
        .take(cut.ndcg)
        .enumerate()
        .map(|(i, d)| gain(grade(d)) / discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(cut.ndcg)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i + 1))
        .sum();

    let relevant = judged.values().filter(|&&g| g >= cut.binarization).count();
    let is_rel = |d: &str| grade(d) >= cut.binarization;
    let mrr = ranking
        .iter()
        .take(cut.mrr)
        .position(|d| is_rel(d))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64);
    let found = ranking.iter().take(cut.recall).filter(|d| is_rel(d)).count();

    QueryMetrics {
        ndcg: (idcg > 0.0).then(|| dcg / idcg),
        mrr: (relevant > 0).then_some(mrr),
        recall: (relevant > 0).then(|| found as f64 / relevant as f64),
    }
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> MeanMetric {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    MeanMetric {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        queries: n,
    }
}

pub fn compute_metrics(run: &RunFile, qrels: &Qrels, cut: MetricCutoffs) -> MetricsReport {
    let mut per_query = BTreeMap::new();
    let mut skipped_unjudged = Vec::new();
    let mut no_relevant = Vec::new();
    for (qid, entries) in &run.queries {
        let Some(judged) = qrels.query(qid) else {
            log::warn!("query {qid} has no judgments; skipped");
            skipped_unjudged.push(qid.clone());
            continue;
        };
        let m = query_metrics(entries.iter().map(|e| e.doc_id.as_str()), judged, &cut);
        if m.recall.is_none() {
            no_relevant.push(qid.clone());
        }
        per_query.insert(qid.clone(), m);
    }
    MetricsReport {
        cutoffs: cut,
        ndcg: mean(per_query.values().map(|m| m.ndcg)),
        mrr: mean(per_query.values().map(|m| m.mrr)),
        recall: mean(per_query.values().map(|m| m.recall)),
        per_query,
        skipped_unjudged,
        no_relevant,
    }
}

/// Drops unjudged documents and closes the rank gaps, keeping relative order.
/// Queries left without documents are removed.
pub fn condense_judged_only(run: &RunFile, qrels: &Qrels) -> RunFile {
    let mut out = RunFile::new(run.tag.clone());
    for (qid, entries) in &run.queries {
        let Some(judged) = qrels.query(qid) else {
            continue;
        };
        let kept: Vec<_> = entries
            .iter()
            .filter(|e| judged.contains_key(&e.doc_id))
            .cloned()
            .collect();
        if !kept.is_empty() {
            out.queries.insert(qid.clone(), kept);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::trec::{parse_qrels, parse_run};

    fn run_of(lines: &[(&str, &[&str])]) -> RunFile {
        let mut text = String::new();
        for (q, docs) in lines {
            for (i, d) in docs.iter().enumerate() {
                text.push_str(&format!("{q} Q0 {d} {} {} t\n", i + 1, 100 - i));
            }
        }
        parse_run(&text).unwrap()
    }

    #[test]
    fn single_relevant_at_top() {
        let q = parse_qrels("q 0 a 2\n").unwrap();
        let r = compute_metrics(&run_of(&[("q", &["a", "b"])]), &q, MetricCutoffs::default());
        assert_eq!((r.ndcg.value, r.mrr.value, r.recall.value), (1.0, 1.0, 1.0));
    }

    #[test]
    fn relevant_at_rank_two() {
        let q = parse_qrels("q 0 a 2\n").unwrap();
        let r = compute_metrics(&run_of(&[("q", &["b", "a"])]), &q, MetricCutoffs::default());
        assert_eq!(r.mrr.value, 0.5);
        assert!((r.ndcg.value - 1.0 / 3f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn below_binarization_is_not_relevant() {
        let q = parse_qrels("q 0 a 1\nq 0 b 0\n").unwrap();
        let r = compute_metrics(&run_of(&[("q", &["a"])]), &q, MetricCutoffs::default());
        assert_eq!(r.per_query["q"].mrr, None);
        assert_eq!(r.per_query["q"].ndcg, Some(1.0));
        assert_eq!(r.no_relevant, ["q"]);
        assert_eq!(r.mrr.queries, 0);
    }

    #[test]
    fn unjudged_query_skipped() {
        let q = parse_qrels("q 0 a 2\n").unwrap();
        let r = compute_metrics(&run_of(&[("q", &["a"]), ("x", &["a"])]), &q, MetricCutoffs::default());
        assert_eq!(r.skipped_unjudged, ["x"]);
        assert_eq!(r.ndcg.queries, 1);
    }

    #[test]
    fn condense_examples() {
        let q = parse_qrels("q 0 a 2\nq 0 c 0\n").unwrap();
        let run = run_of(&[("q", &["a", "b", "c"])]);
        let c = condense_judged_only(&run, &q);
        let ids: Vec<_> = c.queries["q"].iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);
        assert_eq!(condense_judged_only(&c, &q), c);

        let all = run_of(&[("q", &["c", "a"])]);
        assert_eq!(condense_judged_only(&all, &q), all);
    }

    #[test]
    fn condensing_lifts_relevant_docs() {
        let q = parse_qrels("q 0 r 3\nq 0 n 0\n").unwrap();
        let run = run_of(&[("q", &["u1", "u2", "u3", "r", "n"])]);
        let cut = MetricCutoffs::default();
        let raw = compute_metrics(&run, &q, cut);
        let cond = compute_metrics(&condense_judged_only(&run, &q), &q, cut);
        assert!(cond.ndcg.value > raw.ndcg.value);
        assert!(cond.mrr.value > raw.mrr.value);
        assert_eq!(cond.mrr.value, 1.0);
    }
}
