//! TREC qrels (`qid 0 docid grade`) and run (`qid Q0 docid rank score tag`) files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_BINARIZATION: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Qrels {
    /// query id -> doc id -> grade
    pub judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn grade(&self, qid: &str, doc: &str) -> Option<u32> {
        self.judgments.get(qid)?.get(doc).copied()
    }

    pub fn insert(&mut self, qid: &str, doc: &str, grade: u32) -> Option<u32> {
        self.judgments
            .entry(qid.to_string())
            .or_default()
            .insert(doc.to_string(), grade)
    }

    pub fn query(&self, qid: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(qid)
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
}

/// Per query, entries in rank order (index 0 is rank 1).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunFile {
    pub tag: String,
    pub queries: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            queries: BTreeMap::new(),
        }
    }

    pub fn ranking(&self, qid: &str) -> Option<&[RunEntry]> {
        self.queries.get(qid).map(Vec::as_slice)
    }
}

fn fields(line: &str) -> Vec<&str> {
    line.split_whitespace().collect()
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses qrels, returning the line numbers of duplicate judgments (last wins).
pub fn parse_qrels_reporting(text: &str) -> Result<(Qrels, Vec<usize>)> {
    let mut qrels = Qrels::default();
    let mut duplicates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f = fields(line);
        if f.is_empty() {
            continue;
        }
        let [qid, _iter, doc, grade] = f[..] else {
            return Err(parse_err(n, format!("expected 4 fields, found {}", f.len())));
        };
        let grade: u32 = grade
            .parse()
            .map_err(|_| parse_err(n, format!("grade {grade:?} is not a non-negative integer")))?;
        if let Some(prev) = qrels.insert(qid, doc, grade) {
            log::warn!("qrels line {n}: duplicate judgment for ({qid}, {doc}); {prev} replaced by {grade}");
            duplicates.push(n);
        }
    }
    Ok((qrels, duplicates))
}

pub fn parse_qrels(text: &str) -> Result<Qrels> {
    parse_qrels_reporting(text).map(|(q, _)| q)
}

pub fn read_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qrels(&text)
}

pub fn parse_run(text: &str) -> Result<RunFile> {
    let mut ranked: BTreeMap<String, Vec<(usize, usize, RunEntry)>> = BTreeMap::new();
    let mut tag: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let f = fields(line);
        if f.is_empty() {
            continue;
        }
        let [qid, _q0, doc, rank, score, t] = f[..] else {
            return Err(parse_err(n, format!("expected 6 fields, found {}", f.len())));
        };
        let rank: usize = rank
            .parse()
            .ok()
            .filter(|&r| r >= 1)
            .ok_or_else(|| parse_err(n, format!("rank {rank:?} is not a positive integer")))?;
        let score: f64 = score
            .parse()
            .map_err(|_| parse_err(n, format!("score {score:?} is not a number")))?;
        match &tag {
            None => tag = Some(t.to_string()),
            Some(prev) if prev != t => {
                return Err(parse_err(n, format!("run tag {t:?} differs from {prev:?}")))
            }
            _ => {}
        }
        ranked.entry(qid.to_string()).or_default().push((
            rank,
            n,
            RunEntry {
                doc_id: doc.to_string(),
                score,
            },
        ));
    }
    let mut run = RunFile::new(tag.unwrap_or_default());
    for (qid, mut entries) in ranked {
        entries.sort_by_key(|&(r, _, _)| r);
        let mut seen = std::collections::HashSet::new();
        for (expected, (rank, line, e)) in entries.iter().enumerate() {
            if *rank != expected + 1 {
                return Err(parse_err(
                    *line,
                    format!("query {qid}: ranks are not contiguous from 1 (found {rank} where {} expected)", expected + 1),
                ));
            }
            if !seen.insert(e.doc_id.as_str()) {
                return Err(parse_err(*line, format!("query {qid}: document {} appears twice", e.doc_id)));
            }
        }
        run.queries
            .insert(qid, entries.into_iter().map(|(_, _, e)| e).collect());
    }
    Ok(run)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run(&text)
}

/// Scores use the shortest representation that parses back to the same value.
pub fn format_run(run: &RunFile) -> String {
    let tag = if run.tag.is_empty() { "run" } else { &run.tag };
    let mut out = String::new();
    for (qid, entries) in &run.queries {
        for (i, e) in entries.iter().enumerate() {
            let _ = writeln!(out, "{qid} Q0 {} {} {:?} {tag}", e.doc_id, i + 1, e.score);
        }
    }
    out
}

pub fn write_run(run: &RunFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_run(run)).map_err(|e| Error::io(path, e))
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (qid, docs) in &qrels.judgments {
        for (doc, g) in docs {
            let _ = writeln!(out, "{qid} 0 {doc} {g}");
        }
    }
    out
}
