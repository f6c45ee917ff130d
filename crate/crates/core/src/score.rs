//! Query/passage scoring: CLS dot product, max-then-sum over word vectors
//! (optionally restricted to equal word hashes) and the learned mix of the two.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::reduce::{sigmoid, EncodedText, ReductionHeads, TextKind, WordEntry};
use crate::{Error, Result};

/// What one query word contributed to the token score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub query_stem: String,
    /// Index into the passage's word list of the best match.
    pub passage_index: Option<usize>,
    pub matched_stem: Option<String>,
    pub contribution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub s_cls: f64,
    pub s_token: f64,
    pub sigma_gamma: f64,
    pub s_total: f64,
    pub attributions: Vec<Attribution>,
}

pub fn score_cls(q: &EncodedText, p: &EncodedText) -> Result<f64> {
    if q.cls.len() != p.cls.len() {
        return Err(Error::Dimension {
            operand: "passage cls",
            expected: q.cls.len(),
            actual: p.cls.len(),
        });
    }
    Ok(dot(&q.cls, &p.cls))
}

/// Sum over query words of the best dot product with any passage word.
/// Ties go to the lowest passage index.
pub fn score_tokens_maxsum(q: &EncodedText, p: &EncodedText) -> (f64, Vec<Attribution>) {
    max_then_sum(q, p, |_, _| true)
}

/// As [`score_tokens_maxsum`], with each max restricted to passage words of equal hash.
/// Query words without an equal-hash partner contribute 0.
pub fn score_tokens_exact_match(q: &EncodedText, p: &EncodedText) -> (f64, Vec<Attribution>) {
    max_then_sum(q, p, |qw, pw| qw.hash == pw.hash)
}

fn max_then_sum(
    q: &EncodedText,
    p: &EncodedText,
    allowed: impl Fn(&WordEntry, &WordEntry) -> bool,
) -> (f64, Vec<Attribution>) {
    let mut total = 0f64;
    let mut attributions = Vec::with_capacity(q.words.len());
    for qw in &q.words {
        let mut best: Option<(usize, f64)> = None;
        for (i, pw) in p.words.iter().enumerate() {
            if !allowed(qw, pw) {
                continue;
            }
            let s = dot(&qw.vector, &pw.vector);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        let (passage_index, contribution) = match best {
            Some((i, s)) => (Some(i), s),
            None => (None, 0.0),
        };
        total += contribution;
        attributions.push(Attribution {
            query_stem: qw.stem.clone(),
            passage_index,
            matched_stem: passage_index.map(|i| p.words[i].stem.clone()),
            contribution,
        });
    }
    (total, attributions)
}

/// `(sigma(gamma)·s_cls + (1 − sigma(gamma))·s_token, sigma(gamma))`.
pub fn aggregate_score(s_cls: f64, s_token: f64, gamma: f64) -> (f64, f64) {
    let sg = sigmoid(gamma);
    (sg * s_cls + (1.0 - sg) * s_token, sg)
}

pub fn score_pair(
    q: &EncodedText,
    p: &EncodedText,
    heads: &ReductionHeads,
    em: bool,
) -> Result<ScoreBreakdown> {
    if q.kind != TextKind::Query || p.kind != TextKind::Passage {
        return Err(Error::InvalidArgument(
            "score_pair expects (query, passage)".into(),
        ));
    }
    if let (Some(qw), Some(pw)) = (q.words.first(), p.words.first()) {
        if qw.vector.len() != pw.vector.len() {
            return Err(Error::Dimension {
                operand: "passage word vector",
                expected: qw.vector.len(),
                actual: pw.vector.len(),
            });
        }
    }
    let s_cls = score_cls(q, p)?;
    let (s_token, attributions) = if em {
        score_tokens_exact_match(q, p)
    } else {
        score_tokens_maxsum(q, p)
    };
    let (s_total, sigma_gamma) = aggregate_score(s_cls, s_token, f64::from(heads.gamma));
    Ok(ScoreBreakdown {
        s_cls,
        s_token,
        sigma_gamma,
        s_total,
        attributions,
    })
}
