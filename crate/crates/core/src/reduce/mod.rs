//! Reduction of raw encoder output to a CLS vector plus one gated vector per
//! unique whole word.
//!
//! Passages: project -> mean per stem -> stopword gate -> drop/scale -> (uni) -> hash.
//! Queries skip the gate: every query word is kept with gate 1.

mod heads;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use heads::{sigmoid, HeadDims, ReductionHeads, INITIAL_GATE_BIAS};

use crate::encoder::EncoderOutput;
use crate::linalg::dot;
use crate::tokenizer::TokenizedText;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Query,
    Passage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEntry {
    pub hash: u32,
    pub stem: String,
    /// Already scaled by `gate` for passages.
    pub vector: Vec<f32>,
    pub gate: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedText {
    pub cls: Vec<f32>,
    pub words: Vec<WordEntry>,
    /// Stems the gate dropped. Always empty for queries.
    pub removed_stems: Vec<String>,
    pub kind: TextKind,
}

/// Inference-time reduction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReduceConfig {
    /// Words with `gate <= threshold` are dropped.
    pub threshold: f32,
    /// Clamp uni-layer outputs at zero.
    pub uni_nonneg: bool,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            uni_nonneg: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StemVector {
    pub stem: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedWord {
    pub stem: String,
    pub vector: Vec<f32>,
    pub gate: f32,
}

/// `cls = cls_raw · W_CLS`, `tokens[i] = token_raw[i] · W_t`.
pub fn project_2way(e: &EncoderOutput, heads: &ReductionHeads) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
    let enc = heads.dims().enc;
    e.check(enc, e.token_raw.len()).map_err(|err| match err {
        Error::Dimension {
            expected, actual, ..
        } => Error::Dimension {
            operand: "encoder output vs heads",
            expected,
            actual,
        },
        other => other,
    })?;
    let cls = heads.w_cls.left_mul(&e.cls_raw);
    let tokens = e.token_raw.iter().map(|t| heads.w_t.left_mul(t)).collect();
    Ok((cls, tokens))
}

/// Mean of the token vectors over every subword position of every occurrence of each stem.
pub fn aggregate_bow2(tokens: &[Vec<f32>], t: &TokenizedText) -> Result<Vec<StemVector>> {
    if tokens.len() != t.subword_ids.len() {
        return Err(Error::Dimension {
            operand: "token vectors vs subwords",
            expected: t.subword_ids.len(),
            actual: tokens.len(),
        });
    }
    let dim = tokens.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(t.unique_stems.len());
    for group in &t.unique_stems {
        let mut acc = vec![0f64; dim];
        for &p in &group.positions {
            for (a, &x) in acc.iter_mut().zip(&tokens[p]) {
                *a += f64::from(x);
            }
        }
        let n = group.positions.len() as f64;
        out.push(StemVector {
            stem: group.stem.clone(),
            vector: acc.into_iter().map(|a| (a / n) as f32).collect(),
        });
    }
    Ok(out)
}

/// `gate = max(0, vector · W_s + b_s)`; vectors are passed through untouched.
pub fn stopword_gate(words: Vec<StemVector>, heads: &ReductionHeads) -> Vec<GatedWord> {
    words
        .into_iter()
        .map(|w| {
            let z = dot(&w.vector, &heads.w_s) + f64::from(heads.b_s);
            GatedWord {
                stem: w.stem,
                vector: w.vector,
                gate: z.max(0.0) as f32,
            }
        })
        .collect()
}

/// Drops words with `gate <= threshold` and scales the rest by their gate.
pub fn apply_gate(words: Vec<GatedWord>, threshold: f32) -> (Vec<GatedWord>, Vec<String>) {
    let mut kept = Vec::with_capacity(words.len());
    let mut removed = Vec::new();
    for mut w in words {
        if w.gate <= threshold {
            removed.push(w.stem);
        } else {
            let g = w.gate;
            w.vector.iter_mut().for_each(|x| *x *= g);
            kept.push(w);
        }
    }
    (kept, removed)
}

/// `vector <- vector · W_u`, optionally clamped at zero.
pub fn uni_project(
    words: Vec<GatedWord>,
    heads: &ReductionHeads,
    nonneg: bool,
) -> Result<Vec<GatedWord>> {
    let w_u = heads.w_u.as_ref().ok_or(Error::UniDisabled)?;
    words
        .into_iter()
        .map(|mut w| {
            if w.vector.len() != w_u.rows() {
                return Err(Error::Dimension {
                    operand: "uni input",
                    expected: w_u.rows(),
                    actual: w.vector.len(),
                });
            }
            w.vector = w_u.left_mul(&w.vector);
            if nonneg {
                w.vector.iter_mut().for_each(|x| *x = x.max(0.0));
            }
            Ok(w)
        })
        .collect()
}

/// First four bytes of the sha256 digest of the stem, big-endian.
pub fn word_hash(stem: &str) -> u32 {
    let digest = Sha256::digest(stem.as_bytes());
    u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]])
}

pub fn encode_text(
    t: &TokenizedText,
    e: &EncoderOutput,
    heads: &ReductionHeads,
    kind: TextKind,
    config: ReduceConfig,
) -> Result<EncodedText> {
    let (cls, tokens) = project_2way(e, heads)?;
    let bow = aggregate_bow2(&tokens, t)?;
    let (mut words, removed_stems) = match kind {
        TextKind::Passage => apply_gate(stopword_gate(bow, heads), config.threshold),
        TextKind::Query => (
            bow.into_iter()
                .map(|w| GatedWord {
                    stem: w.stem,
                    vector: w.vector,
                    gate: 1.0,
                })
                .collect(),
            Vec::new(),
        ),
    };
    if heads.w_u.is_some() {
        words = uni_project(words, heads, config.uni_nonneg)?;
    }
    Ok(EncodedText {
        cls,
        words: hash_words(words),
        removed_stems,
        kind,
    })
}

fn hash_words(words: Vec<GatedWord>) -> Vec<WordEntry> {
    merge_by_hash(words, word_hash)
}

/// Hashes stems and resolves in-text collisions: the first stem keeps the slot,
/// and takes the vector of whichever colliding word has the larger gate.
fn merge_by_hash(words: Vec<GatedWord>, hasher: impl Fn(&str) -> u32) -> Vec<WordEntry> {
    let mut out: Vec<WordEntry> = Vec::with_capacity(words.len());
    let mut slot: HashMap<u32, usize> = HashMap::with_capacity(words.len());
    for w in words {
        let hash = hasher(&w.stem);
        match slot.get(&hash) {
            Some(&i) => {
                let existing = &mut out[i];
                log::warn!(
                    "hash collision {hash:#010x} between {:?} and {:?}",
                    existing.stem,
                    w.stem
                );
                if w.gate > existing.gate {
                    existing.vector = w.vector;
                    existing.gate = w.gate;
                }
            }
            None => {
                slot.insert(hash, out.len());
                out.push(WordEntry {
                    hash,
                    stem: w.stem,
                    vector: w.vector,
                    gate: w.gate,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::tokenizer::StemGroup;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heads(enc: usize, cls: usize, tok: usize, uni: bool) -> ReductionHeads {
        ReductionHeads::init(HeadDims::new(enc, cls, tok, uni), 42).unwrap()
    }

    fn output(cls: Vec<f32>, tokens: Vec<Vec<f32>>) -> EncoderOutput {
        EncoderOutput {
            cls_raw: cls,
            token_raw: tokens,
        }
    }

    /// Tokenization with given stem groups over `n` subwords.
    fn tokenized(n: usize, groups: &[(&str, &[usize])]) -> TokenizedText {
        TokenizedText {
            whole_words: Vec::new(),
            subword_ids: (0..n as u32).collect(),
            subword_to_word: (0..n).collect(),
            unique_stems: groups
                .iter()
                .map(|(s, p)| StemGroup {
                    stem: s.to_string(),
                    positions: p.to_vec(),
                })
                .collect(),
        }
    }

    fn naive_mul(x: &[f32], m: &Matrix) -> Vec<f32> {
        let mut out = Vec::new();
        for c in 0..m.cols() {
            let mut s = 0f64;
            for (r, &xr) in x.iter().enumerate().take(m.rows()) {
                s += f64::from(xr) * f64::from(m.get(r, c));
            }
            out.push(s as f32);
        }
        out
    }

    #[test]
    fn identity_cls_projection() {
        let mut h = heads(3, 3, 2, false);
        h.w_cls = Matrix::identity(3);
        let e = output(vec![0.1, 0.2, 0.3], vec![]);
        let (cls, tokens) = project_2way(&e, &h).unwrap();
        assert_eq!(cls, e.cls_raw);
        assert!(tokens.is_empty());
    }

    #[test]
    fn zero_token_projection() {
        let mut h = heads(3, 2, 2, false);
        h.w_t = Matrix::zeros(3, 2);
        let e = output(vec![1.0; 3], vec![vec![1.0, 2.0, 3.0]; 2]);
        let (_, tokens) = project_2way(&e, &h).unwrap();
        assert_eq!(tokens, vec![vec![0.0, 0.0]; 2]);
    }

    #[test]
    fn projection_matches_triple_loop() {
        let h = heads(3, 2, 2, false);
        let e = output(vec![0.5, -1.0, 2.0], vec![vec![1.5, 0.25, -0.75]]);
        let (cls, tokens) = project_2way(&e, &h).unwrap();
        let want_cls = naive_mul(&e.cls_raw, &h.w_cls);
        let want_tok = naive_mul(&e.token_raw[0], &h.w_t);
        for (a, b) in cls.iter().zip(&want_cls).chain(tokens[0].iter().zip(&want_tok)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_dimension_error() {
        let h = heads(3, 2, 2, false);
        let e = output(vec![0.0; 4], vec![]);
        match project_2way(&e, &h) {
            Err(Error::Dimension { operand, .. }) => assert_eq!(operand, "encoder output vs heads"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bow2_two_vector_mean() {
        let t = tokenized(2, &[("w", &[0, 1])]);
        let out = aggregate_bow2(&[vec![1.0, 0.0], vec![0.0, 1.0]], &t).unwrap();
        assert_eq!(out[0].vector, vec![0.5, 0.5]);
    }

    #[test]
    fn bow2_single_subword_identity() {
        let t = tokenized(1, &[("w", &[0])]);
        let v = vec![0.3f32, -0.7];
        assert_eq!(aggregate_bow2(std::slice::from_ref(&v), &t).unwrap()[0].vector, v);
    }

    #[test]
    fn bow2_pools_all_occurrences() {
        // "run runs" -> one stem over 3 subword positions (runs = run + ##s), plus "x"
        let t = tokenized(4, &[("run", &[0, 1, 3]), ("x", &[2])]);
        let tokens = vec![
            vec![1.0, 2.0],
            vec![3.0, -1.0],
            vec![9.0, 9.0],
            vec![-1.0, 5.0],
        ];
        // group-by oracle over (stem, position) pairs
        let mut sums: std::collections::BTreeMap<&str, (Vec<f64>, f64)> = Default::default();
        for g in &t.unique_stems {
            for &p in &g.positions {
                let e = sums.entry(g.stem.as_str()).or_insert((vec![0.0; 2], 0.0));
                e.0[0] += f64::from(tokens[p][0]);
                e.0[1] += f64::from(tokens[p][1]);
                e.1 += 1.0;
            }
        }
        let out = aggregate_bow2(&tokens, &t).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].stem, "run");
        for w in &out {
            let (s, n) = &sums[w.stem.as_str()];
            assert_eq!(w.vector, vec![(s[0] / n) as f32, (s[1] / n) as f32]);
        }
        assert_eq!(out[0].vector, vec![1.0, 2.0]);
    }

    #[test]
    fn bow2_length_mismatch() {
        let t = tokenized(2, &[("w", &[0, 1])]);
        assert!(aggregate_bow2(&[vec![1.0]], &t).is_err());
    }

    fn sv(stem: &str, v: &[f32]) -> StemVector {
        StemVector {
            stem: stem.into(),
            vector: v.to_vec(),
        }
    }

    #[test]
    fn gate_relu_clamp() {
        let mut h = heads(2, 1, 2, false);
        h.w_s = vec![1.0, 0.0];
        h.b_s = 0.0;
        let g = stopword_gate(vec![sv("a", &[-1.0, 5.0])], &h);
        assert_eq!(g[0].gate, 0.0);
    }

    #[test]
    fn gate_constant_bias() {
        let mut h = heads(2, 1, 2, false);
        h.w_s = vec![0.0, 0.0];
        h.b_s = 0.5;
        let g = stopword_gate(vec![sv("a", &[-1.0, 5.0]), sv("b", &[3.0, 3.0])], &h);
        assert!(g.iter().all(|w| w.gate == 0.5));
    }

    #[test]
    fn gate_matches_scalar_product() {
        let mut h = heads(2, 1, 3, false);
        h.w_s = vec![0.25, -0.5, 1.0];
        h.b_s = 0.1;
        let v = [0.4f32, 0.2, 0.3];
        let want = (0.4 * 0.25 - 0.2 * 0.5 + 0.3 + 0.1f64).max(0.0);
        let g = stopword_gate(vec![sv("a", &v)], &h);
        assert!((f64::from(g[0].gate) - want).abs() < 1e-6);
        assert_eq!(g[0].vector, v.to_vec());
    }

    fn gw(stem: &str, v: &[f32], gate: f32) -> GatedWord {
        GatedWord {
            stem: stem.into(),
            vector: v.to_vec(),
            gate,
        }
    }

    #[test]
    fn apply_gate_drops_and_scales() {
        let (kept, removed) = apply_gate(vec![gw("a", &[1.0, 2.0], 0.0), gw("b", &[2.0, 4.0], 0.5)], 0.0);
        assert_eq!(removed, vec!["a".to_string()]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].vector, vec![1.0, 2.0]);
    }

    #[test]
    fn apply_gate_inference_threshold() {
        let (kept, removed) = apply_gate(vec![gw("a", &[1.0], 0.5), gw("b", &[1.0], 0.7)], 0.6);
        assert_eq!(removed, vec!["a".to_string()]);
        assert_eq!(kept[0].stem, "b");
    }

    proptest! {
        #[test]
        fn apply_gate_partitions(gates in proptest::collection::vec(0f32..2.0, 0..20), thr in 0f32..1.0) {
            let words: Vec<_> = gates.iter().enumerate().map(|(i, &g)| gw(&i.to_string(), &[1.0], g)).collect();
            let n = words.len();
            let (kept, removed) = apply_gate(words, thr);
            prop_assert_eq!(kept.len() + removed.len(), n);
            prop_assert!(kept.iter().all(|w| w.gate > thr && w.vector[0] == w.gate));
        }
    }

    #[test]
    fn uni_sum_of_components() {
        let mut h = heads(2, 1, 2, true);
        h.w_u = Some(Matrix::from_vec(2, 1, vec![1.0, 1.0]));
        let out = uni_project(vec![gw("a", &[0.25, 0.5], 1.0)], &h, false).unwrap();
        assert_eq!(out[0].vector, vec![0.75]);
    }

    #[test]
    fn uni_zero_weights() {
        let mut h = heads(2, 1, 2, true);
        h.w_u = Some(Matrix::zeros(2, 1));
        let out = uni_project(vec![gw("a", &[0.25, 0.5], 1.0)], &h, false).unwrap();
        assert_eq!(out[0].vector, vec![0.0]);
    }

    #[test]
    fn uni_matches_matrix_oracle() {
        let h = heads(2, 1, 3, true);
        let v = [0.3f32, -0.9, 0.45];
        let want = naive_mul(&v, h.w_u.as_ref().unwrap());
        let out = uni_project(vec![gw("a", &v, 1.0)], &h, false).unwrap();
        assert!((out[0].vector[0] - want[0]).abs() < 1e-6);
        let clamped = uni_project(vec![gw("a", &[-1.0, -1.0, -1.0], 1.0)], &{
            let mut h = h.clone();
            h.w_u = Some(Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]));
            h
        }, true)
        .unwrap();
        assert_eq!(clamped[0].vector, vec![0.0]);
    }

    #[test]
    fn uni_disabled_errors() {
        let h = heads(2, 1, 2, false);
        assert!(matches!(uni_project(vec![], &h, false), Err(Error::UniDisabled)));
    }

    #[test]
    fn hash_is_sha256_prefix() {
        // printf sulfa | sha256sum -> e8856d5e...
        assert_eq!(word_hash("sulfa"), 0xe885_6d5e);
        assert_eq!(word_hash("sulfa"), word_hash("sulfa"));
        assert_ne!(word_hash("sulfa"), word_hash("sulfur"));
    }

    #[test]
    fn collision_keeps_first_stem_max_gate() {
        let words = vec![gw("a", &[1.0], 0.2), gw("b", &[2.0], 0.9), gw("c", &[3.0], 0.1)];
        let entries = merge_by_hash(words, |_| 7);
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].stem, "a");
        assert_eq!(entries[0].vector, vec![2.0]);
        assert_eq!(entries[0].gate, 0.9);

        let distinct = hash_words(vec![gw("a", &[1.0], 0.2), gw("b", &[2.0], 0.9)]);
        assert_eq!(distinct.len(), 2);
    }

    fn stage_fixture() -> (TokenizedText, EncoderOutput, ReductionHeads) {
        // three words, the second split into two subwords
        let t = tokenized(4, &[("alpha", &[0]), ("beta", &[1, 2]), ("gamma", &[3])]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let e = output(v(4), (0..4).map(|_| v(4)).collect());
        let mut h = heads(4, 2, 3, false);
        h.w_s = vec![0.9, -0.4, 0.6];
        h.b_s = 0.05;
        (t, e, h)
    }

    #[test]
    fn passage_pipeline_composes_stage_oracles() {
        let (t, e, h) = stage_fixture();
        let cls = naive_mul(&e.cls_raw, &h.w_cls);
        let tokens: Vec<_> = e.token_raw.iter().map(|x| naive_mul(x, &h.w_t)).collect();
        let out = encode_text(&t, &e, &h, TextKind::Passage, ReduceConfig::default()).unwrap();
        assert_eq!(out.cls, cls);

        let mut expected_kept = Vec::new();
        let mut expected_removed = Vec::new();
        for g in &t.unique_stems {
            let mean: Vec<f64> = (0..3)
                .map(|c| g.positions.iter().map(|&p| f64::from(tokens[p][c])).sum::<f64>() / g.positions.len() as f64)
                .collect();
            let z: f64 = mean.iter().zip(&h.w_s).map(|(a, &b)| a * f64::from(b)).sum::<f64>() + f64::from(h.b_s);
            if z <= 0.0 {
                expected_removed.push(g.stem.clone());
            } else {
                expected_kept.push((g.stem.clone(), mean.iter().map(|m| m * z).collect::<Vec<_>>()));
            }
        }
        assert_eq!(out.removed_stems, expected_removed);
        assert_eq!(out.words.len(), expected_kept.len());
        for (w, (stem, v)) in out.words.iter().zip(&expected_kept) {
            assert_eq!(&w.stem, stem);
            assert_eq!(w.hash, word_hash(stem));
            for (a, b) in w.vector.iter().zip(v) {
                // scaled exactly once
                assert!((f64::from(*a) - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn query_keeps_words_the_gate_would_drop() {
        let (t, e, mut h) = stage_fixture();
        h.w_s = vec![0.0; 3];
        h.b_s = -1.0;
        let p = encode_text(&t, &e, &h, TextKind::Passage, ReduceConfig::default()).unwrap();
        assert!(p.words.is_empty());
        assert_eq!(p.removed_stems.len(), 3);
        assert_eq!(p.cls.len(), 2);

        let q = encode_text(&t, &e, &h, TextKind::Query, ReduceConfig::default()).unwrap();
        assert_eq!(q.words.len(), 3);
        assert!(q.words.iter().all(|w| w.gate == 1.0));
        assert!(q.removed_stems.is_empty());
    }

    #[test]
    fn uni_mode_output_width() {
        let (t, e, _) = stage_fixture();
        let h = heads(4, 2, 3, true);
        let p = encode_text(&t, &e, &h, TextKind::Passage, ReduceConfig::default()).unwrap();
        assert!(p.words.iter().all(|w| w.vector.len() == 1));
        let h = heads(4, 2, 3, false);
        let p = encode_text(&t, &e, &h, TextKind::Passage, ReduceConfig::default()).unwrap();
        assert!(p.words.iter().all(|w| w.vector.len() == 3));
        assert_eq!(p.words.len(), t.unique_stems.len());
    }
}
