//! The three passage-side structures: a dense CLS matrix, an id-keyed store of
//! whole-word vectors, and (for exact-match builds) an inverted index from word
//! hash to postings that carry the word vector inline.

mod persist;

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use persist::{load, save, StorageStats, CLS_FILE, IDS_FILE, INV_FILE, MANIFEST_FILE, WORDS_FILE};

use crate::corpus::Document;
use crate::encoder::{Encoder, EncoderSpec};
use crate::linalg::dot;
use crate::reduce::{encode_text, EncodedText, HeadDims, ReduceConfig, ReductionHeads, TextKind, WordEntry};
use crate::retrieve::WorkflowKind;
use crate::tokenizer::{tokenize, Vocabulary};
use crate::{Error, Result};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub em: bool,
    pub stemming: bool,
    pub threshold: f32,
    pub uni_nonneg: bool,
    pub store_removed_words: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            em: false,
            stemming: true,
            threshold: 0.0,
            uni_nonneg: false,
            store_removed_words: true,
        }
    }
}

impl IndexConfig {
    pub fn reduce_config(&self) -> ReduceConfig {
        ReduceConfig {
            threshold: self.threshold,
            uni_nonneg: self.uni_nonneg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowAlias {
    pub name: WorkflowKind,
    pub alias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub format_version: u32,
    pub dims: HeadDims,
    pub word_dim: usize,
    pub em_enabled: bool,
    pub stemming: bool,
    pub threshold: f32,
    pub uni_nonneg: bool,
    pub store_removed_words: bool,
    pub doc_count: usize,
    pub total_word_entries: usize,
    pub encoder: EncoderSpec,
    pub config_hash: String,
    pub workflows: Vec<WorkflowAlias>,
}

impl IndexManifest {
    pub fn reduce_config(&self) -> ReduceConfig {
        ReduceConfig {
            threshold: self.threshold,
            uni_nonneg: self.uni_nonneg,
        }
    }

    /// Refuses heads whose shape differs from the one the index was built with.
    pub fn check_heads(&self, heads: &ReductionHeads) -> Result<()> {
        let got = heads.dims();
        if got != self.dims {
            return Err(Error::InvalidArgument(format!(
                "heads dimensions {got:?} do not match index manifest {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Row-major `doc_count x dim` CLS matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseClsIndex {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl DenseClsIndex {
    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, ordinal: usize) -> &[f32] {
        &self.data[ordinal * self.dim..(ordinal + 1) * self.dim]
    }

    /// Exact top-k by dot product; ties go to the lower ordinal.
    pub fn topk(&self, query: &[f32], k: usize) -> Vec<(u32, f64)> {
        const CHUNK: usize = 1024;
        let scores: Vec<f64> = self
            .data
            .par_chunks(self.dim * CHUNK)
            .flat_map_iter(|block| block.chunks_exact(self.dim).map(|row| dot(query, row)))
            .collect();
        top_k(scores.into_iter().enumerate().map(|(i, s)| (i as u32, s)).collect(), k)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StoredDoc {
    pub words: Vec<WordEntry>,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordVectorStore {
    pub dim: usize,
    pub docs: Vec<StoredDoc>,
}

impl WordVectorStore {
    pub fn total_entries(&self) -> usize {
        self.docs.iter().map(|d| d.words.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posting {
    pub doc: u32,
    pub vector: Vec<f32>,
}

/// Word hash -> postings sorted by doc ordinal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InvertedIndex {
    pub dim: usize,
    pub postings: BTreeMap<u32, Vec<Posting>>,
}

impl InvertedIndex {
    pub fn from_store(store: &WordVectorStore) -> Self {
        let mut postings: BTreeMap<u32, Vec<Posting>> = BTreeMap::new();
        for (doc, stored) in store.docs.iter().enumerate() {
            for w in &stored.words {
                postings.entry(w.hash).or_default().push(Posting {
                    doc: doc as u32,
                    vector: w.vector.clone(),
                });
            }
        }
        Self {
            dim: store.dim,
            postings,
        }
    }

    pub fn term_count(&self) -> usize {
        self.postings.len()
    }

    pub fn posting_count(&self) -> usize {
        self.postings.values().map(Vec::len).sum()
    }

    /// Accumulates per-document dot products over the query words' posting lists.
    pub fn accumulate(&self, query: &EncodedText, doc_count: usize) -> Vec<(u32, f64)> {
        let mut acc = vec![0f64; doc_count];
        let mut touched = vec![false; doc_count];
        for qw in &query.words {
            if let Some(list) = self.postings.get(&qw.hash) {
                for p in list {
                    let d = p.doc as usize;
                    acc[d] += dot(&qw.vector, &p.vector);
                    touched[d] = true;
                }
            }
        }
        acc.into_iter()
            .enumerate()
            .filter(|(d, _)| touched[*d])
            .map(|(d, s)| (d as u32, s))
            .collect()
    }
}

/// A fully built or loaded index.
#[derive(Debug, Clone)]
pub struct IndexSet {
    pub manifest: IndexManifest,
    pub ids: Vec<String>,
    pub texts: Vec<String>,
    pub dense: DenseClsIndex,
    pub store: WordVectorStore,
    pub inverted: Option<InvertedIndex>,
    /// Copies of the vocabulary and heads used at build time.
    pub vocab: Vocabulary,
    pub heads: ReductionHeads,
    id_lookup: HashMap<String, u32>,
}

/// Stored representation of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchedDoc<'a> {
    pub ordinal: u32,
    pub cls: &'a [f32],
    pub words: &'a [WordEntry],
    pub removed: &'a [String],
}

impl FetchedDoc<'_> {
    /// The stored passage as an [`EncodedText`] for scoring.
    pub fn to_encoded(&self) -> EncodedText {
        EncodedText {
            cls: self.cls.to_vec(),
            words: self.words.to_vec(),
            removed_stems: self.removed.to_vec(),
            kind: TextKind::Passage,
        }
    }
}

impl IndexSet {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        manifest: IndexManifest,
        ids: Vec<String>,
        texts: Vec<String>,
        dense: DenseClsIndex,
        store: WordVectorStore,
        inverted: Option<InvertedIndex>,
        vocab: Vocabulary,
        heads: ReductionHeads,
    ) -> Result<Self> {
        let mut id_lookup = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id_lookup.insert(id.clone(), i as u32).is_some() {
                return Err(Error::DuplicateDoc(id.clone()));
            }
        }
        let n = ids.len();
        if manifest.doc_count != n || dense.len() != n || store.docs.len() != n || texts.len() != n {
            return Err(Error::BadFormat(format!(
                "inconsistent document counts: manifest {}, ids {n}, cls {}, words {}",
                manifest.doc_count,
                dense.len(),
                store.docs.len()
            )));
        }
        if dense.dim != manifest.dims.cls || store.dim != manifest.word_dim {
            return Err(Error::BadFormat("stored dimensions differ from manifest".into()));
        }
        if store.total_entries() != manifest.total_word_entries {
            return Err(Error::BadFormat("word entry count differs from manifest".into()));
        }
        if manifest.em_enabled != inverted.is_some() {
            return Err(Error::BadFormat(
                "inverted index presence does not match em flag".into(),
            ));
        }
        manifest.check_heads(&heads)?;
        Ok(Self {
            manifest,
            ids,
            texts,
            dense,
            store,
            inverted,
            vocab,
            heads,
            id_lookup,
        })
    }

    pub fn doc_count(&self) -> usize {
        self.ids.len()
    }

    pub fn ordinal(&self, id: &str) -> Option<u32> {
        self.id_lookup.get(id).copied()
    }

    pub fn fetch(&self, id: &str) -> Result<FetchedDoc<'_>> {
        let ord = self
            .ordinal(id)
            .ok_or_else(|| Error::UnknownDoc(id.to_string()))?;
        Ok(self.fetch_ordinal(ord))
    }

    pub fn fetch_ordinal(&self, ordinal: u32) -> FetchedDoc<'_> {
        let stored = &self.store.docs[ordinal as usize];
        FetchedDoc {
            ordinal,
            cls: self.dense.row(ordinal as usize),
            words: &stored.words,
            removed: &stored.removed,
        }
    }

    pub fn dense_topk(&self, q_cls: &[f32], k: usize) -> Result<Vec<(u32, f64)>> {
        if q_cls.len() != self.dense.dim {
            return Err(Error::Dimension {
                operand: "query cls",
                expected: self.dense.dim,
                actual: q_cls.len(),
            });
        }
        Ok(self.dense.topk(q_cls, k))
    }

    /// Exact-match token scores of every document sharing a word hash with the
    /// query, best first.
    pub fn sparse_topk(&self, q: &EncodedText, k: usize) -> Result<Vec<(u32, f64)>> {
        let inv = self.inverted.as_ref().ok_or(Error::SparseRequiresExactMatch)?;
        Ok(top_k(inv.accumulate(q, self.doc_count()), k))
    }
}

/// Sorts by score descending, ordinal ascending, and keeps `k`.
pub fn top_k(mut scored: Vec<(u32, f64)>, k: usize) -> Vec<(u32, f64)> {
    let cmp = |a: &(u32, f64), b: &(u32, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if k < scored.len() {
        if k == 0 {
            return Vec::new();
        }
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
}

fn config_hash(
    config: &IndexConfig,
    encoder: &EncoderSpec,
    heads: &ReductionHeads,
    vocab: &Vocabulary,
) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(encoder)?);
    h.update(heads.to_bytes());
    h.update(vocab.to_text().as_bytes());
    let digest = h.finalize();
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Encodes every document and assembles all index structures.
pub fn build_indices(
    corpus: &[Document],
    vocab: &Vocabulary,
    encoder: &dyn Encoder,
    encoder_spec: EncoderSpec,
    heads: &ReductionHeads,
    config: &IndexConfig,
) -> Result<IndexSet> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    heads.validate()?;
    let dims = heads.dims();
    if encoder.dim() != dims.enc || encoder_spec.dim() != dims.enc {
        return Err(Error::Dimension {
            operand: "encoder width vs heads",
            expected: dims.enc,
            actual: encoder.dim(),
        });
    }
    if dims.has_uni() && !config.em {
        return Err(Error::InvalidArgument(
            "uni mode requires an exact-match build".into(),
        ));
    }
    let mut seen = HashMap::with_capacity(corpus.len());
    for doc in corpus {
        if seen.insert(doc.id.as_str(), ()).is_some() {
            return Err(Error::DuplicateDoc(doc.id.clone()));
        }
    }

    let reduce = config.reduce_config();
    let encoded: Vec<EncodedText> = corpus
        .par_iter()
        .map(|doc| {
            let t = tokenize(&doc.text, vocab, config.stemming);
            let e = encoder.encode(&doc.id, &t)?;
            encode_text(&t, &e, heads, TextKind::Passage, reduce)
        })
        .collect::<Result<_>>()?;

    let mut dense = DenseClsIndex {
        dim: dims.cls,
        data: Vec::with_capacity(corpus.len() * dims.cls),
    };
    let mut store = WordVectorStore {
        dim: dims.word_dim(),
        docs: Vec::with_capacity(corpus.len()),
    };
    for enc in encoded {
        dense.data.extend_from_slice(&enc.cls);
        store.docs.push(StoredDoc {
            words: enc.words,
            removed: if config.store_removed_words {
                enc.removed_stems
            } else {
                Vec::new()
            },
        });
    }
    let inverted = config.em.then(|| InvertedIndex::from_store(&store));

    let manifest = IndexManifest {
        format_version: INDEX_FORMAT_VERSION,
        dims,
        word_dim: dims.word_dim(),
        em_enabled: config.em,
        stemming: config.stemming,
        threshold: config.threshold,
        uni_nonneg: config.uni_nonneg,
        store_removed_words: config.store_removed_words,
        doc_count: corpus.len(),
        total_word_entries: store.total_entries(),
        config_hash: config_hash(config, &encoder_spec, heads, vocab)?,
        encoder: encoder_spec,
        workflows: WorkflowKind::ALL
            .iter()
            .map(|&w| WorkflowAlias {
                name: w,
                alias: w.alias().to_string(),
            })
            .collect(),
    };

    IndexSet::assemble(
        manifest,
        corpus.iter().map(|d| d.id.clone()).collect(),
        corpus.iter().map(|d| d.text.clone()).collect(),
        dense,
        store,
        inverted,
        vocab.clone(),
        heads.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ReferenceEncoder;
    use crate::score::score_tokens_exact_match;
    use crate::tokenizer::word_key;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            ["[UNK]", "the", "cat", "sat", "on", "mat", "dog", "ran", "a", "far", "##s"].iter().copied(),
        )
        .unwrap()
    }

    fn corpus() -> Vec<Document> {
        vec![
            Document::new("d0", "the cat sat on the mat"),
            Document::new("d1", "a dog ran far"),
            Document::new("d2", "cats sat"),
        ]
    }

    fn build(config: &IndexConfig, heads: &ReductionHeads) -> Result<IndexSet> {
        let enc = ReferenceEncoder::new(1, 16, 2).unwrap();
        build_indices(&corpus(), &vocab(), &enc, enc.spec(), heads, config)
    }

    fn heads(uni: bool) -> ReductionHeads {
        ReductionHeads::init(HeadDims::new(16, 4, 3, uni), 5).unwrap()
    }

    #[test]
    fn toy_build_counts() {
        let h = heads(false);
        let idx = build(&IndexConfig { em: true, ..Default::default() }, &h).unwrap();
        assert_eq!(idx.manifest.doc_count, 3);
        // gates open at init: every unique stem is kept
        let unique: usize = corpus()
            .iter()
            .map(|d| {
                d.text
                    .split_whitespace()
                    .map(|w| word_key(w, true))
                    .collect::<std::collections::HashSet<_>>()
                    .len()
            })
            .sum();
        assert_eq!(idx.manifest.total_word_entries, unique);
        assert_eq!(idx.inverted.as_ref().unwrap().posting_count(), unique);
        // "cat" and "cats" share a stem across docs 0 and 2
        let cat = crate::reduce::word_hash("cat");
        let docs: Vec<u32> = idx.inverted.as_ref().unwrap().postings[&cat].iter().map(|p| p.doc).collect();
        assert_eq!(docs, vec![0, 2]);
    }

    #[test]
    fn closed_gates_empty_inverted_full_dense() {
        let mut h = heads(false);
        h.b_s = -100.0;
        let idx = build(&IndexConfig { em: true, ..Default::default() }, &h).unwrap();
        assert_eq!(idx.manifest.total_word_entries, 0);
        assert_eq!(idx.inverted.as_ref().unwrap().term_count(), 0);
        assert_eq!(idx.dense.len(), 3);
        assert!(!idx.fetch("d1").unwrap().removed.is_empty());
    }

    #[test]
    fn removed_stems_only_when_requested() {
        let mut h = heads(false);
        h.b_s = -100.0;
        let idx = build(&IndexConfig { store_removed_words: false, ..Default::default() }, &h).unwrap();
        assert!(idx.fetch("d1").unwrap().removed.is_empty());
    }

    #[test]
    fn build_errors() {
        let h = heads(false);
        let enc = ReferenceEncoder::new(1, 16, 2).unwrap();
        let cfg = IndexConfig::default();
        assert!(matches!(
            build_indices(&[], &vocab(), &enc, enc.spec(), &h, &cfg),
            Err(Error::EmptyCorpus)
        ));
        let dup = vec![Document::new("x", "a"), Document::new("x", "b")];
        assert!(matches!(
            build_indices(&dup, &vocab(), &enc, enc.spec(), &h, &cfg),
            Err(Error::DuplicateDoc(_))
        ));
        assert!(build(&IndexConfig::default(), &heads(true)).is_err());
        let narrow = ReferenceEncoder::new(1, 8, 2).unwrap();
        assert!(matches!(
            build_indices(&corpus(), &vocab(), &narrow, narrow.spec(), &h, &cfg),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fetch_matches_pipeline() {
        let h = heads(false);
        let idx = build(&IndexConfig::default(), &h).unwrap();
        let enc = ReferenceEncoder::new(1, 16, 2).unwrap();
        let t = tokenize("a dog ran far", &vocab(), true);
        let want = encode_text(&t, &enc.encode_tokens(&t), &h, TextKind::Passage, ReduceConfig::default()).unwrap();
        let got = idx.fetch("d1").unwrap().to_encoded();
        assert_eq!(got, want);
        assert!(matches!(idx.fetch("nope"), Err(Error::UnknownDoc(_))));
    }

    #[test]
    fn dense_topk_full_order_matches_brute_force() {
        let idx = build(&IndexConfig::default(), &heads(false)).unwrap();
        let q = [0.3f32, -0.1, 0.8, 0.2];
        let mut brute: Vec<(u32, f64)> = (0..3)
            .map(|i| (i as u32, dot(&q, idx.dense.row(i))))
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        assert_eq!(idx.dense_topk(&q, 3).unwrap(), brute);
        assert_eq!(idx.dense_topk(&q, 10).unwrap().len(), 3);
        assert!(idx.dense_topk(&[1.0], 1).is_err());
    }

    #[test]
    fn dense_row_query_ranks_itself_first() {
        let dense = DenseClsIndex {
            dim: 2,
            data: vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
        };
        for j in 0..3 {
            assert_eq!(dense.topk(dense.row(j), 1)[0].0, j as u32);
        }
    }

    #[test]
    fn dense_tie_prefers_lower_ordinal() {
        let dense = DenseClsIndex {
            dim: 2,
            data: vec![0.5, 0.5, 0.5, 0.5],
        };
        assert_eq!(dense.topk(&[1.0, 1.0], 1), vec![(0, 1.0)]);
    }

    #[test]
    fn sparse_requires_em() {
        let idx = build(&IndexConfig::default(), &heads(false)).unwrap();
        let q = idx.fetch_ordinal(0).to_encoded();
        assert!(matches!(idx.sparse_topk(&q, 5), Err(Error::SparseRequiresExactMatch)));
    }

    #[test]
    fn sparse_matches_brute_force_exact_match() {
        let h = heads(false);
        let idx = build(&IndexConfig { em: true, ..Default::default() }, &h).unwrap();
        let enc = ReferenceEncoder::new(1, 16, 2).unwrap();
        let t = tokenize("cat on far", &vocab(), true);
        let q = encode_text(&t, &enc.encode_tokens(&t), &h, TextKind::Query, ReduceConfig::default()).unwrap();
        let got = idx.sparse_topk(&q, 10).unwrap();
        let mut brute: Vec<(u32, f64)> = (0..3u32)
            .filter_map(|d| {
                let p = idx.fetch_ordinal(d).to_encoded();
                let (s, a) = score_tokens_exact_match(&q, &p);
                a.iter().any(|x| x.passage_index.is_some()).then_some((d, s))
            })
            .collect();
        brute = top_k(brute, 10);
        assert_eq!(got, brute);
        assert_eq!(got.len(), 3);

        let t = tokenize("zebra", &vocab(), true);
        let q = encode_text(&t, &enc.encode_tokens(&t), &h, TextKind::Query, ReduceConfig::default()).unwrap();
        assert!(idx.sparse_topk(&q, 10).unwrap().is_empty());
    }

    #[test]
    fn top_k_edge_cases() {
        let v = vec![(0, 1.0), (1, 3.0), (2, 3.0), (3, -1.0)];
        assert_eq!(top_k(v.clone(), 2), vec![(1, 3.0), (2, 3.0)]);
        assert_eq!(top_k(v.clone(), 0), vec![]);
        assert_eq!(top_k(v, 9).len(), 4);
    }
}
