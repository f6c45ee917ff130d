//! Seeded synthetic collections: vocabulary, topical corpus, queries, graded
//! judgments and training triples.
//!
//! Words are built from a fixed syllable inventory. Only some whole words get a
//! vocabulary entry, so the rest split into syllable pieces; inflected forms
//! (`-s`, `-ing`, `-ed`) exercise stemming.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::evaluation::Qrels;
use crate::tokenizer::{is_punctuation, word_key, Vocabulary, CONTINUATION_PREFIX, UNK_TOKEN};
use crate::train::TrainTriple;

const SYLLABLES: &[&str] = &[
    "ba", "be", "bi", "bo", "da", "de", "di", "do", "fa", "fe", "ka", "ke", "ki", "ko", "la",
    "le", "li", "lo", "ma", "me", "mi", "mo", "na", "ne", "ni", "no", "pa", "pe", "pi", "po",
    "ra", "re", "ri", "ro", "sa", "se", "si", "so", "ta", "te", "ti", "to", "va", "ve", "vi",
    "vo", "za", "zo", "x", "r", "n", "t", "l", "m",
];

const STOPWORDS: &[&str] = &[
    "the", "a", "of", "and", "in", "to", "is", "for", "on", "with", "as", "by", "it", "that",
];

const SUFFIXES: &[&str] = &["s", "ing", "ed"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub docs: usize,
    pub queries: usize,
    pub topics: usize,
    /// Distinct content words.
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of content words that get a whole-word vocabulary entry.
    pub whole_word_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            docs: 1000,
            queries: 50,
            topics: 20,
            words: 600,
            min_len: 20,
            max_len: 60,
            whole_word_share: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub id: String,
    pub text: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct SyntheticCollection {
    pub vocab: Vocabulary,
    pub corpus: Vec<Document>,
    pub queries: Vec<SyntheticQuery>,
    pub qrels: Qrels,
    /// Topic of each document, aligned with `corpus`.
    pub doc_topics: Vec<usize>,
}

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=4);
    (0..n)
        .map(|_| *SYLLABLES[..48].choose(rng).expect("non-empty"))
        .collect()
}

/// Bag of stemmed content keys, used for overlap-based grading.
fn content_keys(text: &str) -> BTreeSet<String> {
    crate::tokenizer::split_whole_words(text)
        .iter()
        .filter(|w| !STOPWORDS.contains(&w.text.to_lowercase().as_str()))
        .filter(|w| !w.text.chars().all(is_punctuation))
        .map(|w| word_key(&w.text, true))
        .collect()
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCollection {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut seen = HashSet::new();
    let mut words = Vec::with_capacity(cfg.words);
    while words.len() < cfg.words {
        let w = make_word(&mut rng);
        if !STOPWORDS.contains(&w.as_str()) && seen.insert(w.clone()) {
            words.push(w);
        }
    }

    let mut tokens: Vec<String> = Vec::new();
    let mut have = HashSet::new();
    let mut push = |t: String| {
        if have.insert(t.clone()) {
            tokens.push(t);
        }
    };
    push(UNK_TOKEN.to_string());
    STOPWORDS.iter().for_each(|s| push(s.to_string()));
    for s in SYLLABLES.iter().chain(&["ing", "ed", "s"]) {
        push(s.to_string());
        push(format!("{CONTINUATION_PREFIX}{s}"));
    }
    for w in &words {
        if rng.gen_bool(cfg.whole_word_share) {
            push(w.clone());
        }
    }
    push(".".into());
    push(",".into());
    let vocab = Vocabulary::from_tokens(tokens.iter().map(String::as_str))
        .expect("generated vocabulary is valid");

    let topics = cfg.topics.max(1);
    let topic_words: Vec<Vec<&str>> = (0..topics)
        .map(|_| {
            let n = (cfg.words / topics).clamp(5, 30);
            words.choose_multiple(&mut rng, n).map(String::as_str).collect()
        })
        .collect();

    let mut corpus = Vec::with_capacity(cfg.docs);
    let mut doc_topics = Vec::with_capacity(cfg.docs);
    for i in 0..cfg.docs {
        let topic = rng.gen_range(0..topics);
        let len = rng.gen_range(cfg.min_len..=cfg.max_len.max(cfg.min_len));
        let mut text = String::new();
        for j in 0..len {
            let roll: f64 = rng.gen();
            let mut w = if roll < 0.35 {
                STOPWORDS.choose(&mut rng).expect("non-empty").to_string()
            } else if roll < 0.8 {
                topic_words[topic].choose(&mut rng).expect("non-empty").to_string()
            } else {
                words.choose(&mut rng).expect("non-empty").clone()
            };
            if roll >= 0.35 && rng.gen_bool(0.15) {
                w.push_str(SUFFIXES.choose(&mut rng).expect("non-empty"));
            }
            if j == 0 || text.ends_with(". ") {
                let mut c = w.chars();
                if let Some(f) = c.next() {
                    w = f.to_uppercase().chain(c).collect();
                }
            }
            text.push_str(&w);
            if j + 1 == len {
                text.push('.');
            } else if rng.gen_bool(0.08) {
                text.push_str(". ");
            } else if rng.gen_bool(0.05) {
                text.push_str(", ");
            } else {
                text.push(' ');
            }
        }
        corpus.push(Document::new(format!("D{i:05}"), text));
        doc_topics.push(topic);
    }

    let doc_keys: Vec<BTreeSet<String>> = corpus.iter().map(|d| content_keys(&d.text)).collect();
    let mut queries = Vec::with_capacity(cfg.queries);
    let mut qrels = Qrels::default();
    for qi in 0..cfg.queries.min(cfg.docs) {
        let target = rng.gen_range(0..corpus.len());
        let content: Vec<&str> = crate::tokenizer::split_whole_words(&corpus[target].text)
            .into_iter()
            .map(|w| &corpus[target].text[w.start..w.end])
            .filter(|w| !STOPWORDS.contains(&w.to_lowercase().as_str()))
            .filter(|w| !w.chars().all(is_punctuation))
            .collect();
        let n = rng.gen_range(2..=4).min(content.len().max(1));
        let mut picked: Vec<String> = content
            .choose_multiple(&mut rng, n)
            .map(|w| w.to_lowercase())
            .collect();
        if rng.gen_bool(0.5) {
            picked.insert(1.min(picked.len()), STOPWORDS.choose(&mut rng).expect("non-empty").to_string());
        }
        let qid = format!("Q{qi:03}");
        let text = picked.join(" ");
        let q_keys = content_keys(&text);

        let target_id = corpus[target].id.clone();
        qrels.insert(&qid, &target_id, 3);
        for (d, keys) in doc_keys.iter().enumerate() {
            if d == target {
                continue;
            }
            let overlap = q_keys.intersection(keys).count();
            let same_topic = doc_topics[d] == doc_topics[target];
            let grade = match (same_topic, overlap) {
                (true, o) if o >= 2 => Some(2),
                (true, 1) => Some(1),
                (false, o) if o >= 2 => Some(1),
                (_, 0) if rng.gen_bool(0.01) => Some(0),
                _ => None,
            };
            if let Some(g) = grade {
                qrels.insert(&qid, &corpus[d].id, g);
            }
        }
        queries.push(SyntheticQuery {
            id: qid,
            text,
            target: target_id,
        });
    }

    SyntheticCollection {
        vocab,
        corpus,
        queries,
        qrels,
        doc_topics,
    }
}

/// Teacher score of a (query, passage) pair: stemmed content-word overlap plus
/// a small length-normalized bonus. Deterministic and encoder-independent.
pub fn teacher_score(query: &str, passage: &str) -> f64 {
    let q = content_keys(query);
    let p = content_keys(passage);
    if q.is_empty() {
        return 0.0;
    }
    let overlap = q.intersection(&p).count() as f64;
    overlap + overlap / (1.0 + p.len() as f64)
}

/// Triples pairing each query's target with a random document of another topic.
pub fn training_triples(coll: &SyntheticCollection, n: usize, seed: u64) -> Vec<TrainTriple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index_of = |id: &str| coll.corpus.iter().position(|d| d.id == id);
    let mut out = Vec::with_capacity(n);
    if coll.queries.is_empty() || coll.corpus.len() < 2 {
        return out;
    }
    while out.len() < n {
        let q = coll.queries.choose(&mut rng).expect("non-empty");
        let pos = index_of(&q.target).expect("target is in corpus");
        let neg = loop {
            let c = rng.gen_range(0..coll.corpus.len());
            if c != pos {
                break c;
            }
        };
        let (p, m) = (&coll.corpus[pos].text, &coll.corpus[neg].text);
        out.push(TrainTriple {
            q: q.text.clone(),
            pos: p.clone(),
            neg: m.clone(),
            t_margin: teacher_score(&q.text, p) - teacher_score(&q.text, m),
        });
    }
    out
}

/// `n` distinct random lowercase strings of 6 to 14 letters.
pub fn random_word_strings(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let len = rng.gen_range(6..=14);
        let s: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// Number of unordered pairs of equal values.
pub fn collision_pairs(mut hashes: Vec<u32>) -> u64 {
    hashes.sort_unstable();
    let mut pairs = 0u64;
    let mut i = 0;
    while i < hashes.len() {
        let mut j = i + 1;
        while j < hashes.len() && hashes[j] == hashes[i] {
            j += 1;
        }
        let k = (j - i) as u64;
        pairs += k * (k - 1) / 2;
        i = j;
    }
    pairs
}

/// Expected colliding pairs among `n` uniform draws from `2^bits` values.
pub fn birthday_expectation(n: u64, bits: u32) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0 / 2f64.powi(bits as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::corpus_stats;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            docs: 60,
            queries: 10,
            topics: 4,
            words: 120,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small());
        let b = generate(&small());
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.qrels, b.qrels);
        let c = generate(&SyntheticConfig { seed: 1, ..small() });
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn shape_and_judgments() {
        let c = generate(&small());
        assert_eq!(c.corpus.len(), 60);
        assert_eq!(c.queries.len(), 10);
        for q in &c.queries {
            assert_eq!(c.qrels.grade(&q.id, &q.target), Some(3));
            assert!(!q.text.trim().is_empty());
        }
        let ids: HashSet<_> = c.corpus.iter().map(|d| &d.id).collect();
        assert_eq!(ids.len(), 60);
    }

    #[test]
    fn exercises_subwords_and_stemming() {
        let c = generate(&small());
        let s = corpus_stats(c.corpus.iter().map(|d| d.text.as_str()), &c.vocab, true).unwrap();
        assert!(s.all_subwords > s.all_words);
        assert!(s.unique_stemmed_words < s.unique_words);
        assert!(s.unique_words <= s.all_words);
    }

    #[test]
    fn triples_have_finite_margins() {
        let c = generate(&small());
        let t = training_triples(&c, 25, 3);
        assert_eq!(t.len(), 25);
        assert!(t.iter().all(|t| t.t_margin.is_finite() && t.pos != t.neg));
    }

    #[test]
    fn collision_counting() {
        assert_eq!(collision_pairs(vec![1, 2, 3]), 0);
        assert_eq!(collision_pairs(vec![5, 1, 5, 5, 2, 2]), 3 + 1);
        assert!((birthday_expectation(1_600_000, 32) - 298.02).abs() < 0.01);
        let w = random_word_strings(1000, 9);
        assert_eq!(w.iter().collect::<HashSet<_>>().len(), 1000);
    }
}
