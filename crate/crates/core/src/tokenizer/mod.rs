//! Whole-word splitting, WordPiece subwords and stemmed unique-word keys.

mod porter;
mod vocab;
mod wordpiece;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

pub use porter::stem as porter_stem;
pub use vocab::{Vocabulary, CONTINUATION_PREFIX, UNK_TOKEN};
pub use wordpiece::{detokenize, wordpiece_tokenize, MAX_CHARS_PER_WORD};

use crate::{Error, Result};

/// A whole word and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// One unique stem and every subword position belonging to any occurrence of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemGroup {
    pub stem: String,
    pub positions: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub whole_words: Vec<Word>,
    pub subword_ids: Vec<u32>,
    /// Whole-word index of every subword position.
    pub subword_to_word: Vec<usize>,
    /// Unique stems in first-occurrence order.
    pub unique_stems: Vec<StemGroup>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.subword_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subword_ids.is_empty()
    }
}

/// Unicode punctuation (P*) and symbol (S*) categories.
pub fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
            | MathSymbol
            | CurrencySymbol
            | ModifierSymbol
            | OtherSymbol
    )
}

/// Splits on whitespace and punctuation; each punctuation character is a word of its own.
pub fn split_whole_words(text: &str) -> Vec<Word> {
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |words: &mut Vec<Word>, start: &mut Option<usize>, end: usize| {
        if let Some(s) = start.take() {
            words.push(Word {
                text: text[s..end].to_string(),
                start: s,
                end,
            });
        }
    };
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            flush(&mut words, &mut start, i);
        } else if is_punctuation(c) {
            flush(&mut words, &mut start, i);
            let end = i + c.len_utf8();
            words.push(Word {
                text: text[i..end].to_string(),
                start: i,
                end,
            });
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut words, &mut start, text.len());
    words
}

/// Lowercased, optionally Porter-stemmed key for a whole word.
pub fn word_key(word: &str, stemming: bool) -> String {
    let lower = word.to_lowercase();
    if stemming {
        porter_stem(&lower)
    } else {
        lower
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, stemming: bool) -> TokenizedText {
    let whole_words = split_whole_words(text);
    let mut subword_ids = Vec::new();
    let mut subword_to_word = Vec::new();
    let mut unique_stems: Vec<StemGroup> = Vec::new();
    let mut stem_slot: HashMap<String, usize> = HashMap::new();

    for (w, word) in whole_words.iter().enumerate() {
        let pieces = wordpiece_tokenize(&word.text, vocab);
        let first = subword_ids.len();
        subword_ids.extend_from_slice(&pieces);
        subword_to_word.extend(std::iter::repeat_n(w, pieces.len()));
        let positions = first..subword_ids.len();

        let key = word_key(&word.text, stemming);
        match stem_slot.get(&key) {
            Some(&slot) => unique_stems[slot].positions.extend(positions),
            None => {
                stem_slot.insert(key.clone(), unique_stems.len());
                unique_stems.push(StemGroup {
                    stem: key,
                    positions: positions.collect(),
                });
            }
        }
    }

    TokenizedText {
        whole_words,
        subword_ids,
        subword_to_word,
        unique_stems,
    }
}

/// Per-passage average token counts over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub documents: u64,
    pub all_subwords: f64,
    pub unique_subwords: f64,
    pub all_words: f64,
    pub unique_words: f64,
    pub unique_stemmed_words: f64,
    /// `unique_stemmed_words / all_subwords`.
    pub retained_pct: f64,
    pub stemming: bool,
    /// Punctuation characters are counted as whole words.
    pub punctuation_counted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct DocCounts {
    all_subwords: u64,
    unique_subwords: u64,
    all_words: u64,
    unique_words: u64,
    unique_stemmed: u64,
}

impl DocCounts {
    fn of(text: &str, vocab: &Vocabulary, stemming: bool) -> Self {
        let t = tokenize(text, vocab, stemming);
        let unique_subwords = t.subword_ids.iter().collect::<HashSet<_>>().len();
        let unique_words = t
            .whole_words
            .iter()
            .map(|w| w.text.to_lowercase())
            .collect::<HashSet<_>>()
            .len();
        Self {
            all_subwords: t.subword_ids.len() as u64,
            unique_subwords: unique_subwords as u64,
            all_words: t.whole_words.len() as u64,
            unique_words: unique_words as u64,
            unique_stemmed: t.unique_stems.len() as u64,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            all_subwords: self.all_subwords + o.all_subwords,
            unique_subwords: self.unique_subwords + o.unique_subwords,
            all_words: self.all_words + o.all_words,
            unique_words: self.unique_words + o.unique_words,
            unique_stemmed: self.unique_stemmed + o.unique_stemmed,
        }
    }
}

/// Averages the five per-document counts over the corpus.
///
/// Counts are summed as integers, so the result does not depend on document order.
pub fn corpus_stats<I, S>(docs: I, vocab: &Vocabulary, stemming: bool) -> Result<TokenStats>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut n = 0u64;
    let mut total = DocCounts::default();
    for doc in docs {
        total = total.add(DocCounts::of(doc.as_ref(), vocab, stemming));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mean = |v: u64| v as f64 / n as f64;
    let all_subwords = mean(total.all_subwords);
    let unique_stemmed_words = mean(total.unique_stemmed);
    Ok(TokenStats {
        documents: n,
        all_subwords,
        unique_subwords: mean(total.unique_subwords),
        all_words: mean(total.all_words),
        unique_words: mean(total.unique_words),
        unique_stemmed_words,
        retained_pct: if total.all_subwords == 0 {
            0.0
        } else {
            total.unique_stemmed as f64 / total.all_subwords as f64
        },
        stemming,
        punctuation_counted: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Vocabulary holding each given word as a whole token.
    fn word_vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(std::iter::once("[UNK]").chain(words.iter().copied())).unwrap()
    }

    fn texts(words: &[Word]) -> Vec<&str> {
        words.iter().map(|w| w.text.as_str()).collect()
    }

    #[test]
    fn split_fig1_query() {
        let words = split_whole_words("does doxycycline contain sulfa");
        assert_eq!(texts(&words), ["does", "doxycycline", "contain", "sulfa"]);
        assert_eq!((words[1].start, words[1].end), (5, 16));
    }

    #[test]
    fn split_empty() {
        assert!(split_whole_words("").is_empty());
        assert!(split_whole_words(" \t\n ").is_empty());
    }

    /// Character-class scan: every punctuation char is its own word.
    fn split_oracle(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            let punct = c.is_ascii_punctuation();
            if c.is_whitespace() || punct {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                if punct {
                    out.push(c.to_string());
                }
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    #[test]
    fn split_punctuation() {
        let text = "No, it is-not.";
        let words = split_whole_words(text);
        assert_eq!(texts(&words), split_oracle(text));
        assert_eq!(texts(&words), ["No", ",", "it", "is", "-", "not", "."]);
    }

    #[test]
    fn symbols_are_punctuation() {
        assert_eq!(texts(&split_whole_words("a+b €5")), ["a", "+", "b", "€", "5"]);
    }

    #[test]
    fn stems_collapse_inflections() {
        let v = word_vocab(&["running", "runs"]);
        let t = tokenize("Running runs", &v, true);
        assert_eq!(t.unique_stems.len(), 1);
        assert_eq!(t.unique_stems[0].stem, "run");
        assert_eq!(t.unique_stems[0].positions, vec![0, 1]);

        let t = tokenize("Running runs", &v, false);
        assert_eq!(t.unique_stems.len(), 2);
    }

    #[test]
    fn repeated_word_collapses() {
        let v = word_vocab(&["a", "b"]);
        let t = tokenize("a b a", &v, true);
        let got: Vec<_> = t
            .unique_stems
            .iter()
            .map(|g| (g.stem.as_str(), g.positions.clone()))
            .collect();
        assert_eq!(got, [("a", vec![0, 2]), ("b", vec![1])]);
        assert_eq!(t.subword_to_word, vec![0, 1, 2]);
    }

    #[test]
    fn empty_text() {
        let v = word_vocab(&[]);
        assert_eq!(tokenize("", &v, true), TokenizedText::default());
    }

    #[test]
    fn subword_mapping_spans_pieces() {
        let v = word_vocab(&["do", "##es", "x"]);
        let t = tokenize("does x", &v, false);
        assert_eq!(t.subword_to_word, vec![0, 0, 1]);
        assert_eq!(t.unique_stems[0].positions, vec![0, 1]);
    }

    #[test]
    fn stats_single_doc() {
        let v = word_vocab(&["a", "b"]);
        let s = corpus_stats(["a a b"], &v, true).unwrap();
        assert_eq!(
            (
                s.all_subwords,
                s.unique_subwords,
                s.all_words,
                s.unique_words,
                s.unique_stemmed_words
            ),
            (3.0, 2.0, 3.0, 2.0, 2.0)
        );
        assert!((s.retained_pct - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn stats_two_docs() {
        let v = word_vocab(&["x", "y"]);
        let s = corpus_stats(["x", "x y"], &v, true).unwrap();
        assert_eq!(s.all_subwords, 1.5);
        assert_eq!(s.unique_subwords, 1.5);
        assert_eq!(s.all_words, 1.5);
        assert_eq!(s.unique_words, 1.5);
        assert_eq!(s.unique_stemmed_words, 1.5);
        assert_eq!(s.retained_pct, 1.0);
    }

    #[test]
    fn stats_empty_corpus() {
        let v = word_vocab(&[]);
        let docs: [&str; 0] = [];
        assert!(matches!(corpus_stats(docs, &v, true), Err(Error::EmptyCorpus)));
    }
}
