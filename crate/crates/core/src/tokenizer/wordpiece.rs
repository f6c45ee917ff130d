use super::vocab::{Vocabulary, CONTINUATION_PREFIX};

/// Words longer than this many characters map straight to the unknown token.
pub const MAX_CHARS_PER_WORD: usize = 100;

/// Greedy longest-prefix WordPiece over a single whole word.
///
/// The word is lowercased first. Pieces after the first are looked up with
/// the `##` prefix. If at any position no prefix matches, the whole word
/// becomes a single unknown token.
pub fn wordpiece_tokenize(word: &str, vocab: &Vocabulary) -> Vec<u32> {
    let lower = word.to_lowercase();
    // char boundary byte offsets, including the end
    let bounds: Vec<usize> = lower
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(lower.len()))
        .collect();
    let n_chars = bounds.len() - 1;
    if n_chars == 0 {
        return Vec::new();
    }
    if n_chars > MAX_CHARS_PER_WORD {
        return vec![vocab.unk_id()];
    }

    let mut pieces = Vec::new();
    let mut candidate = String::with_capacity(lower.len() + 2);
    let mut start = 0;
    while start < n_chars {
        let mut end = n_chars;
        let mut found = None;
        while end > start {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION_PREFIX);
            }
            candidate.push_str(&lower[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        match found {
            Some(id) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    pieces
}

/// Inverse of [`wordpiece_tokenize`] for words without unknown pieces.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter_map(|&id| vocab.token(id))
        .map(|t| t.strip_prefix(CONTINUATION_PREFIX).unwrap_or(t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(tokens: &[&str]) -> Vocabulary {
        Vocabulary::from_tokens(std::iter::once("[UNK]").chain(tokens.iter().copied())).unwrap()
    }

    fn pieces(word: &str, v: &Vocabulary) -> Vec<String> {
        wordpiece_tokenize(word, v)
            .into_iter()
            .map(|id| v.token(id).unwrap().to_string())
            .collect()
    }

    #[test]
    fn doxycycline_pieces() {
        let v = vocab(&["do", "does", "##xy", "##cy", "##cl", "##ine", "##c", "##i"]);
        assert_eq!(
            pieces("doxycycline", &v),
            ["do", "##xy", "##cy", "##cl", "##ine"]
        );
    }

    #[test]
    fn whole_word_in_vocab() {
        let v = vocab(&["do", "does"]);
        assert_eq!(pieces("does", &v), ["does"]);
        assert_eq!(pieces("Does", &v), ["does"]);
    }

    #[test]
    fn unknown_fallback() {
        let v = vocab(&["a", "##b"]);
        assert_eq!(wordpiece_tokenize("zzq", &v), vec![v.unk_id()]);
        // first piece matches but the rest does not: still a single UNK
        assert_eq!(wordpiece_tokenize("az", &v), vec![v.unk_id()]);
    }

    #[test]
    fn overlong_word_is_unknown() {
        let v = vocab(&["a", "##a"]);
        let long = "a".repeat(MAX_CHARS_PER_WORD + 1);
        assert_eq!(wordpiece_tokenize(&long, &v), vec![v.unk_id()]);
    }

    #[test]
    fn multibyte_characters() {
        let v = vocab(&["é", "##t", "##é"]);
        assert_eq!(pieces("été", &v), ["é", "##t", "##é"]);
    }
}
