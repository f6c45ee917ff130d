use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const UNK_TOKEN: &str = "[UNK]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Subword vocabulary: one token per line, line number is the id.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    unk_id: u32,
}

impl Vocabulary {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty vocabulary token".into(),
                });
            }
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate vocabulary token {tok:?}"),
                });
            }
        }
        let unk_id = *ids
            .get(UNK_TOKEN)
            .ok_or_else(|| Error::BadFormat(format!("vocabulary lacks {UNK_TOKEN}")))?;
        Ok(Self { tokens, ids, unk_id })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The file form: tokens joined by newlines, with a trailing newline.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_follow_line_numbers() {
        let v = Vocabulary::parse("[UNK]\nthe\n##s\n").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("the"), Some(1));
        assert_eq!(v.token(2), Some("##s"));
        assert_eq!(v.unk_id(), 0);
    }

    #[test]
    fn missing_unk_is_rejected() {
        assert!(matches!(
            Vocabulary::parse("a\nb\n"),
            Err(Error::BadFormat(_))
        ));
    }

    #[test]
    fn duplicate_token_names_line() {
        match Vocabulary::parse("[UNK]\na\na\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
