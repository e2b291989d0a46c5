use std::collections::HashMap;

use crate::error::{Result, RginError};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
const RESERVED: usize = 2;

/// Token ↔ id map. Ids 0 and 1 are reserved for unknown and padding; known
/// tokens start at 2 in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let mut ids = HashMap::new();
        let mut list = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(RginError::Vocab(format!(
                    "token {t:?} must be non-empty, lowercase, without whitespace"
                )));
            }
            if ids.insert(t.to_string(), i + RESERVED).is_some() {
                return Err(RginError::Vocab(format!("duplicate token {t:?}")));
            }
            list.push(t.to_string());
        }
        Ok(Vocabulary { tokens: list, ids })
    }

    /// The closed vocabulary of the synthetic templates.
    pub fn synthetic() -> Self {
        Vocabulary::new(&rgin_synth::VOCABULARY).expect("template words are valid tokens")
    }

    /// Embedding rows needed, including the reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    /// One token per line; line `i` holds id `i + 2`.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        let tokens = match tokens.last() {
            Some(&"") => &tokens[..tokens.len() - 1],
            _ => &tokens[..],
        };
        Vocabulary::new(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

/// Lowercases, splits on whitespace and maps unknown words to id 0. Inputs
/// longer than `max_tokens` are truncated with a warning.
pub fn tokenize(expression: &str, vocab: &Vocabulary, max_tokens: usize) -> Result<TokenSequence> {
    let lower = expression.to_lowercase();
    let mut ids: Vec<usize> = lower.split_whitespace().map(|w| vocab.id(w)).collect();
    if ids.is_empty() {
        return Err(RginError::InvalidArgument("empty expression".into()));
    }
    if ids.len() > max_tokens {
        log::warn!(
            "expression {expression:?} has {} tokens; truncating to {max_tokens}",
            ids.len()
        );
        ids.truncate(max_tokens);
    }
    Ok(TokenSequence {
        ids,
        text: expression.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        let v = Vocabulary::synthetic();
        let a = tokenize("Red Circle", &v, 16).unwrap();
        assert_eq!(a.ids, vec![v.id("red"), v.id("circle")]);
        assert_eq!(tokenize("red  circle", &v, 16).unwrap().ids, a.ids);
        assert_eq!(
            tokenize("xyzzy circle", &v, 16).unwrap().ids,
            vec![UNK, v.id("circle")]
        );
        assert!(tokenize("   ", &v, 16).is_err());
        assert_eq!(tokenize("the the the", &v, 2).unwrap().ids.len(), 2);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::synthetic();
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(v.id("the"), 2);
        assert_eq!(v.token(2), Some("the"));
        assert_eq!(v.token(PAD), None);
        assert!(Vocabulary::parse("a\na\n").is_err());
        assert!(Vocabulary::parse("a\n\nb\n").is_err());
    }
}
