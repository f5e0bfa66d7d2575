//! Token vocabulary with four reserved ids.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new()
    }
}

impl Vocabulary {
    /// Only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Option<Self> {
        if tokens.len() < RESERVED.len()
            || tokens.iter().zip(RESERVED).any(|(a, b)| a.as_ref() != b)
        {
            return None;
        }
        let mut v = Vocabulary::new();
        for t in &tokens[RESERVED.len()..] {
            if v.index.contains_key(t.as_ref()) {
                return None;
            }
            v.add(t.as_ref());
        }
        Some(v)
    }

    /// Adds words in first-seen order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        let mut v = Vocabulary::new();
        for w in words {
            v.add(w);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown words map to UNK.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words
            .iter()
            .map(|w| self.id(w.as_ref()).unwrap_or(UNK))
            .collect()
    }

    /// Words for `ids`, stopping at EOS and dropping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}
