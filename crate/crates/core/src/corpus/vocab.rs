use std::collections::HashMap;

use super::TokenId;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

/// Whitespace split followed by lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Dense token table with corpus frequencies.
///
/// Ids `0..5` are reserved for `<pad>`, `<unk>`, `<bos>`, `<eos>` and the
/// utterance separator `<sep>`; those never receive corpus counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    frequency: Vec<u64>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const PAD_ID: TokenId = 0;
    pub const UNK_ID: TokenId = 1;
    pub const BOS_ID: TokenId = 2;
    pub const EOS_ID: TokenId = 3;
    pub const SEP_ID: TokenId = 4;
    pub const N_SPECIAL: usize = 5;

    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
            frequency: Vec::new(),
        };
        for s in [PAD, UNK, BOS, EOS, SEP] {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        self.frequency.push(0);
        id
    }

    /// Adds one occurrence of `token`, creating it on first sight.
    pub fn observe(&mut self, token: &str) -> TokenId {
        let id = self.insert(token);
        self.frequency[id as usize] += 1;
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Maps unknown tokens to `<unk>`.
    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.id(t).unwrap_or(Self::UNK_ID))
            .collect()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn frequency(&self, id: TokenId) -> u64 {
        self.frequency.get(id as usize).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> &[u64] {
        &self.frequency
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: TokenId) -> bool {
        (id as usize) < Self::N_SPECIAL
    }
}
