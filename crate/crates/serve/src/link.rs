use std::collections::HashMap;

use c2crs_core::corpus::{tokenize, EntityId};

/// Exact, lowercase surface-form lookup of entity names in tokenized text.
/// Longer names win over shorter ones starting at the same token.
#[derive(Debug, Clone, Default)]
pub struct EntityLinker {
    names: HashMap<Vec<String>, EntityId>,
    longest: usize,
}

impl EntityLinker {
    pub fn new<'a>(names: impl IntoIterator<Item = (EntityId, &'a str)>) -> Self {
        let mut linker = Self::default();
        for (id, name) in names {
            let key = tokenize(name);
            if key.is_empty() {
                continue;
            }
            linker.longest = linker.longest.max(key.len());
            linker.names.entry(key).or_insert(id);
        }
        linker
    }

    /// Entities mentioned in `tokens`, left to right, without overlaps.
    pub fn link(&self, tokens: &[String]) -> Vec<EntityId> {
        let mut out = Vec::new();
        let mut i = 0;
        'scan: while i < tokens.len() {
            for len in (1..=self.longest.min(tokens.len() - i)).rev() {
                if let Some(&id) = self.names.get(&tokens[i..i + len]) {
                    out.push(id);
                    i += len;
                    continue 'scan;
                }
            }
            i += 1;
        }
        out
    }
}
