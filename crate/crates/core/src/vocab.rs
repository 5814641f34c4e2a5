//! Token vocabularies with fixed reserved entries.
//!
//! Ids 0..4 are always `<pad>`, `<s>`, `</s>`, `<unk>` in that order, so any
//! two vocabularies agree on the control tokens and serialized id sequences
//! stay meaningful across runs.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: &[&str] = &["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Debug, thiserror::Error)]
#[error("vocabulary must start with {RESERVED:?}")]
pub struct BadVocab;

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    /// Inserts the token if new; returns its id either way.
    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    pub fn contains_id(&self, id: u32) -> bool {
        (id as usize) < self.tokens.len()
    }

    /// Maps surfaces to ids, applying `<unk>` for unknown tokens.
    pub fn encode(&self, surfaces: &[String]) -> Vec<u32> {
        surfaces.iter().map(|s| self.id_or_unk(s)).collect()
    }

    /// Inverse of `encode` for known ids; reserved/unknown ids yield their
    /// literal surface so output stays printable.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .unwrap_or_else(|| "<unk>".to_string())
            })
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = BadVocab;

    fn try_from(tokens: Vec<String>) -> Result<Self, BadVocab> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != *RESERVED
        {
            return Err(BadVocab);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.tokens
    }
}
