use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type TokenId = u32;

/// Begin token; also the whole transcript when nothing is left to encode.
pub const BOS: TokenId = 0;

pub const OBJECTS: [&str; 8] = [
    "circle", "square", "triangle", "star", "heart", "cross", "ring", "diamond",
];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
/// Quadrants of the 4×4 grid, in (top-left, top-right, bottom-left, bottom-right) order.
pub const POSITIONS: [&str; 4] = ["topleft", "topright", "bottomleft", "bottomright"];
const FUNCTION_WORDS: [&str; 12] = [
    "a", "picture", "so", "in", "this", "i", "see", "at", "and", "that", "is", "it",
];
pub const FILLERS: [&str; 5] = ["um", "uh", "like", "well", "hmm"];
/// Words naming the background tint. They are in the table but never spoken.
pub const TINTS: [&str; 4] = ["pale", "warm", "cool", "dark"];

/// Fixed token table shared by every generated dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        let tokens = std::iter::once("<bos>")
            .chain(OBJECTS)
            .chain(COLORS)
            .chain(POSITIONS)
            .chain(FUNCTION_WORDS)
            .chain(FILLERS)
            .chain(TINTS)
            .map(String::from)
            .collect();
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.tokens
            .iter()
            .position(|t| t == word)
            .map(|i| i as TokenId)
            .ok_or_else(|| invalid(format!("`{word}` is not in the vocabulary")))
    }

    /// Id of a word known to be in the standard table.
    pub(crate) fn known(&self, word: &str) -> TokenId {
        self.id(word).expect("standard vocabulary word")
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn object(&self, i: usize) -> TokenId {
        self.known(OBJECTS[i])
    }

    pub fn color(&self, i: usize) -> TokenId {
        self.known(COLORS[i])
    }

    pub fn position(&self, q: usize) -> TokenId {
        self.known(POSITIONS[q])
    }

    /// Tokens that carry scene content: objects, colors and positions.
    pub fn content_ids(&self) -> Vec<TokenId> {
        OBJECTS
            .iter()
            .chain(&COLORS)
            .chain(&POSITIONS)
            .map(|w| self.known(w))
            .collect()
    }

    pub fn filler_ids(&self) -> Vec<TokenId> {
        FILLERS.iter().map(|w| self.known(w)).collect()
    }

    pub fn tint_ids(&self) -> Vec<TokenId> {
        TINTS.iter().map(|w| self.known(w)).collect()
    }

    pub fn is_filler(&self, id: TokenId) -> bool {
        self.word(id).is_some_and(|w| FILLERS.contains(&w))
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_table_layout() {
        let v = Vocabulary::standard();
        assert_eq!(v.word(BOS), Some("<bos>"));
        assert_eq!(v.len(), 38);
        assert_eq!(v.content_ids().len(), 16);
        assert!(v.tint_ids().iter().all(|t| !v.content_ids().contains(t)));
        assert!(v.is_filler(v.known("uh")));
    }
}
