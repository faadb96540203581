use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::SurfaceLexicon;
use crate::error::{Error, Result};
use crate::sampling::fixed_words;

/// Closed word-level vocabulary: sentinels, template and frame words, then
/// every lexicon surface word, each group in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Tokenizer {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const PAD: u32 = 2;
    pub const CLIP: u32 = 3;
    const SPECIALS: [&'static str; 4] = ["<bos>", "<eos>", "<pad>", "<clip>"];

    pub fn new<'a>(lexicons: impl IntoIterator<Item = &'a SurfaceLexicon>) -> Self {
        let mut words: Vec<String> = Self::SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(fixed_words().into_iter().map(String::from));
        let fixed: BTreeSet<String> = words.iter().cloned().collect();
        let surfaces: BTreeSet<String> = lexicons
            .into_iter()
            .flat_map(SurfaceLexicon::words)
            .filter(|w| !fixed.contains(w))
            .collect();
        words.extend(surfaces);
        Self::from(words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split and map every word; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Lookup(format!("word `{w}` not in vocabulary"))))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, ids }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Vec<String> {
        t.words
    }
}
