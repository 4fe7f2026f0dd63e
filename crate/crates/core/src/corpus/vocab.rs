use std::collections::HashMap;

use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const TOY_SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Character vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(content: &[&str]) -> Result<Self> {
        let symbols: Vec<String> = RESERVED
            .iter()
            .chain(content)
            .map(|s| s.to_string())
            .collect();
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return invalid(format!("duplicate symbol {s:?}"));
            }
        }
        Ok(Self { symbols, index })
    }

    /// `size` ids in total: the reserved four plus single characters.
    pub fn toy(size: usize) -> Result<Self> {
        if size < RESERVED.len() {
            return invalid(format!("vocabulary size {size} below {}", RESERVED.len()));
        }
        let n = size - RESERVED.len();
        if n > TOY_SYMBOLS.len() {
            return invalid(format!("toy vocabulary supports at most {} symbols", TOY_SYMBOLS.len() + 4));
        }
        let chars: Vec<String> = TOY_SYMBOLS.chars().take(n).map(String::from).collect();
        let refs: Vec<&str> = chars.iter().map(String::as_str).collect();
        Self::new(&refs)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn first_content_id(&self) -> usize {
        RESERVED.len()
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        match self.symbols.get(id) {
            Some(s) => Ok(s),
            None => invalid(format!("token id {id} outside vocabulary of {}", self.len())),
        }
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    /// One id per character.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id(&c.to_string())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self.symbol(id)?;
            if id != PAD && id != BOS && id != EOS {
                out.push_str(s);
            }
        }
        Ok(out)
    }
}
