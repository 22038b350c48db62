use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const WORD_BOUNDARY: &str = "|";
pub const QUOTE: &str = "'";

/// Ordered token vocabulary. Id = position in `symbols`.
///
/// `blank` and `eos` are mandatory; `bos`, the word boundary and the quote
/// are optional so that tiny test inventories can be built.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    blank: usize,
    bos: Option<usize>,
    eos: usize,
    word_boundary: Option<usize>,
    quote: Option<usize>,
}

impl Default for TokenInventory {
    /// The 31-token character inventory: blank, bos, eos, word boundary,
    /// apostrophe and the 26 letters.
    fn default() -> Self {
        let mut symbols: Vec<String> = [BLANK, BOS, EOS, WORD_BOUNDARY, QUOTE]
            .iter()
            .map(|s| s.to_string())
            .collect();
        symbols.extend(('A'..='Z').map(String::from));
        Self::from_symbols(symbols).expect("default inventory is valid")
    }
}

impl TokenInventory {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::InvalidInventory(format!("empty symbol at line {i}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::InvalidInventory(format!("duplicate symbol {s:?}")));
            }
        }
        let find = |s: &str| index.get(s).copied();
        let blank = find(BLANK).ok_or_else(|| Error::InvalidInventory("no <blank>".into()))?;
        let eos = find(EOS).ok_or_else(|| Error::InvalidInventory("no <eos>".into()))?;
        Ok(Self {
            bos: find(BOS),
            word_boundary: find(WORD_BOUNDARY),
            quote: find(QUOTE),
            symbols,
            index,
            blank,
            eos,
        })
    }

    /// Blank first, the given single-character labels, then eos.
    pub fn with_labels(labels: &[char]) -> Result<Self> {
        let mut symbols = vec![BLANK.to_string()];
        symbols.extend(labels.iter().map(|c| c.to_string()));
        symbols.push(EOS.to_string());
        Self::from_symbols(symbols)
    }

    /// One symbol per line, line number = id.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_symbols(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_text(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    /// SHA-256 of the serialized inventory.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn bos(&self) -> Option<usize> {
        self.bos
    }

    /// First input of the attention decoder and the language model: bos when
    /// the inventory has one, eos otherwise.
    pub fn start_token(&self) -> usize {
        self.bos.unwrap_or(self.eos)
    }

    pub fn word_boundary(&self) -> Option<usize> {
        self.word_boundary
    }

    pub fn quote(&self) -> Option<usize> {
        self.quote
    }

    pub fn is_control(&self, id: usize) -> bool {
        id == self.blank || id == self.eos || Some(id) == self.bos
    }

    /// Size of the blank-free output space used by the attention decoder and
    /// the language model.
    pub fn label_count(&self) -> usize {
        self.symbols.len() - 1
    }

    /// Position of a non-blank id in the blank-free output space.
    pub fn label_index(&self, id: usize) -> Result<usize> {
        if id >= self.symbols.len() || id == self.blank {
            return Err(Error::InvalidToken(id));
        }
        Ok(if id > self.blank { id - 1 } else { id })
    }

    pub fn label_id(&self, index: usize) -> usize {
        if index >= self.blank {
            index + 1
        } else {
            index
        }
    }

    /// Tokens a hypothesis may be extended with: everything but blank and bos.
    pub fn emittable(&self) -> Vec<usize> {
        (0..self.symbols.len())
            .filter(|&i| i != self.blank && Some(i) != self.bos)
            .collect()
    }

    /// Id for a character of normalized text.
    pub fn char_id(&self, c: char) -> Result<usize> {
        if c == ' ' {
            return self.word_boundary.ok_or(Error::UnknownSymbol(c));
        }
        let mut buf = [0u8; 4];
        match self.index.get(&*c.encode_utf8(&mut buf)) {
            Some(&id) if !self.is_control(id) && Some(id) != self.word_boundary => Ok(id),
            _ => Err(Error::UnknownSymbol(c)),
        }
    }

    /// Whether `c` may appear in normalized text (space included).
    pub fn accepts_char(&self, c: char) -> bool {
        self.char_id(c).is_ok()
    }
}
