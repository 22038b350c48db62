//! Character inventory, label encoding and lyric text normalization.

mod inventory;
mod normalize;
mod numbers;

pub use inventory::{TokenInventory, BLANK, BOS, EOS, QUOTE, WORD_BOUNDARY};
pub use normalize::{normalize_line, DropReason, Normalized, Normalizer};
pub use numbers::{cardinal, spell_digits};

use crate::error::{Error, Result};

/// Label ids of a normalized line; spaces become the word-boundary token.
pub fn encode(text: &str, inv: &TokenInventory) -> Result<Vec<usize>> {
    text.chars().map(|c| inv.char_id(c)).collect()
}

/// Inverse of [`encode`]. Control tokens are not text and are rejected.
pub fn decode(ids: &[usize], inv: &TokenInventory) -> Result<String> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids {
        if inv.is_control(id) {
            return Err(Error::InvalidId(id));
        }
        if Some(id) == inv.word_boundary() {
            out.push(' ');
        } else {
            out.push_str(inv.symbol(id).ok_or(Error::InvalidId(id))?);
        }
    }
    Ok(out)
}

/// Drops control tokens and renders the rest.
pub fn render(ids: &[usize], inv: &TokenInventory) -> String {
    let kept: Vec<usize> = ids
        .iter()
        .copied()
        .filter(|&i| i < inv.len() && !inv.is_control(i))
        .collect();
    decode(&kept, inv).expect("control tokens removed")
}
