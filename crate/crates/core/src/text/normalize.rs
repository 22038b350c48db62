use std::fmt;

use regex::Regex;

use super::inventory::TokenInventory;
use super::numbers::spell_digits;

/// Outcome of normalizing one line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Normalized {
    Kept(String),
    Dropped(DropReason),
}

impl Normalized {
    pub fn kept(&self) -> Option<&str> {
        match self {
            Normalized::Kept(s) => Some(s),
            Normalized::Dropped(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DropReason {
    /// The raw line matched a named meaningless-line pattern.
    Pattern(String),
    /// Nothing lexical survived normalization.
    Empty,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::Pattern(name) => write!(f, "PATTERN:{name}"),
            DropReason::Empty => write!(f, "EMPTY"),
        }
    }
}

/// Lyric line normalizer.
///
/// Steps, in order: meaningless-line patterns on the raw line, curly quotes to
/// `'`, upper-casing, comma-grouped numbers joined, digit runs spelled out,
/// dashes/underscores/slashes to spaces, every other out-of-inventory
/// character discarded, whitespace collapsed. A line without any letter left
/// is dropped.
#[derive(Clone, Debug)]
pub struct Normalizer {
    inventory: TokenInventory,
    patterns: Vec<(String, Regex)>,
    grouped_number: Regex,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::new(TokenInventory::default())
    }
}

impl Normalizer {
    pub fn new(inventory: TokenInventory) -> Self {
        let patterns = vec![
            ("stage-direction".to_string(), Regex::new(r"^\s*\*.*\*\s*$").unwrap()),
            ("section-tag".to_string(), Regex::new(r"^\s*\[[^\]]*\]\s*$").unwrap()),
        ];
        Self {
            inventory,
            patterns,
            grouped_number: Regex::new(r"\d{1,3}(?:,\d{3})+\b").unwrap(),
        }
    }

    pub fn with_patterns(mut self, patterns: Vec<(String, Regex)>) -> Self {
        self.patterns = patterns;
        self
    }

    pub fn add_pattern(&mut self, name: &str, re: Regex) {
        self.patterns.push((name.to_string(), re));
    }

    pub fn inventory(&self) -> &TokenInventory {
        &self.inventory
    }

    pub fn normalize(&self, raw: &str) -> Normalized {
        let raw = raw.trim_end_matches(['\n', '\r']);
        for (name, re) in &self.patterns {
            if re.is_match(raw) {
                return Normalized::Dropped(DropReason::Pattern(name.clone()));
            }
        }
        let quoted: String = raw
            .chars()
            .map(|c| match c {
                '\u{2018}' | '\u{2019}' | '\u{02BC}' | '`' => '\'',
                c => c,
            })
            .collect();
        let upper = quoted.to_uppercase();
        let joined = self
            .grouped_number
            .replace_all(&upper, |caps: &regex::Captures| caps[0].replace(',', ""));

        let mut spelled = String::with_capacity(joined.len() * 2);
        let mut digits = String::new();
        let flush = |digits: &mut String, out: &mut String| {
            if !digits.is_empty() {
                out.push(' ');
                out.push_str(&spell_digits(digits));
                out.push(' ');
                digits.clear();
            }
        };
        for c in joined.chars() {
            if c.is_ascii_digit() {
                digits.push(c);
            } else {
                flush(&mut digits, &mut spelled);
                spelled.push(c);
            }
        }
        flush(&mut digits, &mut spelled);

        let mut out = String::with_capacity(spelled.len());
        let mut pending_space = false;
        for c in spelled.chars() {
            let c = match c {
                '-' | '\u{2010}' | '\u{2013}' | '\u{2014}' | '_' | '/' => ' ',
                c if c.is_whitespace() => ' ',
                c => c,
            };
            if c == ' ' {
                pending_space = !out.is_empty();
            } else if self.inventory.accepts_char(c) {
                if pending_space {
                    out.push(' ');
                    pending_space = false;
                }
                out.push(c);
            }
        }
        if out.chars().any(|c| c.is_ascii_alphabetic()) {
            Normalized::Kept(out)
        } else {
            Normalized::Dropped(DropReason::Empty)
        }
    }
}

/// Normalizes with the default inventory and patterns.
pub fn normalize_line(raw: &str) -> Normalized {
    thread_local! {
        static DEFAULT: Normalizer = Normalizer::default();
    }
    DEFAULT.with(|n| n.normalize(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn guitar_solo_is_dropped() {
        assert!(matches!(
            normalize_line("**guitar solo**"),
            Normalized::Dropped(DropReason::Pattern(_))
        ));
    }

    #[test]
    fn case_and_whitespace() {
        assert_eq!(normalize_line("hello   world").kept(), Some("HELLO WORLD"));
        assert_eq!(normalize_line("  \thello\t ").kept(), Some("HELLO"));
    }

    #[test]
    fn digits_become_words() {
        assert_eq!(normalize_line("I've got 2 hearts").kept(), Some("I'VE GOT TWO HEARTS"));
        assert_eq!(normalize_line("1,000 miles").kept(), Some("ONE THOUSAND MILES"));
        assert_eq!(normalize_line("route66").kept(), Some("ROUTE SIXTY SIX"));
    }

    #[test]
    fn curly_quotes_and_oov() {
        assert_eq!(normalize_line("don’t stop!").kept(), Some("DON'T STOP"));
        assert_eq!(normalize_line("la-la-la").kept(), Some("LA LA LA"));
        assert_eq!(normalize_line("¿qué?").kept(), Some("QU"));
    }

    #[test]
    fn empty_lines_are_dropped() {
        for raw in ["", "   ", "?!", "'", "[Chorus]"] {
            assert!(normalize_line(raw).kept().is_none(), "{raw:?}");
        }
    }

    proptest! {
        #[test]
        fn idempotent_and_in_inventory(raw in "\\PC{0,40}") {
            let inv = TokenInventory::default();
            if let Normalized::Kept(once) = normalize_line(&raw) {
                prop_assert!(once.chars().all(|c| c == ' ' || inv.accepts_char(c)));
                prop_assert!(!once.contains("  "));
                prop_assert_eq!(normalize_line(&once), Normalized::Kept(once.clone()));
            }
        }
    }
}
