use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{PhonemeSequence, PhonemeVocabulary, SIL};
use crate::error::{Error, Result};

const BUNDLED_DICTIONARY: &str = include_str!("../../data/cmudict-short.txt");

/// Letter-name spellings for out-of-dictionary words.
fn spell(c: char) -> &'static [&'static str] {
    match c {
        'a' => &["EY"],
        'b' => &["B", "IY"],
        'c' => &["S", "IY"],
        'd' => &["D", "IY"],
        'e' => &["IY"],
        'f' => &["EH", "F"],
        'g' => &["JH", "IY"],
        'h' => &["EY", "CH"],
        'i' => &["AY"],
        'j' => &["JH", "EY"],
        'k' => &["K", "EY"],
        'l' => &["EH", "L"],
        'm' => &["EH", "M"],
        'n' => &["EH", "N"],
        'o' => &["OW"],
        'p' => &["P", "IY"],
        'q' => &["K", "Y", "UW"],
        'r' => &["AA", "R"],
        's' => &["EH", "S"],
        't' => &["T", "IY"],
        'u' => &["Y", "UW"],
        'v' => &["V", "IY"],
        'w' => &["D", "AH", "B", "AH", "L", "Y", "UW"],
        'x' => &["EH", "K", "S"],
        'y' => &["W", "AY"],
        'z' => &["Z", "IY"],
        '0' => &["Z", "IH", "R", "OW"],
        '1' => &["W", "AH", "N"],
        '2' => &["T", "UW"],
        '3' => &["TH", "R", "IY"],
        '4' => &["F", "AO", "R"],
        '5' => &["F", "AY", "V"],
        '6' => &["S", "IH", "K", "S"],
        '7' => &["S", "EH", "V", "AH", "N"],
        '8' => &["EY", "T"],
        '9' => &["N", "AY", "N"],
        _ => &[],
    }
}

/// Lowercase, replace punctuation with spaces, keep word-internal apostrophes.
pub fn normalize_text(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| w.trim_matches('\'').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dictionary lookup with letter-name fallback. Word boundaries become `SIL`.
#[derive(Debug, Clone)]
pub struct G2p {
    entries: HashMap<String, Vec<String>>,
}

impl G2p {
    /// The pronouncing dictionary shipped with the crate (CMUdict words of up
    /// to five letters).
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_DICTIONARY)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    /// Parse `WORD PH1 PH2 ...` lines. Alternates (`WORD(2)`) and repeated
    /// headwords never replace the first pronunciation; stress digits are
    /// stripped.
    pub fn parse(text: &str) -> Self {
        let mut entries = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let mut parts = line.split_whitespace();
            let Some(head) = parts.next() else { continue };
            let word = match head.find('(') {
                Some(i) => &head[..i],
                None => head,
            };
            let phones: Vec<String> = parts
                .map(|p| p.trim_end_matches(|c: char| c.is_ascii_digit()).to_string())
                .collect();
            if phones.is_empty() {
                continue;
            }
            entries.entry(word.to_uppercase()).or_insert(phones);
        }
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_uppercase()).map(Vec::as_slice)
    }

    /// Phoneme symbols for `text`, before vocabulary encoding.
    pub fn symbols(&self, text: &str) -> Result<Vec<String>> {
        let words = normalize_text(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut out = Vec::new();
        for (i, word) in words.iter().enumerate() {
            if i > 0 {
                out.push(SIL.to_string());
            }
            match self.lookup(word) {
                Some(phones) => out.extend(phones.iter().cloned()),
                None => {
                    let before = out.len();
                    for c in word.chars() {
                        out.extend(spell(c).iter().map(|s| s.to_string()));
                    }
                    if out.len() == before {
                        // nothing pronounceable; drop the boundary we just added
                        if i > 0 {
                            out.pop();
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(out)
    }

    pub fn convert(&self, text: &str, vocab: &PhonemeVocabulary) -> Result<PhonemeSequence> {
        let symbols = self.symbols(text)?;
        let ids = symbols
            .iter()
            .map(|s| vocab.id(s))
            .collect::<Result<Vec<_>>>()?;
        PhonemeSequence::new(ids, vocab, text.to_string())
    }
}
