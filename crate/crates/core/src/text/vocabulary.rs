use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "PAD";
pub const BOS: &str = "BOS";
pub const EOS: &str = "EOS";
pub const SIL: &str = "SIL";

/// ARPAbet core inventory without stress markers.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH",
    "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH",
    "UW", "V", "W", "Y", "Z", "ZH",
];

/// Bijection between phoneme symbols and contiguous ids; `PAD` is id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeVocabulary {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for PhonemeVocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl PhonemeVocabulary {
    /// `PAD, BOS, EOS, SIL` followed by the 39 ARPAbet phonemes.
    pub fn standard() -> Self {
        let symbols = [PAD, BOS, EOS, SIL]
            .into_iter()
            .chain(ARPABET)
            .map(String::from)
            .collect();
        Self::from_symbols(symbols).expect("standard inventory is valid")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.first().map(String::as_str) != Some(PAD) {
            return Err(Error::Vocabulary("PAD must have id 0".into()));
        }
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("invalid symbol {s:?} at id {i}")));
            }
            if ids.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Vocabulary(format!("duplicate symbol {s}")));
            }
        }
        for special in [BOS, EOS, SIL] {
            if !ids.contains_key(special) {
                return Err(Error::Vocabulary(format!("missing special symbol {special}")));
            }
        }
        Ok(Self { symbols, ids })
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

    pub fn id(&self, symbol: &str) -> Result<u32> {
        self.ids
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownPhoneme(symbol.to_string()))
    }

    pub fn symbol(&self, id: u32) -> Result<&str> {
        self.symbols
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownPhonemeId(id))
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn sil_id(&self) -> u32 {
        self.ids[SIL]
    }

    /// Ids of real phonemes (everything except the four specials).
    pub fn content_ids(&self) -> Vec<u32> {
        (0..self.len() as u32)
            .filter(|&i| ![PAD, BOS, EOS, SIL].contains(&self.symbols[i as usize].as_str()))
            .collect()
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<PhonemeSequence> {
        let ids = symbols
            .iter()
            .map(|s| self.id(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let source = symbols.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ");
        PhonemeSequence::new(ids, self, source)
    }

    pub fn decode(&self, seq: &PhonemeSequence) -> Result<Vec<String>> {
        seq.ids()
            .iter()
            .map(|&i| self.symbol(i).map(String::from))
            .collect()
    }

    /// One symbol per line, line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_symbols(text.lines().map(|l| l.trim().to_string()).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// Non-empty id sequence over a vocabulary; `PAD` may only sit at either end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    ids: Vec<u32>,
    source_text: String,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab: &PhonemeVocabulary, source_text: String) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Sequence("empty phoneme sequence".into()));
        }
        for &id in &ids {
            vocab.symbol(id)?;
        }
        let n = ids.len();
        if n > 2 {
            if let Some(pos) = ids[1..n - 1].iter().position(|&i| i == vocab.pad_id()) {
                return Err(Error::Sequence(format!("PAD at interior position {}", pos + 1)));
            }
        }
        Ok(Self { ids, source_text })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }
}
