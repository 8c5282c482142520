//! Text frontend: phoneme inventory and dictionary-based grapheme-to-phoneme
//! conversion.

mod g2p;
mod vocabulary;

pub use g2p::{normalize_text, G2p};
pub use vocabulary::{PhonemeSequence, PhonemeVocabulary, ARPABET, BOS, EOS, PAD, SIL};
