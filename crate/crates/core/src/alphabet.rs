//! Phoneme inventories and their cueing code: each phoneme maps to a hand
//! shape, a hand position and a lip viseme.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Error, Result};

pub const NUM_SHAPES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    French,
    English,
}

impl Language {
    pub fn num_positions(self) -> usize {
        match self {
            Language::French => 5,
            Language::English => 4,
        }
    }

    pub fn num_visemes(self) -> usize {
        match self {
            Language::French => 8,
            Language::English => 11,
        }
    }

    fn symbols(self) -> &'static [&'static str] {
        match self {
            Language::French => &FRENCH,
            Language::English => &ENGLISH,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::French => "french",
            Language::English => "english",
        })
    }
}

const FRENCH: [&str; 33] = [
    "p", "b", "t", "d", "k", "g", "f", "v", "s", "z", "S", "Z", "m", "n", "J", "l", "R", "j", "w", "H", "i", "e",
    "E", "a", "o", "O", "u", "y", "2", "9", "@", "a~", "o~",
];

const ENGLISH: [&str; 41] = [
    "p", "b", "t", "d", "k", "g", "f", "v", "T", "D", "s", "z", "S", "Z", "h", "tS", "dZ", "m", "n", "N", "l", "r",
    "j", "w", "I", "e", "{", "Q", "V", "U", "@", "i:", "A:", "O:", "u:", "3:", "eI", "aI", "OI", "@U", "aU",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coding {
    pub shape: usize,
    pub position: usize,
    pub viseme: usize,
}

/// Ordered phoneme inventory. Symbol `phonemes[i]` has index `i + 1`; index 0
/// is the CTC blank.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhonemeAlphabet {
    pub language: Language,
    pub phonemes: Vec<String>,
    pub coding: BTreeMap<String, Coding>,
}

impl PhonemeAlphabet {
    /// Built-in inventory with round-robin coding: the `i`-th phoneme gets
    /// shape `i mod 8`, position `i mod P`, viseme `i mod V`.
    pub fn builtin(language: Language) -> Self {
        let phonemes: Vec<String> = language.symbols().iter().map(|s| s.to_string()).collect();
        let coding = phonemes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let c = Coding {
                    shape: i % NUM_SHAPES,
                    position: i % language.num_positions(),
                    viseme: i % language.num_visemes(),
                };
                (s.clone(), c)
            })
            .collect();
        Self { language, phonemes, coding }
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    /// CTC vocabulary: phonemes plus blank.
    pub fn vocab(&self) -> usize {
        self.len() + 1
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p == symbol).map(|i| i + 1)
    }

    pub fn symbol(&self, index: usize) -> Result<&str> {
        ensure!(index >= 1 && index <= self.len(), "phoneme index {index} out of range 1..={}", self.len());
        Ok(&self.phonemes[index - 1])
    }

    pub fn coding_of(&self, index: usize) -> Result<Coding> {
        let s = self.symbol(index)?;
        self.coding.get(s).copied().ok_or_else(|| invalid!("phoneme {s} has no coding"))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.phonemes.is_empty(), "alphabet is empty");
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.phonemes {
            ensure!(seen.insert(p.as_str()), "duplicate phoneme symbol {p:?}");
            let c = self.coding.get(p).ok_or_else(|| invalid!("phoneme {p:?} has no coding"))?;
            ensure!(c.shape < NUM_SHAPES, "phoneme {p:?}: shape {} out of range", c.shape);
            ensure!(
                c.position < self.language.num_positions(),
                "phoneme {p:?}: position {} out of range for {}",
                c.position,
                self.language
            );
            ensure!(
                c.viseme < self.language.num_visemes(),
                "phoneme {p:?}: viseme {} out of range for {}",
                c.viseme,
                self.language
            );
        }
        if let Some(extra) = self.coding.keys().find(|k| !seen.contains(k.as_str())) {
            return Err(invalid!("coding entry {extra:?} is not in the phoneme list"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("alphabet serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: Self = serde_json::from_str(text).map_err(|e| Error::parse("<alphabet>", e.to_string()))?;
        a.validate()?;
        Ok(a)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let a: Self = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        a.validate()?;
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_inventories() {
        for (lang, n) in [(Language::French, 33), (Language::English, 41)] {
            let a = PhonemeAlphabet::builtin(lang);
            assert_eq!(a.len(), n);
            a.validate().unwrap();
            for i in 1..=n {
                assert_eq!(a.index_of(a.symbol(i).unwrap()), Some(i));
            }
            assert!(a.symbol(0).is_err());
            assert!(a.symbol(n + 1).is_err());
        }
    }

    #[test]
    fn json_round_trip() {
        let a = PhonemeAlphabet::builtin(Language::English);
        let b = PhonemeAlphabet::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        let mut bad = a.clone();
        bad.coding.get_mut("p").unwrap().position = 4;
        assert!(PhonemeAlphabet::from_json(&bad.to_json()).is_err());
    }
}
