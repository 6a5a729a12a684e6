use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Digits and uppercase Latin letters, the alphabet of the default plate grammar.
pub const PLATE_ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Ordered alphabet. Class `i < len()` is the `i`-th character; the CTC
/// blank takes the last class index, `len()`.
#[derive(Clone, PartialEq, Eq)]
pub struct CharSet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharSet {
    pub fn new(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        if chars.is_empty() {
            return Err(Error::Config("charset is empty".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if c.is_whitespace() || c.is_control() {
                return Err(Error::Config(format!("charset contains whitespace or control character {c:?}")));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("charset repeats {c:?}")));
            }
        }
        Ok(CharSet { chars, index })
    }

    pub fn plates() -> Self {
        Self::new(PLATE_ALPHABET).expect("built-in alphabet is valid")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Characters plus the blank.
    pub fn classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, class: usize) -> Option<char> {
        self.chars.get(class).copied()
    }

    pub fn encode(&self, label: &str) -> Result<Vec<usize>> {
        label
            .chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Config(format!("label {label:?} contains {c:?}, which is outside the charset")))
            })
            .collect()
    }

    /// Maps class indices to characters, skipping the blank and anything out of range.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes.iter().filter_map(|&i| self.char_at(i)).collect()
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

impl fmt::Debug for CharSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CharSet({:?})", self.as_string())
    }
}

impl fmt::Display for CharSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.as_string())
    }
}

impl Default for CharSet {
    fn default() -> Self {
        Self::plates()
    }
}

impl Serialize for CharSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_string())
    }
}

impl<'de> Deserialize<'de> for CharSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CharSet::new(&s).map_err(serde::de::Error::custom)
    }
}
