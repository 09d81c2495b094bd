//! Character inventory and the token/class id layouts built on it.
//!
//! With `n` characters the token ids are `0..n` for characters followed by
//! the reserved ids `blank = n`, `eos = n + 1`, `sos = n + 2`, `pad = n + 3`.
//! CTC heads have `n + 1` channels (blank last); decoder heads have `n + 1`
//! classes (characters, then eos).

use std::collections::{BTreeSet, HashMap};

use crate::error::{HtrError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let chars: Vec<char> = chars.into_iter().collect();
        if chars.is_empty() {
            return Err(HtrError::Empty("alphabet has no characters".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(HtrError::Config(format!("duplicate alphabet character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    /// Sorted set of every character occurring in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let set: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::new(set)
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    /// Number of real characters.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn blank_id(&self) -> usize {
        self.len()
    }

    pub fn eos_id(&self) -> usize {
        self.len() + 1
    }

    pub fn sos_id(&self) -> usize {
        self.len() + 2
    }

    pub fn pad_id(&self) -> usize {
        self.len() + 3
    }

    /// Rows of the decoder's token embedding table.
    pub fn token_count(&self) -> usize {
        self.len() + 4
    }

    pub fn ctc_classes(&self) -> usize {
        self.len() + 1
    }

    pub fn decoder_classes(&self) -> usize {
        self.len() + 1
    }

    pub fn class_to_token(&self, class: usize) -> usize {
        if class < self.len() {
            class
        } else {
            self.eos_id()
        }
    }

    pub fn token_to_class(&self, token: usize) -> Option<usize> {
        if token < self.len() {
            Some(token)
        } else if token == self.eos_id() {
            Some(self.len())
        } else {
            None
        }
    }

    pub fn contains(&self, c: char) -> bool {
        self.index.contains_key(&c)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut unknown = Vec::new();
        let ids = text
            .chars()
            .filter_map(|c| match self.index.get(&c) {
                Some(&i) => Some(i),
                None => {
                    if !unknown.contains(&c) {
                        unknown.push(c);
                    }
                    None
                }
            })
            .collect();
        if unknown.is_empty() {
            Ok(ids)
        } else {
            Err(HtrError::UnknownCharacters(unknown))
        }
    }

    /// `sos, chars..., eos`.
    pub fn encode_target(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(self.sos_id());
        ids.extend(self.encode(text)?);
        ids.push(self.eos_id());
        Ok(ids)
    }

    /// Maps character ids back to text; reserved ids are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_distinct_and_outside_characters() {
        let a = Alphabet::new("abc".chars()).unwrap();
        let reserved = [a.blank_id(), a.eos_id(), a.sos_id(), a.pad_id()];
        for (i, r) in reserved.iter().enumerate() {
            assert!(*r >= a.len());
            assert!(!reserved[..i].contains(r));
        }
        assert_eq!(a.class_to_token(3), a.eos_id());
        assert_eq!(a.token_to_class(a.eos_id()), Some(3));
        assert_eq!(a.token_to_class(a.sos_id()), None);
    }

    #[test]
    fn encode_reports_every_unknown_character() {
        let a = Alphabet::new("ab".chars()).unwrap();
        match a.encode("axbyx") {
            Err(HtrError::UnknownCharacters(cs)) => assert_eq!(cs, vec!['x', 'y']),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Alphabet::new("aba".chars()).is_err());
        assert!(Alphabet::new("".chars()).is_err());
    }
}
