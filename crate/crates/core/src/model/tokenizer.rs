// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy longest-match tokenizer with SentencePiece-style space marker and
//! byte fallback.
//!
//! Text gets one leading marker and every space becomes the marker before
//! matching; `detokenize` undoes both. Byte-fallback tokens are spelled
//! `<0xHH>` and only ever produced for spans no regular token covers.
//! A literal marker character in the input does not survive the round trip.

use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TokenId;
use crate::error::{Error, Result};

pub const DEFAULT_SPACE_MARKER: &str = "\u{2581}";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    space_marker: String,
    index: HashMap<String, TokenId>,
    byte_ids: Vec<Option<TokenId>>,
    byte_of: Vec<Option<u8>>,
    max_token_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    tokens: Vec<String>,
    #[serde(default = "default_marker")]
    space_marker: String,
}

fn default_marker() -> String {
    DEFAULT_SPACE_MARKER.to_string()
}

fn parse_byte_token(s: &str) -> Option<u8> {
    let hex = s.strip_prefix("<0x")?.strip_suffix('>')?;
    if hex.len() != 2 {
        return None;
    }
    u8::from_str_radix(hex, 16).ok()
}

/// The byte-fallback spelling of `b`.
pub fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

/// Token string used for set comparisons: one leading space marker (or
/// ASCII space) removed, case preserved.
pub fn normalize_token<'a>(token: &'a str, space_marker: &str) -> &'a str {
    token
        .strip_prefix(space_marker)
        .or_else(|| token.strip_prefix(' '))
        .unwrap_or(token)
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, space_marker: impl Into<String>) -> Result<Self> {
        let space_marker = space_marker.into();
        if space_marker.chars().count() != 1 {
            return Err(Error::Vocab("space marker must be a single character".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut byte_ids = vec![None; 256];
        let mut byte_of = vec![None; tokens.len()];
        let mut max_token_len = 0;
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("token {id} is empty")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
            if let Some(b) = parse_byte_token(t) {
                byte_ids[b as usize] = Some(id);
                byte_of[id] = Some(b);
            } else {
                max_token_len = max_token_len.max(t.len());
            }
        }
        Ok(Self {
            tokens,
            space_marker,
            index,
            byte_ids,
            byte_of,
            max_token_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn space_marker(&self) -> &str {
        &self.space_marker
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Normalised form of token `id` (see [`normalize_token`]).
    pub fn normalized(&self, id: TokenId) -> Option<&str> {
        self.token(id).map(|t| normalize_token(t, &self.space_marker))
    }

    pub fn is_byte_token(&self, id: TokenId) -> bool {
        self.byte_of.get(id).is_some_and(Option::is_some)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.is_empty() {
            return Ok(Vec::new());
        }
        let s = format!("{}{}", self.space_marker, text.replace(' ', &self.space_marker));
        let mut out = Vec::new();
        let mut i = 0;
        'outer: while i < s.len() {
            let rest = &s[i..];
            let mut len = self.max_token_len.min(rest.len());
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(&id) = self.index.get(&rest[..len]) {
                        if self.byte_of[id].is_none() {
                            out.push(id);
                            i += len;
                            continue 'outer;
                        }
                    }
                }
                len -= 1;
            }
            let ch = rest.chars().next().expect("non-empty rest");
            let mut buf = [0u8; 4];
            for &b in ch.encode_utf8(&mut buf).as_bytes() {
                let id = self.byte_ids[b as usize].ok_or_else(|| {
                    Error::Vocab(format!(
                        "no token covers {ch:?} and byte fallback {} is missing",
                        byte_token(b)
                    ))
                })?;
                out.push(id);
            }
            i += ch.len_utf8();
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let t = self
                .tokens
                .get(id)
                .ok_or_else(|| Error::Range(format!("token id {id} >= vocabulary size {}", self.len())))?;
            match self.byte_of[id] {
                Some(b) => bytes.push(b),
                None => bytes.extend_from_slice(t.as_bytes()),
            }
        }
        let text = String::from_utf8_lossy(&bytes).replace(&self.space_marker, " ");
        Ok(text.strip_prefix(' ').map(str::to_string).unwrap_or(text))
    }
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        VocabFile {
            tokens: self.tokens.clone(),
            space_marker: self.space_marker.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = VocabFile::deserialize(deserializer)?;
        Vocabulary::new(raw.tokens, raw.space_marker).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(ts: &[&str]) -> Vocabulary {
        Vocabulary::new(ts.iter().map(|s| s.to_string()).collect(), DEFAULT_SPACE_MARKER).unwrap()
    }

    fn with_bytes(ts: &[&str]) -> Vocabulary {
        let mut v: Vec<String> = ts.iter().map(|s| s.to_string()).collect();
        v.extend((0u8..=255).map(byte_token));
        Vocabulary::new(v, DEFAULT_SPACE_MARKER).unwrap()
    }

    #[test]
    fn empty_text() {
        assert!(words(&["a"]).tokenize("").unwrap().is_empty());
        assert_eq!(words(&["a"]).detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn hand_trace() {
        let v = words(&["▁apple", "▁pie", "▁app"]);
        assert_eq!(v.tokenize("apple pie").unwrap(), vec![0, 1]);
        assert_eq!(v.detokenize(&[0, 1]).unwrap(), "apple pie");
        assert_eq!(v.detokenize(&[1]).unwrap(), "pie");
    }

    #[test]
    fn byte_fallback_and_errors() {
        let v = with_bytes(&["▁hi"]);
        let ids = v.tokenize("hi é!").unwrap();
        assert_eq!(ids[0], 0);
        assert!(ids[1..].iter().all(|&i| v.is_byte_token(i)));
        assert_eq!(v.detokenize(&ids).unwrap(), "hi é!");
        let w = words(&["▁hi"]);
        assert!(matches!(w.tokenize("hi there"), Err(Error::Vocab(_))));
        assert!(matches!(w.detokenize(&[3]), Err(Error::Range(_))));
    }

    #[test]
    fn byte_spelling_is_not_matched_literally() {
        let v = with_bytes(&["▁"]);
        let ids = v.tokenize("<0x41>").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "<0x41>");
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], DEFAULT_SPACE_MARKER).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_token("▁cat", "▁"), "cat");
        assert_eq!(normalize_token(" cat", "▁"), "cat");
        assert_eq!(normalize_token("Cat", "▁"), "Cat");
    }

    #[test]
    fn json_roundtrip() {
        let v = words(&["▁a", "b"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn roundtrip(s in "[a-z ,.!?'’é]{0,40}") {
            let v = with_bytes(&["▁the", "▁a", "th", "e", "▁", ","]);
            let ids = v.tokenize(&s).unwrap();
            prop_assert_eq!(v.detokenize(&ids).unwrap(), s);
        }
    }
}
