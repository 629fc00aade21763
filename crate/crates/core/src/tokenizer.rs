//! Word-level tokenizer with a byte fallback.
//!
//! Text is first split into pieces: a run of word characters or a run of
//! punctuation, each optionally carrying one leading space, and runs of
//! whitespace. Pieces that appear in the learned vocabulary map to a single
//! id; anything else is spelled out with one id per UTF-8 byte. Decoding
//! concatenates the piece surfaces, so `decode(encode(s)) == s` for every
//! string.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
const N_SPECIAL: u32 = 2;
const N_BYTES: u32 = 256;

/// Pluggable tokenizer surface used by every other module.
pub trait Tokenizer: Send + Sync + std::fmt::Debug {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    /// Fails on ids outside the vocabulary.
    fn decode(&self, ids: &[TokenId]) -> Result<String>;
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> TokenId;
    fn pad_id(&self) -> TokenId;
    fn name(&self) -> &str;
    /// Surface text of a single token, bytes rendered lossily.
    fn token_text(&self, id: TokenId) -> Result<String> {
        self.decode(&[id])
    }
    /// Raw bytes of a single token.
    fn token_bytes(&self, id: TokenId) -> Result<Vec<u8>> {
        self.token_text(id).map(String::into_bytes)
    }
    fn special_token_ids(&self) -> Vec<TokenId> {
        vec![self.pad_id(), self.bos_id()]
    }
    fn is_special(&self, id: TokenId) -> bool {
        id == self.pad_id() || id == self.bos_id()
    }
}

pub type TokenizerHandle = Arc<dyn Tokenizer>;

/// Splits text into pre-tokenization pieces. Concatenating the pieces
/// reproduces the input exactly.
pub fn pretokenize(text: &str) -> Vec<&str> {
    #[derive(PartialEq, Clone, Copy)]
    enum Class {
        Word,
        Punct,
        Space,
    }
    fn class(c: char) -> Class {
        if c.is_alphanumeric() || c == '_' {
            Class::Word
        } else if c.is_whitespace() {
            Class::Space
        } else {
            Class::Punct
        }
    }

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let c = class(chars[i].1);
        match c {
            Class::Space => {
                let mut j = i;
                while j < chars.len() && class(chars[j].1) == Class::Space {
                    j += 1;
                }
                // A trailing ' ' before a non-space char belongs to the next piece.
                let mut end_idx = j;
                if j < chars.len() && chars[j - 1].1 == ' ' {
                    end_idx = j - 1;
                }
                if end_idx > i {
                    let end = chars.get(end_idx).map_or(text.len(), |x| x.0);
                    pieces.push(&text[start..end]);
                }
                if end_idx < j {
                    // lone space glued to the following run
                    let run_class = class(chars[j].1);
                    let mut k = j;
                    while k < chars.len() && class(chars[k].1) == run_class {
                        k += 1;
                    }
                    let s = chars[end_idx].0;
                    let e = chars.get(k).map_or(text.len(), |x| x.0);
                    pieces.push(&text[s..e]);
                    i = k;
                } else {
                    i = j;
                }
            }
            _ => {
                let mut j = i;
                while j < chars.len() && class(chars[j].1) == c {
                    j += 1;
                }
                let end = chars.get(j).map_or(text.len(), |x| x.0);
                pieces.push(&text[start..end]);
                i = j;
            }
        }
    }
    pieces
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordTokenizer {
    name: String,
    /// Learned multi-byte pieces, in id order after the specials and bytes.
    pieces: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, TokenId>,
}

impl WordTokenizer {
    /// Builds a vocabulary from the most frequent pieces of `docs`.
    /// Pieces seen fewer than `min_count` times are left to the byte fallback.
    pub fn train<'a, I>(docs: I, max_vocab: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let reserved = (N_SPECIAL + N_BYTES) as usize;
        if max_vocab < reserved {
            return Err(Error::config(
                "max_vocab",
                format!("must be at least {reserved} (specials + bytes)"),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for piece in pretokenize(doc) {
                if piece.len() > 1 {
                    *counts.entry(piece).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_vocab - reserved);
        let pieces: Vec<String> = ranked.into_iter().map(|(p, _)| p.to_string()).collect();
        Ok(Self::from_pieces(pieces))
    }

    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let mut hasher = Sha256::new();
        for p in &pieces {
            hasher.update(p.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hex::encode(hasher.finalize());
        let name = format!("word-bytes-{}-{}", pieces.len(), &digest[..8]);
        let mut tok = Self {
            name,
            pieces,
            lookup: HashMap::new(),
        };
        tok.rebuild_lookup();
        tok
    }

    fn rebuild_lookup(&mut self) {
        self.lookup = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), N_SPECIAL + N_BYTES + i as u32))
            .collect();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tok: Self = serde_json::from_str(&raw)?;
        tok.rebuild_lookup();
        Ok(tok)
    }

    pub fn into_handle(self) -> TokenizerHandle {
        Arc::new(self)
    }

    /// Piece frequency table, mostly useful for diagnostics.
    pub fn piece_ids(&self) -> BTreeMap<&str, TokenId> {
        self.lookup.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(text.len() / 3 + 1);
        for piece in pretokenize(text) {
            match self.lookup.get(piece) {
                Some(&id) => ids.push(id),
                None => ids.extend(piece.bytes().map(|b| N_SPECIAL + b as u32)),
            }
        }
        ids
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len() * 4);
        let vocab = self.vocab_size() as u32;
        for &id in ids {
            if id >= vocab {
                return Err(Error::Data(format!("token id {id} outside vocabulary of size {vocab}")));
            }
            if id < N_SPECIAL {
                continue;
            }
            if id < N_SPECIAL + N_BYTES {
                bytes.push((id - N_SPECIAL) as u8);
            } else {
                bytes.extend_from_slice(self.pieces[(id - N_SPECIAL - N_BYTES) as usize].as_bytes());
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn vocab_size(&self) -> usize {
        (N_SPECIAL + N_BYTES) as usize + self.pieces.len()
    }

    fn token_bytes(&self, id: TokenId) -> Result<Vec<u8>> {
        if id as usize >= self.vocab_size() {
            return Err(Error::Data(format!("token id {id} outside vocabulary")));
        }
        Ok(match id {
            id if id < N_SPECIAL => Vec::new(),
            id if id < N_SPECIAL + N_BYTES => vec![(id - N_SPECIAL) as u8],
            id => self.pieces[(id - N_SPECIAL - N_BYTES) as usize].as_bytes().to_vec(),
        })
    }

    fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> WordTokenizer {
        let docs = ["hello world", "hello there world", "the world is big"];
        WordTokenizer::train(docs.iter().copied(), 400, 1).unwrap()
    }

    #[test]
    fn pieces_reassemble_and_carry_leading_space() {
        let text = "Question: does 'he'  refer\nto Adam?\n k3 v2";
        let pieces = pretokenize(text);
        assert_eq!(pieces.concat(), text);
        assert!(pieces.contains(&" does"));
        assert!(pieces.contains(&" refer"));
        assert!(pieces.contains(&" k3"));
        assert!(pieces.contains(&"\n"));
    }

    #[test]
    fn round_trip_hello_world() {
        let tok = toy();
        let ids = tok.encode("hello world");
        assert_eq!(ids.len(), 2);
        assert_eq!(tok.decode(&ids).unwrap(), "hello world");
    }

    #[test]
    fn empty_decodes_to_empty() {
        assert_eq!(toy().decode(&[]).unwrap(), "");
    }

    #[test]
    fn out_of_vocab_id_is_data_error() {
        let tok = toy();
        let err = tok.decode(&[tok.vocab_size() as u32]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn specials_decode_to_nothing() {
        let tok = toy();
        let mut ids = vec![BOS_ID];
        ids.extend(tok.encode(" world"));
        assert_eq!(tok.decode(&ids).unwrap(), " world");
        assert!(tok.special_token_ids().iter().all(|&s| (s as usize) < tok.vocab_size()));
    }

    #[test]
    fn save_load_preserves_ids() {
        let tok = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tok.json");
        tok.save(&path).unwrap();
        let back = WordTokenizer::load(&path).unwrap();
        assert_eq!(back.name(), tok.name());
        assert_eq!(back.encode("hello there, world!"), tok.encode("hello there, world!"));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC{0,60}") {
            let tok = toy();
            prop_assert_eq!(tok.decode(&tok.encode(&s)).unwrap(), s);
        }

        #[test]
        fn decode_is_deterministic(s in "[a-z ]{0,40}") {
            let tok = toy();
            let ids = tok.encode(&s);
            prop_assert_eq!(tok.decode(&ids).unwrap(), tok.decode(&ids).unwrap());
        }
    }
}
