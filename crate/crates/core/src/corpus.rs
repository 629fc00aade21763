//! Corpus ingestion and fixed-length segmentation.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenizerHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    /// One document per line.
    PlainText,
    /// One JSON object per line with a string field holding the text.
    Jsonl,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-text" | "text" | "txt" => Ok(Self::PlainText),
            "jsonl" | "jsonl-with-text-field" => Ok(Self::Jsonl),
            other => Err(Error::config("format", format!("unknown corpus format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// A malformed record; ingestion continues past it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

/// Streams documents from a corpus file in file order.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    format: CorpusFormat,
    text_field: String,
    stem: String,
    line_no: usize,
    pub skipped_empty: usize,
    pub errors: Vec<RecordError>,
}

impl CorpusReader {
    pub fn open(path: &Path, format: CorpusFormat, text_field: &str) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".into());
        Ok(Self {
            lines: BufReader::new(file).lines(),
            format,
            text_field: text_field.to_string(),
            stem,
            line_no: 0,
            skipped_empty: 0,
            errors: Vec::new(),
        })
    }

    fn parse(&self, line: &str) -> std::result::Result<String, String> {
        match self.format {
            CorpusFormat::PlainText => Ok(line.to_string()),
            CorpusFormat::Jsonl => {
                let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
                value
                    .get(&self.text_field)
                    .and_then(|v| v.as_str())
                    .map(str::to_string)
                    .ok_or_else(|| format!("missing string field {:?}", self.text_field))
            }
        }
    }
}

impl Iterator for CorpusReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(PathBuf::from(&self.stem), e))),
            };
            self.line_no += 1;
            if self.format == CorpusFormat::Jsonl && line.trim().is_empty() {
                self.skipped_empty += 1;
                continue;
            }
            match self.parse(&line) {
                Ok(text) if text.trim().is_empty() => self.skipped_empty += 1,
                Ok(text) => {
                    return Some(Ok(Document {
                        id: format!("{}:{}", self.stem, self.line_no),
                        text,
                    }))
                }
                Err(message) => {
                    log::warn!("line {}: {}", self.line_no, message);
                    self.errors.push(RecordError {
                        line: self.line_no,
                        message,
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub documents: Vec<Document>,
    pub skipped_empty: usize,
    pub errors: Vec<RecordError>,
}

pub fn load_corpus(path: &Path, format: CorpusFormat, text_field: &str) -> Result<LoadedCorpus> {
    let mut reader = CorpusReader::open(path, format, text_field)?;
    let documents = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok(LoadedCorpus {
        documents,
        skipped_empty: reader.skipped_empty,
        errors: reader.errors,
    })
}

/// Token ids tied to the tokenizer that produced them.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    tokenizer: TokenizerHandle,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, tokenizer: TokenizerHandle) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Contract("token sequence must not be empty".into()));
        }
        let vocab = tokenizer.vocab_size();
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        Ok(Self { ids, tokenizer })
    }

    pub fn from_text(text: &str, tokenizer: &TokenizerHandle) -> Result<Self> {
        Self::new(tokenizer.encode(text), Arc::clone(tokenizer))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn tokenizer(&self) -> &TokenizerHandle {
        &self.tokenizer
    }
}

pub fn detokenize(seq: &TokenSequence) -> Result<String> {
    seq.tokenizer.decode(&seq.ids)
}

#[derive(Debug, Clone)]
pub struct Segment {
    pub tokens: TokenSequence,
    pub source_doc_id: String,
    pub offset: usize,
}

impl Segment {
    pub fn label(&self) -> String {
        format!("{}@{}", self.source_doc_id, self.offset)
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    /// Tail pieces (or whole documents) shorter than two tokens.
    pub dropped: usize,
}

/// Cuts one document into consecutive pieces of `segment_length` tokens.
/// Pieces never span documents; a final piece under two tokens is dropped.
pub fn segment(doc_tokens: &TokenSequence, source_doc_id: &str, segment_length: usize) -> Result<Segmentation> {
    if segment_length < 2 {
        return Err(Error::config(
            "segment_length",
            "must be at least 2 (one context token and one target)",
        ));
    }
    let mut segments = Vec::new();
    let mut dropped = 0;
    for (k, chunk) in doc_tokens.ids().chunks(segment_length).enumerate() {
        if chunk.len() < 2 {
            dropped += 1;
            continue;
        }
        segments.push(Segment {
            tokens: TokenSequence::new(chunk.to_vec(), Arc::clone(doc_tokens.tokenizer()))?,
            source_doc_id: source_doc_id.to_string(),
            offset: k * segment_length,
        });
    }
    Ok(Segmentation { segments, dropped })
}

/// Summary written next to a tokenized corpus.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: String,
    pub tokenizer: String,
    pub documents: usize,
    pub tokens: usize,
    pub segments: usize,
    pub segment_length: usize,
    pub skipped_empty: usize,
    pub record_errors: usize,
    pub dropped_segments: usize,
}

/// Tokenizes and segments a loaded corpus, returning the segments and a manifest.
pub fn build_segments(
    corpus: &LoadedCorpus,
    tokenizer: &TokenizerHandle,
    segment_length: usize,
    source: &str,
) -> Result<(Vec<Segment>, CorpusManifest)> {
    let mut manifest = CorpusManifest {
        source: source.to_string(),
        tokenizer: tokenizer.name().to_string(),
        segment_length,
        skipped_empty: corpus.skipped_empty,
        record_errors: corpus.errors.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for doc in &corpus.documents {
        let ids = tokenizer.encode(&doc.text);
        if ids.is_empty() {
            manifest.dropped_segments += 1;
            continue;
        }
        manifest.documents += 1;
        manifest.tokens += ids.len();
        let seq = TokenSequence::new(ids, Arc::clone(tokenizer))?;
        let seg = segment(&seq, &doc.id, segment_length)?;
        manifest.dropped_segments += seg.dropped;
        out.extend(seg.segments);
    }
    manifest.segments = out.len();
    Ok((out, manifest))
}
