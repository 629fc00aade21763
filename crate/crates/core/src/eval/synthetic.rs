//! Key-value retrieval task with known informative tokens.
//!
//! Every demonstration is a line of filler words followed by a key and its
//! value, e.g. ` the over k3 v1`. A task fixes one random key→value mapping;
//! queries show filler plus a key and ask for the value. Keys and values use
//! vocabularies disjoint from the filler words, so payload tokens can be
//! recognised by identity alone.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::{ClassificationTask, Instance, Template};
use crate::tokenizer::{TokenId, Tokenizer};

pub const FILLER_WORDS: [&str; 40] = [
    "the", "a", "of", "and", "to", "in", "is", "was", "it", "for", "on", "that", "with", "as", "at", "by", "from",
    "this", "but", "or", "an", "be", "are", "so", "very", "then", "over", "under", "just", "some", "more", "most",
    "such", "only", "also", "here", "there", "when", "where", "while",
];

pub const KEY_POOL: usize = 16;
pub const VALUE_POOL: usize = 4;

pub fn key_word(i: usize) -> String {
    format!("k{i}")
}

pub fn value_word(i: usize) -> String {
    format!("v{i}")
}

/// Whether a surface piece (with or without its leading space) is a key or
/// value word.
pub fn is_payload_piece(piece: &str) -> bool {
    let w = piece.trim_start();
    let mut chars = w.chars();
    matches!(chars.next(), Some('k') | Some('v')) && !w[1..].is_empty() && w[1..].chars().all(|c| c.is_ascii_digit())
}

/// Marks the payload tokens of an id sequence.
pub fn payload_mask(ids: &[TokenId], tokenizer: &dyn Tokenizer) -> Vec<bool> {
    ids.iter()
        .map(|&id| tokenizer.token_text(id).map(|t| is_payload_piece(&t)).unwrap_or(false))
        .collect()
}

/// Number of filler words for one line at the given filler fraction of the
/// line's words, randomised between the two nearest integers.
fn filler_count(filler_ratio: f64, rng: &mut impl Rng) -> usize {
    if filler_ratio <= 0.0 {
        return 0;
    }
    let mean = 2.0 * filler_ratio / (1.0 - filler_ratio).max(1e-3);
    let lo = mean.floor();
    let extra = rng.random_bool((mean - lo).clamp(0.0, 1.0));
    lo as usize + extra as usize
}

fn filler(n: usize, rng: &mut impl Rng) -> String {
    (0..n)
        .map(|_| format!(" {}", FILLER_WORDS.choose(rng).unwrap()))
        .collect()
}

fn line_context(key: usize, n_filler: usize, rng: &mut impl Rng) -> String {
    format!("{} {}", filler(n_filler, rng), key_word(key))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvTaskConfig {
    pub n_keys: usize,
    pub filler_ratio: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for KvTaskConfig {
    fn default() -> Self {
        Self {
            n_keys: 8,
            filler_ratio: 0.7,
            n_train: 400,
            n_test: 64,
        }
    }
}

/// The template shared by the task and the pre-training corpus.
pub fn kv_template() -> Template {
    Template {
        input_prefix: String::new(),
        answer_prefix: String::new(),
        separator: "\n".into(),
    }
}

pub fn make_synthetic_kv_task(n_keys: usize, filler_ratio: f64, seed: u64) -> ClassificationTask {
    make_kv_task(
        &KvTaskConfig {
            n_keys,
            filler_ratio,
            ..Default::default()
        },
        seed,
    )
}

/// Builds a task over keys `k0..k{n_keys}` drawn from the key pool with a
/// seed-fixed mapping to values. Every test key also appears among the
/// training instances.
pub fn make_kv_task(config: &KvTaskConfig, seed: u64) -> ClassificationTask {
    assert!(
        config.n_keys >= 2 && config.n_keys <= KEY_POOL,
        "n_keys must lie in 2..={KEY_POOL}"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..KEY_POOL).collect();
    pool.shuffle(&mut rng);
    let keys = &pool[..config.n_keys];
    let mapping: Vec<usize> = keys.iter().map(|_| rng.random_range(0..VALUE_POOL)).collect();
    let options: Vec<String> = (0..VALUE_POOL).map(value_word).collect();
    let instance = |i: usize, rng: &mut ChaCha8Rng| {
        let slot = i % config.n_keys;
        let n_filler = filler_count(config.filler_ratio, rng);
        Instance {
            context: line_context(keys[slot], n_filler, rng),
            options: options.clone(),
            gold: mapping[slot],
        }
    };
    let train = (0..config.n_train).map(|i| instance(i, &mut rng)).collect();
    let test = (0..config.n_test).map(|i| instance(i, &mut rng)).collect();
    ClassificationTask {
        name: format!("kv-{}k-f{:.2}", config.n_keys, config.filler_ratio),
        template: kv_template(),
        train,
        test,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KvCorpusConfig {
    pub n_docs: usize,
    /// Keys per document, each with a fresh random value.
    pub keys_per_doc: (usize, usize),
    pub lines_per_doc: (usize, usize),
    pub max_filler: usize,
}

impl Default for KvCorpusConfig {
    fn default() -> Self {
        Self {
            n_docs: 4000,
            keys_per_doc: (2, 6),
            lines_per_doc: (12, 40),
            max_filler: 4,
        }
    }
}

/// Pre-training documents in the task's line format, one mapping per
/// document, so a model must read the mapping from its own context.
pub fn kv_corpus(config: &KvCorpusConfig, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let template = kv_template();
    (0..config.n_docs)
        .map(|_| {
            let n_keys = rng
                .random_range(config.keys_per_doc.0..=config.keys_per_doc.1)
                .min(KEY_POOL);
            let mut pool: Vec<usize> = (0..KEY_POOL).collect();
            pool.shuffle(&mut rng);
            let keys = &pool[..n_keys];
            let values: Vec<usize> = keys.iter().map(|_| rng.random_range(0..VALUE_POOL)).collect();
            let lines = rng.random_range(config.lines_per_doc.0..=config.lines_per_doc.1);
            let mut out = Vec::with_capacity(lines);
            for _ in 0..lines {
                let slot = rng.random_range(0..n_keys);
                let n_filler = rng.random_range(0..=config.max_filler);
                let ctx = line_context(keys[slot], n_filler, &mut rng);
                out.push(format!("{ctx} {}", value_word(values[slot])));
            }
            out.join(&template.separator)
        })
        .collect()
}
