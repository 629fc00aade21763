//! Reference compressors: iterative perplexity pruning, uniform random
//! pruning, and whole-demonstration truncation.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{position_nll, AdapterSet, Backbone, ForwardOptions};
use crate::compressor::{apportion, check_ratio, CompressedPrompt};
use crate::error::{Error, Result};
use crate::selector::{discretize_to_count, target_count};
use crate::tokenizer::{TokenId, Tokenizer, BOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineSpec {
    PerplexityIterative { ratio: f64, segment_size: usize },
    Random { ratio: f64, seed: u64 },
    DemoTruncate { fraction: f64 },
    ZeroShot,
    FullShot,
}

impl BaselineSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::PerplexityIterative { ratio, segment_size } => {
                check_ratio(ratio)?;
                if segment_size == 0 {
                    return Err(Error::config("segment_size", "must be positive"));
                }
                Ok(())
            }
            Self::Random { ratio, .. } => check_ratio(ratio),
            Self::DemoTruncate { fraction } => check_ratio(fraction),
            Self::ZeroShot | Self::FullShot => Ok(()),
        }
    }
}

/// Token-level iterative compression by surprise.
///
/// The text is cut into `segment_size` pieces. Each piece is scored by
/// `-log P(token | compressed prefix, piece so far)` and its most surprising
/// tokens are appended to the prefix that conditions the next piece.
pub fn perplexity_select(
    backbone: &Backbone,
    adapters: Option<&AdapterSet>,
    tokenizer: &dyn Tokenizer,
    text: &str,
    keep_ratio: f64,
    segment_size: usize,
) -> Result<CompressedPrompt> {
    BaselineSpec::PerplexityIterative {
        ratio: keep_ratio,
        segment_size,
    }
    .validate()?;
    let ids = tokenizer.encode(text);
    let segments: Vec<&[TokenId]> = ids.chunks(segment_size).collect();
    let counts = apportion(&segments.iter().map(|s| s.len()).collect::<Vec<_>>(), keep_ratio);
    let max = backbone.config.max_seq_len;
    let mut prefix = vec![BOS_ID];
    let mut kept = Vec::new();
    let mut scores = Vec::with_capacity(ids.len());
    for (s, (seg, count)) in segments.iter().zip(counts).enumerate() {
        let mut input = prefix.clone();
        input.extend_from_slice(seg);
        if input.len() > max {
            // keep the most recent context that still fits
            let cut = input.len() - max;
            input.drain(1..1 + cut);
        }
        let out = backbone.forward(&input, &ForwardOptions::with_adapters(adapters))?;
        let nll = position_nll(out.logits.view(), &input);
        let surprise = nll[nll.len() - seg.len()..].to_vec();
        let mask = discretize_to_count(&surprise, count, &BTreeSet::new(), keep_ratio)?;
        for i in mask.kept_indices() {
            prefix.push(seg[i]);
            kept.push(s * segment_size + i);
        }
        scores.extend(surprise);
    }
    CompressedPrompt::from_mask(tokenizer, &ids, &kept, keep_ratio, scores)
}

/// Uniformly random kept set of the exact target size, in source order.
pub fn random_select(tokenizer: &dyn Tokenizer, text: &str, keep_ratio: f64, seed: u64) -> Result<CompressedPrompt> {
    check_ratio(keep_ratio)?;
    let ids = tokenizer.encode(text);
    let kept = random_indices(ids.len(), keep_ratio, seed);
    CompressedPrompt::from_mask(tokenizer, &ids, &kept, keep_ratio, Vec::new())
}

pub fn random_indices(n: usize, keep_ratio: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = rand::seq::index::sample(&mut rng, n, target_count(n, keep_ratio)).into_vec();
    kept.sort_unstable();
    kept
}

/// The first `⌈keep_fraction · m⌉` demonstrations, untouched.
pub fn demo_truncate(demonstrations: &[String], keep_fraction: f64) -> Result<Vec<String>> {
    check_ratio(keep_fraction)?;
    if demonstrations.is_empty() {
        return Err(Error::config("demonstrations", "need at least one demonstration"));
    }
    Ok(demonstrations[..truncate_count(demonstrations.len(), keep_fraction)].to_vec())
}

pub fn truncate_count(m: usize, keep_fraction: f64) -> usize {
    // the epsilon stops 0.3 · 10 = 3.0000000000000004 from rounding up
    ((keep_fraction * m as f64 - 1e-9).ceil() as usize).clamp(1, m)
}
