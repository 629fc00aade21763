//! Token selection head and its discretization into a keep mask.

use std::collections::BTreeSet;

use ndarray::Array1;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::backbone::HiddenStates;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// `p_i = sigmoid(w · h_i + b)` over last-layer hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionHead {
    pub weight: Array1<f64>,
    pub bias: f64,
}

impl SelectionHead {
    /// Small normal weights and zero bias, so scores start near 0.5.
    pub fn init(d_model: usize, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, 0.02).expect("positive std");
        Self {
            weight: Array1::from_shape_simple_fn(d_model, || rng.sample(dist)),
            bias: 0.0,
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            weight: Array1::zeros(d_model),
            bias: 0.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.weight.len()
    }

    /// Pre-sigmoid logits, one per token.
    pub fn logits(&self, hidden: &HiddenStates) -> Result<Vec<f64>> {
        if hidden.width() != self.d_model() {
            return Err(Error::Contract(format!(
                "hidden width {} does not match head width {}",
                hidden.width(),
                self.d_model()
            )));
        }
        Ok(hidden.0.dot(&self.weight).mapv(|z| z + self.bias).to_vec())
    }

    pub fn score(&self, hidden: &HiddenStates) -> Result<SelectionScores> {
        Ok(SelectionScores(self.logits(hidden)?.into_iter().map(sigmoid).collect()))
    }

    /// Gradient of a scalar w.r.t. the head, given its gradient w.r.t. `p`.
    pub fn backward(&self, hidden: &HiddenStates, p: &SelectionScores, dp: &[f64]) -> SelectionHead {
        let dz: Array1<f64> = p.0.iter().zip(dp).map(|(&p, &g)| g * p * (1.0 - p)).collect();
        SelectionHead {
            weight: hidden.0.t().dot(&dz),
            bias: dz.sum(),
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weight.as_slice_mut().expect("contiguous"),
            std::slice::from_mut(&mut self.bias),
        ]
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.weight.as_slice().expect("contiguous"),
            std::slice::from_ref(&self.bias),
        ]
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-token preservation probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores(pub Vec<f64>);

impl SelectionScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_ratio(keep_ratio: f64) -> Result<()> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config("keep_ratio", format!("{keep_ratio} is outside (0, 1]")));
    }
    Ok(())
}

/// Number of tokens kept out of `n`: `round(keep_ratio · n)` rounding half
/// up, never below one token (for `n >= 1`).
pub fn target_count(n: usize, keep_ratio: f64) -> usize {
    if n == 0 {
        return 0;
    }
    // The epsilon absorbs representation error such as 0.05 · 30 = 1.4999…
    let raw = (keep_ratio * n as f64 + 0.5 + 1e-9).floor() as usize;
    raw.clamp(1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeepMask {
    pub mask: Vec<bool>,
    pub keep_ratio: f64,
    pub kept_count: usize,
}

impl KeepMask {
    pub fn all(n: usize) -> Self {
        Self {
            mask: vec![true; n],
            keep_ratio: 1.0,
            kept_count: n,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn as_visibility(&self) -> Vec<f64> {
        self.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()
    }

    /// Builds a mask from explicit indices (used by baselines).
    pub fn from_indices(n: usize, kept: &[usize], keep_ratio: f64) -> Self {
        let mut mask = vec![false; n];
        for &i in kept {
            mask[i] = true;
        }
        let kept_count = mask.iter().filter(|&&k| k).count();
        Self {
            mask,
            keep_ratio,
            kept_count,
        }
    }
}

/// Ranks by descending score, smaller index first on ties.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Keeps `always_keep` plus the highest-scoring remaining tokens, for a
/// total of `max(|always_keep|, target_count(n, keep_ratio))`.
pub fn discretize(p: &SelectionScores, keep_ratio: f64, always_keep: &BTreeSet<usize>) -> Result<KeepMask> {
    check_ratio(keep_ratio)?;
    discretize_to_count(&p.0, target_count(p.len(), keep_ratio), always_keep, keep_ratio)
}

/// As [`discretize`] but with an explicit kept-token budget.
pub fn discretize_to_count(
    scores: &[f64],
    count: usize,
    always_keep: &BTreeSet<usize>,
    keep_ratio: f64,
) -> Result<KeepMask> {
    let n = scores.len();
    if let Some(&bad) = always_keep.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("always-keep index {bad} outside 0..{n}")));
    }
    let count = count.max(always_keep.len()).min(n);
    let mut mask = vec![false; n];
    for &i in always_keep {
        mask[i] = true;
    }
    let remaining = count - always_keep.len();
    for i in rank_desc(scores)
        .into_iter()
        .filter(|i| !always_keep.contains(i))
        .take(remaining)
    {
        mask[i] = true;
    }
    Ok(KeepMask {
        mask,
        keep_ratio,
        kept_count: count,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Binary mask forward, identity gradient backward.
    #[default]
    HardSte,
    /// The mask is `p` itself.
    Soft,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard-ste" | "hard" | "ste" => Ok(Self::HardSte),
            "soft" => Ok(Self::Soft),
            other => Err(Error::config("mask_mode", format!("unknown mode {other:?}"))),
        }
    }
}

/// A mask that can carry gradient back to the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub mode: MaskMode,
    pub values: Vec<f64>,
    pub hard: KeepMask,
}

pub fn soft_mask(
    p: &SelectionScores,
    keep_ratio: f64,
    always_keep: &BTreeSet<usize>,
    mode: MaskMode,
) -> Result<SoftMask> {
    let hard = discretize(p, keep_ratio, always_keep)?;
    let values = match mode {
        MaskMode::HardSte => hard.as_visibility(),
        MaskMode::Soft => p.0.clone(),
    };
    Ok(SoftMask { mode, values, hard })
}

impl SoftMask {
    /// `∂mask/∂p` is the identity in both modes.
    pub fn backward(&self, grad_mask: &[f64]) -> Vec<f64> {
        grad_mask.to_vec()
    }
}

/// JSON sidecar stored next to each compressed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSidecar {
    pub token_ids: Vec<TokenId>,
    pub scores: Vec<f64>,
    pub mask: Vec<u8>,
}

impl ScoreSidecar {
    pub fn new(token_ids: &[TokenId], scores: &[f64], mask: &KeepMask) -> Self {
        Self {
            token_ids: token_ids.to_vec(),
            scores: scores.iter().map(|p| (p * 1e6).round() / 1e6).collect(),
            mask: mask.mask.iter().map(|&k| k as u8).collect(),
        }
    }
}
