//! A small causal transformer exposing logits, last-layer hidden states and
//! attention, token-level visibility masking, and low-rank adapters.
//!
//! Pre-norm blocks with learned absolute positions and tied embeddings by
//! default. Visibility masking makes a dropped token invisible as a key to
//! every other position while it still emits its own logits row, which is
//! what a compressed prompt looks like from the downstream model's side.

mod adapter;
mod kernels;
mod weights;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{AdapterConfig, AdapterSet, AdapterTarget, LoraPair};
pub use kernels::{GradRequest, Gradients, Tape};
pub use weights::{BaseWeights, LayerWeights, TensorInfo};

use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            max_seq_len: 2048,
            vocab_size,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "d_model",
                format!("{} is not divisible by n_heads = {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }
}

/// How a zero in the keep mask hides a token during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMechanism {
    /// The token's key/value is weighted by its visibility for every other
    /// query (a zero is an additive −∞ on its attention column).
    #[default]
    AttentionInvisibility,
    /// The token embedding is scaled by its visibility; positions stay.
    EmbeddingZeroing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Array2<f64>);

impl HiddenStates {
    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n_tokens × vocab]`; row `i` predicts token `i + 1`.
    pub logits: Array2<f64>,
    pub last_hidden: HiddenStates,
    /// Attention each token receives in the last layer, averaged over heads
    /// and over the query positions that can causally see it.
    pub last_layer_mean_attention: Vec<f64>,
    /// Last-layer attention maps, one `[n × n]` matrix per head.
    pub last_layer_attention: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Per-position visibility in `[0, 1]`; hard masks use 0/1.
    pub visibility: Option<&'a [f64]>,
    pub adapters: Option<&'a AdapterSet>,
    pub mechanism: MaskMechanism,
}

impl<'a> ForwardOptions<'a> {
    pub fn with_adapters(adapters: Option<&'a AdapterSet>) -> Self {
        Self {
            adapters,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub weights: BaseWeights,
}

impl Backbone {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = BaseWeights::init(&config, &mut rng);
        Ok(Self { config, weights })
    }

    fn check_inputs(&self, ids: &[TokenId], opts: &ForwardOptions<'_>) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: ids.len(),
                max: self.config.max_seq_len,
                hint: "use chunked compression or a shorter prompt".into(),
            });
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
        }
        if let Some(v) = opts.visibility {
            if v.len() != ids.len() {
                return Err(Error::Contract(format!(
                    "keep mask has {} entries for {} tokens",
                    v.len(),
                    ids.len()
                )));
            }
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Contract("visibility values must lie in [0, 1]".into()));
            }
        }
        if let Some(a) = opts.adapters {
            if a.layers.len() != self.config.n_layers {
                return Err(Error::Contract("adapter set does not match layer count".into()));
            }
        }
        Ok(())
    }

    pub fn forward(&self, ids: &[TokenId], opts: &ForwardOptions<'_>) -> Result<ForwardOutput> {
        self.check_inputs(ids, opts)?;
        Ok(self.run(ids, opts, false).0)
    }

    /// Forward pass that also records what [`Backbone::backward`] needs.
    pub fn forward_recorded(&self, ids: &[TokenId], opts: &ForwardOptions<'_>) -> Result<(ForwardOutput, Tape)> {
        self.check_inputs(ids, opts)?;
        let (out, tape) = self.run(ids, opts, true);
        Ok((out, tape.expect("recording requested")))
    }

    /// `-log P(x_i | x_<i)` for `i >= 1`; position 0 has no conditional and
    /// is reported as `+inf` (always keep).
    pub fn token_perplexities(&self, ids: &[TokenId], adapters: Option<&AdapterSet>) -> Result<Vec<f64>> {
        if ids.len() < 2 {
            return Err(Error::Contract("token perplexities need at least 2 tokens".into()));
        }
        let out = self.forward(ids, &ForwardOptions::with_adapters(adapters))?;
        let mut vals = vec![f64::INFINITY];
        vals.extend(position_nll(out.logits.view(), ids));
        Ok(vals)
    }
}

/// Negative log-likelihood of each target `ids[i]` (`i >= 1`) under row `i - 1`.
pub fn position_nll(logits: ArrayView2<'_, f64>, ids: &[TokenId]) -> Vec<f64> {
    (1..ids.len())
        .map(|i| {
            let row = logits.row(i - 1);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            lse - row[ids[i] as usize]
        })
        .collect()
}

/// Mean next-token cross-entropy over positions `1..n`.
pub fn clm_loss(logits: ArrayView2<'_, f64>, ids: &[TokenId]) -> Result<f64> {
    if ids.len() < 2 {
        return Err(Error::Contract("clm loss needs at least 2 tokens".into()));
    }
    if logits.nrows() != ids.len() {
        return Err(Error::Contract("logits rows do not match token count".into()));
    }
    let nll = position_nll(logits, ids);
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Weighted cross-entropy and its gradient w.r.t. the logits.
///
/// `target_weights[i]` weights the prediction of `ids[i]` (index 0 unused).
/// Returns `(loss, dlogits)`; the loss is `Σ w_i ℓ_i / Σ w_i`.
pub fn weighted_clm_loss(
    logits: ArrayView2<'_, f64>,
    ids: &[TokenId],
    target_weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = ids.len();
    if n < 2 || target_weights.len() != n {
        return Err(Error::Contract(
            "weighted loss needs n >= 2 and one weight per token".into(),
        ));
    }
    let total: f64 = target_weights[1..].iter().sum();
    if total <= 0.0 {
        return Err(Error::Contract("no target carries weight".into()));
    }
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for i in 1..n {
        let w = target_weights[i];
        if w == 0.0 {
            continue;
        }
        let row = logits.row(i - 1);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
        let target = ids[i] as usize;
        loss += w * (m + z.ln() - row[target]);
        let mut drow = dlogits.row_mut(i - 1);
        for (d, &x) in drow.iter_mut().zip(row.iter()) {
            *d = w * (x - m).exp() / z / total;
        }
        drow[target] -= w / total;
    }
    Ok((loss / total, dlogits))
}
