//! Self-supervised training of the selection head and adapters, plus plain
//! causal-LM pre-training of the backbone.
//!
//! Each selector step runs twice over the same tokens. The first pass has no
//! gradient and produces scores and a keep mask. The second pass applies the
//! mask and backpropagates the masked LM loss into the adapters and the head
//! only.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    weighted_clm_loss, AdapterConfig, AdapterSet, Backbone, ForwardOptions, GradRequest, MaskMechanism,
};
use crate::corpus::Segment;
use crate::error::{Error, Result};
use crate::selector::{soft_mask, MaskMode, SelectionHead, SelectionScores};
use crate::tokenizer::{TokenId, BOS_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub segment_length: usize,
    pub keep_ratio_schedule: Vec<f64>,
    pub learning_rate: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_fraction: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_mode: MaskMode,
    pub mechanism: MaskMechanism,
    /// Run the scoring pass with adapters active.
    pub select_with_adapters: bool,
    pub adapter: AdapterConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            segment_length: 1024,
            keep_ratio_schedule: vec![0.1, 0.2, 0.3, 0.5],
            learning_rate: 3e-4,
            warmup_fraction: 0.05,
            steps: 1000,
            batch_size: 1,
            seed: 0,
            mask_mode: MaskMode::HardSte,
            mechanism: MaskMechanism::AttentionInvisibility,
            select_with_adapters: true,
            adapter: AdapterConfig::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.segment_length < 2 {
            return Err(Error::config("segment_length", "must be at least 2"));
        }
        if self.keep_ratio_schedule.is_empty() {
            return Err(Error::config("keep_ratio_schedule", "must not be empty"));
        }
        if let Some(r) = self.keep_ratio_schedule.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::config("keep_ratio_schedule", format!("{r} is outside (0, 1]")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(self.learning_rate, self.warmup_fraction, self.steps, step)
    }
}

fn lr_schedule(base: f64, warmup_fraction: f64, steps: u64, step: u64) -> f64 {
    let warmup = (warmup_fraction * steps as f64).ceil() as u64;
    if warmup > 0 && step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

/// Adam with bias correction over a fixed list of parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Prepends BOS unless the sequence already starts with it.
pub fn with_bos(ids: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    if ids.first() != Some(&BOS_ID) {
        out.push(BOS_ID);
    }
    out.extend_from_slice(ids);
    out
}

/// Loss and gradients of one masked objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: f64,
    pub keep_ratio: f64,
    pub scores: SelectionScores,
    pub adapter_grads: AdapterSet,
    pub head_grad: SelectionHead,
}

/// Evaluates the masked objective on `ids` (BOS already in place) at a fixed
/// keep ratio.
///
/// Hard-STE mode trains only on targets whose own position is kept, with the
/// selection of targets treated as a constant. Soft mode has no discrete
/// selection and trains on every target.
pub fn masked_objective(
    backbone: &Backbone,
    ids: &[TokenId],
    adapters: &AdapterSet,
    head: &SelectionHead,
    keep_ratio: f64,
    config: &TrainConfig,
) -> Result<Objective> {
    if ids.len() < 2 {
        return Err(Error::Contract("training needs segments of at least 2 tokens".into()));
    }
    let select_adapters = config.select_with_adapters.then_some(adapters);
    let scoring = backbone.forward(ids, &ForwardOptions::with_adapters(select_adapters))?;
    let p = head.score(&scoring.last_hidden)?;
    let always: BTreeSet<usize> = (ids[0] == BOS_ID).then_some(0).into_iter().collect();
    let mask = soft_mask(&p, keep_ratio, &always, config.mask_mode)?;

    let opts = ForwardOptions {
        visibility: Some(&mask.values),
        adapters: Some(adapters),
        mechanism: config.mechanism,
    };
    let (out, tape) = backbone.forward_recorded(ids, &opts)?;
    let mut weights: Vec<f64> = match config.mask_mode {
        MaskMode::HardSte => mask.hard.as_visibility(),
        MaskMode::Soft => vec![1.0; ids.len()],
    };
    weights[0] = 0.0;
    if weights.iter().all(|&w| w == 0.0) {
        weights[1..].fill(1.0);
    }
    let (loss, dlogits) = weighted_clm_loss(out.logits.view(), ids, &weights)?;
    let grads = backbone.backward(
        &tape,
        dlogits.view(),
        Some(adapters),
        GradRequest {
            base: false,
            adapters: true,
            visibility: true,
        },
    );
    let dvis = grads.visibility.expect("visibility gradient requested");
    let dp = mask.backward(&dvis);
    let head_grad = head.backward(&scoring.last_hidden, &p, &dp);
    Ok(Objective {
        loss,
        keep_ratio,
        scores: p,
        adapter_grads: grads.adapters.expect("adapter gradient requested"),
        head_grad,
    })
}

/// One row of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub keep_ratio: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub adapters: AdapterSet,
    pub head: SelectionHead,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub losses: Vec<f64>,
    /// Exponential moving average of the loss (factor 0.9).
    pub loss_ema: Option<f64>,
}

impl TrainState {
    pub fn init(backbone: &Backbone, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let adapters = AdapterSet::init(&backbone.config, config.adapter.clone(), &mut rng)?;
        let head = SelectionHead::init(backbone.config.d_model, &mut rng);
        Ok(Self {
            step: 0,
            adapters,
            head,
            optimizer: Adam::default(),
            rng,
            losses: Vec::new(),
            loss_ema: None,
        })
    }

    fn record(&mut self, loss: f64) {
        self.losses.push(loss);
        self.loss_ema = Some(match self.loss_ema {
            Some(e) => 0.9 * e + 0.1 * loss,
            None => loss,
        });
    }
}

/// One optimizer step over `batch`. The base weights are only read.
pub fn training_step(
    backbone: &Backbone,
    batch: &[&Segment],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<LogRecord> {
    let started = Instant::now();
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let schedule = &config.keep_ratio_schedule;
    let keep_ratio = schedule[state.rng.random_range(0..schedule.len())];
    let mut adapter_acc = state.adapters.zeros_like();
    let mut head_acc = SelectionHead::zeros(state.head.d_model());
    let mut loss_sum = 0.0;
    for seg in batch {
        let ids = with_bos(seg.tokens.ids());
        let mut obj = masked_objective(backbone, &ids, &state.adapters, &state.head, keep_ratio, config)?;
        if !obj.loss.is_finite() {
            return Err(Error::NonFinite {
                step: state.step,
                segment: seg.label(),
            });
        }
        loss_sum += obj.loss;
        add_into(adapter_acc.slices_mut(), obj.adapter_grads.slices_mut());
        add_into(head_acc.slices_mut(), obj.head_grad.slices_mut());
    }
    let scale = 1.0 / batch.len() as f64;
    let loss = loss_sum * scale;

    let mut grads: Vec<&mut [f64]> = adapter_acc.slices_mut();
    grads.extend(head_acc.slices_mut());
    grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
    if let Some(c) = config.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite {
            step: state.step,
            segment: batch[0].label(),
        });
    }
    let lr = config.lr_at(state.step);
    let grads: Vec<&[f64]> = grads.into_iter().map(|g| &*g).collect();
    let mut params = state.adapters.slices_mut();
    params.extend(state.head.slices_mut());
    state.optimizer.step(params, &grads, lr);

    state.record(loss);
    let rec = LogRecord {
        step: state.step,
        loss,
        keep_ratio,
        lr,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    state.step += 1;
    Ok(rec)
}

fn add_into(dst: Vec<&mut [f64]>, src: Vec<&mut [f64]>) {
    for (d, s) in dst.into_iter().zip(src) {
        d.iter_mut().zip(s.iter()).for_each(|(a, b)| *a += b);
    }
}

/// Side channels of a training run: JSON-lines log and periodic checkpoints.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_every: Option<u64>,
    pub on_checkpoint: Option<&'a mut dyn FnMut(&TrainState) -> Result<()>>,
}

impl TrainHooks<'_> {
    fn emit(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some(w) = self.log.as_mut() {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }
}

fn sample_batch<'s>(segments: &'s [Segment], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'s Segment> {
    (0..size)
        .map(|_| &segments[rng.random_range(0..segments.len())])
        .collect()
}

/// Trains adapters and head for `config.steps` steps on `segments`.
pub fn train(
    backbone: &Backbone,
    segments: &[Segment],
    config: &TrainConfig,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainState> {
    let mut state = TrainState::init(backbone, config)?;
    continue_training(backbone, segments, config, &mut state, hooks)?;
    Ok(state)
}

/// Runs the remaining steps of `state` up to `config.steps`.
pub fn continue_training(
    backbone: &Backbone,
    segments: &[Segment],
    config: &TrainConfig,
    state: &mut TrainState,
    hooks: &mut TrainHooks<'_>,
) -> Result<()> {
    config.validate()?;
    if config.steps > 0 && segments.is_empty() {
        return Err(Error::Data("no training segments".into()));
    }
    if config.segment_length + 1 > backbone.config.max_seq_len {
        return Err(Error::config(
            "segment_length",
            "segment plus BOS exceeds the backbone's max_seq_len",
        ));
    }
    while state.step < config.steps {
        let batch = sample_batch(segments, config.batch_size, &mut state.rng);
        let rec = training_step(backbone, &batch, state, config)?;
        hooks.emit(&rec)?;
        if rec.step % 50 == 0 {
            debug!(
                "selector step {} loss {:.4} keep {}",
                rec.step, rec.loss, rec.keep_ratio
            );
        }
        if let (Some(every), Some(cb)) = (hooks.checkpoint_every, hooks.on_checkpoint.as_mut()) {
            if every > 0 && state.step % every == 0 {
                cb(state)?;
            }
        }
    }
    if let Some(ema) = state.loss_ema {
        info!("selector training finished at step {} (loss ema {ema:.4})", state.step);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-3,
            warmup_fraction: 0.05,
            batch_size: 4,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

/// Plain causal-LM training of every base weight, no masks or adapters.
/// Returns the per-step losses.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    segments: &[Segment],
    config: &PretrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    if !(config.learning_rate > 0.0) || config.batch_size == 0 {
        return Err(Error::config(
            "pretrain",
            "learning_rate and batch_size must be positive",
        ));
    }
    if config.steps > 0 && segments.is_empty() {
        return Err(Error::Data("no training segments".into()));
    }
    let mut log = log;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut losses = Vec::with_capacity(config.steps as usize);
    for step in 0..config.steps {
        let started = Instant::now();
        let batch = sample_batch(segments, config.batch_size, &mut rng);
        let mut acc = backbone.weights.zeros_like();
        let mut loss = 0.0;
        for seg in &batch {
            let ids = with_bos(seg.tokens.ids());
            let (out, tape) = backbone.forward_recorded(&ids, &ForwardOptions::default())?;
            let mut w = vec![1.0; ids.len()];
            w[0] = 0.0;
            let (l, dlogits) = weighted_clm_loss(out.logits.view(), &ids, &w)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    segment: seg.label(),
                });
            }
            loss += l;
            let g = backbone.backward(
                &tape,
                dlogits.view(),
                None,
                GradRequest {
                    base: true,
                    ..Default::default()
                },
            );
            let mut gb = g.base.expect("base gradient requested");
            add_into(acc.slices_mut(), gb.slices_mut());
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        let mut grads = acc.slices_mut();
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= scale));
        if let Some(c) = config.grad_clip {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_schedule(config.learning_rate, config.warmup_fraction, config.steps, step);
        let grads: Vec<&[f64]> = grads.into_iter().map(|g| &*g).collect();
        adam.step(backbone.weights.slices_mut(), &grads, lr);
        losses.push(loss);
        if let Some(w) = log.as_mut() {
            let rec = LogRecord {
                step,
                loss,
                keep_ratio: 1.0,
                lr,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io("pretraining log", e))?;
        }
        if step % 100 == 0 {
            debug!("pretrain step {step} loss {loss:.4}");
        }
    }
    Ok(losses)
}

/// Mean over a trailing window, used to compare noisy loss curves.
pub fn smoothed(losses: &[f64], at: usize, window: usize) -> f64 {
    let end = (at + 1).min(losses.len());
    let start = end.saturating_sub(window.max(1));
    losses[start..end].iter().sum::<f64>() / (end - start) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{clm_loss, ModelConfig};
    use crate::corpus::{segment, TokenSequence};
    use crate::tokenizer::WordTokenizer;

    fn model(layers: usize, d: usize, vocab: usize, seed: u64) -> Backbone {
        Backbone::init(
            ModelConfig {
                n_layers: layers,
                n_heads: 2,
                d_model: d,
                d_ff: 2 * d,
                max_seq_len: 64,
                vocab_size: vocab,
                tie_embeddings: true,
            },
            seed,
        )
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            segment_length: 32,
            adapter: AdapterConfig {
                rank: 2,
                ..Default::default()
            },
            steps: 10,
            ..Default::default()
        }
    }

    fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<TokenId> {
        let mut ids = vec![BOS_ID];
        ids.extend((1..n).map(|_| rng.random_range(2..vocab)));
        ids
    }

    /// Gives the adapters a non-zero `B` so their gradients are exercised.
    fn perturb(adapters: &mut AdapterSet, rng: &mut ChaCha8Rng) {
        for s in adapters.slices_mut() {
            s.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05));
        }
    }

    #[test]
    fn full_keep_reduces_to_plain_clm() {
        let bb = model(2, 16, 300, 1);
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut state = TrainState::init(&bb, &cfg).unwrap();
        perturb(&mut state.adapters, &mut rng);
        for _ in 0..20 {
            let n = rng.random_range(2..40);
            let ids = random_ids(&mut rng, n, 300);
            let obj = masked_objective(&bb, &ids, &state.adapters, &state.head, 1.0, &cfg).unwrap();
            let out = bb
                .forward(&ids, &ForwardOptions::with_adapters(Some(&state.adapters)))
                .unwrap();
            let mut w = vec![1.0; n];
            w[0] = 0.0;
            let plain = clm_loss(out.logits.view(), &ids).unwrap();
            let (weighted, _) = weighted_clm_loss(out.logits.view(), &ids, &w).unwrap();
            assert!((plain - weighted).abs() < 1e-12);
            assert!((obj.loss - plain).abs() < 1e-6, "{} vs {}", obj.loss, plain);
        }
    }

    #[test]
    fn length_two_segment_gives_finite_loss() {
        let bb = model(2, 16, 300, 3);
        let cfg = small_cfg();
        let state = TrainState::init(&bb, &cfg).unwrap();
        let ids = [BOS_ID, 42];
        let obj = masked_objective(&bb, &ids, &state.adapters, &state.head, 0.1, &cfg).unwrap();
        assert!(obj.loss.is_finite());
        let out = bb.forward(&ids, &ForwardOptions::default()).unwrap();
        // one kept token (BOS) is the whole visible context
        assert!((obj.loss - clm_loss(out.logits.view(), &ids).unwrap()).abs() < 1e-9);
    }

    fn fd_check(mode: MaskMode) {
        let bb = model(2, 16, 300, 4);
        let cfg = TrainConfig {
            mask_mode: mode,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = TrainState::init(&bb, &cfg).unwrap();
        perturb(&mut state.adapters, &mut rng);
        for w in state.head.weight.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        let ids = random_ids(&mut rng, 14, 300);
        let obj = masked_objective(&bb, &ids, &state.adapters, &state.head, 0.5, &cfg).unwrap();
        let eps = 1e-4;
        let at = |db: f64| {
            let head = SelectionHead {
                bias: state.head.bias + db,
                ..state.head.clone()
            };
            masked_objective(&bb, &ids, &state.adapters, &head, 0.5, &cfg)
                .unwrap()
                .loss
        };
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        let rel = (obj.head_grad.bias - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 1e-3, "analytic {} fd {fd} rel {rel}", obj.head_grad.bias);
        // the weight vector too
        let k = 3;
        let atw = |dw: f64| {
            let mut head = state.head.clone();
            head.weight[k] += dw;
            masked_objective(&bb, &ids, &state.adapters, &head, 0.5, &cfg)
                .unwrap()
                .loss
        };
        let fdw = (atw(eps) - atw(-eps)) / (2.0 * eps);
        assert!((obj.head_grad.weight[k] - fdw).abs() / fdw.abs().max(1e-12) < 1e-3);
    }

    #[test]
    fn soft_mode_head_gradient_matches_finite_differences() {
        fd_check(MaskMode::Soft);
    }

    #[test]
    fn soft_mode_head_gradient_matches_with_embedding_zeroing() {
        let bb = model(2, 16, 300, 6);
        let cfg = TrainConfig {
            mask_mode: MaskMode::Soft,
            mechanism: MaskMechanism::EmbeddingZeroing,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = TrainState::init(&bb, &cfg).unwrap();
        let ids = random_ids(&mut rng, 10, 300);
        let obj = masked_objective(&bb, &ids, &state.adapters, &state.head, 0.3, &cfg).unwrap();
        let at = |db: f64| {
            let head = SelectionHead {
                bias: state.head.bias + db,
                ..state.head.clone()
            };
            masked_objective(&bb, &ids, &state.adapters, &head, 0.3, &cfg)
                .unwrap()
                .loss
        };
        let fd = (at(1e-4) - at(-1e-4)) / 2e-4;
        assert!((obj.head_grad.bias - fd).abs() / fd.abs().max(1e-12) < 1e-3);
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let bb = model(2, 16, 300, 8);
        // scoring without adapters holds the keep mask fixed under perturbation
        let cfg = TrainConfig {
            select_with_adapters: false,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut state = TrainState::init(&bb, &cfg).unwrap();
        perturb(&mut state.adapters, &mut rng);
        let ids = random_ids(&mut rng, 12, 300);
        let obj = masked_objective(&bb, &ids, &state.adapters, &state.head, 0.5, &cfg).unwrap();
        let at = |d: f64| {
            let mut a = state.adapters.clone();
            a.slices_mut()[1][3] += d;
            masked_objective(&bb, &ids, &a, &state.head, 0.5, &cfg).unwrap().loss
        };
        let fd = (at(1e-5) - at(-1e-5)) / 2e-5;
        let analytic = obj.adapter_grads.clone().slices_mut()[1][3];
        assert!((analytic - fd).abs() / fd.abs().max(1e-9) < 1e-4, "{analytic} vs {fd}");
    }

    fn toy_segments(n_docs: usize, len: usize, seed: u64) -> (Vec<Segment>, usize) {
        let tok = WordTokenizer::from_pieces(vec![]).into_handle();
        let vocab = tok.vocab_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for d in 0..n_docs {
            // a repeating pattern that a small model can pick up
            let period = rng.random_range(3..6);
            let base: Vec<u32> = (0..period).map(|_| rng.random_range(2..40)).collect();
            let ids: Vec<u32> = (0..len).map(|i| base[i % period]).collect();
            let seq = TokenSequence::new(ids, tok.clone()).unwrap();
            out.extend(segment(&seq, &format!("d{d}"), len).unwrap().segments);
        }
        (out, vocab)
    }

    #[test]
    fn base_weights_stay_frozen() {
        let (segs, vocab) = toy_segments(4, 20, 1);
        let bb = model(2, 16, vocab, 10);
        let before = bb.weights.clone();
        let cfg = TrainConfig {
            segment_length: 20,
            steps: 5,
            ..small_cfg()
        };
        let state = train(&bb, &segs, &cfg, &mut TrainHooks::default()).unwrap();
        let diff = before
            .named()
            .iter()
            .zip(bb.weights.named())
            .flat_map(|(a, b)| a.2.iter().zip(b.2).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max);
        assert_eq!(diff, 0.0);
        assert_eq!(state.step, 5);
        assert!(state.adapters.layers[0][0]
            .as_ref()
            .unwrap()
            .b
            .iter()
            .any(|&x| x != 0.0));
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (segs, vocab) = toy_segments(2, 20, 2);
        let bb = model(2, 16, vocab, 11);
        let cfg = TrainConfig {
            segment_length: 20,
            steps: 0,
            ..small_cfg()
        };
        let mut state = train(&bb, &segs, &cfg, &mut TrainHooks::default()).unwrap();
        let init = TrainState::init(&bb, &cfg).unwrap();
        assert_eq!(state.adapters, init.adapters);
        assert_eq!(state.head, init.head);
        assert!(state
            .adapters
            .slices_mut()
            .iter()
            .skip(1)
            .step_by(2)
            .all(|b| b.iter().all(|&x| x == 0.0)));

        let mut fresh = model(2, 16, vocab, 11);
        let losses = pretrain_backbone(
            &mut fresh,
            &segs,
            &PretrainConfig {
                steps: 0,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        assert!(losses.is_empty());
        assert_eq!(fresh.weights, model(2, 16, vocab, 11).weights);
    }

    #[test]
    fn runs_are_deterministic_and_logged() {
        let (segs, vocab) = toy_segments(4, 20, 3);
        let bb = model(2, 16, vocab, 12);
        let cfg = TrainConfig {
            segment_length: 20,
            steps: 6,
            ..small_cfg()
        };
        let mut log_a = Vec::new();
        let mut log_b = Vec::new();
        let a = train(
            &bb,
            &segs,
            &cfg,
            &mut TrainHooks {
                log: Some(&mut log_a),
                ..Default::default()
            },
        )
        .unwrap();
        let b = train(
            &bb,
            &segs,
            &cfg,
            &mut TrainHooks {
                log: Some(&mut log_b),
                ..Default::default()
            },
        )
        .unwrap();
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>();
        assert_eq!(fmt(&a.losses), fmt(&b.losses));
        let lines: Vec<LogRecord> = String::from_utf8(log_a)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5].step, 5);
        assert!(lines.iter().all(|r| cfg.keep_ratio_schedule.contains(&r.keep_ratio)));
    }

    #[test]
    fn checkpoint_hook_fires_on_interval() {
        let (segs, vocab) = toy_segments(2, 20, 4);
        let bb = model(1, 8, vocab, 13);
        let cfg = TrainConfig {
            segment_length: 20,
            steps: 7,
            ..small_cfg()
        };
        let mut seen = Vec::new();
        let mut cb = |s: &TrainState| {
            seen.push(s.step);
            Ok(())
        };
        train(
            &bb,
            &segs,
            &cfg,
            &mut TrainHooks {
                checkpoint_every: Some(3),
                on_checkpoint: Some(&mut cb),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(seen, vec![3, 6]);
    }

    #[test]
    fn bad_config_is_rejected() {
        let bb = model(1, 8, 300, 0);
        for cfg in [
            TrainConfig {
                keep_ratio_schedule: vec![0.0],
                ..small_cfg()
            },
            TrainConfig {
                keep_ratio_schedule: vec![],
                ..small_cfg()
            },
            TrainConfig {
                segment_length: 1,
                ..small_cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..small_cfg()
            },
        ] {
            assert!(matches!(TrainState::init(&bb, &cfg), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn pretraining_memorizes_a_sentence() {
        let tok = WordTokenizer::from_pieces(vec![]).into_handle();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ids: Vec<u32> = (0..31).map(|_| rng.random_range(2..200)).collect();
        let seq = TokenSequence::new(ids.clone(), tok.clone()).unwrap();
        let segs = segment(&seq, "s", 31).unwrap().segments;
        let mut bb = model(2, 32, tok.vocab_size(), 22);
        let cfg = PretrainConfig {
            steps: 500,
            learning_rate: 3e-3,
            ..Default::default()
        };
        pretrain_backbone(&mut bb, &segs, &cfg, None).unwrap();
        let full = with_bos(&ids);
        let out = bb.forward(&full, &ForwardOptions::default()).unwrap();
        let loss = clm_loss(out.logits.view(), &full).unwrap();
        assert!(loss < 0.1, "loss {loss}");
        let ppl = bb.token_perplexities(&full, None).unwrap();
        assert!(ppl[1..].iter().all(|&v| v < 0.1), "{ppl:?}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            adam.step(vec![&mut x[..]], &[&g[..]], 0.05);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a[..], &mut b[..]], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12 && (b[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn warmup_is_linear() {
        assert!((lr_schedule(1.0, 0.1, 100, 0) - 0.1).abs() < 1e-12);
        assert!((lr_schedule(1.0, 0.1, 100, 9) - 1.0).abs() < 1e-12);
        assert_eq!(lr_schedule(1.0, 0.1, 100, 50), 1.0);
        assert_eq!(lr_schedule(2.0, 0.0, 100, 0), 2.0);
    }

    #[test]
    fn smoothing_window() {
        let l = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(smoothed(&l, 3, 2), 2.0);
        assert_eq!(smoothed(&l, 0, 5), 4.0);
    }
}
