//! In-context-learning evaluation: demonstration sets, likelihood scoring
//! of answer options, multi-seed trials and cross-model transfer.

mod synthetic;
mod task;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use synthetic::{
    is_payload_piece, kv_corpus, kv_template, make_kv_task, make_synthetic_kv_task, payload_mask, KvCorpusConfig,
    KvTaskConfig, FILLER_WORDS, KEY_POOL, VALUE_POOL,
};
pub use task::{build_demo_set, ClassificationTask, DemonstrationSet, Instance, Template};

use crate::backbone::{position_nll, AdapterSet, Backbone, ForwardOptions};
use crate::baselines::{demo_truncate, perplexity_select, random_select};
use crate::compressor::{CacheKey, CompressedPrompt, CompressionCache, SelectionP};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer, BOS_ID};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NllReduction {
    /// Summed negative log-likelihood over the option's tokens.
    #[default]
    Sum,
    /// Per-token mean.
    Mean,
}

/// Likelihood scorer over one inference model.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub backbone: &'a Backbone,
    pub adapters: Option<&'a AdapterSet>,
    pub tokenizer: &'a dyn Tokenizer,
    pub reduction: NllReduction,
}

impl<'a> Scorer<'a> {
    pub fn new(backbone: &'a Backbone, tokenizer: &'a dyn Tokenizer) -> Self {
        Self {
            backbone,
            adapters: None,
            tokenizer,
            reduction: NllReduction::Sum,
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        let max = self.backbone.config.max_seq_len;
        if n > max {
            return Err(Error::Length {
                len: n,
                max,
                hint: "compress the demonstrations harder".into(),
            });
        }
        Ok(())
    }

    /// Negative log-likelihood of each option continuing `prefix`.
    pub fn option_nlls(&self, prefix: &str, options: &[String]) -> Result<Vec<f64>> {
        let mut prefix_ids = vec![BOS_ID];
        prefix_ids.extend(self.tokenizer.encode(prefix));
        let option_ids: Vec<Vec<TokenId>> = options
            .iter()
            .map(|o| self.tokenizer.encode(&format!(" {o}")))
            .collect();
        let opts = ForwardOptions::with_adapters(self.adapters);
        if option_ids.iter().all(|o| o.len() == 1) {
            // single-token options all read off the prefix's last row
            self.check_len(prefix_ids.len())?;
            let out = self.backbone.forward(&prefix_ids, &opts)?;
            let row = out.logits.row(prefix_ids.len() - 1);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            return Ok(option_ids.iter().map(|o| lse - row[o[0] as usize]).collect());
        }
        option_ids
            .iter()
            .map(|o| {
                let mut ids = prefix_ids.clone();
                ids.extend(o);
                self.check_len(ids.len())?;
                let out = self.backbone.forward(&ids, &opts)?;
                let nll = position_nll(out.logits.view(), &ids);
                let tail = &nll[nll.len() - o.len()..];
                let sum: f64 = tail.iter().sum();
                Ok(match self.reduction {
                    NllReduction::Sum => sum,
                    NllReduction::Mean => sum / o.len().max(1) as f64,
                })
            })
            .collect()
    }
}

/// Index of the lowest value, smallest index on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Joins a (possibly compressed) demonstration prompt and a query.
pub fn full_prompt(template: &Template, prompt: &str, context: &str) -> String {
    if prompt.is_empty() {
        template.query(context)
    } else {
        format!("{prompt}{}{}", template.separator, template.query(context))
    }
}

/// Predicted option for one query under `prompt`.
pub fn score_options(
    scorer: &Scorer<'_>,
    template: &Template,
    prompt: &str,
    context: &str,
    options: &[String],
) -> Result<usize> {
    Ok(argmin(
        &scorer.option_nlls(&full_prompt(template, prompt, context), options)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SelectionP,
    Perplexity,
    Random,
    DemoTruncate,
    FullShot,
    ZeroShot,
    /// Keeps exactly the key/value tokens of the synthetic task.
    PayloadOracle,
}

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Self::SelectionP => "selection-p",
            Self::Perplexity => "ppl",
            Self::Random => "random",
            Self::DemoTruncate => "demo-truncate",
            Self::FullShot => "full-shot",
            Self::ZeroShot => "zero-shot",
            Self::PayloadOracle => "payload-oracle",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "selection-p" => Self::SelectionP,
            "ppl" | "perplexity" => Self::Perplexity,
            "random" => Self::Random,
            "demo-truncate" => Self::DemoTruncate,
            "full-shot" | "full" => Self::FullShot,
            "zero-shot" | "zero" => Self::ZeroShot,
            "payload-oracle" | "oracle" => Self::PayloadOracle,
            other => return Err(Error::config("method", format!("unknown method {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub seed: u64,
    pub compressor: String,
    pub keep_ratio: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    /// Tokens of the demonstration prompt before and after compression.
    pub source_tokens: usize,
    pub prompt_tokens: usize,
    pub compression_ms: f64,
    pub inference_ms: f64,
    pub wall_ms: f64,
    pub compress_checkpoint: String,
    pub infer_checkpoint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub keep_ratio: f64,
    pub budget_tokens: usize,
    /// Chunked compression for long prompts; `None` compresses in one pass.
    pub chunk_size: Option<usize>,
    /// Segment size of the iterative perplexity baseline.
    pub ppl_segment_size: usize,
    pub max_test: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            keep_ratio: 0.1,
            budget_tokens: 750,
            chunk_size: None,
            ppl_segment_size: 256,
            max_test: 200,
        }
    }
}

/// Models and caches a trial runs against.
pub struct TrialContext<'a> {
    pub scorer: Scorer<'a>,
    pub infer_id: String,
    pub selection: Option<SelectionP<'a>>,
    pub compress_id: String,
    /// Language model for the perplexity baseline.
    pub ppl_model: Option<&'a Backbone>,
    pub cache: &'a CompressionCache,
    compress_calls: AtomicUsize,
}

impl<'a> TrialContext<'a> {
    pub fn new(scorer: Scorer<'a>, infer_id: &str, cache: &'a CompressionCache) -> Self {
        Self {
            scorer,
            infer_id: infer_id.to_string(),
            selection: None,
            compress_id: infer_id.to_string(),
            ppl_model: None,
            cache,
            compress_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_selection(mut self, sp: SelectionP<'a>, compress_id: &str) -> Self {
        self.selection = Some(sp);
        self.compress_id = compress_id.to_string();
        self
    }

    pub fn with_ppl_model(mut self, model: &'a Backbone) -> Self {
        self.ppl_model = Some(model);
        self
    }

    /// Number of compressions actually computed (cache misses included).
    pub fn compress_calls(&self) -> usize {
        self.compress_calls.load(Ordering::Relaxed)
    }

    /// Compresses one demonstration set with `method`, consulting the cache.
    pub fn compress_demos(
        &self,
        method: Method,
        demos: &DemonstrationSet,
        template: &Template,
        config: &TrialConfig,
    ) -> Result<CompressedPrompt> {
        let text = demos.text(template);
        let r = config.keep_ratio;
        let key_method = match config.chunk_size {
            Some(c) => format!("{}@{c}@{}", method.id(), demos.seed),
            None => format!("{}@{}", method.id(), demos.seed),
        };
        let key = CacheKey::new(&self.compress_id, &text, r, &key_method);
        self.cache
            .get_or_insert_with(key, || self.compress_fresh(method, demos, template, config))
    }

    /// Compresses without consulting the cache.
    pub fn compress_fresh(
        &self,
        method: Method,
        demos: &DemonstrationSet,
        template: &Template,
        config: &TrialConfig,
    ) -> Result<CompressedPrompt> {
        let text = demos.text(template);
        let tok = self.scorer.tokenizer;
        let r = config.keep_ratio;
        self.compress_calls.fetch_add(1, Ordering::Relaxed);
        match method {
            Method::SelectionP => {
                let sp = self
                    .selection
                    .as_ref()
                    .ok_or_else(|| Error::config("method", "selection-p needs a selector checkpoint"))?;
                match config.chunk_size {
                    Some(c) => sp.chunked_compress(&text, r, c),
                    None if tok.encode(&text).len() > sp.max_tokens() => sp.chunked_compress(&text, r, sp.max_tokens()),
                    None => sp.compress(&text, r),
                }
            }
            Method::Perplexity => {
                let lm = self
                    .ppl_model
                    .ok_or_else(|| Error::config("method", "ppl needs a language model"))?;
                perplexity_select(lm, None, tok, &text, r, config.ppl_segment_size)
            }
            Method::Random => random_select(tok, &text, r, demos.seed),
            Method::DemoTruncate => {
                let kept = demo_truncate(&demos.demonstrations, r)?;
                let joined = kept.join(&template.separator);
                let ids = tok.encode(&text);
                let n_kept = tok.encode(&joined).len();
                let idx: Vec<usize> = (0..n_kept).collect();
                let mut c = CompressedPrompt::from_mask(tok, &ids, &idx, r, Vec::new())?;
                c.text = joined;
                Ok(c)
            }
            Method::FullShot => {
                let ids = tok.encode(&text);
                let all: Vec<usize> = (0..ids.len()).collect();
                CompressedPrompt::from_mask(tok, &ids, &all, 1.0, Vec::new())
            }
            Method::ZeroShot => {
                let ids = tok.encode(&text);
                let mut c = CompressedPrompt::from_mask(tok, &ids, &[], r, Vec::new())?;
                c.text.clear();
                Ok(c)
            }
            Method::PayloadOracle => {
                let ids = tok.encode(&text);
                let kept: Vec<usize> = payload_mask(&ids, tok)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p)
                    .map(|(i, _)| i)
                    .collect();
                CompressedPrompt::from_mask(tok, &ids, &kept, r, Vec::new())
            }
        }
    }

    /// One seed: build demonstrations, compress once, answer every test query.
    pub fn run_seed(
        &self,
        task: &ClassificationTask,
        method: Method,
        config: &TrialConfig,
        seed: u64,
    ) -> Result<(EvalRecord, CompressedPrompt)> {
        let started = Instant::now();
        let demos = build_demo_set(task, config.budget_tokens, seed, self.scorer.tokenizer)?;
        let compressed = self.compress_demos(method, &demos, &task.template, config)?;
        let compression_ms = started.elapsed().as_secs_f64() * 1e3;
        let infer_start = Instant::now();
        let tests = &task.test[..task.test.len().min(config.max_test)];
        let mut correct = 0;
        for inst in tests {
            let pred = score_options(
                &self.scorer,
                &task.template,
                &compressed.text,
                &inst.context,
                &inst.options,
            )?;
            correct += (pred == inst.gold) as usize;
        }
        let inference_ms = infer_start.elapsed().as_secs_f64() * 1e3;
        let record = EvalRecord {
            task: task.name.clone(),
            seed,
            compressor: method.id().to_string(),
            keep_ratio: match method {
                Method::FullShot => 1.0,
                Method::ZeroShot => 0.0,
                _ => config.keep_ratio,
            },
            accuracy: if tests.is_empty() {
                0.0
            } else {
                correct as f64 / tests.len() as f64
            },
            correct,
            n_test: tests.len(),
            source_tokens: compressed.source_token_count,
            prompt_tokens: self.scorer.tokenizer.encode(&compressed.text).len(),
            compression_ms,
            inference_ms,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            compress_checkpoint: self.compress_id.clone(),
            infer_checkpoint: self.infer_id.clone(),
        };
        Ok((record, compressed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub records: Vec<EvalRecord>,
    pub mean_accuracy: f64,
}

/// Runs every seed and averages. Records of finished seeds are passed to
/// `persist` before the next seed starts, so a failure keeps them.
pub fn run_trial(
    ctx: &TrialContext<'_>,
    task: &ClassificationTask,
    method: Method,
    config: &TrialConfig,
    seeds: &[u64],
    mut persist: impl FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrialResult> {
    let mut records = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (rec, _) = ctx.run_seed(task, method, config, seed)?;
        persist(&rec)?;
        records.push(rec);
    }
    let mean_accuracy = mean(records.iter().map(|r| r.accuracy));
    Ok(TrialResult { records, mean_accuracy })
}

/// Compress with one checkpoint, score with another. Both sides exchange
/// plain text, so differing tokenizers simply re-tokenize.
pub fn transfer_eval(
    compress_with: SelectionP<'_>,
    compress_id: &str,
    infer: Scorer<'_>,
    infer_id: &str,
    task: &ClassificationTask,
    config: &TrialConfig,
    seed: u64,
    cache: &CompressionCache,
) -> Result<EvalRecord> {
    let ctx = TrialContext::new(infer, infer_id, cache).with_selection(compress_with, compress_id);
    Ok(ctx.run_seed(task, Method::SelectionP, config, seed)?.0)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Fraction of payload tokens of the source that survive compression.
pub fn payload_preservation(prompt: &CompressedPrompt, tokenizer: &dyn Tokenizer) -> f64 {
    let payload = payload_mask(&prompt.source_ids, tokenizer);
    let total = payload.iter().filter(|&&p| p).count();
    if total == 0 {
        return f64::NAN;
    }
    let kept = prompt.kept_indices.iter().filter(|&&i| payload[i]).count();
    kept as f64 / total as f64
}

pub fn write_records_json(path: &Path, records: &[EvalRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_records_json(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const CSV_HEADER: &str = "task,seed,compressor,keep_ratio,accuracy,correct,n_test,source_tokens,prompt_tokens,compression_ms,inference_ms,wall_ms,compress_checkpoint,infer_checkpoint";

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{},{},{},{},{:.3},{:.3},{:.3},{},{}\n",
            r.task,
            r.seed,
            r.compressor,
            r.keep_ratio,
            r.accuracy,
            r.correct,
            r.n_test,
            r.source_tokens,
            r.prompt_tokens,
            r.compression_ms,
            r.inference_ms,
            r.wall_ms,
            r.compress_checkpoint,
            r.infer_checkpoint
        ));
    }
    out
}
