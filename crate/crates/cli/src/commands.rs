use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use selectp::analysis::{
    correlate_signals, measure_latency, plot_correlation_heatmap, plot_pos_bars, pos_preservation, token_signals,
    LatencySpec, LexiconTagger,
};
use selectp::backbone::{Backbone, ModelConfig};
use selectp::baselines::{demo_truncate, perplexity_select, random_select};
use selectp::checkpoint::Checkpoint;
use selectp::compressor::{CompressedPrompt, CompressionCache, SelectionP};
use selectp::corpus::{build_segments, load_corpus, CorpusFormat};
use selectp::eval::{
    build_demo_set, kv_corpus, make_kv_task, records_to_csv, run_trial, write_records_json, ClassificationTask,
    KvCorpusConfig, KvTaskConfig, Method, NllReduction, Scorer, TrialConfig, TrialContext,
};
use selectp::report::{load_records, summarize};
use selectp::tokenizer::{Tokenizer, WordTokenizer};
use selectp::trainer::{pretrain_backbone, train, PretrainConfig, TrainConfig, TrainHooks};
use selectp::{Error, Result};

use crate::config::{out_dir, require, resolve, write_manifest};
use crate::{
    AnalyzeFlags, BenchFlags, CompressFlags, EvalFlags, PretrainFlags, ReportFlags, SynthFlags, TrainSelectorFlags,
    TransferFlags,
};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn short_id(ck: &Checkpoint) -> String {
    ck.content_hash()[..12].to_string()
}

fn corpus_format(path: &Path, explicit: Option<&str>) -> Result<CorpusFormat> {
    match explicit {
        Some(f) => f.parse(),
        None if path.extension().is_some_and(|e| e == "jsonl") => Ok(CorpusFormat::Jsonl),
        None => Ok(CorpusFormat::PlainText),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub out: Option<PathBuf>,
    pub n_docs: usize,
    pub n_keys: usize,
    pub filler_ratio: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        let t = KvTaskConfig::default();
        Self {
            out: None,
            n_docs: KvCorpusConfig::default().n_docs,
            n_keys: t.n_keys,
            filler_ratio: t.filler_ratio,
            n_train: t.n_train,
            n_test: t.n_test,
            seed: 0,
        }
    }
}

pub fn synth(cfg: Option<&Path>, flags: &SynthFlags) -> Result<()> {
    let p: SynthParams = resolve("synth", cfg, flags)?;
    if !(2..=selectp::eval::KEY_POOL).contains(&p.n_keys) {
        return Err(Error::config(
            "n_keys",
            format!("must lie in 2..={}", selectp::eval::KEY_POOL),
        ));
    }
    if !(0.0..1.0).contains(&p.filler_ratio) {
        return Err(Error::config("filler_ratio", "must lie in [0, 1)"));
    }
    let dir = out_dir(p.out.as_ref(), "synth");
    let docs = kv_corpus(
        &KvCorpusConfig {
            n_docs: p.n_docs,
            ..Default::default()
        },
        p.seed,
    );
    let mut corpus = String::new();
    for d in &docs {
        corpus.push_str(&serde_json::to_string(&serde_json::json!({ "text": d }))?);
        corpus.push('\n');
    }
    write(&dir.join("corpus.jsonl"), &corpus)?;
    let task = make_kv_task(
        &KvTaskConfig {
            n_keys: p.n_keys,
            filler_ratio: p.filler_ratio,
            n_train: p.n_train,
            n_test: p.n_test,
        },
        p.seed,
    );
    task.save(&dir.join("task.json"))?;
    write_manifest(&dir, "synth", &p)?;
    println!(
        "wrote {} documents and task {} to {}",
        docs.len(),
        task.name,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainParams {
    pub corpus: Option<PathBuf>,
    pub format: Option<String>,
    pub text_field: String,
    pub out: Option<PathBuf>,
    pub tokenizer: Option<PathBuf>,
    pub vocab_size: usize,
    pub min_count: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub segment_length: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainParams {
    fn default() -> Self {
        let m = ModelConfig::toy(0);
        let t = PretrainConfig::default();
        Self {
            corpus: None,
            format: None,
            text_field: "text".into(),
            out: None,
            tokenizer: None,
            vocab_size: 8000,
            min_count: 2,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            segment_length: 128,
            steps: t.steps,
            learning_rate: t.learning_rate,
            warmup_fraction: t.warmup_fraction,
            batch_size: t.batch_size,
            seed: 0,
        }
    }
}

pub fn pretrain(cfg: Option<&Path>, flags: &PretrainFlags) -> Result<()> {
    let p: PretrainParams = resolve("pretrain", cfg, flags)?;
    let corpus_path = require("corpus", &p.corpus)?;
    let corpus = load_corpus(
        corpus_path,
        corpus_format(corpus_path, p.format.as_deref())?,
        &p.text_field,
    )?;
    let tokenizer = match &p.tokenizer {
        Some(path) => WordTokenizer::load(path)?,
        None => WordTokenizer::train(
            corpus.documents.iter().map(|d| d.text.as_str()),
            p.vocab_size,
            p.min_count,
        )?,
    };
    let model = ModelConfig {
        n_layers: p.n_layers,
        n_heads: p.n_heads,
        d_model: p.d_model,
        d_ff: p.d_ff,
        max_seq_len: p.max_seq_len,
        vocab_size: tokenizer.vocab_size(),
        tie_embeddings: true,
    };
    if p.segment_length + 1 > p.max_seq_len {
        return Err(Error::config("segment_length", "segment plus BOS exceeds max_seq_len"));
    }
    let mut backbone = Backbone::init(model, p.seed)?;
    let handle = tokenizer.clone().into_handle();
    let source = corpus_path.display().to_string();
    let (segments, manifest) = build_segments(&corpus, &handle, p.segment_length, &source)?;
    let dir = out_dir(p.out.as_ref(), "pretrain");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(
        &dir.join("corpus_manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let tc = PretrainConfig {
        steps: p.steps,
        learning_rate: p.learning_rate,
        warmup_fraction: p.warmup_fraction,
        batch_size: p.batch_size,
        seed: p.seed,
        ..Default::default()
    };
    info!("pretraining on {} segments", segments.len());
    let losses = pretrain_backbone(&mut backbone, &segments, &tc, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let mut ck = Checkpoint::new(backbone, tokenizer);
    ck.step = p.steps;
    ck.training = serde_json::to_value(&p)?;
    ck.save(&dir)?;
    write_manifest(&dir, "pretrain", &p)?;
    println!(
        "checkpoint {} at {} (final loss {:.4})",
        short_id(&ck),
        dir.display(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSelectorParams {
    pub base: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub format: Option<String>,
    pub text_field: String,
    pub out: Option<PathBuf>,
    pub checkpoint_every: Option<u64>,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for TrainSelectorParams {
    fn default() -> Self {
        Self {
            base: None,
            corpus: None,
            format: None,
            text_field: "text".into(),
            out: None,
            checkpoint_every: None,
            train: TrainConfig::default(),
        }
    }
}

pub fn train_selector(cfg: Option<&Path>, flags: &TrainSelectorFlags) -> Result<()> {
    let p: TrainSelectorParams = resolve("train-selector", cfg, flags)?;
    p.train.validate()?;
    let base = Checkpoint::load(require("base", &p.base)?)?;
    let corpus_path = require("corpus", &p.corpus)?;
    let corpus = load_corpus(
        corpus_path,
        corpus_format(corpus_path, p.format.as_deref())?,
        &p.text_field,
    )?;
    let handle = base.tokenizer_handle();
    let (segments, _) = build_segments(
        &corpus,
        &handle,
        p.train.segment_length,
        &corpus_path.display().to_string(),
    )?;
    let dir = out_dir(p.out.as_ref(), "train-selector");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let save = |state: &selectp::trainer::TrainState| -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(base.backbone.clone(), base.tokenizer.clone());
        ck.adapters = Some(state.adapters.clone());
        ck.head = Some(state.head.clone());
        ck.step = state.step;
        ck.training = serde_json::to_value(&p)?;
        Ok(ck)
    };
    let mut on_ck = |state: &selectp::trainer::TrainState| -> Result<()> {
        save(state)?.save(&dir.join(format!("step-{}", state.step)))
    };
    let mut hooks = TrainHooks {
        log: Some(&mut log),
        checkpoint_every: p.checkpoint_every,
        on_checkpoint: Some(&mut on_ck),
    };
    let state = train(&base.backbone, &segments, &p.train, &mut hooks)?;
    drop(hooks);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ck = save(&state)?;
    ck.save(&dir)?;
    write_manifest(&dir, "train-selector", &p)?;
    println!("selector checkpoint {} at {}", short_id(&ck), dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressParams {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub ratio: f64,
    pub method: String,
    pub chunk_size: Option<usize>,
    pub segment_size: usize,
    pub separator: String,
    pub scores: Option<PathBuf>,
    pub seed: u64,
}

impl Default for CompressParams {
    fn default() -> Self {
        Self {
            checkpoint: None,
            input: None,
            output: None,
            ratio: 0.1,
            method: "selection-p".into(),
            chunk_size: None,
            segment_size: 256,
            separator: "\n\n".into(),
            scores: None,
            seed: 0,
        }
    }
}

pub fn compress(cfg: Option<&Path>, flags: &CompressFlags) -> Result<()> {
    let p: CompressParams = resolve("compress", cfg, flags)?;
    let method: Method = p.method.parse()?;
    let input = require("input", &p.input)?;
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let ck = Checkpoint::load(require("checkpoint", &p.checkpoint)?)?;
    let tok = &ck.tokenizer;
    let out: CompressedPrompt = match method {
        Method::SelectionP => {
            let sp = SelectionP::from_checkpoint(&ck)?;
            match p.chunk_size {
                Some(c) => sp.chunked_compress(&text, p.ratio, c)?,
                None if tok.encode(&text).len() > sp.max_tokens() => {
                    sp.chunked_compress(&text, p.ratio, sp.max_tokens())?
                }
                None => sp.compress(&text, p.ratio)?,
            }
        }
        Method::Perplexity => perplexity_select(&ck.backbone, None, tok, &text, p.ratio, p.segment_size)?,
        Method::Random => random_select(tok, &text, p.ratio, p.seed)?,
        Method::DemoTruncate => {
            let demos: Vec<String> = text.split(p.separator.as_str()).map(str::to_string).collect();
            let kept = demo_truncate(&demos, p.ratio)?.join(&p.separator);
            let ids = tok.encode(&text);
            let n = tok.encode(&kept).len();
            let mut c = CompressedPrompt::from_mask(tok, &ids, &(0..n).collect::<Vec<_>>(), p.ratio, vec![])?;
            c.text = kept;
            c
        }
        other => {
            return Err(Error::config(
                "method",
                format!("{} is not a text compressor", other.id()),
            ))
        }
    };
    match &p.output {
        Some(path) => write(path, &out.text)?,
        None => print!("{}", out.text),
    }
    if let Some(path) = &p.scores {
        write(path, &serde_json::to_string(&out.sidecar())?)?;
    }
    eprintln!(
        "kept {} of {} tokens (requested ratio {}, actual {:.4})",
        out.kept_token_count, out.source_token_count, out.requested_ratio, out.actual_ratio
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub task: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub compressor: Option<PathBuf>,
    pub method: String,
    pub ratio: f64,
    pub seeds: u64,
    pub budget: usize,
    pub chunk_size: Option<usize>,
    pub max_test: usize,
    pub ppl_segment_size: usize,
    pub reduction: NllReduction,
    pub out: Option<PathBuf>,
}

impl Default for EvalParams {
    fn default() -> Self {
        let t = TrialConfig::default();
        Self {
            task: None,
            checkpoint: None,
            compressor: None,
            method: "selection-p".into(),
            ratio: t.keep_ratio,
            seeds: 4,
            budget: t.budget_tokens,
            chunk_size: None,
            max_test: t.max_test,
            ppl_segment_size: t.ppl_segment_size,
            reduction: NllReduction::Sum,
            out: None,
        }
    }
}

fn load_task(path: &Option<PathBuf>) -> Result<ClassificationTask> {
    let t = ClassificationTask::load(require("task", path)?)?;
    t.validate()?;
    Ok(t)
}

fn finish_eval(dir: &Path, records: &[selectp::eval::EvalRecord]) -> Result<()> {
    write_records_json(&dir.join("records.json"), records)?;
    write(&dir.join("records.csv"), &records_to_csv(records))?;
    let summary = summarize(records)?;
    write(&dir.join("summary.md"), &summary.to_markdown())?;
    Ok(())
}

fn jsonl_sink(dir: &Path) -> Result<impl FnMut(&selectp::eval::EvalRecord) -> Result<()>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("records.jsonl");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(move |r: &selectp::eval::EvalRecord| {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        println!(
            "{} seed {} {} @ {}: accuracy {:.4} ({}/{})",
            r.task, r.seed, r.compressor, r.keep_ratio, r.accuracy, r.correct, r.n_test
        );
        Ok(())
    })
}

pub fn eval(cfg: Option<&Path>, flags: &EvalFlags) -> Result<()> {
    let p: EvalParams = resolve("eval", cfg, flags)?;
    let method: Method = p.method.parse()?;
    let task = load_task(&p.task)?;
    let infer = Checkpoint::load(require("checkpoint", &p.checkpoint)?)?;
    let selector = match &p.compressor {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let compress_ck = selector.as_ref().unwrap_or(&infer);
    let dir = out_dir(p.out.as_ref(), "eval");
    let cache = CompressionCache::on_disk(&dir.join("cache"))?;
    let scorer = Scorer {
        reduction: p.reduction,
        ..Scorer::new(&infer.backbone, &infer.tokenizer)
    };
    let mut ctx = TrialContext::new(scorer, &short_id(&infer), &cache).with_ppl_model(&infer.backbone);
    if method == Method::SelectionP {
        ctx = ctx.with_selection(SelectionP::from_checkpoint(compress_ck)?, &short_id(compress_ck));
    }
    let config = TrialConfig {
        keep_ratio: p.ratio,
        budget_tokens: p.budget,
        chunk_size: p.chunk_size,
        ppl_segment_size: p.ppl_segment_size,
        max_test: p.max_test,
    };
    write_manifest(&dir, "eval", &p)?;
    let seeds: Vec<u64> = (0..p.seeds).collect();
    let result = run_trial(&ctx, &task, method, &config, &seeds, jsonl_sink(&dir)?)?;
    finish_eval(&dir, &result.records)?;
    println!("mean accuracy {:.4} over {} seeds", result.mean_accuracy, seeds.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferParams {
    pub compress_checkpoint: Option<PathBuf>,
    pub infer_checkpoint: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub ratio: f64,
    pub seeds: u64,
    pub budget: usize,
    pub max_test: usize,
    pub out: Option<PathBuf>,
}

impl Default for TransferParams {
    fn default() -> Self {
        let e = EvalParams::default();
        Self {
            compress_checkpoint: None,
            infer_checkpoint: None,
            task: None,
            ratio: e.ratio,
            seeds: e.seeds,
            budget: e.budget,
            max_test: e.max_test,
            out: None,
        }
    }
}

pub fn transfer(cfg: Option<&Path>, flags: &TransferFlags) -> Result<()> {
    let p: TransferParams = resolve("transfer", cfg, flags)?;
    let task = load_task(&p.task)?;
    let a = Checkpoint::load(require("compress_checkpoint", &p.compress_checkpoint)?)?;
    let b = Checkpoint::load(require("infer_checkpoint", &p.infer_checkpoint)?)?;
    let dir = out_dir(p.out.as_ref(), "transfer");
    let cache = CompressionCache::in_memory();
    let ctx = TrialContext::new(Scorer::new(&b.backbone, &b.tokenizer), &short_id(&b), &cache)
        .with_selection(SelectionP::from_checkpoint(&a)?, &short_id(&a));
    let config = TrialConfig {
        keep_ratio: p.ratio,
        budget_tokens: p.budget,
        max_test: p.max_test,
        ..Default::default()
    };
    write_manifest(&dir, "transfer", &p)?;
    let seeds: Vec<u64> = (0..p.seeds).collect();
    let mut sink = jsonl_sink(&dir)?;
    let mut records = Vec::new();
    for method in [Method::SelectionP, Method::Random, Method::FullShot] {
        let r = run_trial(&ctx, &task, method, &config, &seeds, &mut sink)?;
        println!("{}: mean accuracy {:.4}", method.id(), r.mean_accuracy);
        records.extend(r.records);
    }
    finish_eval(&dir, &records)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchParams {
    pub checkpoint: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub method: String,
    pub ratios: Vec<f64>,
    pub budget: usize,
    pub seed: u64,
    pub warmups: usize,
    pub runs: usize,
    pub max_test: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchParams {
    fn default() -> Self {
        let s = LatencySpec::default();
        Self {
            checkpoint: None,
            task: None,
            method: "selection-p".into(),
            ratios: vec![1.0, 0.5, 0.2, 0.1],
            budget: s.budget_tokens,
            seed: s.seed,
            warmups: s.warmups,
            runs: s.runs,
            max_test: s.max_test,
            out: None,
        }
    }
}

pub fn bench(cfg: Option<&Path>, flags: &BenchFlags) -> Result<()> {
    let p: BenchParams = resolve("bench", cfg, flags)?;
    let method: Method = p.method.parse()?;
    let task = load_task(&p.task)?;
    let ck = Checkpoint::load(require("checkpoint", &p.checkpoint)?)?;
    let cache = CompressionCache::in_memory();
    let id = short_id(&ck);
    let mut ctx = TrialContext::new(Scorer::new(&ck.backbone, &ck.tokenizer), &id, &cache).with_ppl_model(&ck.backbone);
    if method == Method::SelectionP {
        ctx = ctx.with_selection(SelectionP::from_checkpoint(&ck)?, &id);
    }
    let spec = LatencySpec {
        budget_tokens: p.budget,
        seed: p.seed,
        warmups: p.warmups,
        runs: p.runs,
        max_test: p.max_test,
    };
    let reports = measure_latency(&ctx, &task, method, &p.ratios, &spec)?;
    let dir = out_dir(p.out.as_ref(), "bench");
    write_manifest(&dir, "bench", &p)?;
    let mut csv =
        String::from("condition,keep_ratio,prompt_tokens,compression_ms,inference_ms,end_to_end_ms,speedup\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{:.3},{:.3},{:.3},{:.3}\n",
            r.condition, r.keep_ratio, r.prompt_tokens, r.compression_ms, r.inference_ms, r.end_to_end_ms, r.speedup
        ));
    }
    write(&dir.join("latency.csv"), &csv)?;
    write(&dir.join("latency.json"), &serde_json::to_string_pretty(&reports)?)?;
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeParams {
    pub checkpoint: Option<PathBuf>,
    pub task: Option<PathBuf>,
    pub ratio: f64,
    pub budget: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        Self {
            checkpoint: None,
            task: None,
            ratio: 0.1,
            budget: 750,
            seed: 0,
            out: None,
        }
    }
}

pub fn analyze(cfg: Option<&Path>, flags: &AnalyzeFlags) -> Result<()> {
    let p: AnalyzeParams = resolve("analyze", cfg, flags)?;
    let task = load_task(&p.task)?;
    let ck = Checkpoint::load(require("checkpoint", &p.checkpoint)?)?;
    let sp = SelectionP::from_checkpoint(&ck)?;
    let demos = build_demo_set(&task, p.budget, p.seed, &ck.tokenizer)?;
    let text = demos.text(&task.template);
    let corr = correlate_signals(&task.name, &token_signals(&sp, &text)?)?;
    let compressed = sp.compress(&text, p.ratio)?;
    let pos = pos_preservation(&compressed, &ck.tokenizer, &LexiconTagger::new())?;
    let dir = out_dir(p.out.as_ref(), "analyze");
    write_manifest(&dir, "analyze", &p)?;
    write(&dir.join("correlation.json"), &serde_json::to_string_pretty(&corr)?)?;
    write(
        &dir.join("correlation.csv"),
        &format!(
            "task,n_tokens,p_attention,p_perplexity,attention_perplexity\n{},{},{},{},{}\n",
            corr.task, corr.n_tokens, corr.p_attention, corr.p_perplexity, corr.attention_perplexity
        ),
    )?;
    let mut csv = String::from("tag,total,kept,ratio,frequency\n");
    for t in &pos.tags {
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            t.tag, t.total, t.kept, t.ratio, t.frequency
        ));
    }
    write(&dir.join("pos.csv"), &csv)?;
    write(&dir.join("pos.json"), &serde_json::to_string_pretty(&pos)?)?;
    plot_pos_bars(&pos, &format!("{} @ {}", task.name, p.ratio), &dir.join("pos.svg"))?;
    plot_correlation_heatmap(std::slice::from_ref(&corr), &dir.join("correlation.svg"))?;
    println!(
        "spearman p~attention {} p~perplexity {} attention~perplexity {}",
        corr.p_attention, corr.p_perplexity, corr.attention_perplexity
    );
    print!("{csv}");
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportParams {
    pub results: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn report(cfg: Option<&Path>, flags: &ReportFlags) -> Result<()> {
    let p: ReportParams = resolve("report", cfg, flags)?;
    let results = require("results", &p.results)?;
    let records = load_records(results)?;
    let summary = summarize(&records)?;
    let dir = p.out.clone().unwrap_or_else(|| results.clone());
    write(&dir.join("summary.md"), &summary.to_markdown())?;
    write(&dir.join("summary.csv"), &summary.to_csv())?;
    print!("{}", summary.to_markdown());
    Ok(())
}
