//! Latency, signal correlation and part-of-speech preservation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use log::warn;
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::ForwardOptions;
use crate::compressor::{CompressedPrompt, SelectionP};
use crate::error::{Error, Result};
use crate::eval::{build_demo_set, score_options, ClassificationTask, Method, TrialConfig, TrialContext};
use crate::tokenizer::{Tokenizer, BOS_ID};

/// A rank correlation, or the marker for a constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Defined(f64),
    Undefined,
}

impl Coefficient {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Defined(v) => Some(v),
            Self::Undefined => None,
        }
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Defined(v) => write!(f, "{v:.6}"),
            Self::Undefined => f.write_str("undefined"),
        }
    }
}

impl Serialize for Coefficient {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Defined(v) => s.serialize_f64(*v),
            Self::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Coefficient {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Self::Defined(v)),
            Raw::Text(t) if t == "undefined" => Ok(Self::Undefined),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad coefficient {t:?}"))),
        }
    }
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Coefficient {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Coefficient::Undefined;
    }
    Coefficient::Defined((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Coefficient> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "spearman over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::Contract("spearman needs at least 3 pairs".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Contract("spearman input contains NaN".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub task: String,
    pub n_tokens: usize,
    pub p_attention: Coefficient,
    pub p_perplexity: Coefficient,
    pub attention_perplexity: Coefficient,
}

/// Per-token selection scores, last-layer mean attention of the tuned
/// model, and surprise under the base model, for one text.
pub struct TokenSignals {
    pub p: Vec<f64>,
    pub attention: Vec<f64>,
    pub perplexity: Vec<f64>,
}

pub fn token_signals(sp: &SelectionP<'_>, text: &str) -> Result<TokenSignals> {
    let ids = sp.tokenizer.encode(text);
    if ids.len() < 4 {
        return Err(Error::Data("text too short to correlate".into()));
    }
    if ids.len() > sp.max_tokens() {
        return Err(Error::Length {
            len: ids.len(),
            max: sp.max_tokens(),
            hint: "correlate a shorter demonstration set".into(),
        });
    }
    let p = sp.score_ids(&ids)?;
    let mut full = vec![BOS_ID];
    full.extend(&ids);
    let tuned = sp
        .backbone
        .forward(&full, &ForwardOptions::with_adapters(sp.adapters))?;
    let attention = tuned.last_layer_mean_attention[1..].to_vec();
    let perplexity = sp.backbone.token_perplexities(&full, None)?[1..].to_vec();
    Ok(TokenSignals {
        p,
        attention,
        perplexity,
    })
}

/// Pairwise rank correlations among the three signals. The first text
/// token is left out of pairs involving perplexity.
pub fn correlate_signals(task: &str, signals: &TokenSignals) -> Result<CorrelationReport> {
    let TokenSignals {
        p,
        attention,
        perplexity,
    } = signals;
    Ok(CorrelationReport {
        task: task.to_string(),
        n_tokens: p.len(),
        p_attention: spearman(p, attention)?,
        p_perplexity: spearman(&p[1..], &perplexity[1..])?,
        attention_perplexity: spearman(&attention[1..], &perplexity[1..])?,
    })
}

/// Maps a word to a part-of-speech tag.
pub trait PosTagger {
    fn tag(&self, word: &str) -> String;
}

/// Closed-class lexicon plus suffix rules; anything else is a noun.
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    pub extra: BTreeMap<String, String>,
}

const LEXICON: &[(&str, &[&str])] = &[
    (
        "DET",
        &[
            "the", "a", "an", "this", "that", "these", "those", "some", "any", "each", "every", "no", "such",
        ],
    ),
    (
        "ADP",
        &[
            "of", "in", "to", "for", "on", "with", "at", "by", "from", "over", "under", "about", "into", "after",
        ],
    ),
    ("CCONJ", &["and", "but", "or", "nor", "yet"]),
    ("SCONJ", &["when", "where", "while", "because", "if", "although", "as"]),
    (
        "PRON",
        &[
            "i", "you", "he", "she", "it", "we", "they", "me", "him", "her", "us", "them", "who", "what",
        ],
    ),
    (
        "AUX",
        &[
            "is", "was", "are", "were", "be", "been", "am", "do", "does", "did", "has", "have", "had", "will", "can",
        ],
    ),
    (
        "ADV",
        &[
            "very", "then", "just", "only", "also", "here", "there", "so", "not", "more", "most", "too",
        ],
    ),
    (
        "ADJ",
        &[
            "good", "bad", "great", "new", "old", "big", "small", "long", "little", "high",
        ],
    ),
    (
        "VERB",
        &[
            "go", "went", "make", "made", "say", "said", "take", "took", "see", "saw", "get", "got",
        ],
    ),
];

impl LexiconTagger {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, word: &str) -> String {
        let w = word.trim().to_lowercase();
        if let Some(t) = self.extra.get(&w) {
            return t.clone();
        }
        if w.is_empty() {
            return "X".into();
        }
        if w.chars().all(|c| !c.is_alphanumeric()) {
            return "PUNCT".into();
        }
        if w.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
            return "NUM".into();
        }
        if crate::eval::is_payload_piece(&w) {
            return "SYM".into();
        }
        for (tag, words) in LEXICON {
            if words.contains(&w.as_str()) {
                return tag.to_string();
            }
        }
        let suffix_tags: [(&[&str], &str); 4] = [
            (&["ly"], "ADV"),
            (&["ing", "ed", "ize", "ise"], "VERB"),
            (&["ous", "ful", "able", "ible", "ive", "al", "ic", "less"], "ADJ"),
            (&["tion", "ness", "ment", "ity", "er", "ship"], "NOUN"),
        ];
        for (suffixes, tag) in suffix_tags {
            if suffixes.iter().any(|s| w.len() > s.len() + 2 && w.ends_with(s)) {
                return tag.to_string();
            }
        }
        "NOUN".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStat {
    pub tag: String,
    pub total: usize,
    pub kept: usize,
    pub ratio: f64,
    /// Share of all aligned words carrying this tag.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosReport {
    /// Tags above the frequency floor, in tag order.
    pub tags: Vec<TagStat>,
    pub total_words: usize,
    pub kept_words: usize,
    /// Tokens that could not be placed inside a single word.
    pub excluded_tokens: usize,
}

pub const POS_MIN_FREQUENCY: f64 = 0.01;

/// Word-level preservation by tag. A word counts as preserved when any of
/// its tokens survives; whitespace-only pieces are not words.
pub fn pos_preservation(
    prompt: &CompressedPrompt,
    tokenizer: &dyn Tokenizer,
    tagger: &dyn PosTagger,
) -> Result<PosReport> {
    let source = tokenizer.decode(&prompt.source_ids)?;
    let mut kept_tok = vec![false; prompt.source_ids.len()];
    for &i in &prompt.kept_indices {
        kept_tok[i] = true;
    }
    // word spans over the source text
    let mut words: Vec<(usize, usize)> = Vec::new();
    let mut off = 0;
    for piece in crate::tokenizer::pretokenize(&source) {
        let lead = piece.len() - piece.trim_start().len();
        if !piece.trim().is_empty() {
            words.push((off + lead, off + piece.len()));
        }
        off += piece.len();
    }
    let mut word_hit: Vec<Option<bool>> = vec![None; words.len()];
    let src = source.as_bytes();
    let mut excluded = 0;
    let mut pos = 0;
    let mut w = 0;
    for (t, &id) in prompt.source_ids.iter().enumerate() {
        let bytes = match tokenizer.token_bytes(id) {
            Ok(b) if src[pos..].starts_with(&b) => b,
            other => {
                warn!("token {t} (id {id}) does not align with the source text");
                excluded += 1;
                pos = (pos + other.map(|b| b.len()).unwrap_or(1)).min(src.len());
                continue;
            }
        };
        let (a, b) = (pos, pos + bytes.len());
        pos = b;
        let core_start = a + bytes.iter().take_while(|c| c.is_ascii_whitespace()).count();
        if core_start >= b {
            continue; // whitespace only
        }
        while w < words.len() && words[w].1 <= core_start {
            w += 1;
        }
        if w < words.len() && words[w].0 <= core_start && b <= words[w].1 {
            let hit = word_hit[w].get_or_insert(false);
            *hit |= kept_tok[t];
        } else {
            warn!("token {t} spans a word boundary");
            excluded += 1;
        }
    }

    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (span, hit) in words.iter().zip(&word_hit) {
        if let Some(kept) = hit {
            let e = counts.entry(tagger.tag(&source[span.0..span.1])).or_default();
            e.0 += 1;
            e.1 += *kept as usize;
        }
    }
    let total_words: usize = counts.values().map(|c| c.0).sum();
    let kept_words: usize = counts.values().map(|c| c.1).sum();
    let tags = counts
        .into_iter()
        .map(|(tag, (total, kept))| TagStat {
            tag,
            total,
            kept,
            ratio: kept as f64 / total as f64,
            frequency: total as f64 / total_words.max(1) as f64,
        })
        .filter(|s| s.frequency > POS_MIN_FREQUENCY)
        .collect();
    Ok(PosReport {
        tags,
        total_words,
        kept_words,
        excluded_tokens: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub condition: String,
    pub keep_ratio: f64,
    pub compression_ms: f64,
    pub inference_ms: f64,
    pub end_to_end_ms: f64,
    pub speedup: f64,
    pub prompt_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySpec {
    pub budget_tokens: usize,
    pub seed: u64,
    pub warmups: usize,
    pub runs: usize,
    pub max_test: usize,
}

impl Default for LatencySpec {
    fn default() -> Self {
        Self {
            budget_tokens: 750,
            seed: 0,
            warmups: 3,
            runs: 5,
            max_test: 200,
        }
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Times compression of one demonstration set plus answering every test
/// query, against the uncompressed prompt. Ratio 1.0 is the uncompressed
/// condition itself.
pub fn measure_latency(
    ctx: &TrialContext<'_>,
    task: &ClassificationTask,
    method: Method,
    ratios: &[f64],
    spec: &LatencySpec,
) -> Result<Vec<LatencyReport>> {
    let demos = build_demo_set(task, spec.budget_tokens, spec.seed, ctx.scorer.tokenizer)?;
    let tests = &task.test[..task.test.len().min(spec.max_test)];
    let run_once = |ratio: Option<f64>| -> Result<(f64, f64, usize)> {
        let t0 = Instant::now();
        let prompt = match ratio {
            Some(r) => {
                let cfg = TrialConfig {
                    keep_ratio: r,
                    budget_tokens: spec.budget_tokens,
                    ..Default::default()
                };
                ctx.compress_fresh(method, &demos, &task.template, &cfg)?.text
            }
            None => demos.text(&task.template),
        };
        let compression = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        for inst in tests {
            std::hint::black_box(score_options(
                &ctx.scorer,
                &task.template,
                &prompt,
                &inst.context,
                &inst.options,
            )?);
        }
        let inference = t1.elapsed().as_secs_f64() * 1e3;
        Ok((compression, inference, ctx.scorer.tokenizer.encode(&prompt).len()))
    };
    let timed = |ratio: Option<f64>| -> Result<(f64, f64, f64, usize)> {
        for _ in 0..spec.warmups {
            run_once(ratio)?;
        }
        let (mut c, mut i, mut e) = (Vec::new(), Vec::new(), Vec::new());
        let mut tokens = 0;
        for _ in 0..spec.runs.max(1) {
            let (cm, im, n) = run_once(ratio)?;
            c.push(cm);
            i.push(im);
            e.push(cm + im);
            tokens = n;
        }
        Ok((median(&mut c), median(&mut i), median(&mut e), tokens))
    };
    let (_, base_inf, base_e2e, base_tokens) = timed(None)?;
    let uncompressed = LatencyReport {
        condition: "uncompressed".into(),
        keep_ratio: 1.0,
        compression_ms: 0.0,
        inference_ms: base_inf,
        end_to_end_ms: base_e2e,
        speedup: 1.0,
        prompt_tokens: base_tokens,
    };
    let mut out = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if r == 1.0 {
            out.push(uncompressed.clone());
            continue;
        }
        let (c, i, e, n) = timed(Some(r))?;
        out.push(LatencyReport {
            condition: method.id().to_string(),
            keep_ratio: r,
            compression_ms: c,
            inference_ms: i,
            // medians are taken per component; keep the sum consistent
            end_to_end_ms: e.max(i),
            speedup: base_e2e / e.max(i),
            prompt_tokens: n,
        });
    }
    Ok(out)
}

fn plot_err(e: impl fmt::Display) -> Error {
    Error::Data(format!("plotting failed: {e}"))
}

/// Bar chart of preservation ratio per tag.
pub fn plot_pos_bars(report: &PosReport, title: &str, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = report.tags.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0)
        .map_err(plot_err)?;
    let labels: Vec<String> = report.tags.iter().map(|t| t.tag.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("preserved")
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.mix(0.6).filled())
                .margin(6)
                .data(report.tags.iter().enumerate().map(|(i, t)| (i, t.ratio))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Heatmap of the three pairwise coefficients, one row per task.
pub fn plot_correlation_heatmap(reports: &[CorrelationReport], path: &Path) -> Result<()> {
    let cols = ["p~attn", "p~ppl", "attn~ppl"];
    let rows = reports.len().max(1);
    let root = SVGBackend::new(path, (560, 120 + 40 * rows as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("rank correlation", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(110)
        .build_cartesian_2d(0..cols.len(), 0..rows)
        .map_err(plot_err)?;
    let names: Vec<String> = reports.iter().map(|r| r.task.clone()).collect();
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(cols.len())
        .y_labels(rows)
        .x_label_formatter(&|i| cols.get(*i).map(|s| s.to_string()).unwrap_or_default())
        .y_label_formatter(&|i| names.get(*i).cloned().unwrap_or_default())
        .draw()
        .map_err(plot_err)?;
    let cells = reports.iter().enumerate().flat_map(|(r, rep)| {
        [rep.p_attention, rep.p_perplexity, rep.attention_perplexity]
            .into_iter()
            .enumerate()
            .map(move |(c, v)| (r, c, v))
    });
    chart
        .draw_series(cells.map(|(r, c, v)| {
            let color = match v.value() {
                // red for positive, blue for negative
                Some(x) if x >= 0.0 => RGBColor(255, (255.0 * (1.0 - x)) as u8, (255.0 * (1.0 - x)) as u8),
                Some(x) => RGBColor((255.0 * (1.0 + x)) as u8, (255.0 * (1.0 + x)) as u8, 255),
                None => RGBColor(200, 200, 200),
            };
            Rectangle::new([(c, r), (c + 1, r + 1)], color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
