//! Inference-time compression: one scoring pass, an exact-count keep mask,
//! and detokenization of the kept tokens in source order.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{AdapterSet, Backbone, ForwardOptions};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::selector::{discretize_to_count, rank_desc, target_count, KeepMask, ScoreSidecar, SelectionHead};
use crate::tokenizer::{TokenId, Tokenizer};
use crate::trainer::with_bos;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedPrompt {
    pub text: String,
    pub source_ids: Vec<TokenId>,
    pub kept_indices: Vec<usize>,
    pub source_token_count: usize,
    pub kept_token_count: usize,
    pub requested_ratio: f64,
    pub actual_ratio: f64,
    /// Token offsets where each chunk starts; `[0]` for single-pass output.
    pub chunk_boundaries: Vec<usize>,
    /// Per-token scores that drove the selection, when the method has any.
    pub scores: Vec<f64>,
}

impl CompressedPrompt {
    /// Assembles a prompt from kept positions. `chunk_texts` lets chunked
    /// output insert joiners; otherwise the kept ids are decoded together.
    pub fn from_mask(
        tokenizer: &dyn Tokenizer,
        ids: &[TokenId],
        kept: &[usize],
        requested_ratio: f64,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let kept_ids: Vec<TokenId> = kept.iter().map(|&i| ids[i]).collect();
        let text = tokenizer.decode(&kept_ids)?;
        Ok(Self::assemble(
            text,
            ids,
            kept.to_vec(),
            requested_ratio,
            vec![0],
            scores,
        ))
    }

    fn assemble(
        text: String,
        ids: &[TokenId],
        kept_indices: Vec<usize>,
        requested_ratio: f64,
        chunk_boundaries: Vec<usize>,
        scores: Vec<f64>,
    ) -> Self {
        let n = ids.len();
        Self {
            text,
            source_ids: ids.to_vec(),
            kept_token_count: kept_indices.len(),
            actual_ratio: if n == 0 {
                1.0
            } else {
                kept_indices.len() as f64 / n as f64
            },
            kept_indices,
            source_token_count: n,
            requested_ratio,
            chunk_boundaries,
            scores,
        }
    }

    /// `|kept - ratio·n| <= 1` and strictly increasing indices.
    pub fn is_exact(&self) -> bool {
        let n = self.source_token_count as f64;
        (self.kept_token_count as f64 - self.requested_ratio * n).abs() <= 1.0 + 1e-9
            && self.kept_indices.windows(2).all(|w| w[0] < w[1])
    }

    pub fn keep_mask(&self) -> KeepMask {
        KeepMask::from_indices(self.source_token_count, &self.kept_indices, self.requested_ratio)
    }

    pub fn sidecar(&self) -> ScoreSidecar {
        ScoreSidecar::new(&self.source_ids, &self.scores, &self.keep_mask())
    }
}

pub(crate) fn check_ratio(keep_ratio: f64) -> Result<()> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config("keep_ratio", format!("{keep_ratio} is outside (0, 1]")));
    }
    Ok(())
}

/// Splits `target_count(Σ lengths, ratio)` kept tokens across parts by
/// largest remainder, earlier parts first on ties. Each part receives the
/// floor or ceiling of `ratio · length`.
pub fn apportion(lengths: &[usize], ratio: f64) -> Vec<usize> {
    let total: usize = lengths.iter().sum();
    let target = target_count(total, ratio);
    let exact: Vec<f64> = lengths.iter().map(|&l| ratio * l as f64).collect();
    let mut out: Vec<usize> = exact
        .iter()
        .zip(lengths)
        .map(|(&x, &l)| ((x + 1e-9).floor() as usize).min(l))
        .collect();
    let mut missing = target.saturating_sub(out.iter().sum());
    let remainders: Vec<f64> = exact.iter().zip(&out).map(|(&x, &o)| x - o as f64).collect();
    for i in rank_desc(&remainders) {
        if missing == 0 {
            break;
        }
        if out[i] < lengths[i] {
            out[i] += 1;
            missing -= 1;
        }
    }
    // the floor-at-one rule can leave a deficit that no remainder covers
    for i in 0..out.len() {
        if missing == 0 {
            break;
        }
        let room = lengths[i] - out[i];
        let add = room.min(missing);
        out[i] += add;
        missing -= add;
    }
    out
}

/// The trained scorer: backbone (with adapters when present) plus head.
#[derive(Clone, Copy)]
pub struct SelectionP<'a> {
    pub backbone: &'a Backbone,
    pub adapters: Option<&'a AdapterSet>,
    pub head: &'a SelectionHead,
    pub tokenizer: &'a dyn Tokenizer,
}

impl<'a> SelectionP<'a> {
    pub fn from_checkpoint(ck: &'a Checkpoint) -> Result<Self> {
        let head = ck
            .head
            .as_ref()
            .ok_or_else(|| Error::config("checkpoint", "checkpoint has no selection head; run train-selector"))?;
        Ok(Self {
            backbone: &ck.backbone,
            adapters: ck.adapters.as_ref(),
            head,
            tokenizer: &ck.tokenizer,
        })
    }

    /// Longest text (in tokens) one scoring pass accepts; BOS takes a slot.
    pub fn max_tokens(&self) -> usize {
        self.backbone.config.max_seq_len - 1
    }

    /// Preservation probabilities for `ids`, scored behind a BOS token.
    pub fn score_ids(&self, ids: &[TokenId]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        if ids.len() > self.max_tokens() {
            return Err(Error::Length {
                len: ids.len(),
                max: self.max_tokens(),
                hint: "use chunked compression".into(),
            });
        }
        let full = with_bos(ids);
        let out = self
            .backbone
            .forward(&full, &ForwardOptions::with_adapters(self.adapters))?;
        let p = self.head.score(&out.last_hidden)?;
        Ok(p.0[full.len() - ids.len()..].to_vec())
    }

    /// Keeps exactly `count` of `ids` by score.
    pub fn select(&self, ids: &[TokenId], count: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let scores = self.score_ids(ids)?;
        let mask = discretize_to_count(&scores, count, &BTreeSet::new(), 1.0)?;
        Ok((mask.kept_indices(), scores))
    }

    pub fn compress(&self, text: &str, keep_ratio: f64) -> Result<CompressedPrompt> {
        check_ratio(keep_ratio)?;
        let ids = self.tokenizer.encode(text);
        let (kept, scores) = self.select(&ids, target_count(ids.len(), keep_ratio))?;
        CompressedPrompt::from_mask(self.tokenizer, &ids, &kept, keep_ratio, scores)
    }

    /// Compresses consecutive `chunk_size`-token chunks independently and
    /// joins their outputs with one space.
    pub fn chunked_compress(&self, text: &str, keep_ratio: f64, chunk_size: usize) -> Result<CompressedPrompt> {
        check_ratio(keep_ratio)?;
        if chunk_size == 0 || chunk_size > self.max_tokens() {
            return Err(Error::config(
                "chunk_size",
                format!("must lie in 1..={} for this backbone", self.max_tokens()),
            ));
        }
        let ids = self.tokenizer.encode(text);
        chunked(self.tokenizer, &ids, keep_ratio, chunk_size, |chunk, count| {
            self.select(chunk, count)
        })
    }
}

/// Shared chunking driver: `select(chunk, count)` returns kept offsets and
/// scores for one chunk.
pub(crate) fn chunked(
    tokenizer: &dyn Tokenizer,
    ids: &[TokenId],
    keep_ratio: f64,
    chunk_size: usize,
    mut select: impl FnMut(&[TokenId], usize) -> Result<(Vec<usize>, Vec<f64>)>,
) -> Result<CompressedPrompt> {
    let chunks: Vec<&[TokenId]> = ids.chunks(chunk_size).collect();
    let counts = apportion(&chunks.iter().map(|c| c.len()).collect::<Vec<_>>(), keep_ratio);
    let mut texts = Vec::with_capacity(chunks.len());
    let mut kept = Vec::new();
    let mut scores = Vec::with_capacity(ids.len());
    let mut boundaries = Vec::with_capacity(chunks.len());
    for (c, (chunk, count)) in chunks.iter().zip(counts).enumerate() {
        let offset = c * chunk_size;
        boundaries.push(offset);
        let (k, s) = select(chunk, count)?;
        let kept_ids: Vec<TokenId> = k.iter().map(|&i| chunk[i]).collect();
        texts.push(tokenizer.decode(&kept_ids)?);
        kept.extend(k.into_iter().map(|i| i + offset));
        scores.extend(s);
    }
    if boundaries.is_empty() {
        boundaries.push(0);
    }
    Ok(CompressedPrompt::assemble(
        texts.join(" "),
        ids,
        kept,
        keep_ratio,
        boundaries,
        scores,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// Filter demonstrations, then apply the fixed token ratio to the rest.
    FixedRateAfterFilter,
    /// Filter, then pick the token ratio that lands on the global budget.
    RateAdjusted,
}

impl std::str::FromStr for BudgetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" | "fixed-rate-after-filter" => Ok(Self::FixedRateAfterFilter),
            "adjusted" | "rate-adjusted" => Ok(Self::RateAdjusted),
            other => Err(Error::config("budget_mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub mode: BudgetMode,
    /// Token ratio applied after filtering in fixed mode.
    pub fixed_ratio: f64,
    /// The filter keeps demonstrations up to this multiple of the budget.
    pub filter_multiplier: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            mode: BudgetMode::RateAdjusted,
            fixed_ratio: 0.1,
            filter_multiplier: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// Indices into the input demonstrations, in original order.
    pub selected_demonstration_ids: Vec<usize>,
    /// Kept-token budget for each selected demonstration.
    pub budgets: Vec<usize>,
    pub residual_ratio: f64,
    pub source_tokens: usize,
    pub selected_tokens: usize,
}

impl BudgetPlan {
    pub fn planned_tokens(&self) -> usize {
        self.budgets.iter().sum()
    }
}

/// Ranks demonstrations by mean selection score and keeps the best ones
/// while they fit in `filter_multiplier × global_budget_tokens`, then sets
/// the token-level budgets.
pub fn budget_controller(
    sp: &SelectionP<'_>,
    demonstrations: &[String],
    global_budget_tokens: usize,
    config: &BudgetConfig,
) -> Result<BudgetPlan> {
    let scored = demonstrations
        .iter()
        .map(|d| {
            let ids = sp.tokenizer.encode(d);
            let p = sp.score_ids(&ids)?;
            Ok((ids.len(), p))
        })
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<usize> = scored.iter().map(|s| s.0).collect();
    let means: Vec<f64> = scored
        .iter()
        .map(|(n, p)| {
            if *n == 0 {
                0.0
            } else {
                p.iter().sum::<f64>() / *n as f64
            }
        })
        .collect();
    plan_budget(&lengths, &means, global_budget_tokens, config)
}

/// The scoring-independent half of [`budget_controller`].
pub fn plan_budget(
    lengths: &[usize],
    demo_scores: &[f64],
    global_budget_tokens: usize,
    config: &BudgetConfig,
) -> Result<BudgetPlan> {
    if lengths.is_empty() {
        return Err(Error::config("demonstrations", "need at least one demonstration"));
    }
    if global_budget_tokens == 0 {
        return Err(Error::config("budget", "must be at least 1 token"));
    }
    check_ratio(config.fixed_ratio)?;
    let cap = config.filter_multiplier * global_budget_tokens as f64;
    let mut selected = Vec::new();
    let mut used = 0usize;
    for i in rank_desc(demo_scores) {
        if !selected.is_empty() && (used + lengths[i]) as f64 > cap {
            continue;
        }
        used += lengths[i];
        selected.push(i);
    }
    selected.sort_unstable();
    let sel_lengths: Vec<usize> = selected.iter().map(|&i| lengths[i]).collect();
    let selected_tokens: usize = sel_lengths.iter().sum();
    let (budgets, residual_ratio) = match config.mode {
        BudgetMode::FixedRateAfterFilter => (
            sel_lengths
                .iter()
                .map(|&l| target_count(l, config.fixed_ratio))
                .collect(),
            config.fixed_ratio,
        ),
        BudgetMode::RateAdjusted => {
            if global_budget_tokens < selected.len() {
                return Err(Error::config(
                    "budget",
                    format!(
                        "{global_budget_tokens} tokens cannot cover {} demonstrations",
                        selected.len()
                    ),
                ));
            }
            let ratio = (global_budget_tokens as f64 / selected_tokens.max(1) as f64).min(1.0);
            let mut b = apportion(&sel_lengths, ratio);
            // never plan an empty demonstration
            while let Some(z) = b.iter().position(|&x| x == 0) {
                let donor = (0..b.len()).max_by_key(|&i| (b[i], std::cmp::Reverse(i))).unwrap();
                b[donor] -= 1;
                b[z] += 1;
            }
            (b, ratio)
        }
    };
    if budgets.iter().zip(&sel_lengths).any(|(&b, &l)| b == 0 && l > 0) {
        return Err(Error::config(
            "budget",
            "budget leaves a selected demonstration with no tokens",
        ));
    }
    Ok(BudgetPlan {
        selected_demonstration_ids: selected,
        budgets,
        residual_ratio,
        source_tokens: lengths.iter().sum(),
        selected_tokens,
    })
}

/// Compresses the selected demonstrations to their budgets and joins them.
/// `kept_indices` refer to the token stream of all demonstrations joined by
/// `separator`.
pub fn apply_budget_plan(
    sp: &SelectionP<'_>,
    demonstrations: &[String],
    plan: &BudgetPlan,
    separator: &str,
) -> Result<CompressedPrompt> {
    let sep_ids = sp.tokenizer.encode(separator);
    let mut all_ids = Vec::new();
    let mut starts = Vec::with_capacity(demonstrations.len());
    for (i, d) in demonstrations.iter().enumerate() {
        if i > 0 {
            all_ids.extend_from_slice(&sep_ids);
        }
        starts.push(all_ids.len());
        all_ids.extend(sp.tokenizer.encode(d));
    }
    let mut texts = Vec::new();
    let mut kept = Vec::new();
    let mut scores = vec![0.0; all_ids.len()];
    for (&d, &budget) in plan.selected_demonstration_ids.iter().zip(&plan.budgets) {
        let ids = sp.tokenizer.encode(&demonstrations[d]);
        let (k, s) = sp.select(&ids, budget)?;
        let kept_ids: Vec<TokenId> = k.iter().map(|&i| ids[i]).collect();
        texts.push(sp.tokenizer.decode(&kept_ids)?);
        kept.extend(k.iter().map(|&i| i + starts[d]));
        scores[starts[d]..starts[d] + ids.len()].copy_from_slice(&s);
    }
    let ratio = plan.planned_tokens() as f64 / all_ids.len().max(1) as f64;
    let mut out = CompressedPrompt::assemble(
        texts.join(separator),
        &all_ids,
        kept,
        ratio,
        plan.selected_demonstration_ids.iter().map(|&d| starts[d]).collect(),
        scores,
    );
    out.requested_ratio = ratio;
    Ok(out)
}

pub fn text_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub checkpoint: String,
    pub text: String,
    /// Bit pattern of the requested ratio.
    pub ratio_bits: u64,
    pub method: String,
}

impl CacheKey {
    pub fn new(checkpoint_hash: &str, text: &str, ratio: f64, method: &str) -> Self {
        Self {
            checkpoint: checkpoint_hash.to_string(),
            text: text_hash(text),
            ratio_bits: ratio.to_bits(),
            method: method.to_string(),
        }
    }

    fn file_name(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).unwrap_or_default());
        format!("{}.json", &hex::encode(digest)[..32])
    }
}

/// Memoizes compressed prompts in memory and, optionally, on disk.
#[derive(Debug, Default)]
pub struct CompressionCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, CompressedPrompt>>,
}

impl CompressionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            entries: RwLock::default(),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<CompressedPrompt> {
        if let Some(hit) = self.entries.read().expect("cache lock").get(key) {
            return Some(hit.clone());
        }
        let path = self.dir.as_ref()?.join(key.file_name());
        let text = std::fs::read_to_string(path).ok()?;
        let prompt: CompressedPrompt = serde_json::from_str(&text).ok()?;
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.clone(), prompt.clone());
        Some(prompt)
    }

    pub fn insert(&self, key: CacheKey, prompt: CompressedPrompt) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(key.file_name());
            std::fs::write(&path, serde_json::to_string(&prompt)?).map_err(|e| Error::io(&path, e))?;
        }
        self.entries.write().expect("cache lock").insert(key, prompt);
        Ok(())
    }

    pub fn get_or_insert_with(
        &self,
        key: CacheKey,
        make: impl FnOnce() -> Result<CompressedPrompt>,
    ) -> Result<CompressedPrompt> {
        if let Some(hit) = self.get(&key) {
            return Ok(hit);
        }
        let prompt = make()?;
        self.insert(key, prompt.clone())?;
        Ok(prompt)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::tokenizer::WordTokenizer;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        backbone: Backbone,
        head: SelectionHead,
        tok: WordTokenizer,
    }

    fn fixture(max_seq_len: usize) -> Fixture {
        let tok = WordTokenizer::from_pieces(vec![]);
        let backbone = Backbone::init(
            ModelConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                max_seq_len,
                vocab_size: tok.vocab_size(),
                tie_embeddings: true,
            },
            1,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = SelectionHead::init(8, &mut rng);
        head.weight.iter_mut().for_each(|w| *w = rng.random_range(-3.0..3.0));
        Fixture { backbone, head, tok }
    }

    impl Fixture {
        fn sp(&self) -> SelectionP<'_> {
            SelectionP {
                backbone: &self.backbone,
                adapters: None,
                head: &self.head,
                tokenizer: &self.tok,
            }
        }
    }

    fn text_of(n: usize, seed: u64) -> String {
        // byte-level tokenizer: one token per ASCII char
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect()
    }

    #[test]
    fn ratio_one_round_trips() {
        let f = fixture(128);
        let text = "hello, world: keep me";
        let c = f.sp().compress(text, 1.0).unwrap();
        assert_eq!(c.text, text);
        assert_eq!(c.actual_ratio, 1.0);
        let again = f.sp().compress(&c.text, 1.0).unwrap();
        assert_eq!(again.text, c.text);
    }

    #[test]
    fn exact_count_on_thousand_tokens() {
        let f = fixture(1100);
        let c = f.sp().compress(&text_of(1000, 1), 0.1).unwrap();
        assert_eq!(c.source_token_count, 1000);
        assert_eq!(c.kept_token_count, 100);
        assert!(c.is_exact());
        assert_eq!(c.text.len(), 100);
    }

    #[test]
    fn over_length_points_to_chunking() {
        let f = fixture(64);
        match f.sp().compress(&text_of(64, 2), 0.5) {
            Err(Error::Length { hint, .. }) => assert!(hint.contains("chunked")),
            other => panic!("expected length error, got {other:?}"),
        }
    }

    #[test]
    fn kept_text_matches_top_scores_in_order() {
        let f = fixture(128);
        let text = text_of(40, 3);
        let sp = f.sp();
        let c = sp.compress(&text, 0.25).unwrap();
        let scores = sp.score_ids(&f.tok.encode(&text)).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let mut want: Vec<usize> = order[..10].to_vec();
        want.sort();
        assert_eq!(c.kept_indices, want);
        let expect: String = want.iter().map(|&i| text.as_bytes()[i] as char).collect();
        assert_eq!(c.text, expect);
    }

    #[test]
    fn two_chunks_of_2048_keep_205_each() {
        assert_eq!(apportion(&[2048, 2048], 0.1), vec![205, 205]);
        let f = fixture(2049);
        let text = text_of(4096, 4);
        let c = f.sp().chunked_compress(&text, 0.1, 2048).unwrap();
        assert_eq!(c.kept_token_count, 410);
        assert_eq!(c.chunk_boundaries, vec![0, 2048]);
        assert_eq!(c.text.len(), 411);
        assert_eq!(c.text.as_bytes()[205], b' ');
    }

    #[test]
    fn short_input_chunked_equals_compress() {
        let f = fixture(256);
        let text = text_of(100, 5);
        let a = f.sp().compress(&text, 0.3).unwrap();
        let b = f.sp().chunked_compress(&text, 0.3, 200).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunk_locality() {
        let f = fixture(128);
        let base = text_of(120, 6);
        let a = f.sp().chunked_compress(&base, 0.2, 60).unwrap();
        for pos in [61, 80, 119] {
            let mut bytes = base.clone().into_bytes();
            bytes[pos] = if bytes[pos] == b'z' { b'a' } else { b'z' };
            let b = f
                .sp()
                .chunked_compress(std::str::from_utf8(&bytes).unwrap(), 0.2, 60)
                .unwrap();
            let first = |c: &CompressedPrompt| c.kept_indices.iter().filter(|&&i| i < 60).copied().collect::<Vec<_>>();
            assert_eq!(first(&a), first(&b));
        }
    }

    #[test]
    fn apportion_stays_within_one_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let parts: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(1..300)).collect();
            let r = [0.05, 0.1, 0.2, 0.3, 0.5, 1.0][rng.random_range(0..6)];
            let a = apportion(&parts, r);
            let total: usize = parts.iter().sum();
            assert_eq!(a.iter().sum::<usize>(), target_count(total, r));
            for (k, l) in a.iter().zip(&parts) {
                let x = r * *l as f64;
                assert!(*k as f64 >= x.floor() - 1e-9 && *k as f64 <= x.ceil() + 1.0 + 1e-9 && k <= l);
            }
        }
    }

    #[test]
    fn budget_sixteen_to_four_then_tenth() {
        let lengths = vec![100; 16];
        let scores: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let budget = 160;
        let fixed = plan_budget(
            &lengths,
            &scores,
            budget,
            &BudgetConfig {
                mode: BudgetMode::FixedRateAfterFilter,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(fixed.selected_demonstration_ids.len(), 4);
        assert_eq!(fixed.planned_tokens(), 40);
        let overall = fixed.source_tokens as f64 / fixed.planned_tokens() as f64;
        assert!((overall - 40.0).abs() < 1e-9);

        let adjusted = plan_budget(&lengths, &scores, budget, &BudgetConfig::default()).unwrap();
        assert_eq!(adjusted.selected_demonstration_ids, fixed.selected_demonstration_ids);
        assert_eq!(adjusted.planned_tokens(), 160);
        assert!((adjusted.planned_tokens() as f64 - 0.1 * 1600.0).abs() <= 1.0);
        let mut top: Vec<usize> = rank_desc(&scores)[..4].to_vec();
        top.sort();
        assert_eq!(adjusted.selected_demonstration_ids, top);
    }

    #[test]
    fn single_demo_within_budget_stays_whole() {
        let plan = plan_budget(&[37], &[0.4], 50, &BudgetConfig::default()).unwrap();
        assert_eq!(plan.budgets, vec![37]);
        assert_eq!(plan.residual_ratio, 1.0);
    }

    #[test]
    fn budget_errors() {
        assert!(matches!(
            plan_budget(&[], &[], 10, &BudgetConfig::default()),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            plan_budget(&[5], &[0.1], 0, &BudgetConfig::default()),
            Err(Error::Config { .. })
        ));
        let cfg = BudgetConfig {
            filter_multiplier: 100.0,
            ..Default::default()
        };
        assert!(matches!(
            plan_budget(&[5, 5, 5], &[0.1, 0.2, 0.3], 2, &cfg),
            Err(Error::Config { .. })
        ));
        assert!("halfway".parse::<BudgetMode>().is_err());
    }

    #[test]
    fn applying_a_plan_hits_the_budget() {
        let f = fixture(128);
        let demos: Vec<String> = (0..6).map(|i| text_of(30 + i, 10 + i as u64)).collect();
        let sp = f.sp();
        let plan = budget_controller(&sp, &demos, 20, &BudgetConfig::default()).unwrap();
        let c = apply_budget_plan(&sp, &demos, &plan, "\n").unwrap();
        assert_eq!(c.kept_token_count, 20);
        assert!(c.kept_indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let f = fixture(128);
        let c = f.sp().compress("abc def", 0.5).unwrap();
        let key = CacheKey::new("ck", "abc def", 0.5, "selection-p");
        CompressionCache::on_disk(dir.path())
            .unwrap()
            .insert(key.clone(), c.clone())
            .unwrap();
        let fresh = CompressionCache::on_disk(dir.path()).unwrap();
        assert_eq!(fresh.get(&key), Some(c));
        assert_eq!(fresh.get(&CacheKey::new("ck", "abc def", 0.3, "selection-p")), None);
    }

    #[test]
    fn sidecar_lines_up_with_source() {
        let f = fixture(128);
        let c = f.sp().compress("some text here", 0.5).unwrap();
        let s = c.sidecar();
        assert_eq!(s.token_ids.len(), c.source_token_count);
        assert_eq!(s.scores.len(), c.source_token_count);
        assert_eq!(s.mask.iter().map(|&m| m as usize).sum::<usize>(), c.kept_token_count);
    }
}
