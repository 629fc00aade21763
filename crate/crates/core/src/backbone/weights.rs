use ndarray::{Array, Array1, Array2, Dimension};
use rand::{Rng, SeedableRng};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Frozen-by-default parameters of the backbone. Matrices are stored
/// input-major (`y = x · W`). The same struct doubles as a gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// Present only when embeddings are untied.
    pub lm_head: Option<Array2<f64>>,
}

/// Shape record used by checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(dist))
}

/// Learned positions start from the fixed sinusoid table, so offsets such
/// as "one position back" are linear in the embedding from step 0.
fn sinusoid(n: usize, d: usize, amplitude: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(t, j)| {
        let angle = t as f64 / 10000f64.powf((j - j % 2) as f64 / d as f64);
        amplitude * if j % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

fn entry<'a, D: Dimension>(prefix: &str, name: &str, a: &'a Array<f64, D>) -> (String, Vec<usize>, &'a [f64]) {
    (
        format!("{prefix}.{name}"),
        a.shape().to_vec(),
        a.as_slice().expect("contiguous"),
    )
}

impl LayerWeights {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        // fan-in scaling; residual writes shrink with depth
        let std = (d as f64).powf(-0.5);
        let depth = (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            wq: normal(rng, d, d, std),
            wk: normal(rng, d, d, std),
            wv: normal(rng, d, d, std),
            wo: normal(rng, d, d, std / depth),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
            w1: normal(rng, d, f, std),
            b1: Array1::zeros(f),
            w2: normal(rng, f, d, (f as f64).powf(-0.5) / depth),
            b2: Array1::zeros(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            ln1_g: Array1::zeros(self.ln1_g.raw_dim()),
            ln1_b: Array1::zeros(self.ln1_b.raw_dim()),
            wq: Array2::zeros(self.wq.raw_dim()),
            wk: Array2::zeros(self.wk.raw_dim()),
            wv: Array2::zeros(self.wv.raw_dim()),
            wo: Array2::zeros(self.wo.raw_dim()),
            ln2_g: Array1::zeros(self.ln2_g.raw_dim()),
            ln2_b: Array1::zeros(self.ln2_b.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            entry(prefix, "ln1_g", &self.ln1_g),
            entry(prefix, "ln1_b", &self.ln1_b),
            entry(prefix, "wq", &self.wq),
            entry(prefix, "wk", &self.wk),
            entry(prefix, "wv", &self.wv),
            entry(prefix, "wo", &self.wo),
            entry(prefix, "ln2_g", &self.ln2_g),
            entry(prefix, "ln2_b", &self.ln2_b),
            entry(prefix, "w1", &self.w1),
            entry(prefix, "b1", &self.b1),
            entry(prefix, "w2", &self.w2),
            entry(prefix, "b2", &self.b2),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.ln1_g.as_slice_mut().unwrap(),
            self.ln1_b.as_slice_mut().unwrap(),
            self.wq.as_slice_mut().unwrap(),
            self.wk.as_slice_mut().unwrap(),
            self.wv.as_slice_mut().unwrap(),
            self.wo.as_slice_mut().unwrap(),
            self.ln2_g.as_slice_mut().unwrap(),
            self.ln2_b.as_slice_mut().unwrap(),
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ]
    }
}

impl BaseWeights {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let scale = (d as f64).powf(-0.5);
        let tok_emb = normal(rng, cfg.vocab_size, d, scale);
        let pos_emb = sinusoid(cfg.max_seq_len, d, scale);
        let layers = (0..cfg.n_layers).map(|_| LayerWeights::init(cfg, rng)).collect();
        let lm_head = (!cfg.tie_embeddings).then(|| normal(rng, d, cfg.vocab_size, scale));
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            lm_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            layers: self.layers.iter().map(LayerWeights::zeros_like).collect(),
            lnf_g: Array1::zeros(self.lnf_g.raw_dim()),
            lnf_b: Array1::zeros(self.lnf_b.raw_dim()),
            lm_head: self.lm_head.as_ref().map(|h| Array2::zeros(h.raw_dim())),
        }
    }

    /// Every tensor with a stable name, in serialization order.
    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = vec![
            (
                "tok_emb".to_string(),
                self.tok_emb.shape().to_vec(),
                self.tok_emb.as_slice().unwrap(),
            ),
            (
                "pos_emb".to_string(),
                self.pos_emb.shape().to_vec(),
                self.pos_emb.as_slice().unwrap(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("layers.{i}")));
        }
        out.push((
            "lnf_g".into(),
            self.lnf_g.shape().to_vec(),
            self.lnf_g.as_slice().unwrap(),
        ));
        out.push((
            "lnf_b".into(),
            self.lnf_b.shape().to_vec(),
            self.lnf_b.as_slice().unwrap(),
        ));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h.shape().to_vec(), h.as_slice().unwrap()));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out.push(self.lnf_g.as_slice_mut().unwrap());
        out.push(self.lnf_b.as_slice_mut().unwrap());
        if let Some(h) = &mut self.lm_head {
            out.push(h.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, s)| s.len()).sum()
    }

    /// Rebuilds weights for `cfg` from named flat tensors.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(TensorInfo, Vec<f64>)]) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut w = Self::init(cfg, &mut rng);
        let expected: Vec<(String, Vec<usize>)> = w.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} base tensors, config expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape), (info, _)) in expected.iter().zip(tensors) {
            if *name != info.name || *shape != info.shape {
                return Err(Error::Data(format!(
                    "tensor mismatch: expected {name} {shape:?}, found {} {:?}",
                    info.name, info.shape
                )));
            }
        }
        for (dst, (_, src)) in w.slices_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(src);
        }
        Ok(w)
    }
}
