//! Low-rank additive adapters on the attention projections.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::weights::TensorInfo;
use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterTarget {
    Q,
    K,
    V,
    O,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 4] = [Self::Q, Self::K, Self::V, Self::O];

    fn slot(self) -> usize {
        match self {
            Self::Q => 0,
            Self::K => 1,
            Self::V => 2,
            Self::O => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Q => "q",
            Self::K => "k",
            Self::V => "v",
            Self::O => "o",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<AdapterTarget>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: AdapterTarget::ALL.to_vec(),
        }
    }
}

/// `W_eff = W + (alpha / rank) · (B · A)ᵀ` with `A: [r × d_in]`, `B: [d_out × r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    /// Per layer, slots indexed q, k, v, o.
    pub layers: Vec<[Option<LoraPair>; 4]>,
}

impl AdapterSet {
    /// `A` is drawn from a small normal, `B` starts at zero so the adapted
    /// model reproduces the base model exactly.
    pub fn init(model: &ModelConfig, config: AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::config("adapter.rank", "must be positive"));
        }
        let d = model.d_model;
        let dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
        let layers = (0..model.n_layers)
            .map(|_| {
                let mut slots: [Option<LoraPair>; 4] = Default::default();
                for t in &config.targets {
                    slots[t.slot()] = Some(LoraPair {
                        a: Array2::from_shape_simple_fn((config.rank, d), || rng.sample(dist)),
                        b: Array2::zeros((d, config.rank)),
                    });
                }
                slots
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn get(&self, layer: usize, target: AdapterTarget) -> Option<&LoraPair> {
        self.layers.get(layer).and_then(|l| l[target.slot()].as_ref())
    }

    pub fn get_mut(&mut self, layer: usize, target: AdapterTarget) -> Option<&mut LoraPair> {
        self.layers.get_mut(layer).and_then(|l| l[target.slot()].as_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|slots| {
                    slots.clone().map(|p| {
                        p.map(|p| LoraPair {
                            a: Array2::zeros(p.a.raw_dim()),
                            b: Array2::zeros(p.b.raw_dim()),
                        })
                    })
                })
                .collect(),
        }
    }

    pub fn named(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, slots) in self.layers.iter().enumerate() {
            for t in AdapterTarget::ALL {
                if let Some(p) = &slots[t.slot()] {
                    out.push((
                        format!("layers.{i}.{}.a", t.name()),
                        p.a.shape().to_vec(),
                        p.a.as_slice().unwrap(),
                    ));
                    out.push((
                        format!("layers.{i}.{}.b", t.name()),
                        p.b.shape().to_vec(),
                        p.b.as_slice().unwrap(),
                    ));
                }
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for slots in &mut self.layers {
            for p in slots.iter_mut().flatten() {
                out.push(p.a.as_slice_mut().unwrap());
                out.push(p.b.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn from_named(model: &ModelConfig, config: AdapterConfig, tensors: &[(TensorInfo, Vec<f64>)]) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut set = Self::init(model, config, &mut rng)?;
        let expected: Vec<(String, Vec<usize>)> = set.named().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != tensors.len()
            || expected
                .iter()
                .zip(tensors)
                .any(|((n, s), (info, _))| *n != info.name || *s != info.shape)
        {
            return Err(Error::Data("adapter tensors do not match adapter config".into()));
        }
        for (dst, (_, src)) in set.slices_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(src);
        }
        Ok(set)
    }
}
