//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `header.json`, `tokenizer.json` and
//! up to three tensor files (`base.bin`, `adapters.bin`, `head.bin`). Each
//! tensor file is a little-endian `u64` header length, a JSON list of tensor
//! names and shapes, then the raw `f64` data in that order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{AdapterConfig, AdapterSet, Backbone, BaseWeights, ModelConfig, TensorInfo};
use crate::error::{Error, Result};
use crate::selector::SelectionHead;
use crate::tokenizer::{Tokenizer, TokenizerHandle, WordTokenizer};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub has_head: bool,
    pub tokenizer_name: String,
    pub step: u64,
    /// Free-form training metadata (config, optimizer settings).
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: Backbone,
    pub adapters: Option<AdapterSet>,
    pub head: Option<SelectionHead>,
    pub tokenizer: WordTokenizer,
    pub step: u64,
    pub training: serde_json::Value,
}

type Named<'a> = Vec<(String, Vec<usize>, &'a [f64])>;

pub fn write_tensors(path: &Path, tensors: &Named<'_>) -> Result<()> {
    let infos: Vec<TensorInfo> = tensors
        .iter()
        .map(|(name, shape, _)| TensorInfo {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect();
    let header = serde_json::to_vec(&infos)?;
    let mut buf = Vec::with_capacity(8 + header.len() + 8 * tensors.iter().map(|t| t.2.len()).sum::<usize>());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for (_, _, data) in tensors {
        for x in *data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(TensorInfo, Vec<f64>)>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let corrupt = || Error::Data(format!("{} is truncated or corrupt", path.display()));
    if bytes.len() < 8 {
        return Err(corrupt());
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(corrupt)?;
    let infos: Vec<TensorInfo> = serde_json::from_slice(body)?;
    let mut pos = 8 + hlen;
    let mut out = Vec::with_capacity(infos.len());
    for info in infos {
        let count: usize = info.shape.iter().product();
        let raw = bytes.get(pos..pos + 8 * count).ok_or_else(corrupt)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * count;
        out.push((info, data));
    }
    if pos != bytes.len() {
        return Err(corrupt());
    }
    Ok(out)
}

fn head_named(head: &SelectionHead) -> Named<'_> {
    let s = head.slices();
    vec![
        ("head.weight".into(), vec![head.d_model()], s[0]),
        ("head.bias".into(), vec![1], s[1]),
    ]
}

impl Checkpoint {
    pub fn new(backbone: Backbone, tokenizer: WordTokenizer) -> Self {
        Self {
            backbone,
            adapters: None,
            head: None,
            tokenizer,
            step: 0,
            training: serde_json::Value::Null,
        }
    }

    pub fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model: self.backbone.config.clone(),
            adapter: self.adapters.as_ref().map(|a| a.config.clone()),
            has_head: self.head.is_some(),
            tokenizer_name: self.tokenizer.name().to_string(),
            step: self.step,
            training: self.training.clone(),
        }
    }

    pub fn tokenizer_handle(&self) -> TokenizerHandle {
        self.tokenizer.clone().into_handle()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header_path = dir.join("header.json");
        fs::write(&header_path, serde_json::to_string_pretty(&self.header())?)
            .map_err(|e| Error::io(&header_path, e))?;
        self.tokenizer.save(&dir.join("tokenizer.json"))?;
        write_tensors(&dir.join("base.bin"), &self.backbone.weights.named())?;
        let adapters_path = dir.join("adapters.bin");
        match &self.adapters {
            Some(a) => write_tensors(&adapters_path, &a.named())?,
            None => remove_stale(&adapters_path)?,
        }
        let head_path = dir.join("head.bin");
        match &self.head {
            Some(h) => write_tensors(&head_path, &head_named(h))?,
            None => remove_stale(&head_path)?,
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join("header.json");
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint format {}",
                header.format_version
            )));
        }
        header.model.validate()?;
        let tokenizer = WordTokenizer::load(&dir.join("tokenizer.json"))?;
        if tokenizer.name() != header.tokenizer_name {
            return Err(Error::Data(format!(
                "tokenizer {} does not match header {}",
                tokenizer.name(),
                header.tokenizer_name
            )));
        }
        if tokenizer.vocab_size() != header.model.vocab_size {
            return Err(Error::Data("tokenizer vocabulary does not match model".into()));
        }
        let base = BaseWeights::from_named(&header.model, &read_tensors(&dir.join("base.bin"))?)?;
        let adapters = match &header.adapter {
            Some(cfg) => Some(AdapterSet::from_named(
                &header.model,
                cfg.clone(),
                &read_tensors(&dir.join("adapters.bin"))?,
            )?),
            None => None,
        };
        let head = if header.has_head {
            let t = read_tensors(&dir.join("head.bin"))?;
            match t.as_slice() {
                [(w, wd), (b, bd)]
                    if w.name == "head.weight"
                        && w.shape == [header.model.d_model]
                        && b.name == "head.bias"
                        && bd.len() == 1 =>
                {
                    Some(SelectionHead {
                        weight: Array1::from(wd.clone()),
                        bias: bd[0],
                    })
                }
                _ => return Err(Error::Data("head.bin does not hold a selection head".into())),
            }
        } else {
            None
        };
        Ok(Self {
            backbone: Backbone {
                config: header.model,
                weights: base,
            },
            adapters,
            head,
            tokenizer,
            step: header.step,
            training: header.training,
        })
    }

    /// Content hash over the model config, tokenizer and every tensor value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.backbone.config).unwrap_or_default());
        h.update(self.tokenizer.name().as_bytes());
        let mut feed = |named: Named<'_>| {
            for (name, shape, data) in named {
                h.update(name.as_bytes());
                for s in shape {
                    h.update((s as u64).to_le_bytes());
                }
                for x in data {
                    h.update(x.to_le_bytes());
                }
            }
        };
        feed(self.backbone.weights.named());
        if let Some(a) = &self.adapters {
            feed(a.named());
        }
        if let Some(head) = &self.head {
            feed(head_named(head));
        }
        hex::encode(h.finalize())
    }
}

fn remove_stale(path: &PathBuf) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}
