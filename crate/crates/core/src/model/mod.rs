//! A small pre-norm transformer whose patched feed-forward block exposes its
//! input queries and accepts extra key-value neurons.

mod checkpoint;
mod forward;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sme_autodiff::{Activation, Tensor};

use crate::error::{Result, SmeError};
use crate::patch::PatchSet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use forward::{argmax, ffn_forward, FfnOutput, ForwardOutput, Hook, HookCache, RunVars};
pub use train::{train_initial, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Generation,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Generation => "generation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Width of each feed-forward block, i.e. the number of key-value memories.
    pub d_ffn: usize,
    #[serde(with = "activation_serde")]
    pub activation: Activation,
    pub task: Task,
    /// Ignored for generation.
    pub n_classes: usize,
    pub max_seq_len: usize,
}

mod activation_serde {
    use serde::{Deserialize, Deserializer, Serializer};
    use sme_autodiff::Activation;

    pub fn serialize<S: Serializer>(a: &Activation, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(a.name())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Activation, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for the given task.
    pub fn desk(task: Task) -> Self {
        Self {
            vocab_size: 200,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 128,
            activation: Activation::Relu,
            task,
            n_classes: if task == Task::Classification { 2 } else { 0 },
            max_seq_len: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SmeError::Parameter(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_ffn == 0 {
            return bad("d_ffn must be at least 1");
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("n_layers, vocab_size and max_seq_len must be positive");
        }
        if self.task == Task::Classification && self.n_classes < 2 {
            return bad("classification needs at least two classes");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of scalar parameters in an unpatched model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let block = attn + ffn + 4 * d;
        let head = match self.task {
            Task::Classification => d * self.n_classes + self.n_classes,
            Task::Generation => 0,
        };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * block + 2 * d + head
    }
}

/// Keys, key biases, values and value bias of one feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<T> {
    /// `[d, d_ffn]`
    pub keys: T,
    /// `[d_ffn]`
    pub key_bias: T,
    /// `[d_ffn, d]`
    pub values: T,
    /// `[d]`
    pub value_bias: T,
}

pub type FfnLayer = FfnWeights<Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub attn: AttentionWeights<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub ffn: FfnWeights<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub weight: T,
    pub bias: T,
}

/// Every base parameter of the model. Declaration order here is the
/// checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<BlockWeights<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    /// Classification head; generation ties logits to `tok_emb`.
    pub head: Option<HeadWeights<T>>,
}

/// Location of a parameter: its block (if any) and its name within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamKey {
    pub layer: Option<usize>,
    pub name: &'static str,
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "blocks.{l}.{}", self.name),
            None => f.write_str(self.name),
        }
    }
}

impl<T> ModelWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(ParamKey, &T) -> U) -> ModelWeights<U> {
        let top = |name| ParamKey { layer: None, name };
        ModelWeights {
            tok_emb: f(top("tok_emb"), &self.tok_emb),
            pos_emb: f(top("pos_emb"), &self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(l, b)| {
                    let k = |name| ParamKey {
                        layer: Some(l),
                        name,
                    };
                    BlockWeights {
                        ln1_gain: f(k("ln1_gain"), &b.ln1_gain),
                        ln1_bias: f(k("ln1_bias"), &b.ln1_bias),
                        attn: AttentionWeights {
                            wq: f(k("attn.wq"), &b.attn.wq),
                            bq: f(k("attn.bq"), &b.attn.bq),
                            wk: f(k("attn.wk"), &b.attn.wk),
                            bk: f(k("attn.bk"), &b.attn.bk),
                            wv: f(k("attn.wv"), &b.attn.wv),
                            bv: f(k("attn.bv"), &b.attn.bv),
                            wo: f(k("attn.wo"), &b.attn.wo),
                            bo: f(k("attn.bo"), &b.attn.bo),
                        },
                        ln2_gain: f(k("ln2_gain"), &b.ln2_gain),
                        ln2_bias: f(k("ln2_bias"), &b.ln2_bias),
                        ffn: FfnWeights {
                            keys: f(k("ffn.keys"), &b.ffn.keys),
                            key_bias: f(k("ffn.key_bias"), &b.ffn.key_bias),
                            values: f(k("ffn.values"), &b.ffn.values),
                            value_bias: f(k("ffn.value_bias"), &b.ffn.value_bias),
                        },
                    }
                })
                .collect(),
            lnf_gain: f(top("lnf_gain"), &self.lnf_gain),
            lnf_bias: f(top("lnf_bias"), &self.lnf_bias),
            head: self.head.as_ref().map(|h| HeadWeights {
                weight: f(top("head.weight"), &h.weight),
                bias: f(top("head.bias"), &h.bias),
            }),
        }
    }

    /// References in declaration order.
    pub fn iter(&self) -> Vec<(ParamKey, &T)> {
        let mut out = Vec::new();
        let _ = self.map(&mut |k, _| out.push(k));
        let mut refs: Vec<&T> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            refs.extend([&b.ln1_gain, &b.ln1_bias]);
            let a = &b.attn;
            refs.extend([&a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo]);
            refs.extend([&b.ln2_gain, &b.ln2_bias]);
            let f = &b.ffn;
            refs.extend([&f.keys, &f.key_bias, &f.values, &f.value_bias]);
        }
        refs.extend([&self.lnf_gain, &self.lnf_bias]);
        if let Some(h) = &self.head {
            refs.extend([&h.weight, &h.bias]);
        }
        out.into_iter().zip(refs).collect()
    }

    /// Mutable references in declaration order.
    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut refs: Vec<&mut T> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            refs.push(&mut b.ln1_gain);
            refs.push(&mut b.ln1_bias);
            let a = &mut b.attn;
            refs.extend([
                &mut a.wq, &mut a.bq, &mut a.wk, &mut a.bk, &mut a.wv, &mut a.bv, &mut a.wo,
                &mut a.bo,
            ]);
            refs.push(&mut b.ln2_gain);
            refs.push(&mut b.ln2_bias);
            let f = &mut b.ffn;
            refs.extend([
                &mut f.keys,
                &mut f.key_bias,
                &mut f.values,
                &mut f.value_bias,
            ]);
        }
        refs.push(&mut self.lnf_gain);
        refs.push(&mut self.lnf_bias);
        if let Some(h) = &mut self.head {
            refs.push(&mut h.weight);
            refs.push(&mut h.bias);
        }
        refs
    }
}

/// Which base parameters an optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamScope {
    /// Nothing trainable (the editing setting of patch-based editors).
    Frozen,
    /// Parameters of the final transformer block.
    LastLayer,
    All,
}

impl ParamScope {
    pub fn includes(self, key: ParamKey, n_layers: usize) -> bool {
        match self {
            ParamScope::Frozen => false,
            ParamScope::LastLayer => key.layer == Some(n_layers - 1),
            ParamScope::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    weights: ModelWeights<Tensor>,
    patches: PatchSet,
    patched_layer: usize,
    revision: u64,
}

impl TransformerModel {
    /// Randomly initialized model. Patches go into the last block by default.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |shape: &[usize], std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut rng))
        };
        let lin = 1.0 / (d as f64).sqrt();
        let out_scale = lin / (2.0 * config.n_layers as f64).sqrt();
        let emb_std = 0.3;
        let tok_emb = normal(&[config.vocab_size, d], emb_std);
        let pos_emb = normal(&[config.max_seq_len, d], emb_std);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(BlockWeights {
                ln1_gain: Tensor::ones([d]),
                ln1_bias: Tensor::zeros([d]),
                attn: AttentionWeights {
                    wq: normal(&[d, d], lin),
                    bq: Tensor::zeros([d]),
                    wk: normal(&[d, d], lin),
                    bk: Tensor::zeros([d]),
                    wv: normal(&[d, d], lin),
                    bv: Tensor::zeros([d]),
                    wo: normal(&[d, d], out_scale),
                    bo: Tensor::zeros([d]),
                },
                ln2_gain: Tensor::ones([d]),
                ln2_bias: Tensor::zeros([d]),
                ffn: FfnWeights {
                    keys: normal(&[d, config.d_ffn], lin),
                    key_bias: Tensor::zeros([config.d_ffn]),
                    values: normal(
                        &[config.d_ffn, d],
                        out_scale * (d as f64 / config.d_ffn as f64).sqrt(),
                    ),
                    value_bias: Tensor::zeros([d]),
                },
            });
        }
        let head = match config.task {
            Task::Classification => Some(HeadWeights {
                weight: normal(&[d, config.n_classes], lin),
                bias: Tensor::zeros([config.n_classes]),
            }),
            Task::Generation => None,
        };
        let weights = ModelWeights {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Tensor::ones([d]),
            lnf_bias: Tensor::zeros([d]),
            head,
        };
        Ok(Self {
            patched_layer: config.n_layers - 1,
            patches: PatchSet::empty(d),
            config,
            weights,
            revision: 0,
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        weights: ModelWeights<Tensor>,
        patches: PatchSet,
        patched_layer: usize,
    ) -> Result<Self> {
        config.validate()?;
        if patched_layer >= config.n_layers {
            return Err(SmeError::Parameter(format!(
                "patched layer {patched_layer} outside {} layers",
                config.n_layers
            )));
        }
        Ok(Self {
            config,
            weights,
            patches,
            patched_layer,
            revision: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights<Tensor> {
        &self.weights
    }

    /// Mutable access to base weights. Bumps the revision so cached prefix
    /// states are invalidated.
    pub fn weights_mut(&mut self) -> &mut ModelWeights<Tensor> {
        self.revision += 1;
        &mut self.weights
    }

    /// Counter that changes whenever base weights may have changed.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn patches(&self) -> &PatchSet {
        &self.patches
    }

    pub fn patched_layer(&self) -> usize {
        self.patched_layer
    }

    /// Selects the block whose feed-forward layer receives patches. Only
    /// allowed while the model carries no patches.
    pub fn set_patched_layer(&mut self, layer: usize) -> Result<()> {
        if layer >= self.config.n_layers {
            return Err(SmeError::Parameter(format!(
                "patched layer {layer} outside {} layers",
                self.config.n_layers
            )));
        }
        if !self.patches.is_empty() {
            return Err(SmeError::Contract(
                "cannot move the patch site of a patched model".into(),
            ));
        }
        self.patched_layer = layer;
        self.revision += 1;
        Ok(())
    }

    pub fn patched_ffn(&self) -> &FfnLayer {
        &self.weights.blocks[self.patched_layer].ffn
    }

    /// Appends trained patches to the patched feed-forward layer.
    pub fn append_patches(&mut self, new: &PatchSet) -> Result<()> {
        self.patches.append(new)
    }

    pub fn base_param_count(&self) -> usize {
        self.weights.iter().iter().map(|(_, t)| t.len()).sum()
    }

    /// Base parameters plus `2d + 1` per patch (key column, bias, value row).
    pub fn param_count(&self) -> usize {
        self.base_param_count() + self.patches.len() * (2 * self.config.d_model + 1)
    }

    /// SHA-256 over every base parameter, in declaration order.
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for (key, t) in self.weights.iter() {
            h.update(key.to_string().as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Digest of the parameters in the given block only.
    pub fn layer_digest(&self, layer: usize) -> String {
        let mut h = Sha256::new();
        for (key, t) in self.weights.iter() {
            if key.layer == Some(layer) {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
