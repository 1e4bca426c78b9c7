//! A uniform editor interface over the patch editor and fine-tuning
//! baselines.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sme_autodiff::{Adam, Tape, Tensor};

use crate::error::{Result, SmeError};
use crate::example::{EditExample, Scored};
use crate::memory::{harvest_layout, MemoryBank};
use crate::model::{ParamScope, TransformerModel};
use crate::patcher::{
    apply_edit, kl_divergence, EditLosses, EditOutcome, PatchVariant, PatcherConfig, PoolHooks,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Adds `kl_weight · KL(pre-edit ‖ current)` on a pool batch each step.
    pub kl: bool,
    pub kl_batch: usize,
    pub kl_weight: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            max_steps: 100,
            kl: false,
            kl_batch: 64,
            kl_weight: 1.0,
        }
    }
}

impl FtConfig {
    /// Desk-scale settings: the small models need a far larger step size
    /// than the default to flip a prediction within the step budget.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            max_steps: 500,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Editor {
    Patcher(PatcherConfig),
    FineTune { scope: ParamScope, cfg: FtConfig },
}

impl Editor {
    pub fn name(&self) -> String {
        match self {
            Editor::Patcher(c) => match c.variant {
                PatchVariant::Full => "t-patcher".into(),
                PatchVariant::NoLm => "t-patcher-no-lm".into(),
                PatchVariant::NoLm2 => "t-patcher-no-lm2".into(),
                PatchVariant::KlPatch => "kl-patch".into(),
            },
            Editor::FineTune { scope, cfg } => {
                let base = match scope {
                    ParamScope::LastLayer => "ft-last",
                    ParamScope::All => "ft-all",
                    ParamScope::Frozen => "ft-none",
                };
                if cfg.kl {
                    format!("{base}+kl")
                } else {
                    base.into()
                }
            }
        }
    }

    /// Whether the editor only adds patches and keeps base weights frozen.
    pub fn is_patcher(&self) -> bool {
        matches!(self, Editor::Patcher(_))
    }

    pub fn needs_pool_hooks(&self) -> bool {
        matches!(self, Editor::Patcher(c) if c.variant == PatchVariant::KlPatch)
    }

    /// `f' = ME(f, x_e, y_e)`: edits `model` in place.
    pub fn edit(
        &self,
        model: &mut TransformerModel,
        example: &EditExample,
        ctx: &EditContext,
        seed: u64,
    ) -> Result<EditOutcome> {
        match self {
            Editor::Patcher(cfg) => apply_edit(model, example, ctx.memory, ctx.pool_hooks, cfg, seed),
            Editor::FineTune { scope, cfg } => ft_edit(model, example, *scope, cfg, ctx.pool, seed),
        }
    }
}

/// Shared resources an editor may draw on.
#[derive(Debug, Clone, Copy)]
pub struct EditContext<'a> {
    pub memory: &'a MemoryBank,
    /// Scored pool examples for fine-tuning KL batches.
    pub pool: &'a [Scored],
    pub pool_hooks: Option<&'a PoolHooks>,
}

impl PoolHooks {
    /// Hook rows of up to `max_examples` pool examples, chosen uniformly.
    pub fn build(
        model: &TransformerModel,
        pool: &[EditExample],
        max_examples: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut idx = if pool.len() > max_examples {
            sample(&mut ChaCha8Rng::seed_from_u64(seed), pool.len(), max_examples).into_vec()
        } else {
            (0..pool.len()).collect()
        };
        idx.sort_unstable();
        let d = model.config().d_model;
        let mut data = Vec::new();
        for chunk in idx.chunks(64) {
            let layouts: Vec<Scored> = chunk.iter().map(|&i| harvest_layout(model, &pool[i])).collect();
            let seqs: Vec<Vec<u32>> = layouts.iter().map(|s| s.input.clone()).collect();
            let pos: Vec<Vec<usize>> = layouts.iter().map(Scored::positions).collect();
            data.extend_from_slice(model.hook(&seqs, &pos)?.residual.data());
        }
        let rows = data.len() / d;
        Ok(Self {
            hook: crate::model::Hook {
                residual: Tensor::new([rows, d], data)?,
            },
        })
    }
}

/// Fine-tunes the parameters in `scope` on the edit example until it is
/// predicted correctly or `max_steps` updates have been made.
pub fn ft_edit(
    model: &mut TransformerModel,
    example: &EditExample,
    scope: ParamScope,
    cfg: &FtConfig,
    pool: &[Scored],
    seed: u64,
) -> Result<EditOutcome> {
    if cfg.kl && pool.is_empty() {
        return Err(SmeError::Parameter("KL fine-tuning needs a non-empty pool".into()));
    }
    let scored = example.scored();
    let seqs = vec![scored.input.clone()];
    let pos = vec![scored.positions()];
    let labels = scored.labels();
    let pre_model = cfg.kl.then(|| model.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(cfg.lr);
    let mut steps = 0;
    let mut converged = false;
    let mut losses;
    loop {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, scope);
        let out = model.run(&mut tape, &w, &seqs, &pos, &[])?;
        let logits = tape.value(out.logits);
        let correct = (0..labels.len()).all(|i| crate::model::argmax(logits.row(i)) == labels[i]);
        let l_e = tape.softmax_cross_entropy(out.logits, &labels)?;
        let mut loss = l_e;
        let mut l_kl = 0.0;
        if let Some(pre) = &pre_model {
            if !correct && steps < cfg.max_steps {
                let batch = kl_batch(pool, cfg.kl_batch, &mut rng);
                let bseqs: Vec<Vec<u32>> = batch.iter().map(|s| s.input.clone()).collect();
                let bpos: Vec<Vec<usize>> = batch.iter().map(|s| s.positions()).collect();
                let pre_logits = pre.forward_positions(&bseqs, &bpos)?.logits;
                let cur = model.run(&mut tape, &w, &bseqs, &bpos, &[])?;
                let kl = kl_divergence(&mut tape, &pre_logits, cur.logits)?;
                l_kl = tape.value(kl).item()?;
                let wkl = tape.scale(kl, cfg.kl_weight);
                loss = tape.add(loss, wkl)?;
            }
        }
        losses = EditLosses {
            l_e: tape.value(l_e).item()?,
            l_kl,
            total: tape.value(loss).item()?,
            ..EditLosses::default()
        };
        if correct {
            converged = true;
            break;
        }
        if steps == cfg.max_steps {
            break;
        }
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = w.iter().iter().map(|(_, v)| tape.grad(**v)).collect();
        opt.step(&mut model.weights_mut().iter_mut(), &grads);
        steps += 1;
    }
    Ok(EditOutcome {
        patches_added: 0,
        steps,
        converged,
        losses,
        max_memory_preactivation: f64::NEG_INFINITY,
        queries: Tensor::zeros([0, model.config().d_model]),
    })
}

fn kl_batch<'a>(pool: &'a [Scored], size: usize, rng: &mut ChaCha8Rng) -> Vec<&'a Scored> {
    let take = size.min(pool.len());
    let mut idx = sample(rng, pool.len(), take).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &pool[i]).collect()
}
