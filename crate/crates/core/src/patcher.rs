//! The patch editor: one trainable key-value neuron per mistake, appended to
//! the patched feed-forward layer and trained with edit, activation and
//! memory losses while every original parameter stays frozen.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sme_autodiff::{Activation, Adam, Tape, Tensor, Var};

use crate::error::{Result, SmeError};
use crate::example::{EditExample, Scored, Target};
use crate::memory::MemoryBank;
use crate::model::{argmax, Hook, ParamScope, TransformerModel};
use crate::patch::{patch_pre_activation, PatchSet, PatchVars, TrainablePatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchVariant {
    Full,
    /// No memory loss: `l_p = l_e + a·l_a`.
    NoLm,
    /// Memory loss without the margin term: `l_m = l_m1`.
    NoLm2,
    /// Memory loss replaced by KL divergence on a batch of pool examples.
    KlPatch,
}

impl PatchVariant {
    fn uses_lm1(self) -> bool {
        matches!(self, PatchVariant::Full | PatchVariant::NoLm2)
    }

    fn uses_lm2(self) -> bool {
        self == PatchVariant::Full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatcherConfig {
    /// Weight of the activation loss.
    pub a: f64,
    /// Weight of the memory loss.
    pub m: f64,
    /// Top-k of the memory surrogate.
    pub k: usize,
    /// Top-k of the multi-patch activation loss.
    pub k_a: usize,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub batch_repeat: usize,
    pub max_patches_per_edit: usize,
    pub max_steps: usize,
    /// Training stops once the edit is fixed and `l_a` and `l_m1` are below
    /// these thresholds.
    pub la_threshold: f64,
    pub lm1_threshold: f64,
    /// Generation only: apply the edit loss to every answer position
    /// instead of only the mistaken ones.
    pub edit_loss_all_positions: bool,
    pub variant: PatchVariant,
    /// Pool rows per step for the KL variant.
    pub kl_batch: usize,
    pub kl_weight: f64,
}

impl PatcherConfig {
    /// Defaults with the thresholds suited to `act`.
    pub fn for_activation(act: Activation) -> Self {
        let (beta, gamma) = match act {
            Activation::Gelu => (-3.0, 3.0),
            Activation::Relu => (0.0, 0.0),
        };
        Self {
            a: 1.0,
            m: 10.0,
            k: 50,
            k_a: 5,
            beta,
            gamma,
            lr: 0.01,
            batch_repeat: 8,
            max_patches_per_edit: 5,
            max_steps: 2000,
            la_threshold: 0.5,
            lm1_threshold: 1.05,
            edit_loss_all_positions: false,
            variant: PatchVariant::Full,
            kl_batch: 64,
            kl_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.a <= 0.0 || self.m <= 0.0 {
            return Err(SmeError::Parameter("loss weights a and m must be positive".into()));
        }
        if self.k == 0 || self.k_a == 0 || self.batch_repeat == 0 || self.max_patches_per_edit == 0
        {
            return Err(SmeError::Parameter(
                "k, k_a, batch_repeat and max_patches_per_edit must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The mistakes of one example that patches will target.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTargets {
    /// One query per mistake, `[n, d]`.
    pub queries: Tensor,
    /// Desired label at each mistake.
    pub labels: Vec<usize>,
    /// Indices into the example's scored rows.
    pub rows: Vec<usize>,
    /// Sequence positions of the mistakes.
    pub positions: Vec<usize>,
}

impl EditTargets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Teacher-forced mistakes of `model` on `scored`, truncated to the first
/// `max_patches`.
pub fn count_mistakes(
    model: &TransformerModel,
    scored: &Scored,
    max_patches: usize,
) -> Result<EditTargets> {
    let out = model.forward_positions(std::slice::from_ref(&scored.input), &[scored.positions()])?;
    let d = model.config().d_model;
    let mut t = EditTargets {
        queries: Tensor::zeros([0, d]),
        labels: Vec::new(),
        rows: Vec::new(),
        positions: Vec::new(),
    };
    let mut data = Vec::new();
    for (i, &(pos, label)) in scored.rows.iter().enumerate() {
        if t.len() == max_patches {
            break;
        }
        if argmax(out.logits.row(i)) != label {
            data.extend_from_slice(out.queries.row(i));
            t.labels.push(label);
            t.rows.push(i);
            t.positions.push(pos);
        }
    }
    if t.is_empty() {
        return Err(SmeError::Contract(
            "the model already predicts this example correctly".into(),
        ));
    }
    t.queries = Tensor::new([t.len(), d], data)?;
    Ok(t)
}

/// Patches whose keys are `q/‖q‖²`, so each starts with pre-activation 1 on
/// its own query. Values are `U(0,1) ⊙ 5`.
pub fn init_patches(targets: &EditTargets, owner: u64, seed: u64) -> Result<PatchSet> {
    let (n, d) = targets.queries.dims2()?;
    let mut keys = vec![0.0; d * n];
    for i in 0..n {
        let q = targets.queries.row(i);
        let norm2: f64 = q.iter().map(|v| v * v).sum();
        if norm2 == 0.0 {
            return Err(SmeError::DegenerateInput(format!("query {i} is the zero vector")));
        }
        for (r, v) in q.iter().enumerate() {
            keys[r * n + i] = v / norm2;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PatchSet::new(
        Tensor::new([d, n], keys)?,
        Tensor::zeros([n]),
        Tensor::from_fn([n, d], |_| rng.random_range(0.0..1.0)),
        Tensor::full([n, d], 5.0),
        vec![owner; n],
    )
}

/// Pre-activation of each patch on its own query:
/// `A_i = q_e^i·K_p[:, i] + b_p[i]`, shape `[n]`.
pub fn edit_pre_activations(tape: &mut Tape, queries: Var, patch: &PatchVars) -> Result<Var> {
    let full = tape.matmul(queries, patch.keys)?;
    let n = tape.value(full).shape()[0];
    let diag = tape.gather(full, (0..n).map(|i| i * n + i).collect(), vec![n])?;
    Ok(tape.add(diag, patch.bias)?)
}

/// `l_a = S(−A; min(k_a, n))`.
pub fn activation_loss(tape: &mut Tape, a_edit: Var, k_a: usize) -> Result<Var> {
    let neg = tape.scale(a_edit, -1.0);
    Ok(tape.topk_mean_exp(neg, k_a)?)
}

/// Single-patch `l_a = exp(−q_e·k_p − b_p)` for `q [1, d]`, `k [d, 1]`, `b [1]`.
pub fn activation_loss_single(tape: &mut Tape, q: Var, k: Var, b: Var) -> Result<Var> {
    let qk = tape.matmul(q, k)?;
    let qk = tape.reshape(qk, vec![1])?;
    let pre = tape.add(qk, b)?;
    let neg = tape.scale(pre, -1.0);
    let e = tape.exp(neg);
    Ok(tape.sum(e))
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryLoss {
    pub l_m1: Var,
    pub l_m2: Var,
}

/// Multi-patch memory losses over `P = M·K_p + b_p`:
/// `l_m1 = S(flatten(P − β); k)` and `l_m2 = S(flatten(P − A − γ); k)`.
pub fn memory_loss(
    tape: &mut Tape,
    memory: Var,
    patch: &PatchVars,
    a_edit: Var,
    beta: f64,
    gamma: f64,
    k: usize,
) -> Result<MemoryLoss> {
    if tape.value(memory).shape()[0] == 0 {
        return Err(SmeError::Parameter("memory loss needs at least one memory row".into()));
    }
    let p = patch_pre_activation(tape, memory, patch)?;
    let len = tape.value(p).len();
    let m1 = tape.add_scalar(p, -beta);
    let m1 = tape.reshape(m1, vec![len])?;
    let l_m1 = tape.topk_mean_exp(m1, k)?;
    let neg_a = tape.scale(a_edit, -1.0);
    let m2 = tape.add_row(p, neg_a)?;
    let m2 = tape.add_scalar(m2, -gamma);
    let m2 = tape.reshape(m2, vec![len])?;
    let l_m2 = tape.topk_mean_exp(m2, k)?;
    Ok(MemoryLoss { l_m1, l_m2 })
}

/// Single-patch memory losses: `l_m1 = S(M·k_p + b_p − β; k)` and
/// `l_m2 = S((M − q_e)·k_p − γ; k)`.
///
/// The margin term compares memory pre-activations with the edit's, so the
/// bias cancels; this keeps it identical to the multi-patch form.
#[allow(clippy::too_many_arguments)]
pub fn memory_loss_single(
    tape: &mut Tape,
    memory: Var,
    q: Var,
    key: Var,
    bias: Var,
    beta: f64,
    gamma: f64,
    k: usize,
) -> Result<MemoryLoss> {
    let dm = tape.value(memory).shape()[0];
    if dm == 0 {
        return Err(SmeError::Parameter("memory loss needs at least one memory row".into()));
    }
    let mk = tape.matmul(memory, key)?;
    let mk = tape.reshape(mk, vec![dm])?;
    let ones = tape.constant(Tensor::ones([dm, 1]));
    let b = tape.reshape(bias, vec![1, 1])?;
    let b = tape.matmul(ones, b)?;
    let b = tape.reshape(b, vec![dm])?;
    let pre = tape.add(mk, b)?;
    let m1 = tape.add_scalar(pre, -beta);
    let l_m1 = tape.topk_mean_exp(m1, k)?;
    let d = tape.value(q).len();
    let q_row = tape.reshape(q, vec![d])?;
    let neg_q = tape.scale(q_row, -1.0);
    let diff = tape.add_row(memory, neg_q)?;
    let dk = tape.matmul(diff, key)?;
    let dk = tape.reshape(dk, vec![dm])?;
    let m2 = tape.add_scalar(dk, -gamma);
    let l_m2 = tape.topk_mean_exp(m2, k)?;
    Ok(MemoryLoss { l_m1, l_m2 })
}

/// `l_p = l_e + a·l_a + m·(l_m1 + l_m2)`; absent terms contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    l_e: Var,
    l_a: Option<Var>,
    l_m: &[Var],
    a: f64,
    m: f64,
) -> Result<Var> {
    let mut total = l_e;
    if let Some(la) = l_a {
        let w = tape.scale(la, a);
        total = tape.add(total, w)?;
    }
    for &lm in l_m {
        let w = tape.scale(lm, m);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Edit loss: mean cross-entropy over `labels` times the number of targeted
/// positions per example, i.e. the per-example sum averaged over repeats.
pub fn edit_loss(tape: &mut Tape, logits: Var, labels: &[usize], per_example: usize) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    Ok(tape.scale(ce, per_example as f64))
}

/// Mean over rows of `KL(softmax(pre) ‖ softmax(cur))`, with `pre` constant.
pub fn kl_divergence(tape: &mut Tape, pre_logits: &Tensor, cur_logits: Var) -> Result<Var> {
    let (rows, c) = pre_logits.dims2()?;
    let mut log_p = pre_logits.clone();
    for r in 0..rows {
        let row = log_p.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let p = Tensor::from_fn([rows, c], |i| log_p.data()[i].exp());
    let log_q = tape.log_softmax(cur_logits);
    let lp = tape.constant(log_p);
    let diff = tape.sub(lp, log_q)?;
    let pv = tape.constant(p);
    let terms = tape.mul(pv, diff)?;
    let s = tape.sum(terms);
    Ok(tape.scale(s, 1.0 / rows as f64))
}

/// Residual rows of pool examples at the hook, for KL terms of patch
/// variants. Valid while the base weights are frozen.
#[derive(Debug, Clone)]
pub struct PoolHooks {
    pub hook: Hook,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditLosses {
    pub l_e: f64,
    pub l_a: f64,
    pub l_m1: f64,
    pub l_m2: f64,
    pub l_kl: f64,
    pub total: f64,
}

/// Result of one edit.
#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub patches_added: usize,
    pub steps: usize,
    /// Whether the stopping rule was met before `max_steps`.
    pub converged: bool,
    pub losses: EditLosses,
    /// Largest pre-activation of the new patches over memory rows.
    pub max_memory_preactivation: f64,
    /// Queries the new patches were built for, `[n, d]`.
    pub queries: Tensor,
}

struct StepEval {
    correct: bool,
    losses: EditLosses,
    loss: Var,
}

/// Adds patches for the mistakes of `example` and trains them. Original
/// parameters are never touched; the patches are kept even when training
/// hits `max_steps`, unless `max_steps` is 0, in which case nothing is added.
pub fn apply_edit(
    model: &mut TransformerModel,
    example: &EditExample,
    memory: &MemoryBank,
    pool: Option<&PoolHooks>,
    cfg: &PatcherConfig,
    seed: u64,
) -> Result<EditOutcome> {
    cfg.validate()?;
    let scored = example.scored();
    let targets = count_mistakes(model, &scored, cfg.max_patches_per_edit)?;
    if cfg.max_steps == 0 {
        // No training budget: the model is left as it was.
        let d = model.config().d_model;
        return Ok(EditOutcome {
            patches_added: 0,
            steps: 0,
            converged: false,
            losses: EditLosses::default(),
            max_memory_preactivation: f64::NEG_INFINITY,
            queries: Tensor::zeros([0, d]),
        });
    }
    let mut patches = init_patches(&targets, example.id, seed)?;
    let n = targets.len();
    let r = scored.rows.len();

    let (edit_rows, edit_labels): (Vec<usize>, Vec<usize>) =
        if cfg.edit_loss_all_positions || matches!(example.target, Target::Class(_)) {
            (0..r).zip(scored.labels()).unzip()
        } else {
            (targets.rows.clone(), targets.labels.clone())
        };
    let mut rep_rows = Vec::new();
    let mut rep_labels = Vec::new();
    for k in 0..cfg.batch_repeat {
        rep_rows.extend(edit_rows.iter().map(|i| k * r + i));
        rep_labels.extend_from_slice(&edit_labels);
    }
    let all_labels = scored.labels();
    // Rows harvested from this very input are not irrelevant to it.
    let mem_queries = memory.queries_excluding(&example.tokens).into_owned();

    let hook = if model.supports_hooks() {
        let h = model.hook(std::slice::from_ref(&scored.input), &[scored.positions()])?;
        let mut data = Vec::with_capacity(h.residual.len() * cfg.batch_repeat);
        for _ in 0..cfg.batch_repeat {
            data.extend_from_slice(h.residual.data());
        }
        let d = model.config().d_model;
        Some(Tensor::new([r * cfg.batch_repeat, d], data)?)
    } else {
        None
    };
    let rep_seqs = vec![scored.input.clone(); cfg.batch_repeat];
    let rep_pos = vec![scored.positions(); cfg.batch_repeat];

    if cfg.variant == PatchVariant::KlPatch && pool.is_none() {
        return Err(SmeError::Parameter("the KL patch variant needs pool hooks".into()));
    }
    let mut kl_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6c);

    let mut opt = Adam::new(cfg.lr);
    let mut steps = 0;
    let mut converged = false;
    let mut last;
    loop {
        let mut tape = Tape::new();
        let w = model.bind(&mut tape, ParamScope::Frozen);
        let tp = TrainablePatch::bind(&mut tape, &patches)?;
        let out = match &hook {
            Some(h) => {
                let hv = tape.constant(h.clone());
                model.run_from_hook(&mut tape, &w, hv, &[tp.vars])?
            }
            None => model.run(&mut tape, &w, &rep_seqs, &rep_pos, &[tp.vars])?,
        };
        let eval = {
            let logits = tape.value(out.logits);
            let correct = (0..r).all(|i| argmax(logits.row(i)) == all_labels[i]);
            let sel = tape.select_rows(out.logits, &rep_rows)?;
            let l_e = edit_loss(&mut tape, sel, &rep_labels, edit_rows.len())?;
            let qe = tape.constant(targets.queries.clone());
            let a_edit = edit_pre_activations(&mut tape, qe, &tp.vars)?;
            let l_a = activation_loss(&mut tape, a_edit, cfg.k_a)?;
            let mem = tape.constant(mem_queries.clone());
            let lm = if mem_queries.is_empty() {
                None
            } else {
                Some(memory_loss(
                    &mut tape, mem, &tp.vars, a_edit, cfg.beta, cfg.gamma, cfg.k,
                )?)
            };
            let mut lm_terms = Vec::new();
            if let Some(lm) = lm {
                if cfg.variant.uses_lm1() {
                    lm_terms.push(lm.l_m1);
                }
                if cfg.variant.uses_lm2() {
                    lm_terms.push(lm.l_m2);
                }
            } else if cfg.variant.uses_lm1() {
                return Err(SmeError::Parameter("memory bank is empty".into()));
            }
            let mut loss = total_loss(&mut tape, l_e, Some(l_a), &lm_terms, cfg.a, cfg.m)?;
            let mut l_kl = 0.0;
            if cfg.variant == PatchVariant::KlPatch {
                let pool = pool.expect("checked above");
                let rows = pool.hook.residual.shape()[0];
                let take = cfg.kl_batch.min(rows);
                let mut idx = sample(&mut kl_rng, rows, take).into_vec();
                idx.sort_unstable();
                let d = model.config().d_model;
                let mut data = Vec::with_capacity(take * d);
                for &i in &idx {
                    data.extend_from_slice(pool.hook.residual.row(i));
                }
                let batch = Hook {
                    residual: Tensor::new([take, d], data)?,
                };
                let pre = model.forward_from_hook(&batch, None)?.logits;
                let bv = tape.constant(batch.residual);
                let cur = model.run_from_hook(&mut tape, &w, bv, &[tp.vars])?;
                let kl = kl_divergence(&mut tape, &pre, cur.logits)?;
                l_kl = tape.value(kl).item()?;
                let wkl = tape.scale(kl, cfg.kl_weight);
                loss = tape.add(loss, wkl)?;
            }
            let v = |x: Var| tape.value(x).item();
            StepEval {
                correct,
                losses: EditLosses {
                    l_e: v(l_e)?,
                    l_a: v(l_a)?,
                    l_m1: lm.map(|l| v(l.l_m1)).transpose()?.unwrap_or(0.0),
                    l_m2: lm.map(|l| v(l.l_m2)).transpose()?.unwrap_or(0.0),
                    l_kl,
                    total: v(loss)?,
                },
                loss,
            }
        };
        last = eval.losses.clone();
        let locality_ok = !cfg.variant.uses_lm1() || eval.losses.l_m1 < cfg.lm1_threshold;
        if eval.correct && eval.losses.l_a < cfg.la_threshold && locality_ok {
            converged = true;
            break;
        }
        if steps == cfg.max_steps {
            break;
        }
        tape.backward(eval.loss)?;
        let grads = tp.grads(&tape);
        opt.step(
            &mut [
                &mut patches.keys,
                &mut patches.bias,
                &mut patches.values_raw,
                &mut patches.value_scale,
            ],
            &grads,
        );
        steps += 1;
    }

    let max_memory_preactivation = if mem_queries.is_empty() {
        f64::NEG_INFINITY
    } else {
        patches
            .pre_activations(&mem_queries)?
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    model.append_patches(&patches)?;
    Ok(EditOutcome {
        patches_added: n,
        steps,
        converged,
        losses: last,
        max_memory_preactivation,
        queries: targets.queries,
    })
}
