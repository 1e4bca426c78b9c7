//! The sequential editing protocol: stream an edit set through an editor,
//! skipping examples the current model already gets right.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sme_autodiff::{Activation, Tensor};

use crate::editors::{EditContext, Editor};
use crate::error::{Result, SmeError};
use crate::example::{EditExample, Prediction, Scored, Target};
use crate::memory::{harvest, Harvest, MemoryBank, MemoryPolicy, DEFAULT_CAPACITY};
use crate::model::{HookCache, TransformerModel};
use crate::patch::PatchSet;
use crate::patcher::{EditLosses, PoolHooks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmeConfig {
    pub memory_capacity: usize,
    pub memory_policy: MemoryPolicy,
    pub seed: u64,
    /// Re-evaluate ER, TrainR and TestR after every edit.
    pub traces: bool,
}

impl Default for SmeConfig {
    fn default() -> Self {
        Self {
            memory_capacity: DEFAULT_CAPACITY,
            memory_policy: MemoryPolicy::Reservoir,
            seed: 0,
            traces: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Skipped,
    Edited,
}

/// Metrics re-evaluated right after one edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub edits: usize,
    pub successes: usize,
    /// Past edits (including this one) still predicted correctly.
    pub retained: usize,
    pub train_correct: usize,
    pub test_correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Position in the stream.
    pub t: usize,
    pub example_id: u64,
    pub kind: StepKind,
    pub target: Target,
    pub pre_prediction: Prediction,
    pub post_prediction: Option<Prediction>,
    pub patches_added: usize,
    pub steps: usize,
    pub converged: bool,
    pub losses: Option<EditLosses>,
    pub max_memory_preactivation: Option<f64>,
    /// `f_t` on each equivalent input, right after the edit.
    pub equivalents_correct: Vec<bool>,
    pub error: Option<String>,
    pub trace: Option<TracePoint>,
    #[serde(skip)]
    pub wall_ms: f64,
}

/// Queries behind each patch plus a random sample of test queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationData {
    pub activation: Activation,
    pub patches: PatchSet,
    /// Row `i` is the query patch `i` was built for.
    pub patch_queries: Tensor,
    /// Edit ordinal (0-based) that created patch `i`.
    pub patch_edit: Vec<usize>,
    pub random_queries: Tensor,
}

#[derive(Debug, Clone)]
pub struct SmeRun {
    pub editor: String,
    pub fold: usize,
    pub records: Vec<StepRecord>,
    /// Stream examples `f_0` mispredicts.
    pub initial_mistakes: usize,
    /// `f_T` on every edited example, in edit order.
    pub final_edit_predictions: Vec<Prediction>,
    pub d_tr_initial: Vec<bool>,
    pub d_tr_final: Vec<bool>,
    pub test_initial: Vec<bool>,
    pub test_final: Vec<bool>,
    pub initial_params: usize,
    pub final_params: usize,
    pub d_model: usize,
    pub activation: Option<ActivationData>,
    pub final_model: TransformerModel,
}

impl SmeRun {
    pub fn edits(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.kind == StepKind::Edited)
    }

    pub fn total_patches(&self) -> usize {
        self.edits().map(|r| r.patches_added).sum()
    }
}

/// Evaluation sets with `f_0`'s correctness, shared by every fold.
#[derive(Debug, Clone)]
pub struct EvalSets {
    d_tr: HookCache,
    test: HookCache,
    d_tr_initial: Vec<bool>,
    test_initial: Vec<bool>,
    random_queries: Tensor,
}

impl EvalSets {
    /// `random` test examples (the first ones) supply the queries for the
    /// Random activation statistic.
    pub fn new(
        f0: &TransformerModel,
        d_tr: &[EditExample],
        test: &[EditExample],
        random: usize,
    ) -> Result<Self> {
        let mut d_tr = HookCache::new(d_tr.iter().map(EditExample::scored).collect());
        let mut test_cache = HookCache::new(test.iter().map(EditExample::scored).collect());
        let d_tr_initial = d_tr.correct(f0)?;
        let test_initial = test_cache.correct(f0)?;
        let sample: Vec<EditExample> = test.iter().take(random).cloned().collect();
        let random_queries = scored_queries(f0, &sample)?;
        Ok(Self {
            d_tr,
            test: test_cache,
            d_tr_initial,
            test_initial,
            random_queries,
        })
    }

    pub fn d_tr_initial(&self) -> &[bool] {
        &self.d_tr_initial
    }

    pub fn test_initial(&self) -> &[bool] {
        &self.test_initial
    }
}

/// Patched-layer queries at the scored positions of each example.
fn scored_queries(model: &TransformerModel, examples: &[EditExample]) -> Result<Tensor> {
    let d = model.config().d_model;
    let mut data = Vec::new();
    for chunk in examples.chunks(64) {
        let sc: Vec<Scored> = chunk.iter().map(EditExample::scored).collect();
        let seqs: Vec<Vec<u32>> = sc.iter().map(|s| s.input.clone()).collect();
        let pos: Vec<Vec<usize>> = sc.iter().map(Scored::positions).collect();
        data.extend_from_slice(model.forward_positions(&seqs, &pos)?.queries.data());
    }
    Ok(Tensor::new([data.len() / d, d], data)?)
}

/// Resources shared by every run against the same `f_0`.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub eval: &'a EvalSets,
    /// Scored pool examples for fine-tuning KL batches.
    pub pool: &'a [Scored],
    pub pool_hooks: Option<&'a PoolHooks>,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x ^= x >> 31;
    x.wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Runs one SME stream from `f0`:
/// `f_t = f_{t-1}` if `f_{t-1}(x_t) = y_t`, else `ME(f_{t-1}, x_t, y_t)`.
pub fn run_sme(
    f0: &TransformerModel,
    editor: &Editor,
    stream: &[EditExample],
    mut memory: MemoryBank,
    ctx: RunContext,
    cfg: &SmeConfig,
    fold: usize,
) -> Result<SmeRun> {
    let mut model = f0.clone();
    let mut d_tr = ctx.eval.d_tr.clone();
    let mut test = ctx.eval.test.clone();
    let stream_scored: Vec<Scored> = stream.iter().map(EditExample::scored).collect();
    let initial_mistakes = f0.correct(&stream_scored)?.iter().filter(|&&c| !c).count();

    let d = f0.config().d_model;
    let mut records = Vec::with_capacity(stream.len());
    let mut edited: Vec<Scored> = Vec::new();
    let mut edited_ids = Vec::new();
    let mut successes = 0;
    let mut patch_rows: Vec<f64> = Vec::new();
    let mut patch_edit = Vec::new();

    for (t, e) in stream.iter().enumerate() {
        let pre = model.predict(&e.tokens)?;
        let mut rec = StepRecord {
            t,
            example_id: e.id,
            kind: StepKind::Skipped,
            target: e.target.clone(),
            pre_prediction: pre.clone(),
            post_prediction: None,
            patches_added: 0,
            steps: 0,
            converged: false,
            losses: None,
            max_memory_preactivation: None,
            equivalents_correct: Vec::new(),
            error: None,
            trace: None,
            wall_ms: 0.0,
        };
        if pre != e.target {
            rec.kind = StepKind::Edited;
            let start = Instant::now();
            let ectx = EditContext {
                memory: &memory,
                pool: ctx.pool,
                pool_hooks: ctx.pool_hooks,
            };
            match editor.edit(&mut model, e, &ectx, mix(cfg.seed, fold as u64, e.id)) {
                Ok(out) => {
                    rec.patches_added = out.patches_added;
                    rec.steps = out.steps;
                    rec.converged = out.converged;
                    rec.losses = Some(out.losses);
                    if out.max_memory_preactivation.is_finite() {
                        rec.max_memory_preactivation = Some(out.max_memory_preactivation);
                    }
                    patch_rows.extend_from_slice(out.queries.data());
                    patch_edit.extend(std::iter::repeat_n(edited.len(), out.patches_added));
                }
                Err(err) => rec.error = Some(err.to_string()),
            }
            rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            let post = model.predict(&e.tokens)?;
            if post == e.target {
                successes += 1;
            }
            rec.post_prediction = Some(post);
            rec.equivalents_correct = model.correct(&e.scored_equivalents())?;
            edited.push(e.scored());
            edited_ids.push(e.id);
            if cfg.traces {
                let count = |v: Vec<bool>| v.into_iter().filter(|&c| c).count();
                rec.trace = Some(TracePoint {
                    edits: edited.len(),
                    successes,
                    retained: count(model.correct(&edited)?),
                    train_correct: count(d_tr.correct(&model)?),
                    test_correct: count(test.correct(&model)?),
                });
            }
        }
        let h = harvest(&model, std::slice::from_ref(e))?;
        memory.update(&h.queries, e.id, &e.tokens)?;
        records.push(rec);
    }

    let final_edit_predictions = records
        .iter()
        .filter(|r| r.kind == StepKind::Edited)
        .map(|r| {
            let e = &stream[r.t];
            model.predict(&e.tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let activation = if editor.is_patcher() {
        let rows = patch_edit.len();
        Some(ActivationData {
            activation: model.config().activation,
            patches: model.patches().clone(),
            patch_queries: Tensor::new([rows, d], patch_rows)?,
            patch_edit,
            random_queries: ctx.eval.random_queries.clone(),
        })
    } else {
        None
    };
    Ok(SmeRun {
        editor: editor.name(),
        fold,
        records,
        initial_mistakes,
        final_edit_predictions,
        d_tr_initial: ctx.eval.d_tr_initial.clone(),
        d_tr_final: d_tr.correct(&model)?,
        test_initial: ctx.eval.test_initial.clone(),
        test_final: test.correct(&model)?,
        initial_params: f0.param_count(),
        final_params: model.param_count(),
        d_model: d,
        activation,
        final_model: model,
    })
}

/// Seeded partition of `edit_set` into `n_folds` streams of near-equal size;
/// each stream is in shuffled order.
pub fn make_folds(edit_set: &[EditExample], n_folds: usize, seed: u64) -> Result<Vec<Vec<EditExample>>> {
    if n_folds == 0 {
        return Err(SmeError::Parameter("n_folds must be at least 1".into()));
    }
    if edit_set.len() < n_folds {
        return Err(SmeError::Parameter(format!(
            "{} edit examples cannot fill {n_folds} folds",
            edit_set.len()
        )));
    }
    let mut idx: Vec<usize> = (0..edit_set.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = edit_set.len() / n_folds;
    let extra = edit_set.len() % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut start = 0;
    for f in 0..n_folds {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].iter().map(|&i| edit_set[i].clone()).collect());
        start += len;
    }
    Ok(folds)
}

/// Independent SME runs over seeded folds of the edit set, all starting from
/// `f0`. Each fold draws its own memory from the shared pool harvest.
pub fn run_folds(
    f0: &TransformerModel,
    editor: &Editor,
    edit_set: &[EditExample],
    pool_harvest: &Harvest,
    ctx: RunContext,
    n_folds: usize,
    cfg: &SmeConfig,
) -> Result<Vec<SmeRun>> {
    run_folds_each(f0, editor, edit_set, pool_harvest, ctx, n_folds, cfg)?
        .into_iter()
        .collect()
}

/// Like [`run_folds`], but a failing fold does not discard the others.
pub fn run_folds_each(
    f0: &TransformerModel,
    editor: &Editor,
    edit_set: &[EditExample],
    pool_harvest: &Harvest,
    ctx: RunContext,
    n_folds: usize,
    cfg: &SmeConfig,
) -> Result<Vec<Result<SmeRun>>> {
    let folds = make_folds(edit_set, n_folds, cfg.seed)?;
    Ok(folds
        .par_iter()
        .enumerate()
        .map(|(i, stream)| {
            let (memory, _) = MemoryBank::from_harvest(
                pool_harvest,
                cfg.memory_capacity,
                cfg.memory_policy,
                mix(cfg.seed, i as u64, 0x6d656d),
            )?;
            run_sme(f0, editor, stream, memory, ctx, cfg, i)
        })
        .collect())
}

/// A skip/edit decision that disagrees with the recorded pre-edit prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayMismatch {
    pub t: usize,
    pub example_id: u64,
    pub recorded: Option<StepKind>,
    pub derived: StepKind,
}

/// Re-derives every decision from the stream and the recorded pre-edit
/// predictions: an example is edited iff its prediction misses the target.
pub fn replay_decisions(stream: &[EditExample], records: &[StepRecord]) -> Vec<ReplayMismatch> {
    let mut out = Vec::new();
    for (t, e) in stream.iter().enumerate() {
        let rec = records.get(t).filter(|r| r.t == t && r.example_id == e.id);
        let derived = match rec {
            Some(r) if r.pre_prediction == e.target => StepKind::Skipped,
            _ => StepKind::Edited,
        };
        if rec.map(|r| r.kind) != Some(derived) {
            out.push(ReplayMismatch {
                t,
                example_id: e.id,
                recorded: rec.map(|r| r.kind),
                derived,
            });
        }
    }
    out
}

/// Replays a patch-editor run: `f_{t-1}` is rebuilt as `f_0` plus the
/// patches logged before step `t`, its prediction on `x_t` is recomputed, and
/// the skip/edit decision re-derived. Any step whose recorded prediction or
/// decision differs is reported.
pub fn replay_patch_run(f0: &TransformerModel, stream: &[EditExample], run: &SmeRun) -> Result<Vec<ReplayMismatch>> {
    let patches = run.final_model.patches();
    let base = f0.patches().len();
    let mut out = Vec::new();
    let mut applied = 0;
    for (t, e) in stream.iter().enumerate() {
        let mut model = f0.clone();
        model.append_patches(&patches.slice(base, base + applied)?)?;
        let pre = model.predict(&e.tokens)?;
        let derived = if pre == e.target { StepKind::Skipped } else { StepKind::Edited };
        let rec = run.records.get(t).filter(|r| r.t == t && r.example_id == e.id);
        match rec {
            Some(r) if r.kind == derived && r.pre_prediction == pre => {
                applied += r.patches_added;
            }
            _ => {
                out.push(ReplayMismatch {
                    t,
                    example_id: e.id,
                    recorded: rec.map(|r| r.kind),
                    derived,
                });
                applied += rec.map_or(0, |r| r.patches_added);
            }
        }
    }
    Ok(out)
}

/// Configuration, seeds and data hashes of a run, written next to its
/// results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub editor: Editor,
    pub sme: SmeConfig,
    pub n_folds: usize,
    pub model_digest: String,
    pub datasets: Vec<(String, String)>,
}
