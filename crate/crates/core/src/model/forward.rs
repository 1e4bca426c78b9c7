use sme_autodiff::{Activation, Tape, Tensor, Var};

use super::{
    BlockWeights, FfnLayer, FfnWeights, ModelWeights, ParamScope, Task, TransformerModel,
};
use crate::error::{Result, SmeError};
use crate::example::{Prediction, Scored, Target, EOS};
use crate::patch::{patch_contribution, PatchSet, PatchVars};

const MASKED: f64 = -1e9;
const EVAL_CHUNK: usize = 64;

/// Output of a plain feed-forward evaluation.
#[derive(Debug, Clone)]
pub struct FfnOutput {
    pub output: Tensor,
    /// `Act(q·K + b_k)`, `[n, d_ffn]`.
    pub activations: Tensor,
}

/// `FFN(q) = Act(q·K + b_k)·V + b_v` for every row of `q`.
pub fn ffn_forward(layer: &FfnLayer, q: &Tensor, act: Activation) -> Result<FfnOutput> {
    let d = layer.keys.dims2()?.0;
    if q.dims2()?.1 != d {
        return Err(SmeError::Shape(format!(
            "query width {} does not match layer width {d}",
            q.dims2()?.1
        )));
    }
    let mut tape = Tape::new();
    let w = layer_vars(&mut tape, layer);
    let qv = tape.constant(q.clone());
    let (out, a) = ffn_on_tape(&mut tape, &w, qv, act, &[])?;
    Ok(FfnOutput {
        output: tape.value(out).clone(),
        activations: tape.value(a).clone(),
    })
}

fn layer_vars(tape: &mut Tape, layer: &FfnLayer) -> FfnWeights<Var> {
    FfnWeights {
        keys: tape.constant(layer.keys.clone()),
        key_bias: tape.constant(layer.key_bias.clone()),
        values: tape.constant(layer.values.clone()),
        value_bias: tape.constant(layer.value_bias.clone()),
    }
}

/// Feed-forward block on the tape with optional patch groups added in order.
/// Returns the output and the base activations.
pub(crate) fn ffn_on_tape(
    tape: &mut Tape,
    ffn: &FfnWeights<Var>,
    q: Var,
    act: Activation,
    patches: &[PatchVars],
) -> Result<(Var, Var)> {
    let pre = tape.matmul(q, ffn.keys)?;
    let pre = tape.add_row(pre, ffn.key_bias)?;
    let a = tape.activation(pre, act);
    let out = tape.matmul(a, ffn.values)?;
    let mut out = tape.add_row(out, ffn.value_bias)?;
    for p in patches {
        let (extra, _) = patch_contribution(tape, q, p, act)?;
        out = tape.add(out, extra)?;
    }
    Ok((out, a))
}

/// Logits and patched-layer queries for a set of scored positions.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Classification: `[1, n_classes]`. Generation: `[len, vocab]`, row `t`
    /// predicting token `t + 1`.
    pub logits: Tensor,
    /// Inputs of the patched feed-forward layer at the same rows.
    pub queries: Tensor,
}

/// Tape handles for one forward pass restricted to selected rows.
#[derive(Debug, Clone, Copy)]
pub struct RunVars {
    pub logits: Var,
    pub queries: Var,
}

/// Padded batch layout.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

/// Residual stream entering the patched feed-forward block at selected rows.
/// Only available when patches sit in the final block, where everything after
/// the hook is position-wise.
#[derive(Debug, Clone)]
pub struct Hook {
    pub residual: Tensor,
}

impl TransformerModel {
    pub(crate) fn layout(&self, seqs: &[Vec<u32>]) -> Result<Layout> {
        let vocab = self.config.vocab_size;
        for s in seqs {
            if s.is_empty() {
                return Err(SmeError::Parameter("empty token sequence".into()));
            }
            if s.len() > self.config.max_seq_len {
                return Err(SmeError::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_seq_len,
                });
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(SmeError::UnknownToken { token: t, vocab });
            }
        }
        Ok(Layout {
            batch: seqs.len(),
            seq_len: seqs.iter().map(Vec::len).max().unwrap_or(0),
            lengths: seqs.iter().map(Vec::len).collect(),
        })
    }

    /// Records all base weights on `tape`; those inside `scope` are trainable.
    pub fn bind(&self, tape: &mut Tape, scope: ParamScope) -> ModelWeights<Var> {
        let n_layers = self.config.n_layers;
        self.weights
            .map(&mut |k, t| tape.leaf(t.clone(), scope.includes(k, n_layers)))
    }

    fn embed(&self, tape: &mut Tape, w: &ModelWeights<Var>, seqs: &[Vec<u32>], l: &Layout) -> Result<Var> {
        let d = self.config.d_model;
        let mut tok_idx = Vec::with_capacity(l.batch * l.seq_len * d);
        let mut pos_idx = Vec::with_capacity(l.batch * l.seq_len * d);
        for s in seqs {
            for t in 0..l.seq_len {
                // Padding reuses token 0; its rows are masked out of attention
                // and never scored.
                let tok = s.get(t).copied().unwrap_or(0) as usize;
                tok_idx.extend(tok * d..(tok + 1) * d);
                pos_idx.extend(t * d..(t + 1) * d);
            }
        }
        let shape = vec![l.batch * l.seq_len, d];
        let te = tape.gather(w.tok_emb, tok_idx, shape.clone())?;
        let pe = tape.gather(w.pos_emb, pos_idx, shape)?;
        Ok(tape.add(te, pe)?)
    }

    fn mask(&self, tape: &mut Tape, l: &Layout) -> Var {
        let h = self.config.n_heads;
        let t = l.seq_len;
        let causal = self.config.task == Task::Generation;
        let mut m = vec![0.0; l.batch * h * t * t];
        for (b, &len) in l.lengths.iter().enumerate() {
            for head in 0..h {
                let base = (b * h + head) * t * t;
                for i in 0..t {
                    for j in 0..t {
                        if j >= len || (causal && j > i) {
                            m[base + i * t + j] = MASKED;
                        }
                    }
                }
            }
        }
        tape.constant(Tensor::new([l.batch * h, t, t], m).expect("mask shape"))
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = tape.layer_norm(x);
        let n = tape.mul_row(n, gain)?;
        Ok(tape.add_row(n, bias)?)
    }

    /// `x + Attn(LN(x))`.
    fn attention(
        &self,
        tape: &mut Tape,
        blk: &BlockWeights<Var>,
        x: Var,
        l: &Layout,
        mask: Var,
    ) -> Result<Var> {
        let (d, h, dh) = (self.config.d_model, self.config.n_heads, self.config.head_dim());
        let (b, t) = (l.batch, l.seq_len);
        let n = self.norm(tape, x, blk.ln1_gain, blk.ln1_bias)?;
        let proj = |tape: &mut Tape, wt: Var, bias: Var| -> Result<Var> {
            let p = tape.matmul(n, wt)?;
            Ok(tape.add_row(p, bias)?)
        };
        let q = proj(tape, blk.attn.wq, blk.attn.bq)?;
        let k = proj(tape, blk.attn.wk, blk.attn.bk)?;
        let v = proj(tape, blk.attn.wv, blk.attn.bv)?;

        // [b*t, d] -> [b*h, t, dh]
        let mut split = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    let base = (bi * t + ti) * d + hi * dh;
                    split.extend(base..base + dh);
                }
            }
        }
        let heads = vec![b * h, t, dh];
        let qh = tape.gather(q, split.clone(), heads.clone())?;
        let kh = tape.gather(k, split.clone(), heads.clone())?;
        let vh = tape.gather(v, split.clone(), heads)?;

        let scores = tape.batch_matmul(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let probs = tape.softmax(scores);
        let ctx = tape.batch_matmul(probs, vh, false)?;

        // inverse permutation back to [b*t, d]
        let mut merge = vec![0; b * t * d];
        for (src, &dst) in split.iter().enumerate() {
            merge[dst] = src;
        }
        let ctx = tape.gather(ctx, merge, vec![b * t, d])?;
        let out = tape.matmul(ctx, blk.attn.wo)?;
        let out = tape.add_row(out, blk.attn.bo)?;
        Ok(tape.add(x, out)?)
    }

    /// `x + FFN_p(LN(x))`; also returns the query `LN(x)`.
    fn ffn_block(
        &self,
        tape: &mut Tape,
        blk: &BlockWeights<Var>,
        x: Var,
        patches: &[PatchVars],
    ) -> Result<(Var, Var)> {
        let q = self.norm(tape, x, blk.ln2_gain, blk.ln2_bias)?;
        let (f, _) = ffn_on_tape(tape, &blk.ffn, q, self.config.activation, patches)?;
        Ok((tape.add(x, f)?, q))
    }

    fn head(&self, tape: &mut Tape, w: &ModelWeights<Var>, x: Var) -> Result<Var> {
        let n = self.norm(tape, x, w.lnf_gain, w.lnf_bias)?;
        match &w.head {
            Some(h) => {
                let logits = tape.matmul(n, h.weight)?;
                Ok(tape.add_row(logits, h.bias)?)
            }
            None => Ok(tape.matmul_t(n, w.tok_emb)?),
        }
    }

    fn all_patches(&self, tape: &mut Tape, extra: &[PatchVars]) -> Vec<PatchVars> {
        let mut groups = Vec::with_capacity(extra.len() + 1);
        if !self.patches.is_empty() {
            groups.push(PatchVars::frozen(tape, &self.patches));
        }
        groups.extend_from_slice(extra);
        groups
    }

    fn flat_rows(&self, l: &Layout, positions: &[Vec<usize>]) -> Result<Vec<usize>> {
        if positions.len() != l.batch {
            return Err(SmeError::Shape(format!(
                "{} position lists for {} sequences",
                positions.len(),
                l.batch
            )));
        }
        let mut rows = Vec::new();
        for (b, ps) in positions.iter().enumerate() {
            for &p in ps {
                if p >= l.lengths[b] {
                    return Err(SmeError::Parameter(format!(
                        "position {p} beyond sequence length {}",
                        l.lengths[b]
                    )));
                }
                if self.config.task == Task::Classification && p != 0 {
                    return Err(SmeError::Parameter(
                        "classification is scored at the pooled position 0 only".into(),
                    ));
                }
                rows.push(b * l.seq_len + p);
            }
        }
        Ok(rows)
    }

    fn prefix_on_tape(
        &self,
        tape: &mut Tape,
        w: &ModelWeights<Var>,
        seqs: &[Vec<u32>],
        l: &Layout,
        mask: Var,
    ) -> Result<Var> {
        let mut x = self.embed(tape, w, seqs, l)?;
        for layer in 0..self.patched_layer {
            x = self.attention(tape, &w.blocks[layer], x, l, mask)?;
            let (nx, _) = self.ffn_block(tape, &w.blocks[layer], x, &[])?;
            x = nx;
        }
        self.attention(tape, &w.blocks[self.patched_layer], x, l, mask)
    }

    /// Forward pass on `tape` producing logits and patched-layer queries at the
    /// requested positions (one list per sequence). `extra` patch groups are
    /// applied after the model's own patches.
    pub fn run(
        &self,
        tape: &mut Tape,
        w: &ModelWeights<Var>,
        seqs: &[Vec<u32>],
        positions: &[Vec<usize>],
        extra: &[PatchVars],
    ) -> Result<RunVars> {
        let l = self.layout(seqs)?;
        let rows = self.flat_rows(&l, positions)?;
        let mask = self.mask(tape, &l);
        let h = self.prefix_on_tape(tape, w, seqs, &l, mask)?;
        let last = self.config.n_layers - 1;
        if self.patched_layer == last {
            let h = tape.select_rows(h, &rows)?;
            return self.run_from_hook(tape, w, h, extra);
        }
        let groups = self.all_patches(tape, extra);
        let (mut x, q) = self.ffn_block(tape, &w.blocks[self.patched_layer], h, &groups)?;
        for layer in self.patched_layer + 1..self.config.n_layers {
            x = self.attention(tape, &w.blocks[layer], x, &l, mask)?;
            let (nx, _) = self.ffn_block(tape, &w.blocks[layer], x, &[])?;
            x = nx;
        }
        let x = tape.select_rows(x, &rows)?;
        let queries = tape.select_rows(q, &rows)?;
        let logits = self.head(tape, w, x)?;
        Ok(RunVars { logits, queries })
    }

    /// Finishes a forward pass from residual rows entering the last block's
    /// feed-forward layer.
    pub fn run_from_hook(
        &self,
        tape: &mut Tape,
        w: &ModelWeights<Var>,
        hook: Var,
        extra: &[PatchVars],
    ) -> Result<RunVars> {
        if self.patched_layer != self.config.n_layers - 1 {
            return Err(SmeError::Contract(
                "hooks are only defined for patches in the final block".into(),
            ));
        }
        let groups = self.all_patches(tape, extra);
        let (x, queries) = self.ffn_block(tape, &w.blocks[self.patched_layer], hook, &groups)?;
        let logits = self.head(tape, w, x)?;
        Ok(RunVars { logits, queries })
    }

    /// Whether everything after the patched layer's input is position-wise,
    /// so hooks can be cached.
    pub fn supports_hooks(&self) -> bool {
        self.patched_layer == self.config.n_layers - 1
    }

    /// Residual rows entering the final feed-forward layer at the requested
    /// positions.
    pub fn hook(&self, seqs: &[Vec<u32>], positions: &[Vec<usize>]) -> Result<Hook> {
        if !self.supports_hooks() {
            return Err(SmeError::Contract(
                "hooks are only defined for patches in the final block".into(),
            ));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, ParamScope::Frozen);
        let l = self.layout(seqs)?;
        let rows = self.flat_rows(&l, positions)?;
        let mask = self.mask(&mut tape, &l);
        let h = self.prefix_on_tape(&mut tape, &w, seqs, &l, mask)?;
        let h = tape.select_rows(h, &rows)?;
        Ok(Hook {
            residual: tape.value(h).clone(),
        })
    }

    /// Logits and queries for hook rows, optionally with extra patches.
    pub fn forward_from_hook(&self, hook: &Hook, extra: Option<&PatchSet>) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, ParamScope::Frozen);
        let h = tape.constant(hook.residual.clone());
        let groups: Vec<PatchVars> = extra
            .filter(|p| !p.is_empty())
            .map(|p| PatchVars::frozen(&mut tape, p))
            .into_iter()
            .collect();
        let out = self.run_from_hook(&mut tape, &w, h, &groups)?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            queries: tape.value(out.queries).clone(),
        })
    }

    /// Untracked forward over a batch at the requested positions.
    pub fn forward_positions(
        &self,
        seqs: &[Vec<u32>],
        positions: &[Vec<usize>],
    ) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, ParamScope::Frozen);
        let out = self.run(&mut tape, &w, seqs, positions, &[])?;
        Ok(ForwardOutput {
            logits: tape.value(out.logits).clone(),
            queries: tape.value(out.queries).clone(),
        })
    }

    /// Forward pass on one sequence. Classification yields one logit row
    /// (pooled position); generation yields one row per position.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardOutput> {
        let positions = match self.config.task {
            Task::Classification => vec![0],
            Task::Generation => (0..tokens.len()).collect(),
        };
        self.forward_positions(&[tokens.to_vec()], &[positions])
    }

    /// Argmax class, or the greedy continuation of a prompt up to (not
    /// including) EOS, stopping after `max_new` tokens.
    pub fn predict_with_limit(&self, tokens: &[u32], max_new: usize) -> Result<Prediction> {
        match self.config.task {
            Task::Classification => {
                let out = self.forward_positions(&[tokens.to_vec()], &[vec![0]])?;
                Ok(Target::Class(argmax(out.logits.row(0))))
            }
            Task::Generation => {
                let mut seq = tokens.to_vec();
                let mut answer = Vec::new();
                for _ in 0..max_new {
                    if seq.len() >= self.config.max_seq_len {
                        break;
                    }
                    let last = seq.len() - 1;
                    let out = self.forward_positions(&[seq.clone()], &[vec![last]])?;
                    let next = argmax(out.logits.row(0)) as u32;
                    if next == EOS {
                        break;
                    }
                    answer.push(next);
                    seq.push(next);
                }
                Ok(Target::Sequence(answer))
            }
        }
    }

    /// [`Self::predict_with_limit`] with room for the longest answer that
    /// fits in the context.
    pub fn predict(&self, tokens: &[u32]) -> Result<Prediction> {
        let room = self.config.max_seq_len.saturating_sub(tokens.len()) + 1;
        self.predict_with_limit(tokens, room)
    }

    /// Argmax at every scored row of every item, batched.
    pub fn argmax_scored(&self, items: &[Scored]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| s.input.clone()).collect();
            let pos: Vec<Vec<usize>> = chunk.iter().map(Scored::positions).collect();
            let f = self.forward_positions(&seqs, &pos)?;
            let mut r = 0;
            for s in chunk {
                out.push((0..s.rows.len()).map(|i| argmax(f.logits.row(r + i))).collect());
                r += s.rows.len();
            }
        }
        Ok(out)
    }

    /// Teacher-forced exact match of every item. For generation this equals
    /// greedy-decoding exact match: each scored token is produced from the
    /// same prefix greedy decoding would have reached.
    pub fn correct(&self, items: &[Scored]) -> Result<Vec<bool>> {
        Ok(self
            .argmax_scored(items)?
            .iter()
            .zip(items)
            .map(|(pred, s)| pred.iter().zip(&s.rows).all(|(p, r)| *p == r.1))
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Cached hook rows for a fixed set of scored items, so correctness under a
/// frozen base model and a growing patch set costs only the final layer.
///
/// The cache rebuilds itself whenever the model's base weights change, so it
/// is also correct (just not faster) for editors that fine-tune weights.
#[derive(Debug, Clone)]
pub struct HookCache {
    items: Vec<Scored>,
    revision: Option<u64>,
    residual: Option<Tensor>,
}

impl HookCache {
    pub fn new(items: Vec<Scored>) -> Self {
        Self {
            items,
            revision: None,
            residual: None,
        }
    }

    pub fn items(&self) -> &[Scored] {
        &self.items
    }

    fn refresh(&mut self, model: &TransformerModel) -> Result<()> {
        if self.revision == Some(model.revision()) && self.residual.is_some() {
            return Ok(());
        }
        let d = model.config().d_model;
        let mut data = Vec::new();
        for chunk in self.items.chunks(EVAL_CHUNK) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|s| s.input.clone()).collect();
            let pos: Vec<Vec<usize>> = chunk.iter().map(Scored::positions).collect();
            data.extend_from_slice(model.hook(&seqs, &pos)?.residual.data());
        }
        let rows = data.len() / d;
        self.residual = Some(Tensor::new([rows, d], data)?);
        self.revision = Some(model.revision());
        Ok(())
    }

    /// Hook rows of every item, concatenated in item order.
    pub fn hook(&mut self, model: &TransformerModel) -> Result<Hook> {
        self.refresh(model)?;
        Ok(Hook {
            residual: self.residual.clone().expect("refreshed"),
        })
    }

    /// Exact-match correctness of every item under `model`.
    pub fn correct(&mut self, model: &TransformerModel) -> Result<Vec<bool>> {
        if !model.supports_hooks() {
            return model.correct(&self.items);
        }
        self.refresh(model)?;
        let residual = self.residual.as_ref().expect("refreshed");
        let d = model.config().d_model;
        let mut preds = Vec::with_capacity(residual.len() / d);
        const ROWS: usize = 512;
        let total = residual.len() / d;
        let mut start = 0;
        while start < total {
            let end = (start + ROWS).min(total);
            let part = Tensor::new(
                [end - start, d],
                residual.data()[start * d..end * d].to_vec(),
            )?;
            let out = model.forward_from_hook(&Hook { residual: part }, None)?;
            preds.extend((0..end - start).map(|i| argmax(out.logits.row(i))));
            start = end;
        }
        let mut r = 0;
        Ok(self
            .items
            .iter()
            .map(|s| {
                let ok = s.rows.iter().enumerate().all(|(i, row)| preds[r + i] == row.1);
                r += s.rows.len();
                ok
            })
            .collect())
    }
}
