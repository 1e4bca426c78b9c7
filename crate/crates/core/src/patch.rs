//! Patch neurons appended to a feed-forward layer.
//!
//! A patch is an extra key column, bias and value row. With `n` patches the
//! patched layer computes `[a a_p] = Act(q·[K K_p] + [b_k b_p])` and
//! `out = [a a_p]·[V; V_p] + b_v`, which equals `FFN(q) + a_p·V_p`.

use sme_autodiff::{Activation, Tape, Tensor, Var};

use crate::error::{Result, SmeError};

/// Patch keys, biases and values. Values are stored factored as
/// `values_raw ⊙ value_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    /// `[d, n]`
    pub keys: Tensor,
    /// `[n]`
    pub bias: Tensor,
    /// `[n, d]`
    pub values_raw: Tensor,
    /// `[n, d]`
    pub value_scale: Tensor,
    /// Id of the edit example each patch was created for.
    pub owners: Vec<u64>,
}

impl PatchSet {
    pub fn empty(d: usize) -> Self {
        Self {
            keys: Tensor::zeros([d, 0]),
            bias: Tensor::zeros([0]),
            values_raw: Tensor::zeros([0, d]),
            value_scale: Tensor::zeros([0, d]),
            owners: Vec::new(),
        }
    }

    pub fn new(
        keys: Tensor,
        bias: Tensor,
        values_raw: Tensor,
        value_scale: Tensor,
        owners: Vec<u64>,
    ) -> Result<Self> {
        let (d, n) = keys.dims2()?;
        let ok = bias.shape() == [n]
            && values_raw.shape() == [n, d]
            && value_scale.shape() == [n, d]
            && owners.len() == n;
        if !ok {
            return Err(SmeError::Shape(format!(
                "inconsistent patch set: keys {:?}, bias {:?}, values {:?}/{:?}, {} owners",
                keys.shape(),
                bias.shape(),
                values_raw.shape(),
                value_scale.shape(),
                owners.len()
            )));
        }
        Ok(Self {
            keys,
            bias,
            values_raw,
            value_scale,
            owners,
        })
    }

    pub fn len(&self) -> usize {
        self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.keys.shape()[0]
    }

    /// Effective value matrix `V_p = values_raw ⊙ value_scale`, `[n, d]`.
    pub fn values(&self) -> Tensor {
        let data = self
            .values_raw
            .data()
            .iter()
            .zip(self.value_scale.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(self.values_raw.shape().to_vec(), data).expect("same shape")
    }

    /// Key column of patch `i`.
    pub fn key(&self, i: usize) -> Vec<f64> {
        let n = self.len();
        (0..self.d_model())
            .map(|r| self.keys.data()[r * n + i])
            .collect()
    }

    /// Pre-activations `q·K_p + b_p` for every row of `queries` (`[r, d]`),
    /// giving `[r, n]`.
    pub fn pre_activations(&self, queries: &Tensor) -> Result<Tensor> {
        let mut p = queries.matmul(&self.keys)?;
        let n = self.len();
        for row in p.data_mut().chunks_mut(n.max(1)) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(p)
    }

    /// Activations `Act(q·K_p + b_p)`, `[r, n]`.
    pub fn activations(&self, queries: &Tensor, act: Activation) -> Result<Tensor> {
        let mut p = self.pre_activations(queries)?;
        p.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        Ok(p)
    }

    /// Patches `start..end`, in order.
    pub fn slice(&self, start: usize, end: usize) -> Result<PatchSet> {
        let len = self.len();
        if start > end || end > len {
            return Err(SmeError::Shape(format!("patches {start}..{end} of {len}")));
        }
        let (d, n) = (self.d_model(), end - start);
        let keys = (0..d)
            .flat_map(|r| self.keys.data()[r * len + start..r * len + end].iter().copied())
            .collect();
        let rows = |t: &Tensor| t.data()[start * d..end * d].to_vec();
        PatchSet::new(
            Tensor::new([d, n], keys)?,
            Tensor::new([n], self.bias.data()[start..end].to_vec())?,
            Tensor::new([n, d], rows(&self.values_raw))?,
            Tensor::new([n, d], rows(&self.value_scale))?,
            self.owners[start..end].to_vec(),
        )
    }

    /// Appends the patches of `other` after the existing ones.
    pub fn append(&mut self, other: &PatchSet) -> Result<()> {
        if other.is_empty() {
            return Ok(());
        }
        let d = self.d_model();
        if other.d_model() != d {
            return Err(SmeError::Shape(format!(
                "appending d={} patches to d={d} set",
                other.d_model()
            )));
        }
        let (n, m) = (self.len(), other.len());
        let mut keys = Vec::with_capacity(d * (n + m));
        for r in 0..d {
            keys.extend_from_slice(&self.keys.data()[r * n..(r + 1) * n]);
            keys.extend_from_slice(&other.keys.data()[r * m..(r + 1) * m]);
        }
        let cat = |a: &Tensor, b: &Tensor| {
            let mut v = a.data().to_vec();
            v.extend_from_slice(b.data());
            v
        };
        *self = PatchSet::new(
            Tensor::new([d, n + m], keys)?,
            Tensor::new([n + m], cat(&self.bias, &other.bias))?,
            Tensor::new([n + m, d], cat(&self.values_raw, &other.values_raw))?,
            Tensor::new([n + m, d], cat(&self.value_scale, &other.value_scale))?,
            self.owners.iter().chain(&other.owners).copied().collect(),
        )?;
        Ok(())
    }
}

/// A patch group recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PatchVars {
    pub keys: Var,
    pub bias: Var,
    /// Effective values `[n, d]`.
    pub values: Var,
}

impl PatchVars {
    /// Records `patches` as constants with precomputed effective values.
    pub fn frozen(tape: &mut Tape, patches: &PatchSet) -> Self {
        Self {
            keys: tape.constant(patches.keys.clone()),
            bias: tape.constant(patches.bias.clone()),
            values: tape.constant(patches.values()),
        }
    }
}

/// Trainable handles of a patch group: the factored value parameters stay
/// separate leaves so both receive gradients.
#[derive(Debug, Clone, Copy)]
pub struct TrainablePatch {
    pub keys: Var,
    pub bias: Var,
    pub values_raw: Var,
    pub value_scale: Var,
    pub vars: PatchVars,
}

impl TrainablePatch {
    pub fn bind(tape: &mut Tape, patches: &PatchSet) -> Result<Self> {
        let keys = tape.param(patches.keys.clone());
        let bias = tape.param(patches.bias.clone());
        let values_raw = tape.param(patches.values_raw.clone());
        let value_scale = tape.param(patches.value_scale.clone());
        let values = tape.mul(values_raw, value_scale)?;
        Ok(Self {
            keys,
            bias,
            values_raw,
            value_scale,
            vars: PatchVars { keys, bias, values },
        })
    }

    /// Gradients in the order keys, bias, values_raw, value_scale.
    pub fn grads(&self, tape: &Tape) -> [Option<Tensor>; 4] {
        [
            tape.grad(self.keys),
            tape.grad(self.bias),
            tape.grad(self.values_raw),
            tape.grad(self.value_scale),
        ]
    }
}

/// Patch pre-activations `q·K_p + b_p` on the tape.
pub fn patch_pre_activation(tape: &mut Tape, q: Var, patch: &PatchVars) -> Result<Var> {
    let p = tape.matmul(q, patch.keys)?;
    Ok(tape.add_row(p, patch.bias)?)
}

/// Additive patch contribution `Act(q·K_p + b_p)·V_p`, `[r, d]`, together
/// with the activations `[r, n]`.
pub fn patch_contribution(
    tape: &mut Tape,
    q: Var,
    patch: &PatchVars,
    act: Activation,
) -> Result<(Var, Var)> {
    let pre = patch_pre_activation(tape, q, patch)?;
    let a = tape.activation(pre, act);
    let out = tape.matmul(a, patch.values)?;
    Ok((out, a))
}
