//! Reverse-mode gradient tape.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the backward rule. [`Tape::backward`] walks the nodes once in
//! reverse record order and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad`.

use crate::activation::Activation;
use crate::error::{AutodiffError, Result};
use crate::kernels::gemm;
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Act(Var, Activation),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    TopKMeanExp { v: Var, selected: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Gather { x: Var, index: Vec<usize> },
    Concat { a: Var, b: Var, axis: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
///
/// A tape is single-threaded; separate tapes are independent and may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(AutodiffError::Shape(msg))
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` took
    /// part in it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffers mirror value shapes"),
        )
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return shape_err(format!("{what}: {sa:?} vs {sb:?}"));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::from_fn(xv.shape().to_vec(), |i| f(xv.data()[i]));
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        let w = last_dim(xv);
        if rv.ndim() != 1 || rv.len() != w {
            return shape_err(format!(
                "row broadcast of {:?} onto {:?}",
                rv.shape(),
                xv.shape()
            ));
        }
        let r = rv.data();
        let t = Tensor::from_fn(xv.shape().to_vec(), |i| f(xv.data()[i], r[i % w]));
        let rg = self.rg(&[x, row]);
        Ok(self.push(t, op, rg))
    }

    /// `x + b` with `b` broadcast along every leading dimension of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast(x, b, Op::AddRow(x, b), |u, v| u + v)
    }

    /// `x ⊙ g` with `g` broadcast along every leading dimension of `x`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast(x, g, Op::MulRow(x, g), |u, v| u * v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return shape_err(format!(
                "matmul inner dims differ: {:?} x {:?}{}",
                self.value(a).shape(),
                self.value(b).shape(),
                if trans_b { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (batch, m, k, n) = match (sa, sb) {
            ([b1, m, k], [b2, r, c]) if b1 == b2 => {
                let (k2, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                if *k != k2 {
                    return shape_err(format!("batch_matmul inner dims: {sa:?} x {sb:?}"));
                }
                (*b1, *m, *k, n)
            }
            _ => return shape_err(format!("batch_matmul shapes: {sa:?} x {sb:?}")),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new([batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let t = Tensor::from_fn([c, r], |i| {
            let (j, k) = (i / r, i % r);
            xd[k * c + j]
        });
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.map(x, Op::Act(x, kind), |v| kind.apply(v))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = last_dim(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = last_dim(xv);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(w) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LogSoftmax(x), rg)
    }

    /// Normalizes every row of the last dimension to zero mean and unit
    /// variance. Gain and shift are applied separately with
    /// [`Tape::mul_row`] and [`Tape::add_row`].
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let w = last_dim(xv);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / w.max(1));
        for row in out.chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::LayerNorm { x, inv_std }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, c]`). Max-subtraction keeps it finite for large logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return shape_err(format!("{} targets for {n} rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::Index {
                index: bad,
                bound: c,
            });
        }
        if n == 0 {
            return shape_err("cross entropy over zero rows".into());
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let lse = log_sum_exp(row);
            total += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of the `k` largest entries of `exp(v)` over the flattened input.
    /// `k` is clamped to the number of elements; ties go to the lowest index.
    pub fn topk_mean_exp(&mut self, v: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(AutodiffError::Parameter("top-k with k = 0".into()));
        }
        let data = self.value(v).data();
        if data.is_empty() {
            return shape_err("top-k over an empty tensor".into());
        }
        let selected = top_k_indices(data, k);
        let mean = selected.iter().map(|&i| data[i].exp()).sum::<f64>() / selected.len() as f64;
        let rg = self.rg(&[v]);
        Ok(self.push(Tensor::scalar(mean), Op::TopKMeanExp { v, selected }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`. Covers row
    /// selection, embedding lookup, diagonals, and axis permutations.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(AutodiffError::Index {
                index: bad,
                bound: xv.len(),
            });
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Selects whole rows (along the first axis) of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index { index: bad, bound: r });
        }
        let index = rows
            .iter()
            .flat_map(|&i| (i * c)..(i * c + c))
            .collect();
        self.gather(x, index, vec![rows.len(), c])
    }

    /// Concatenates two matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let t = match axis {
            0 if ca == cb => {
                let mut d = ad.to_vec();
                d.extend_from_slice(bd);
                Tensor::new([ra + rb, ca], d)?
            }
            1 if ra == rb => {
                let mut d = Vec::with_capacity(ra * (ca + cb));
                for i in 0..ra {
                    d.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
                    d.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
                }
                Tensor::new([ra, ca + cb], d)?
            }
            _ => {
                return shape_err(format!(
                    "concat axis {axis} of [{ra},{ca}] and [{rb},{cb}]"
                ))
            }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Concat { a, b, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// them. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::Backward(
                "backward already ran on this tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| axpy(ga, g, 1.0));
                self.acc(grads, *b, |gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |gx| axpy(gx, g, *c)),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(grads, *x, |gx| axpy(gx, g, 1.0)),
            Op::Sum(x) => self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::AddRow(x, b) => {
                let w = self.value(*b).len();
                self.acc(grads, *x, |gx| axpy(gx, g, 1.0));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(w) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulRow(x, w) => {
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let n = wv.len();
                self.acc(grads, *x, |gx| {
                    for (j, (x, gi)) in gx.iter_mut().zip(g).enumerate() {
                        *x += gi * wv[j % n];
                    }
                });
                self.acc(grads, *w, |gw| {
                    for (j, (gi, xi)) in g.iter().zip(xv).enumerate() {
                        gw[j % n] += gi * xi;
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2().expect("matrix");
                let n = g.len() / m.max(1);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| gemm(m, n, k, g, false, bv, !*trans_b, ga, 1.0));
                self.acc(grads, *b, |gb| {
                    if *trans_b {
                        gemm(n, m, k, g, true, av, false, gb, 1.0)
                    } else {
                        gemm(k, m, n, av, true, g, false, gb, 1.0)
                    }
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.value(*a).shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (batch * m).max(1);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (sa_len, sb_len, so_len) = (m * k, k * n, m * n);
                self.acc(grads, *a, |ga| {
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * so_len..(i + 1) * so_len],
                            false,
                            &bv[i * sb_len..(i + 1) * sb_len],
                            !*trans_b,
                            &mut ga[i * sa_len..(i + 1) * sa_len],
                            1.0,
                        );
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..batch {
                        let gi = &g[i * so_len..(i + 1) * so_len];
                        let ai = &av[i * sa_len..(i + 1) * sa_len];
                        let gbi = &mut gb[i * sb_len..(i + 1) * sb_len];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, gbi, 1.0);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, gbi, 1.0);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().expect("matrix");
                self.acc(grads, *x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for ((v, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *v += gi * kind.derivative(*xi);
                    }
                });
            }
            Op::Exp(x) => self.acc(grads, *x, |gx| {
                for ((v, gi), yi) in gx.iter_mut().zip(g).zip(out) {
                    *v += gi * yi;
                }
            }),
            Op::Softmax(x) => {
                let w = last_dim(&node.value);
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((v, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *v += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let w = last_dim(&node.value);
                self.acc(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(w).zip(g.chunks(w)).zip(out.chunks(w)) {
                        let total: f64 = gr.iter().sum();
                        for ((v, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *v += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let w = last_dim(&node.value);
                self.acc(grads, *x, |gx| {
                    for (((gxr, gr), yr), is) in gx
                        .chunks_mut(w)
                        .zip(g.chunks(w))
                        .zip(out.chunks(w))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / w as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for ((v, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *v += is * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let s = g[0] / n as f64;
                self.acc(grads, *logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::TopKMeanExp { v, selected } => {
                let vv = self.value(*v).data();
                let s = g[0] / selected.len() as f64;
                self.acc(grads, *v, |gv| {
                    for &i in selected {
                        gv[i] += s * vv[i].exp();
                    }
                });
            }
            Op::Gather { x, index } => self.acc(grads, *x, |gx| {
                for (gi, &src) in g.iter().zip(index) {
                    gx[src] += gi;
                }
            }),
            Op::Concat { a, b, axis } => {
                let (ra, ca) = self.value(*a).dims2().expect("matrix");
                let (_, cb) = self.value(*b).dims2().expect("matrix");
                if *axis == 0 {
                    let split = ra * ca;
                    self.acc(grads, *a, |ga| axpy(ga, &g[..split], 1.0));
                    self.acc(grads, *b, |gb| axpy(gb, &g[split..], 1.0));
                } else {
                    let w = ca + cb;
                    self.acc(grads, *a, |ga| {
                        for (gar, gr) in ga.chunks_mut(ca).zip(g.chunks(w)) {
                            axpy(gar, &gr[..ca], 1.0);
                        }
                    });
                    self.acc(grads, *b, |gb| {
                        for (gbr, gr) in gb.chunks_mut(cb).zip(g.chunks(w)) {
                            axpy(gbr, &gr[ca..], 1.0);
                        }
                    });
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Indices of the `k` largest values (clamped to `values.len()`), ordered by
/// descending value with ties resolved toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .total_cmp(&values[*a])
            .then_with(|| a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.0, 0.25]));
        let out = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(AutodiffError::Shape(_))));
    }

    #[test]
    fn cross_entropy_uniform_two_classes() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[3, 2], &[0.7, 0.7, -1.0, -1.0, 0.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[0, 1, 1]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 3], &[0.0, 100.0, 0.0]));
        let ce = tape.softmax_cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-40);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros([1, 3]));
        assert_eq!(
            tape.softmax_cross_entropy(l, &[3]).unwrap_err(),
            AutodiffError::Index { index: 3, bound: 3 }
        );
    }

    #[test]
    fn topk_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros([4]));
        let s = tape.topk_mean_exp(z, 2).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 1.0);

        let v = tape.constant(t(&[3], &[4f64.ln(), 2f64.ln(), 0.0]));
        let s = tape.topk_mean_exp(v, 2).unwrap();
        assert!((tape.value(s).item().unwrap() - 3.0).abs() < 1e-14);

        assert!(matches!(
            tape.topk_mean_exp(v, 0),
            Err(AutodiffError::Parameter(_))
        ));
    }

    #[test]
    fn topk_clamps_k_and_breaks_ties_low_index() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.5, 0.1], 10), vec![0, 1]);

        let mut tape = Tape::new();
        let v = tape.param(t(&[3], &[1.0, 1.0, 0.0]));
        let s = tape.topk_mean_exp(v, 1).unwrap();
        tape.backward(s).unwrap();
        let g = tape.grad(v).unwrap();
        assert!(g.data()[0] > 0.0);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[2], 0.0);
    }

    #[test]
    fn backward_sum_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let half = tape.scale(sq, 0.5);
        let s = tape.sum(half);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeats() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::Shape(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AutodiffError::Backward(_))));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones([2]));
        let c = tape.constant(Tensor::full([2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_and_gather_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.gather(c, vec![0, 4], vec![2]).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0, 5.0]);
        let rows = tape.select_rows(b, &[1, 1]).unwrap();
        assert_eq!(tape.value(rows).data(), &[5.0, 6.0, 5.0, 6.0]);
    }
}
