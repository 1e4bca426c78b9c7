//! Retained last-layer feed-forward queries of irrelevant examples.

use std::borrow::Cow;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sme_autodiff::Tensor;

use crate::error::{Result, SmeError};
use crate::example::{EditExample, Scored};
use crate::model::{Task, TransformerModel};

pub const DEFAULT_CAPACITY: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    /// Memory never changes after it is built.
    Fixed,
    /// Uniform reservoir replacement over every query offered so far.
    Reservoir,
}

impl std::str::FromStr for MemoryPolicy {
    type Err = SmeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "reservoir" => Ok(Self::Reservoir),
            other => Err(SmeError::Parameter(format!("unknown memory policy {other}"))),
        }
    }
}

/// Every query harvested from a pool, with the id and input tokens of its
/// source example.
#[derive(Debug, Clone, PartialEq)]
pub struct Harvest {
    /// `[rows, d]`
    pub queries: Tensor,
    pub sources: Vec<u64>,
    pub inputs: Vec<Arc<[u32]>>,
}

/// Scoring layout used for harvesting: the pooled position for
/// classification, every position of `prompt ++ answer` for generation.
pub fn harvest_layout(model: &TransformerModel, e: &EditExample) -> Scored {
    let s = e.scored();
    match model.config().task {
        Task::Classification => s,
        Task::Generation => Scored {
            rows: (0..s.input.len()).map(|p| (p, 0)).collect(),
            input: s.input,
        },
    }
}

/// Runs the model over `pool` and collects its patched-layer queries.
pub fn harvest(model: &TransformerModel, pool: &[EditExample]) -> Result<Harvest> {
    let d = model.config().d_model;
    let mut data = Vec::new();
    let mut sources = Vec::new();
    let mut inputs = Vec::new();
    for chunk in pool.chunks(64) {
        let layouts: Vec<Scored> = chunk.iter().map(|e| harvest_layout(model, e)).collect();
        let seqs: Vec<Vec<u32>> = layouts.iter().map(|s| s.input.clone()).collect();
        let pos: Vec<Vec<usize>> = layouts.iter().map(Scored::positions).collect();
        let out = model.forward_positions(&seqs, &pos)?;
        data.extend_from_slice(out.queries.data());
        for (e, s) in chunk.iter().zip(&layouts) {
            sources.extend(std::iter::repeat_n(e.id, s.rows.len()));
            let input: Arc<[u32]> = e.tokens.as_slice().into();
            inputs.extend(std::iter::repeat_n(input, s.rows.len()));
        }
    }
    Ok(Harvest {
        queries: Tensor::new([sources.len(), d], data)?,
        sources,
        inputs,
    })
}

/// The memory matrix `M` with its update policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    queries: Tensor,
    sources: Vec<u64>,
    inputs: Vec<Arc<[u32]>>,
    capacity: usize,
    policy: MemoryPolicy,
    /// Queries offered so far, including those harvested at build time.
    seen: u64,
    rng: ChaCha8Rng,
}

impl MemoryBank {
    /// Uniformly subsamples `capacity` rows of a harvest. A harvest smaller
    /// than the capacity is used whole; the second value reports that case.
    pub fn from_harvest(
        h: &Harvest,
        capacity: usize,
        policy: MemoryPolicy,
        seed: u64,
    ) -> Result<(Self, bool)> {
        if capacity == 0 {
            return Err(SmeError::Parameter("memory capacity must be positive".into()));
        }
        let (rows, d) = h.queries.dims2()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let short = rows <= capacity;
        let mut idx: Vec<usize> = if short {
            (0..rows).collect()
        } else {
            sample(&mut rng, rows, capacity).into_vec()
        };
        idx.sort_unstable();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(h.queries.row(i));
        }
        Ok((
            Self {
                queries: Tensor::new([idx.len(), d], data)?,
                sources: idx.iter().map(|&i| h.sources[i]).collect(),
                inputs: idx.iter().map(|&i| h.inputs[i].clone()).collect(),
                capacity,
                policy,
                seen: rows as u64,
                rng,
            },
            short,
        ))
    }

    /// Harvests `pool` and subsamples it to `capacity` rows.
    pub fn build(
        model: &TransformerModel,
        pool: &[EditExample],
        capacity: usize,
        policy: MemoryPolicy,
        seed: u64,
    ) -> Result<(Self, bool)> {
        if capacity == 0 {
            return Err(SmeError::Parameter("memory capacity must be positive".into()));
        }
        Self::from_harvest(&harvest(model, pool)?, capacity, policy, seed)
    }

    /// An empty bank of width `d`.
    pub fn empty(d: usize, capacity: usize, policy: MemoryPolicy, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(SmeError::Parameter("memory capacity must be positive".into()));
        }
        Ok(Self {
            queries: Tensor::zeros([0, d]),
            sources: Vec::new(),
            inputs: Vec::new(),
            capacity,
            policy,
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// `M`, `[d_m, d]`.
    pub fn queries(&self) -> &Tensor {
        &self.queries
    }

    pub fn sources(&self) -> &[u64] {
        &self.sources
    }

    /// Input tokens of each row's source example.
    pub fn inputs(&self) -> &[Arc<[u32]>] {
        &self.inputs
    }

    /// `M` without the rows harvested from an input equal to `input`.
    pub fn queries_excluding(&self, input: &[u32]) -> Cow<'_, Tensor> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| &*self.inputs[i] != input).collect();
        if keep.len() == self.len() {
            return Cow::Borrowed(&self.queries);
        }
        let d = self.queries.shape()[1];
        let mut data = Vec::with_capacity(keep.len() * d);
        for &i in &keep {
            data.extend_from_slice(self.queries.row(i));
        }
        Cow::Owned(Tensor::new([keep.len(), d], data).expect("row-aligned"))
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    /// Offers new query rows (`[r, d]`) from example `source` with input
    /// tokens `input`.
    pub fn update(&mut self, new_queries: &Tensor, source: u64, input: &[u32]) -> Result<()> {
        if self.policy == MemoryPolicy::Fixed || new_queries.is_empty() {
            return Ok(());
        }
        let (r, d) = new_queries.dims2()?;
        let width = self.queries.shape()[1];
        if d != width {
            return Err(SmeError::Shape(format!("query width {d}, memory width {width}")));
        }
        let input: Arc<[u32]> = input.into();
        for i in 0..r {
            self.seen += 1;
            let row = new_queries.row(i);
            if self.len() < self.capacity {
                let mut data = std::mem::replace(&mut self.queries, Tensor::zeros([0, d])).into_data();
                data.extend_from_slice(row);
                self.queries = Tensor::new([self.sources.len() + 1, d], data)?;
                self.sources.push(source);
                self.inputs.push(input.clone());
            } else {
                let j = self.rng.random_range(0..self.seen) as usize;
                if j < self.capacity {
                    self.queries.row_mut(j).copy_from_slice(row);
                    self.sources[j] = source;
                    self.inputs[j] = input.clone();
                }
            }
        }
        Ok(())
    }
}
