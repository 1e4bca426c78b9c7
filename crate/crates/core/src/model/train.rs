use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sme_autodiff::{Adam, Tape, Tensor};

use super::{ParamScope, TransformerModel};
use crate::error::{Result, SmeError};
use crate::example::Scored;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Exact-match accuracy the trained model must reach on its train split.
    pub accuracy_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 3e-3,
            batch_size: 32,
            seed: 0,
            accuracy_floor: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub steps: usize,
    /// Mean loss over the last epoch (0 when no epoch ran).
    pub final_loss: f64,
    /// Fraction of items whose every scored row is argmax-correct.
    pub accuracy: f64,
    /// Fraction of scored rows that are argmax-correct.
    pub token_accuracy: f64,
    pub reached_floor: bool,
}

/// Fits every base parameter with Adam on cross-entropy over the scored rows.
/// Falling short of the accuracy floor is reported, not an error.
pub fn train_initial(
    model: &mut TransformerModel,
    data: &[Scored],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(SmeError::Parameter("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(SmeError::Parameter("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = 0;
    let mut final_loss = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&Scored> = chunk.iter().map(|&i| &data[i]).collect();
            total += train_step(model, &items, &mut opt)?;
            batches += 1;
            steps += 1;
        }
        final_loss = total / batches as f64;
    }
    let preds = model.argmax_scored(data)?;
    let mut exact = 0;
    let (mut rows, mut rows_ok) = (0, 0);
    for (p, s) in preds.iter().zip(data) {
        let ok = p.iter().zip(&s.rows).filter(|(a, r)| **a == r.1).count();
        rows += s.rows.len();
        rows_ok += ok;
        if ok == s.rows.len() {
            exact += 1;
        }
    }
    let accuracy = exact as f64 / data.len() as f64;
    Ok(TrainReport {
        epochs: cfg.epochs,
        steps,
        final_loss,
        accuracy,
        token_accuracy: rows_ok as f64 / rows.max(1) as f64,
        reached_floor: accuracy >= cfg.accuracy_floor,
    })
}

fn train_step(model: &mut TransformerModel, items: &[&Scored], opt: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let w = model.bind(&mut tape, ParamScope::All);
    let seqs: Vec<Vec<u32>> = items.iter().map(|s| s.input.clone()).collect();
    let pos: Vec<Vec<usize>> = items.iter().map(|s| s.positions()).collect();
    let labels: Vec<usize> = items.iter().flat_map(|s| s.labels()).collect();
    let out = model.run(&mut tape, &w, &seqs, &pos, &[])?;
    let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = w.iter().iter().map(|(_, v)| tape.grad(**v)).collect();
    let mut params = model.weights_mut().iter_mut();
    opt.step(&mut params, &grads);
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Task};

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = TransformerModel::new(ModelConfig::desk(Task::Classification), 3).unwrap();
        let before = m.base_digest();
        let data = vec![Scored {
            input: vec![1, 5, 6],
            rows: vec![(0, 1)],
        }];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_initial(&mut m, &data, &cfg).unwrap();
        assert_eq!(r.steps, 0);
        assert_eq!(m.base_digest(), before);
    }
}
