//! End-to-end setup of one task: data, splits, the initial model and the
//! shared evaluation state every SME run needs.

use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, Splits, SynthKind, SynthTask};
use crate::editors::Editor;
use crate::error::{Result, SmeError};
use crate::example::{EditExample, Scored, Split};
use crate::memory::{harvest, Harvest};
use crate::model::{train_initial, ModelConfig, Task, TrainConfig, TrainReport, TransformerModel};
use crate::patcher::PoolHooks;
use crate::sme::{run_folds, EvalSets, RunContext, SmeConfig, SmeRun};

/// Test examples get ids from here on, clear of any raw id.
const TEST_ID_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSetup {
    pub kind: SynthKind,
    /// Seed of the knowledge base.
    pub kb_seed: u64,
    pub zipf_exponent: f64,
    pub raw_size: usize,
    /// Held-out examples for TestR, sampled independently of the raw set.
    pub test_size: usize,
    /// train / val / edit.
    pub ratios: [f64; 3],
    pub d_tr_size: usize,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    /// Test examples whose queries feed the Random activation statistic.
    pub random_queries: usize,
    /// Pool examples cached for the KL patch variant.
    pub kl_pool: usize,
}

impl TaskSetup {
    pub fn fact_check() -> Self {
        Self {
            kind: SynthKind::FactCheck,
            kb_seed: 0,
            zipf_exponent: 1.0,
            raw_size: 27_000,
            test_size: 1000,
            ratios: [0.8, 0.1, 0.1],
            d_tr_size: 500,
            split_seed: 0,
            model: ModelConfig::desk(Task::Classification),
            model_seed: 0,
            train: TrainConfig {
                epochs: 40,
                accuracy_floor: 0.9,
                ..TrainConfig::default()
            },
            random_queries: 200,
            kl_pool: 1000,
        }
    }

    pub fn kv_qa() -> Self {
        Self {
            kind: SynthKind::KvQa,
            kb_seed: 0,
            zipf_exponent: 0.8,
            raw_size: 8000,
            test_size: 1000,
            ratios: [0.9, 0.075, 0.025],
            d_tr_size: 500,
            split_seed: 0,
            model: ModelConfig {
                vocab_size: 256,
                ..ModelConfig::desk(Task::Generation)
            },
            model_seed: 0,
            train: TrainConfig {
                epochs: 30,
                // Exact match over whole answers; rare tail facts stay
                // partly unlearned, which is where the edit mistakes come from.
                accuracy_floor: 0.7,
                ..TrainConfig::default()
            },
            random_queries: 100,
            kl_pool: 500,
        }
    }

    pub fn synth(&self) -> SynthTask {
        let t = match self.kind {
            SynthKind::FactCheck => SynthTask::fact_check(self.kb_seed),
            SynthKind::KvQa => SynthTask::kv_qa(self.kb_seed),
        };
        t.with_zipf_exponent(self.zipf_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let want = match self.kind {
            SynthKind::FactCheck => Task::Classification,
            SynthKind::KvQa => Task::Generation,
        };
        if self.model.task != want {
            return Err(SmeError::Parameter(format!(
                "{:?} data needs a {want:?} model",
                self.kind
            )));
        }
        if self.model.vocab_size < self.synth().vocab_size {
            return Err(SmeError::Parameter(format!(
                "model vocabulary {} is smaller than the task's {}",
                self.model.vocab_size,
                self.synth().vocab_size
            )));
        }
        if self.raw_size == 0 || self.test_size == 0 {
            return Err(SmeError::Parameter("dataset sizes must be positive".into()));
        }
        Ok(())
    }

    /// Raw splits plus an independent test set.
    pub fn data(&self) -> Result<(Splits, Vec<EditExample>)> {
        self.validate()?;
        let task = self.synth();
        let raw = task.sample(self.raw_size, 0, 0, Split::Raw);
        let splits = split_dataset(&raw, self.ratios, self.d_tr_size, self.split_seed)?;
        let test = task.sample(self.test_size, 1, TEST_ID_BASE, Split::Test);
        Ok((splits, test))
    }
}

/// Everything shared by the SME runs of one task.
#[derive(Debug, Clone)]
pub struct Lab {
    pub setup: TaskSetup,
    pub splits: Splits,
    pub test: Vec<EditExample>,
    pub f0: TransformerModel,
    pub train_report: Option<TrainReport>,
    pub eval: EvalSets,
    pub pool_scored: Vec<Scored>,
    pub harvest: Harvest,
    pub pool_hooks: Option<PoolHooks>,
}

impl Lab {
    /// Generates the data and trains `f_0` on the train split.
    pub fn build(setup: &TaskSetup) -> Result<Self> {
        let (splits, test) = setup.data()?;
        let mut f0 = TransformerModel::new(setup.model.clone(), setup.model_seed)?;
        let train: Vec<Scored> = splits.train.iter().map(EditExample::scored).collect();
        let report = train_initial(&mut f0, &train, &setup.train)?;
        Self::assemble(setup, splits, test, f0, Some(report))
    }

    /// Uses an already trained `f_0`.
    pub fn with_model(setup: &TaskSetup, f0: TransformerModel) -> Result<Self> {
        if f0.config() != &setup.model {
            return Err(SmeError::Parameter("model config differs from the task setup".into()));
        }
        let (splits, test) = setup.data()?;
        Self::assemble(setup, splits, test, f0, None)
    }

    fn assemble(
        setup: &TaskSetup,
        splits: Splits,
        test: Vec<EditExample>,
        f0: TransformerModel,
        train_report: Option<TrainReport>,
    ) -> Result<Self> {
        let eval = EvalSets::new(&f0, &splits.d_tr, &test, setup.random_queries)?;
        let pool_scored = splits.pool.iter().map(EditExample::scored).collect();
        let harvest = harvest(&f0, &splits.pool)?;
        let pool_hooks = if f0.supports_hooks() {
            Some(PoolHooks::build(&f0, &splits.pool, setup.kl_pool, setup.split_seed)?)
        } else {
            None
        };
        Ok(Self {
            setup: setup.clone(),
            splits,
            test,
            f0,
            train_report,
            eval,
            pool_scored,
            harvest,
            pool_hooks,
        })
    }

    pub fn ctx(&self) -> RunContext<'_> {
        RunContext {
            eval: &self.eval,
            pool: &self.pool_scored,
            pool_hooks: self.pool_hooks.as_ref(),
        }
    }

    /// SME over `n_folds` folds of the edit split.
    pub fn run(&self, editor: &Editor, n_folds: usize, cfg: &SmeConfig) -> Result<Vec<SmeRun>> {
        run_folds(&self.f0, editor, &self.splits.edit, &self.harvest, self.ctx(), n_folds, cfg)
    }
}
