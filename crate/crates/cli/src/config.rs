//! Run configuration: a TOML file mirroring the command-line flags, with
//! flags taking precedence.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sme_core::editors::{Editor, FtConfig};
use sme_core::memory::{MemoryPolicy, DEFAULT_CAPACITY};
use sme_core::model::ParamScope;
use sme_core::patcher::{PatchVariant, PatcherConfig};
use sme_core::pipeline::TaskSetup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    FactCheck,
    KvQa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoLm,
    NoLm2,
    KlPatch,
}

/// Size overrides, config-file only. Unset fields keep the task defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scale {
    pub raw_size: Option<usize>,
    pub test_size: Option<usize>,
    pub d_tr_size: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ffn: Option<usize>,
    pub epochs: Option<usize>,
    pub accuracy_floor: Option<f64>,
    pub random_queries: Option<usize>,
    pub kl_pool: Option<usize>,
    pub patcher_max_steps: Option<usize>,
    pub ft_lr: Option<f64>,
    pub ft_max_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    /// t-patcher, ft-last, ft-all or ft-none, optionally suffixed `+kl` for
    /// fine-tuning.
    pub editor: String,
    pub ablation: Ablation,
    pub folds: usize,
    pub seed: u64,
    /// More than one capacity runs a sweep.
    pub memory_size: Vec<usize>,
    pub memory_policy: MemoryPolicy,
    /// Defaults to the last layer.
    pub patched_layer: Option<usize>,
    pub out: PathBuf,
    pub scale: Scale,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::FactCheck,
            editor: "t-patcher".into(),
            ablation: Ablation::None,
            folds: 5,
            seed: 0,
            memory_size: vec![DEFAULT_CAPACITY],
            memory_policy: MemoryPolicy::Reservoir,
            patched_layer: None,
            out: PathBuf::from("smelab-out"),
            scale: Scale::default(),
        }
    }
}

/// Flag values; `None` leaves the file (or default) value alone.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub task: Option<TaskKind>,
    pub editor: Option<String>,
    pub ablation: Option<Ablation>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub memory_size: Option<Vec<usize>>,
    pub memory_policy: Option<MemoryPolicy>,
    pub patched_layer: Option<usize>,
    pub out: Option<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: Overrides) -> Result<Self> {
        let mut c = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = o.$f { c.$f = v; })* };
        }
        set!(task, editor, ablation, folds, seed, memory_size, memory_policy, out);
        if o.patched_layer.is_some() {
            c.patched_layer = o.patched_layer;
        }
        if c.folds == 0 {
            bail!("folds must be positive");
        }
        if c.memory_size.is_empty() || c.memory_size.contains(&0) {
            bail!("memory sizes must be positive");
        }
        Ok(c)
    }

    /// Data and initial model, everything the gen and train stages fix.
    pub fn setup(&self) -> TaskSetup {
        let mut s = match self.task {
            TaskKind::FactCheck => TaskSetup::fact_check(),
            TaskKind::KvQa => TaskSetup::kv_qa(),
        };
        s.kb_seed = self.seed;
        s.split_seed = self.seed;
        s.model_seed = self.seed;
        s.train.seed = self.seed;
        let sc = &self.scale;
        macro_rules! put {
            ($($src:ident => $($dst:ident).+),*) => { $(if let Some(v) = sc.$src { s.$($dst).+ = v; })* };
        }
        put!(
            raw_size => raw_size,
            test_size => test_size,
            d_tr_size => d_tr_size,
            d_model => model.d_model,
            d_ffn => model.d_ffn,
            epochs => train.epochs,
            accuracy_floor => train.accuracy_floor,
            random_queries => random_queries,
            kl_pool => kl_pool
        );
        s
    }

    /// Stable across stages as long as the data and `f_0` are unchanged.
    pub fn setup_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.setup()).expect("serializable"))
    }

    /// Hash of the whole run; the output directory is left out so reruns
    /// elsewhere hash the same.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("serializable"))
    }

    pub fn editor(&self, setup: &TaskSetup) -> Result<Editor> {
        let (base, kl) = match self.editor.strip_suffix("+kl") {
            Some(b) => (b, true),
            None => (self.editor.as_str(), false),
        };
        if base == "t-patcher" {
            if kl {
                bail!("+kl applies to fine-tuning editors; use --ablation kl-patch");
            }
            let variant = match self.ablation {
                Ablation::None => PatchVariant::Full,
                Ablation::NoLm => PatchVariant::NoLm,
                Ablation::NoLm2 => PatchVariant::NoLm2,
                Ablation::KlPatch => PatchVariant::KlPatch,
            };
            let mut cfg = PatcherConfig {
                variant,
                ..PatcherConfig::for_activation(setup.model.activation)
            };
            if let Some(n) = self.scale.patcher_max_steps {
                cfg.max_steps = n;
            }
            return Ok(Editor::Patcher(cfg));
        }
        let scope = match base {
            "ft-last" => ParamScope::LastLayer,
            "ft-all" => ParamScope::All,
            "ft-none" => ParamScope::Frozen,
            other => bail!("unknown editor {other:?} (t-patcher, ft-last, ft-all, ft-none)"),
        };
        if self.ablation != Ablation::None {
            bail!("--ablation only applies to t-patcher");
        }
        let mut cfg = FtConfig { kl, ..FtConfig::desk() };
        if let Some(lr) = self.scale.ft_lr {
            cfg.lr = lr;
        }
        if let Some(n) = self.scale.ft_max_steps {
            cfg.max_steps = n;
        }
        Ok(Editor::FineTune { scope, cfg })
    }
}
