use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sme_autodiff::{Activation, Tape, Tensor};
use sme_core::editors::{EditContext, Editor, FtConfig};
use sme_core::example::{EditExample, Scored, Split, Target, BOS};
use sme_core::memory::{MemoryBank, MemoryPolicy};
use sme_core::model::{ModelConfig, ParamScope, Task, TransformerModel};
use sme_core::patcher::{kl_divergence, PatchVariant, PatcherConfig, PoolHooks};

fn tiny(seed: u64) -> TransformerModel {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 6,
        activation: Activation::Relu,
        task: Task::Classification,
        n_classes: 3,
        max_seq_len: 8,
    };
    TransformerModel::new(cfg, seed).unwrap()
}

struct Fixture {
    model: TransformerModel,
    example: EditExample,
    memory: MemoryBank,
    pool: Vec<EditExample>,
    pool_scored: Vec<Scored>,
    hooks: PoolHooks,
}

fn fixture(seed: u64) -> Fixture {
    let model = tiny(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<EditExample> = (0..30)
        .map(|i| {
            let tokens: Vec<u32> = std::iter::once(BOS).chain((0..4).map(|_| rng.random_range(3..12))).collect();
            EditExample {
                id: i,
                tokens,
                target: Target::Class(rng.random_range(0..3)),
                equivalents: vec![],
                split: Split::Train,
            }
        })
        .collect();
    let (memory, _) = MemoryBank::build(&model, &pool, 100, MemoryPolicy::Reservoir, 0).unwrap();
    let tokens = vec![BOS, 3, 4, 5];
    let Target::Class(c) = model.predict(&tokens).unwrap() else { unreachable!() };
    let example = EditExample {
        id: 1000,
        tokens,
        target: Target::Class((c + 1) % 3),
        equivalents: vec![vec![BOS, 6, 3, 4, 5]],
        split: Split::Edit,
    };
    let hooks = PoolHooks::build(&model, &pool, 20, 0).unwrap();
    let pool_scored = pool.iter().map(EditExample::scored).collect();
    Fixture {
        model,
        example,
        memory,
        pool,
        pool_scored,
        hooks,
    }
}

fn editors(max_steps: usize) -> Vec<Editor> {
    let mut v: Vec<Editor> = [PatchVariant::Full, PatchVariant::NoLm, PatchVariant::NoLm2, PatchVariant::KlPatch]
        .into_iter()
        .map(|variant| {
            Editor::Patcher(PatcherConfig {
                variant,
                max_steps,
                k: 10,
                ..PatcherConfig::for_activation(Activation::Relu)
            })
        })
        .collect();
    for scope in [ParamScope::LastLayer, ParamScope::All] {
        for kl in [false, true] {
            v.push(Editor::FineTune {
                scope,
                cfg: FtConfig {
                    kl,
                    max_steps,
                    kl_batch: 8,
                    ..FtConfig::desk()
                },
            });
        }
    }
    v
}

#[test]
fn zero_steps_leave_every_editor_model_unchanged() {
    let f = fixture(1);
    let probes: Vec<Vec<u32>> = f.pool.iter().map(|e| e.tokens.clone()).chain([f.example.tokens.clone()]).collect();
    let pos: Vec<Vec<usize>> = probes.iter().map(|_| vec![0]).collect();
    let before = f.model.forward_positions(&probes, &pos).unwrap().logits;
    for ed in editors(0) {
        let mut m = f.model.clone();
        let ctx = EditContext {
            memory: &f.memory,
            pool: &f.pool_scored,
            pool_hooks: Some(&f.hooks),
        };
        let out = ed.edit(&mut m, &f.example, &ctx, 0).unwrap();
        assert_eq!((out.steps, out.patches_added), (0, 0), "{}", ed.name());
        assert_eq!(m.forward_positions(&probes, &pos).unwrap().logits, before, "{}", ed.name());
    }
}

#[test]
fn fine_tuning_flips_the_prediction_within_scope() {
    let f = fixture(2);
    for ed in editors(500).into_iter().filter(|e| !e.is_patcher()) {
        let mut m = f.model.clone();
        let ctx = EditContext {
            memory: &f.memory,
            pool: &f.pool_scored,
            pool_hooks: None,
        };
        let out = ed.edit(&mut m, &f.example, &ctx, 3).unwrap();
        assert!(out.converged, "{}", ed.name());
        assert_eq!(m.predict(&f.example.tokens).unwrap(), f.example.target);
        assert_eq!(m.param_count(), f.model.param_count());
        if let Editor::FineTune { scope: ParamScope::LastLayer, .. } = ed {
            assert_eq!(m.layer_digest(0), f.model.layer_digest(0));
        }
    }
}

#[test]
fn patch_variants_assemble_their_documented_loss() {
    let f = fixture(3);
    for ed in editors(300).into_iter().filter(Editor::is_patcher) {
        let Editor::Patcher(cfg) = &ed else { unreachable!() };
        let mut m = f.model.clone();
        let ctx = EditContext {
            memory: &f.memory,
            pool: &f.pool_scored,
            pool_hooks: Some(&f.hooks),
        };
        let out = ed.edit(&mut m, &f.example, &ctx, 4).unwrap();
        let l = &out.losses;
        let want = l.l_e
            + cfg.a * l.l_a
            + match cfg.variant {
                PatchVariant::Full => cfg.m * (l.l_m1 + l.l_m2),
                PatchVariant::NoLm2 => cfg.m * l.l_m1,
                PatchVariant::NoLm => 0.0,
                PatchVariant::KlPatch => cfg.kl_weight * l.l_kl,
            };
        assert!((l.total - want).abs() <= 1e-12 * want.abs().max(1.0), "{}: {l:?}", ed.name());
        assert_eq!(m.base_digest(), f.model.base_digest());
        assert_eq!(m.patches().len(), out.patches_added);
    }
}

#[test]
fn kl_matches_elementwise_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (r, c) = (4, 6);
        let pre = Tensor::from_fn([r, c], |_| rng.random_range(-4.0..4.0));
        let cur = Tensor::from_fn([r, c], |_| rng.random_range(-4.0..4.0));
        let mut tape = Tape::new();
        let cv = tape.constant(cur.clone());
        let kl = kl_divergence(&mut tape, &pre, cv).unwrap();
        let softmax = |row: &[f64]| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let mut want = 0.0;
        for i in 0..r {
            let p = softmax(pre.row(i));
            let q = softmax(cur.row(i));
            want += p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum::<f64>();
        }
        want /= r as f64;
        assert!((tape.value(kl).item().unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn kl_of_identical_distributions_is_zero() {
    let pre = Tensor::from_fn([3, 5], |i| (i as f64 * 0.7).sin());
    let mut tape = Tape::new();
    let cv = tape.constant(pre.clone());
    let kl = kl_divergence(&mut tape, &pre, cv).unwrap();
    assert!(tape.value(kl).item().unwrap().abs() < 1e-15);
}

#[test]
fn kl_fine_tuning_needs_a_pool() {
    let f = fixture(4);
    let ed = Editor::FineTune {
        scope: ParamScope::All,
        cfg: FtConfig { kl: true, ..FtConfig::desk() },
    };
    let ctx = EditContext {
        memory: &f.memory,
        pool: &[],
        pool_hooks: None,
    };
    let mut m = f.model.clone();
    assert!(ed.edit(&mut m, &f.example, &ctx, 0).is_err());
}

#[test]
fn reference_and_desk_fine_tuning_defaults() {
    assert_eq!(FtConfig::default().lr, 1e-5);
    assert_eq!(FtConfig::desk().lr, 1e-3);
}
