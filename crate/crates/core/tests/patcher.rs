use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sme_autodiff::{Activation, Tape, Tensor};
use sme_core::example::{EditExample, Split, Target, BOS};
use sme_core::memory::{MemoryBank, MemoryPolicy};
use sme_core::model::{ffn_forward, FfnLayer, ModelConfig, ParamScope, Task, TransformerModel};
use sme_core::patch::{PatchSet, TrainablePatch};
use sme_core::patcher::{
    activation_loss, activation_loss_single, apply_edit, count_mistakes, edit_loss,
    edit_pre_activations, init_patches, memory_loss, memory_loss_single, total_loss, PatchVariant,
    PatcherConfig,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

fn tiny(act: Activation, seed: u64) -> TransformerModel {
    let cfg = ModelConfig {
        vocab_size: 12,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ffn: 6,
        activation: act,
        task: Task::Classification,
        n_classes: 3,
        max_seq_len: 8,
    };
    TransformerModel::new(cfg, seed).unwrap()
}

struct Case {
    model: TransformerModel,
    hook: Tensor,
    labels: Vec<usize>,
    queries: Tensor,
    memory: Tensor,
    k: usize,
}

/// Patch loss of `case` at the given patch parameters, with gradients when
/// asked.
fn patch_loss(case: &Case, p: &PatchSet, grads: bool) -> (f64, Option<[Tensor; 4]>) {
    let mut tape = Tape::new();
    let w = case.model.bind(&mut tape, ParamScope::Frozen);
    let tp = TrainablePatch::bind(&mut tape, p).unwrap();
    let h = tape.constant(case.hook.clone());
    let out = case.model.run_from_hook(&mut tape, &w, h, &[tp.vars]).unwrap();
    let l_e = edit_loss(&mut tape, out.logits, &case.labels, case.labels.len()).unwrap();
    let qe = tape.constant(case.queries.clone());
    let a = edit_pre_activations(&mut tape, qe, &tp.vars).unwrap();
    let l_a = activation_loss(&mut tape, a, 2).unwrap();
    let mem = tape.constant(case.memory.clone());
    let lm = memory_loss(&mut tape, mem, &tp.vars, a, -3.0, 3.0, case.k).unwrap();
    let loss = total_loss(&mut tape, l_e, Some(l_a), &[lm.l_m1, lm.l_m2], 1.0, 10.0).unwrap();
    let v = tape.value(loss).item().unwrap();
    if !grads {
        return (v, None);
    }
    tape.backward(loss).unwrap();
    let g = tp.grads(&tape).map(|g| g.unwrap());
    (v, Some(g))
}

fn params_mut(p: &mut PatchSet, which: usize) -> &mut Tensor {
    match which {
        0 => &mut p.keys,
        1 => &mut p.bias,
        2 => &mut p.values_raw,
        _ => &mut p.value_scale,
    }
}

#[test]
fn patch_loss_gradients_match_finite_differences() {
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = tiny(Activation::Gelu, seed);
        let n = 1 + (seed % 3) as usize;
        let d = 8;
        let case = Case {
            model,
            hook: random(&mut rng, &[n, d], 1.0),
            labels: (0..n).map(|_| rng.random_range(0..3)).collect(),
            queries: random(&mut rng, &[n, d], 1.0),
            memory: random(&mut rng, &[15, d], 1.0),
            k: 7,
        };
        let p = PatchSet::new(
            random(&mut rng, &[d, n], 0.5),
            random(&mut rng, &[n], 0.5),
            Tensor::from_fn([n, d], |_| rng.random_range(0.0..1.0)),
            Tensor::full([n, d], 5.0),
            vec![0; n],
        )
        .unwrap();
        let (_, g) = patch_loss(&case, &p, true);
        let g = g.unwrap();
        for (which, grad) in g.iter().enumerate() {
            for i in 0..grad.len() {
                let mut hi = p.clone();
                params_mut(&mut hi, which).data_mut()[i] += eps;
                let mut lo = p.clone();
                params_mut(&mut lo, which).data_mut()[i] -= eps;
                let fd = (patch_loss(&case, &hi, false).0 - patch_loss(&case, &lo, false).0) / (2.0 * eps);
                let an = grad.data()[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn single_activation_loss_has_closed_form_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q = random(&mut rng, &[1, 5], 1.0);
        let k = random(&mut rng, &[5, 1], 1.0);
        let b = random(&mut rng, &[1], 1.0);
        let mut tape = Tape::new();
        let (qv, kv, bv) = (tape.constant(q.clone()), tape.param(k.clone()), tape.param(b.clone()));
        let l = activation_loss_single(&mut tape, qv, kv, bv).unwrap();
        let pre: f64 = q.data().iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[0];
        let want = (-pre).exp();
        assert!((tape.value(l).item().unwrap() - want).abs() < 1e-12);
        tape.backward(l).unwrap();
        let gk = tape.grad(kv).unwrap();
        for (g, qi) in gk.data().iter().zip(q.data()) {
            assert!((g + qi * want).abs() < 1e-12);
        }
        assert!((tape.grad(bv).unwrap().data()[0] + want).abs() < 1e-12);
    }
}

#[test]
fn memory_loss_with_full_k_is_a_plain_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (dm, d) = (9, 4);
    let m = random(&mut rng, &[dm, d], 1.0);
    let q = random(&mut rng, &[1, d], 1.0);
    let k = random(&mut rng, &[d, 1], 1.0);
    let b = Tensor::new([1], vec![0.3]).unwrap();
    let mut tape = Tape::new();
    let (mv, qv, kv, bv) = (
        tape.constant(m.clone()),
        tape.constant(q.clone()),
        tape.param(k.clone()),
        tape.param(b.clone()),
    );
    let lm = memory_loss_single(&mut tape, mv, qv, kv, bv, 0.5, 1.0, dm).unwrap();
    let dot = |row: &[f64]| row.iter().zip(k.data()).map(|(a, b)| a * b).sum::<f64>();
    let qk = dot(q.data());
    let e1: Vec<f64> = (0..dm).map(|i| (dot(m.row(i)) + 0.3 - 0.5).exp()).collect();
    let e2: Vec<f64> = (0..dm).map(|i| (dot(m.row(i)) - qk - 1.0).exp()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((tape.value(lm.l_m1).item().unwrap() - mean(&e1)).abs() < 1e-12);
    assert!((tape.value(lm.l_m2).item().unwrap() - mean(&e2)).abs() < 1e-12);
    tape.backward(lm.l_m1).unwrap();
    let gk = tape.grad(kv).unwrap();
    for j in 0..d {
        let want: f64 = (0..dm).map(|i| m.get2(i, j) * e1[i]).sum::<f64>() / dm as f64;
        assert!((gk.data()[j] - want).abs() < 1e-12);
    }
    assert!((tape.grad(bv).unwrap().data()[0] - mean(&e1)).abs() < 1e-12);
}

#[test]
fn multi_patch_losses_reduce_to_single_patch_forms() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let m = random(&mut rng, &[11, d], 1.0);
        let q = random(&mut rng, &[1, d], 1.0);
        let p = PatchSet::new(
            random(&mut rng, &[d, 1], 1.0),
            random(&mut rng, &[1], 1.0),
            Tensor::ones([1, d]),
            Tensor::ones([1, d]),
            vec![0],
        )
        .unwrap();
        let k = rng.random_range(1..=11);

        let mut t1 = Tape::new();
        let tp = TrainablePatch::bind(&mut t1, &p).unwrap();
        let (mv, qv) = (t1.constant(m.clone()), t1.constant(q.clone()));
        let a = edit_pre_activations(&mut t1, qv, &tp.vars).unwrap();
        let la = activation_loss(&mut t1, a, 1).unwrap();
        let lm = memory_loss(&mut t1, mv, &tp.vars, a, -3.0, 3.0, k).unwrap();
        let sum = t1.add(la, lm.l_m1).unwrap();
        let sum = t1.add(sum, lm.l_m2).unwrap();
        t1.backward(sum).unwrap();

        let mut t2 = Tape::new();
        let (kv, bv) = (t2.param(p.keys.clone()), t2.param(p.bias.clone()));
        let (mv, qv) = (t2.constant(m.clone()), t2.constant(q.clone()));
        let la2 = activation_loss_single(&mut t2, qv, kv, bv).unwrap();
        let lm2 = memory_loss_single(&mut t2, mv, qv, kv, bv, -3.0, 3.0, k).unwrap();
        let sum2 = t2.add(la2, lm2.l_m1).unwrap();
        let sum2 = t2.add(sum2, lm2.l_m2).unwrap();
        t2.backward(sum2).unwrap();

        for (x, y) in [(la, la2), (lm.l_m1, lm2.l_m1), (lm.l_m2, lm2.l_m2)] {
            let (x, y) = (t1.value(x).item().unwrap(), t2.value(y).item().unwrap());
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
        }
        assert!(t1.grad(tp.keys).unwrap().max_abs_diff(&t2.grad(kv).unwrap()) < 1e-12);
        assert!(t1.grad(tp.bias).unwrap().max_abs_diff(&t2.grad(bv).unwrap()) < 1e-12);
    }
}

#[test]
fn appended_neurons_equal_ffn_plus_patch_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, f, n, r) = (5, 7, 3, 4);
    for act in [Activation::Relu, Activation::Gelu] {
        let base = FfnLayer {
            keys: random(&mut rng, &[d, f], 1.0),
            key_bias: random(&mut rng, &[f], 1.0),
            values: random(&mut rng, &[f, d], 1.0),
            value_bias: random(&mut rng, &[d], 1.0),
        };
        let p = PatchSet::new(
            random(&mut rng, &[d, n], 1.0),
            random(&mut rng, &[n], 1.0),
            Tensor::from_fn([n, d], |_| rng.random_range(0.0..1.0)),
            Tensor::full([n, d], 5.0),
            vec![0; n],
        )
        .unwrap();
        let q = random(&mut rng, &[r, d], 1.0);
        // Dual form: the patch as extra columns of K and rows of V.
        let mut keys = Vec::new();
        for i in 0..d {
            keys.extend_from_slice(base.keys.row(i));
            keys.extend_from_slice(p.keys.row(i));
        }
        let mut bias = base.key_bias.data().to_vec();
        bias.extend_from_slice(p.bias.data());
        let mut values = base.values.data().to_vec();
        values.extend_from_slice(p.values().data());
        let wide = FfnLayer {
            keys: Tensor::new([d, f + n], keys).unwrap(),
            key_bias: Tensor::new([f + n], bias).unwrap(),
            values: Tensor::new([f + n, d], values).unwrap(),
            value_bias: base.value_bias.clone(),
        };
        let dual = ffn_forward(&wide, &q, act).unwrap().output;
        let plain = ffn_forward(&base, &q, act).unwrap().output;
        let a = p.activations(&q, act).unwrap();
        let vals = p.values();
        for row in 0..r {
            for c in 0..d {
                let extra: f64 = (0..n).map(|i| a.get2(row, i) * vals.get2(i, c)).sum();
                assert!((plain.get2(row, c) + extra - dual.get2(row, c)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn init_gives_unit_pre_activation_on_own_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = tiny(Activation::Relu, 5);
    let e = EditExample {
        id: 3,
        tokens: vec![BOS, 4, 5, 6],
        target: Target::Class(0),
        equivalents: vec![],
        split: Split::Edit,
    };
    // Whichever label is wrong gives a mistake to patch.
    let pred = model.predict(&e.tokens).unwrap();
    let target = if pred == Target::Class(0) { Target::Class(1) } else { Target::Class(0) };
    let e = EditExample { target, ..e };
    let t = count_mistakes(&model, &e.scored(), 5).unwrap();
    let p = init_patches(&t, e.id, rng.random()).unwrap();
    let pre = p.pre_activations(&t.queries).unwrap();
    assert!((pre.get2(0, 0) - 1.0).abs() < 1e-12);
    assert_eq!(p.bias.data(), &[0.0]);
    assert!(p.values_raw.data().iter().all(|v| (0.0..1.0).contains(v)));
    assert!(p.value_scale.data().iter().all(|&v| v == 5.0));
    assert_eq!(p.owners, vec![3]);
}

#[test]
fn edit_fixes_the_example_and_leaves_base_weights_alone() {
    let mut model = tiny(Activation::Relu, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let seqs: Vec<Vec<u32>> = (0..40)
        .map(|_| {
            let mut s = vec![BOS];
            s.extend((0..4).map(|_| rng.random_range(3..12)));
            s
        })
        .collect();
    let pos: Vec<Vec<usize>> = seqs.iter().map(|_| vec![0]).collect();
    let q = model.forward_positions(&seqs, &pos).unwrap().queries;
    let ids: Vec<u64> = (0..40).collect();
    let inputs: Vec<Vec<u32>> = seqs.clone();
    let mut memory = MemoryBank::empty(8, 100, MemoryPolicy::Reservoir, 0).unwrap();
    for (i, s) in inputs.iter().enumerate() {
        let row = Tensor::new([1, 8], q.row(i).to_vec()).unwrap();
        memory.update(&row, ids[i], s).unwrap();
    }
    let tokens = vec![BOS, 3, 3, 4];
    let Target::Class(c) = model.predict(&tokens).unwrap() else { unreachable!() };
    let e = EditExample {
        id: 99,
        tokens,
        target: Target::Class((c + 1) % 3),
        equivalents: vec![],
        split: Split::Edit,
    };
    let digest = model.base_digest();
    let params = model.param_count();
    let cfg = PatcherConfig { k: 10, ..PatcherConfig::for_activation(Activation::Relu) };
    let out = apply_edit(&mut model, &e, &memory, None, &cfg, 1).unwrap();
    assert_eq!(out.patches_added, 1);
    assert!(out.converged, "{:?}", out.losses);
    assert_eq!(model.predict(&e.tokens).unwrap(), e.target);
    assert_eq!(model.base_digest(), digest);
    assert_eq!(model.param_count(), params + 2 * 8 + 1);
    assert!(out.losses.l_a < cfg.la_threshold && out.losses.l_m1 < cfg.lm1_threshold);
}

#[test]
fn editing_a_correct_example_is_refused() {
    let mut model = tiny(Activation::Relu, 2);
    let tokens = vec![BOS, 5, 6];
    let e = EditExample {
        id: 1,
        target: model.predict(&tokens).unwrap(),
        tokens,
        equivalents: vec![],
        split: Split::Edit,
    };
    let memory = MemoryBank::empty(8, 10, MemoryPolicy::Reservoir, 0).unwrap();
    let cfg = PatcherConfig::for_activation(Activation::Relu);
    assert!(apply_edit(&mut model, &e, &memory, None, &cfg, 0).is_err());
    assert!(model.patches().is_empty());
}

#[test]
fn kl_variant_needs_pool_hooks() {
    let mut model = tiny(Activation::Relu, 2);
    let tokens = vec![BOS, 5, 6];
    let Target::Class(c) = model.predict(&tokens).unwrap() else { unreachable!() };
    let e = EditExample {
        id: 1,
        tokens,
        target: Target::Class((c + 1) % 3),
        equivalents: vec![],
        split: Split::Edit,
    };
    let memory = MemoryBank::empty(8, 10, MemoryPolicy::Reservoir, 0).unwrap();
    let cfg = PatcherConfig {
        variant: PatchVariant::KlPatch,
        ..PatcherConfig::for_activation(Activation::Relu)
    };
    assert!(apply_edit(&mut model, &e, &memory, None, &cfg, 0).is_err());
}
