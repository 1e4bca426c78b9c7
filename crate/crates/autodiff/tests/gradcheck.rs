//! Analytic gradients from the tape against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sme_autodiff::{Activation, Tape, Tensor, Var};

type Graph = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

/// Random values kept at least `gap` away from zero (for kinked functions).
fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn eval(f: &Graph, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item().unwrap()
}

/// Largest relative discrepancy between tape gradients and central
/// differences over every element of every input.
fn max_rel_err(f: &Graph, inputs: &[Tensor], eps: f64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (slot, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
        for i in 0..inputs[slot].len() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[i] -= eps;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn check_seeds(name: &str, seeds: u64, tol: f64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: &Graph) {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        worst = worst.max(max_rel_err(f, &inputs, 1e-5));
    }
    assert!(worst < tol, "{name}: max rel err {worst:e} over {seeds} seeds");
}

#[test]
fn matmul_single_case_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
    let f: &Graph = &|t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        let w = t.constant(Tensor::from_fn([3, 2], |i| 0.3 + i as f64 * 0.1));
        let q = t.mul(p, w).unwrap();
        t.sum(q)
    };
    assert!(max_rel_err(f, &inputs, 1e-5) < 1e-6);
}

#[test]
fn cross_entropy_single_case_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![random(&mut rng, &[4, 3])];
    let f: &Graph = &|t, v| t.softmax_cross_entropy(v[0], &[2, 0, 1, 1]).unwrap();
    assert!(max_rel_err(f, &inputs, 1e-5) < 1e-5);
}

/// Weighted sum so that every output element carries a distinct upstream
/// gradient.
fn weighted_sum(t: &mut Tape, x: Var) -> Var {
    let shape = t.value(x).shape().to_vec();
    let w = t.constant(Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7).sin()));
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

#[test]
fn every_primitive_over_100_seeds() {
    const SEEDS: u64 = 100;
    const TOL: f64 = 1e-4;

    check_seeds("matmul", SEEDS, TOL, |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], &|t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, p)
    });
    check_seeds("matmul_t", SEEDS, TOL, |r| vec![random(r, &[3, 4]), random(r, &[2, 4])], &|t, v| {
        let p = t.matmul_t(v[0], v[1]).unwrap();
        weighted_sum(t, p)
    });
    check_seeds(
        "batch_matmul",
        SEEDS,
        TOL,
        |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])],
        &|t, v| {
            let p = t.batch_matmul(v[0], v[1], false).unwrap();
            weighted_sum(t, p)
        },
    );
    check_seeds(
        "batch_matmul_t",
        SEEDS,
        TOL,
        |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 5, 4])],
        &|t, v| {
            let p = t.batch_matmul(v[0], v[1], true).unwrap();
            weighted_sum(t, p)
        },
    );
    check_seeds("add_sub_mul", SEEDS, TOL, |r| vec![random(r, &[2, 3]), random(r, &[2, 3])], &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(v[0], v[1]).unwrap();
        let m = t.mul(a, s).unwrap();
        let m = t.scale(m, 1.7);
        let m = t.add_scalar(m, 0.3);
        weighted_sum(t, m)
    });
    check_seeds("row_broadcast", SEEDS, TOL, |r| vec![random(r, &[3, 4]), random(r, &[4]), random(r, &[4])], &|t, v| {
        let m = t.mul_row(v[0], v[1]).unwrap();
        let a = t.add_row(m, v[2]).unwrap();
        weighted_sum(t, a)
    });
    check_seeds("relu", SEEDS, TOL, |r| vec![random_off_zero(r, &[3, 4], 1e-3)], &|t, v| {
        let a = t.activation(v[0], Activation::Relu);
        weighted_sum(t, a)
    });
    check_seeds("gelu", SEEDS, TOL, |r| vec![random(r, &[3, 4])], &|t, v| {
        let a = t.activation(v[0], Activation::Gelu);
        weighted_sum(t, a)
    });
    check_seeds("exp", SEEDS, TOL, |r| vec![random(r, &[5])], &|t, v| {
        let a = t.exp(v[0]);
        weighted_sum(t, a)
    });
    check_seeds("softmax", SEEDS, TOL, |r| vec![random(r, &[3, 4])], &|t, v| {
        let a = t.softmax(v[0]);
        weighted_sum(t, a)
    });
    check_seeds("log_softmax", SEEDS, TOL, |r| vec![random(r, &[3, 4])], &|t, v| {
        let a = t.log_softmax(v[0]);
        weighted_sum(t, a)
    });
    check_seeds("layer_norm", SEEDS, TOL, |r| vec![random(r, &[3, 6])], &|t, v| {
        let a = t.layer_norm(v[0]);
        weighted_sum(t, a)
    });
    check_seeds("cross_entropy", SEEDS, TOL, |r| vec![random(r, &[4, 3])], &|t, v| {
        t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
    });
    check_seeds("topk_mean_exp", SEEDS, TOL, |r| vec![random(r, &[7])], &|t, v| {
        t.topk_mean_exp(v[0], 3).unwrap()
    });
    check_seeds("mean_transpose", SEEDS, TOL, |r| vec![random(r, &[2, 3])], &|t, v| {
        let tr = t.transpose(v[0]).unwrap();
        let w = t.constant(Tensor::from_fn([3, 2], |i| i as f64 - 2.0));
        let p = t.mul(tr, w).unwrap();
        t.mean(p)
    });
    check_seeds("gather_concat_reshape", SEEDS, TOL, |r| vec![random(r, &[2, 3]), random(r, &[2, 2])], &|t, v| {
        let c = t.concat(v[0], v[1], 1).unwrap();
        let c0 = t.concat(v[0], v[0], 0).unwrap();
        let g = t.gather(c, vec![0, 4, 4, 9, 7], vec![5]).unwrap();
        let rows = t.select_rows(c0, &[3, 0]).unwrap();
        let rs = t.reshape(rows, vec![6]).unwrap();
        let a = weighted_sum(t, g);
        let b = weighted_sum(t, rs);
        t.add(a, b).unwrap()
    });
}

#[test]
fn composed_ffn_with_loss() {
    // Pre-norm FFN block followed by a classification head and cross-entropy.
    let f: &Graph = &|t, v| {
        let n = t.layer_norm(v[0]);
        let h = t.matmul(n, v[1]).unwrap();
        let h = t.add_row(h, v[2]).unwrap();
        let a = t.activation(h, Activation::Gelu);
        let o = t.matmul(a, v[3]).unwrap();
        let o = t.add_row(o, v[4]).unwrap();
        let r = t.add(o, v[0]).unwrap();
        let logits = t.matmul(r, v[5]).unwrap();
        t.softmax_cross_entropy(logits, &[1, 0, 2]).unwrap()
    };
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4, 6]),
            random(&mut rng, &[6]),
            random(&mut rng, &[6, 4]),
            random(&mut rng, &[4]),
            random(&mut rng, &[4, 3]),
        ];
        worst = worst.max(max_rel_err(f, &inputs, 1e-4));
    }
    assert!(worst < 1e-4, "composed graph rel err {worst:e}");
}
