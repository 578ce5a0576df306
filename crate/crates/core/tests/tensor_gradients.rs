//! Analytic gradients of every traced op against central finite differences.

use geostream::tensor::{ParamId, ParamSet, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Builds a scalar loss over the given params. The closure receives one
/// `Var` per param, in order.
type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Max relative error between the tape gradient and a central difference
/// over every scalar of every parameter.
fn check(params: &ParamSet, loss: &LossFn<'_>) -> f64 {
    let ids: Vec<ParamId> = (0..params.len()).map(ParamId).collect();
    let eval = |ps: &ParamSet| {
        let mut tape = Tape::new(ps);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let l = loss(&mut tape, &vars);
        tape.value(l).data()[0]
    };
    let grads = {
        let mut tape = Tape::new(params);
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        let l = loss(&mut tape, &vars);
        tape.backward(l).unwrap()
    };
    let mut worst = 0.0f64;
    for &id in &ids {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.get(id).value.shape()));
        for i in 0..analytic.len() {
            let mut plus = params.clone();
            plus.get_mut(id).value.data_mut()[i] += EPS;
            let mut minus = params.clone();
            minus.get_mut(id).value.data_mut()[i] -= EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Fixed random weights so that every output element matters differently.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let w = tape.input(random_tensor(&mut rng, &shape));
    let prod = tape.mul(v, w).unwrap();
    tape.sum(prod).unwrap()
}

#[test]
fn rows_matvec_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    ps.add("w", random_tensor(&mut rng, &[3, 5]));
    ps.add("x", random_tensor(&mut rng, &[4, 5]));
    let err = check(&ps, &|t, v| {
        let m = t.rows_matvec(v[0], v[1]).unwrap();
        weighted_sum(t, m, 98)
    });
    assert!(err < 1e-6, "rows_matvec rel err {err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParamSet::new();
    ps.add("a", random_tensor(&mut rng, &[3, 4]));
    ps.add("b", random_tensor(&mut rng, &[4, 2]));
    let err = check(&ps, &|t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        weighted_sum(t, m, 99)
    });
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn matvec_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamSet::new();
    ps.add("w", random_tensor(&mut rng, &[5, 3]));
    ps.add("x", random_tensor(&mut rng, &[3]));
    let err = check(&ps, &|t, v| {
        let m = t.matvec(v[0], v[1]).unwrap();
        weighted_sum(t, m, 98)
    });
    assert!(err < 1e-6, "matvec rel err {err}");
}

#[test]
fn tanh_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamSet::new();
    ps.add("x", random_tensor(&mut rng, &[5]));
    let err = check(&ps, &|t, v| {
        let y = t.tanh(v[0]).unwrap();
        weighted_sum(t, y, 97)
    });
    assert!(err < 1e-6, "tanh rel err {err}");
}

#[test]
fn sigmoid_add_mul_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamSet::new();
    ps.add("x", random_tensor(&mut rng, &[6]));
    ps.add("y", random_tensor(&mut rng, &[6]));
    ps.add("s", random_tensor(&mut rng, &[]));
    let err = check(&ps, &|t, v| {
        let a = t.sigmoid(v[0]).unwrap();
        let b = t.mul(a, v[1]).unwrap();
        let c = t.add(b, v[2]).unwrap();
        let d = t.mul(c, v[2]).unwrap();
        let e = t.scale(d, -1.7).unwrap();
        weighted_sum(t, e, 96)
    });
    assert!(err < 1e-6, "pointwise rel err {err}");
}

#[test]
fn softmax_and_neg_log_pick_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParamSet::new();
    ps.add("x", random_tensor(&mut rng, &[7]));
    let err = check(&ps, &|t, v| {
        let p = t.softmax(v[0]).unwrap();
        t.neg_log_pick(p, 3).unwrap()
    });
    assert!(err < 1e-6, "cross-entropy rel err {err}");
    let err = check(&ps, &|t, v| {
        let p = t.softmax(v[0]).unwrap();
        weighted_sum(t, p, 95)
    });
    assert!(err < 1e-6, "softmax rel err {err}");
}

#[test]
fn max_over_time_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut r = random_tensor(&mut rng, &[4, 3]);
    // Spread entries apart so no perturbation flips an argmax.
    for (i, x) in r.data_mut().iter_mut().enumerate() {
        *x += 0.01 * i as f64;
    }
    let mut ps = ParamSet::new();
    ps.add("r", r);
    let err = check(&ps, &|t, v| {
        let m = t.max_over_time(v[0]).unwrap();
        t.sum(m).unwrap()
    });
    assert!(err < 1e-6, "max_over_time rel err {err}");
}

#[test]
fn structural_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParamSet::new();
    ps.add("a", random_tensor(&mut rng, &[4]));
    ps.add("b", random_tensor(&mut rng, &[4]));
    ps.add("table", random_tensor(&mut rng, &[3, 4]));
    ps.add("w", random_tensor(&mut rng, &[3]));
    let err = check(&ps, &|t, v| {
        let row = t.gather_row(v[2], 1).unwrap();
        let stacked = t.stack(&[v[0], v[1], row]).unwrap();
        let mean = t.weighted_rows(v[3], stacked).unwrap();
        let cat = t.concat(&[mean, v[0]]).unwrap();
        let part = t.slice(cat, 2, 5).unwrap();
        let other = t.slice(cat, 0, 5).unwrap();
        let total = t.add_n(&[part, other, part]).unwrap();
        weighted_sum(t, total, 94)
    });
    assert!(err < 1e-6, "structural rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn composite_gradients_on_random_shapes(seed in 0u64..1000, m in 1usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        ps.add("w", random_tensor(&mut rng, &[m, k]));
        ps.add("x", random_tensor(&mut rng, &[k]));
        let err = check(&ps, &|t, v| {
            let h = t.matvec(v[0], v[1]).unwrap();
            let h = t.tanh(h).unwrap();
            let p = t.softmax(h).unwrap();
            weighted_sum(t, p, seed)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn ops_are_bit_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let w = ps.add("w", random_tensor(&mut rng, &[4, 6]));
        let x = ps.add("x", random_tensor(&mut rng, &[6]));
        let run = || {
            let mut t = Tape::new(&ps);
            let (wv, xv) = (t.param(w), t.param(x));
            let h = t.matvec(wv, xv).unwrap();
            let p = t.softmax(h).unwrap();
            t.value(p).clone()
        };
        let a = run();
        prop_assert_eq!(&a, &run());
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0));
    }
}
