use clicker_core::tensor::{
    cosine_value, grad_check, grad_check_fn, Graph, ParamStore, Result, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Projects `out` onto a fixed random tensor so every output entry matters.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let r = g.constant(random(&mut rng, shape));
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![2.0, 2.0, 2.0]).unwrap());
    let gain = g.constant(Tensor::filled(vec![3], 1.0));
    let bias = g.constant(Tensor::zeros(vec![3]));
    let y = g.layer_norm(x, gain, bias, 1e-10).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let i = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let bad = g.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
    assert!(g.matmul(a, bad).is_err());
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine_value(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
    assert_eq!(cosine_value(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    assert!((cosine_value(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
    assert_eq!(cosine_value(&[0.0, 0.0], &[1.0, 2.0]), 0.0);

    let mut g = Graph::new();
    let u = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
    let v = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap());
    assert!(g.cosine(u, v).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let ce = g.cross_entropy(l, 0).unwrap();
    assert!((g.scalar_value(ce) - std::f64::consts::LN_2).abs() < 1e-12);

    let l = g.constant(Tensor::vector(vec![10.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let ce = g.cross_entropy(l, 0).unwrap();
    // -log(e^10 / (e^10 + 4)) = log(1 + 4 e^-10)
    let direct = (4.0 * (-10.0f64).exp()).ln_1p();
    assert!((g.scalar_value(ce) - direct).abs() < 1e-12);
    assert!((g.scalar_value(ce) - 1.8158e-4).abs() < 1e-8);

    assert!(g.cross_entropy(l, 5).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2, 3]).with_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn repeated_backward_accumulates_into_leaves_and_params() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![1.0, -2.0]).unwrap(), false);
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward_into(s, &mut store).unwrap();
    g.backward_into(s, &mut store).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[4.0, -8.0]);
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, -8.0]);
    store.zero_grad();
    assert!(store.get(id).grad().is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(vec![2]).with_grad());
    assert!(g.backward(x).is_err());
}

#[test]
fn cosine_with_itself_has_zero_gradient() {
    let mut g = Graph::new();
    let u = g.leaf(Tensor::vector(vec![0.3, -1.2, 2.0]).unwrap().with_grad());
    let c = g.cosine(u, u).unwrap();
    g.backward(c).unwrap();
    for v in g.grad(u).unwrap() {
        assert!(v.abs() < 1e-15, "{v}");
    }
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1e300]).unwrap());
    assert!(g.mul(x, x).is_err());
}

#[test]
fn half_squared_norm_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let err = grad_check_fn(
        |g, p| {
            let sq = g.mul(p, p)?;
            let s = g.sum(sq)?;
            g.scale(s, 0.5)
        },
        random(&mut rng, vec![7]),
        STEP,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_rejects_non_positive_step() {
    assert!(grad_check_fn(|g, p| g.sum(p), Tensor::scalar(1.0), 0.0).is_err());
}

fn check_binary(
    sa: Vec<usize>,
    sb: Vec<usize>,
    f: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&mut rng, sa), false);
    let b = store.add("b", random(&mut rng, sb), false);
    let err = grad_check(
        |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let out = f(g, va, vb)?;
            readout(g, out, seed + 100)
        },
        &mut store,
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "seed {seed}: {err}");
}

fn check_unary(shape: Vec<usize>, f: impl Fn(&mut Graph, Var) -> Result<Var>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let err = grad_check_fn(
        |g, x| {
            let out = f(g, x)?;
            readout(g, out, seed + 100)
        },
        random(&mut rng, shape),
        STEP,
    )
    .unwrap();
    assert!(err < TOL, "seed {seed}: {err}");
}

#[test]
fn elementwise_and_linear_ops_pass_gradient_check() {
    for seed in 0..3 {
        check_binary(vec![3, 4], vec![4, 2], |g, a, b| g.matmul(a, b), seed);
        check_binary(vec![3, 4], vec![3, 4], |g, a, b| g.add(a, b), seed);
        check_binary(vec![3, 4], vec![4], |g, a, b| g.add_row(a, b), seed);
        check_binary(vec![3, 4], vec![3, 4], |g, a, b| g.mul(a, b), seed);
        check_unary(vec![2, 5], |g, a| g.affine(a, -1.5, 0.3), seed);
        check_unary(vec![2, 5], |g, a| g.relu(a), seed);
        check_unary(vec![2, 5], |g, a| g.sigmoid(a), seed);
        check_unary(vec![2, 5], |g, a| g.softmax(a), seed);
        check_unary(vec![3, 4], |g, a| g.mean_rows(a), seed);
        check_unary(vec![3, 4], |g, a| g.mean_last(a), seed);
        check_unary(vec![3, 4], |g, a| g.slice_rows(a, 1, 2), seed);
        check_binary(vec![2, 3], vec![1, 3], |g, a, b| g.concat_rows(&[a, b, a]), seed);
        check_unary(vec![4, 3], |g, t| g.gather_rows(t, &[2, 0, 2, 3]), seed);
    }
}

#[test]
fn layer_norm_passes_gradient_check() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, vec![3, 5]), false);
        let gain = store.add("g", random(&mut rng, vec![5]), false);
        let bias = store.add("b", random(&mut rng, vec![5]), false);
        let err = grad_check(
            |g, s| {
                let (x, gn, b) = (g.param(s, x), g.param(s, gain), g.param(s, bias));
                let y = g.layer_norm(x, gn, b, 1e-10)?;
                readout(g, y, seed)
            },
            &mut store,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn attention_passes_gradient_check_with_masked_keys() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let q = store.add("q", random(&mut rng, vec![7, 4]), false);
        let k = store.add("k", random(&mut rng, vec![7, 4]), false);
        let v = store.add("v", random(&mut rng, vec![7, 4]), false);
        let segments = [(0, 4), (4, 3)];
        let valid = [true, true, true, false, true, true, false];
        let err = grad_check(
            |g, s| {
                let (q, k, v) = (g.param(s, q), g.param(s, k), g.param(s, v));
                let y = g.attention(q, k, v, 2, &segments, &valid)?;
                readout(g, y, seed)
            },
            &mut store,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn attention_ignores_masked_key_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = random(&mut rng, vec![3, 4]);
    let k = random(&mut rng, vec![3, 4]);
    let v = random(&mut rng, vec![3, 4]);
    let valid = [true, true, false];
    let run = |v: Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v));
        let y = g.attention(qv, kv, vv, 2, &[(0, 3)], &valid).unwrap();
        g.value(y).data()[..8].to_vec()
    };
    let mut v2 = v.clone();
    v2.data_mut()[8..].iter_mut().for_each(|x| *x = 99.0);
    assert_eq!(run(v), run(v2));
}

#[test]
fn segment_ops_pass_gradient_check() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, vec![6, 3]), false);
        let s = store.add("s", random(&mut rng, vec![6, 1]), false);
        let segments = [(0, 2), (2, 4)];
        let err = grad_check(
            |g, st| {
                let (x, s) = (g.param(st, x), g.param(st, s));
                let gates = g.sigmoid(s)?;
                let pooled = g.segment_weighted_mean(x, gates, &segments)?;
                let soft = g.segment_softmax(s, &segments)?;
                let pooled2 = g.segment_weighted_mean(x, soft, &segments)?;
                let both = g.concat_rows(&[pooled, pooled2])?;
                readout(g, both, seed)
            },
            &mut store,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "{err}");
    }
}

#[test]
fn cosine_and_cross_entropy_pass_gradient_check() {
    for seed in 0..5 {
        check_binary(vec![6], vec![6], |g, a, b| g.cosine(a, b), seed);
        check_unary(vec![5], |g, a| g.cross_entropy(a, 2), seed);
    }
}

#[test]
fn weighted_mean_rejects_vanishing_weights() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
    let w = g.constant(Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap());
    assert!(g.segment_weighted_mean(x, w, &[(0, 2)]).is_err());
}

#[test]
fn ops_are_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, vec![5, 8]));
        let b = g.constant(random(&mut rng, vec![8, 8]));
        let y = g.matmul(a, b).unwrap();
        let y = g.softmax(y).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalized(
        data in proptest::collection::vec(-30.0f64..30.0, 12),
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 4, data).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_is_invariant_to_positive_scaling(
        u in proptest::collection::vec(-2.0f64..2.0, 5),
        v in proptest::collection::vec(-2.0f64..2.0, 5),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let su: Vec<f64> = u.iter().map(|x| a * x).collect();
        let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
        let c = cosine_value(&u, &v);
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((cosine_value(&su, &sv) - c).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_prediction_is_shift_invariant(
        logits in proptest::collection::vec(-5.0f64..5.0, 4),
        shift in -100.0f64..100.0,
    ) {
        let argmax = |l: &[f64]| {
            l.iter().enumerate().fold(0, |best, (i, &v)| if v > l[best] { i } else { best })
        };
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        prop_assert_eq!(argmax(&logits), argmax(&shifted));
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(logits).unwrap());
        let b = g.constant(Tensor::vector(shifted).unwrap());
        let (ca, cb) = (g.cross_entropy(a, 1).unwrap(), g.cross_entropy(b, 1).unwrap());
        prop_assert!((g.scalar_value(ca) - g.scalar_value(cb)).abs() < 1e-9);
        prop_assert!(g.scalar_value(ca) >= 0.0);
    }
}
