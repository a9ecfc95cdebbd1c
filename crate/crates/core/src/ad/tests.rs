use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Tape gradient vs central differences for every input of `build`.
fn check(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        analytic.extend(grads.get_or_zeros(*v, t.shape()).data);
    }
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data.clone()).collect();
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let v = tape.leaf(Tensor::new(t.rows, t.cols, x[off..off + t.len()].to_vec()));
                off += t.len();
                v
            })
            .collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let numeric = finite_diff_gradient(eval, &flat, 1e-5);
    relative_error(&analytic, &numeric, 1e-8)
}

fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Contract to a scalar with fixed random weights so every output entry matters.
fn contract(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(v);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, r, c));
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[test]
fn linear_identity_and_zero_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
    let w = tape.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(Tensor::zeros(1, 2));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data, vec![1.0, 2.0]);

    let z = tape.constant(Tensor::zeros(1, 2));
    let w2 = tape.constant(Tensor::new(2, 2, vec![0.3, -1.0, 2.0, 0.5]));
    let b2 = tape.constant(Tensor::row(vec![0.7, -0.2]));
    let y2 = tape.linear(z, w2, Some(b2)).unwrap();
    assert_eq!(tape.value(y2).data, vec![0.7, -0.2]);
}

#[test]
fn linear_matches_dot_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, 1, 2);
    let w = rand_tensor(&mut rng, 2, 2);
    let b = rand_tensor(&mut rng, 1, 2);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for o in 0..2 {
        let mut want = b.data[o];
        for i in 0..2 {
            want += w.at(o, i) * x.data[i];
        }
        assert!((tape.value(y).data[o] - want).abs() < 1e-12);
    }
}

#[test]
fn linear_shape_mismatch() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(1, 3));
    let w = tape.constant(Tensor::zeros(2, 2));
    assert!(matches!(tape.linear(x, w, None), Err(AdError::Shape(_))));
}

#[test]
fn activation_values() {
    assert_eq!(Activation::Relu.apply(-1.0f64), 0.0);
    assert_eq!(Activation::Relu.apply(2.0f64), 2.0);
    assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
    let swish = Activation::Swish.apply(1.0f64);
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((swish - oracle).abs() < 1e-15);
    assert!((swish - 0.73106).abs() < 1e-5);
    assert!((Activation::LeakyRelu.apply(-1.0f64) + 0.2).abs() < 1e-15);
    assert!((Activation::Softplus.apply(0.0f64) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn square_gradient_and_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let y = tape.scale(c, 2.0);
    let g = tape.backward(y).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.get_or_zeros(x, (1, 1)).item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
    assert_eq!(tape.backward(x).unwrap_err(), AdError::NonScalar((1, 2)));
}

#[test]
fn sum_sigmoid_linear_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, 4, 3);
    let w = rand_tensor(&mut rng, 5, 3);
    let build = |t: &mut Tape<f64>, v: &[Var]| {
        let y = t.linear(v[0], v[1], None).unwrap();
        let s = t.act(y, Activation::Sigmoid);
        t.sum(s)
    };
    assert!(check(&build, &[x, w]) <= 1e-4);
}

#[test]
fn random_mlps_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut set = ParamSet::<f64>::new();
        let mlp = Mlp::init(&mut set, "m", &[3, 6, 5, 2], Activation::Softplus, true, &mut rng);
        let x = rand_tensor(&mut rng, 4, 3);
        let n = set.len();
        let mut inputs: Vec<Tensor<f64>> = set.params.iter().map(|p| p.value.clone()).collect();
        for t in inputs.iter_mut().skip(1).step_by(2) {
            *t = rand_tensor(&mut rng, t.rows, t.cols);
        }
        inputs.push(x);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let bound = Bound { vars: v[..n].to_vec() };
            let y = mlp.forward(t, &bound, v[n]).unwrap();
            contract(t, y, 9)
        };
        let err = check(&build, &inputs);
        assert!(err <= 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn parameter_used_twice_accumulates() {
    // f(w) = sum(w x1) + sum(w x2) through two separate uses of the same leaf,
    // compared against two distinct copies of w whose gradients are summed.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, 2, 3);
    let x1 = rand_tensor(&mut rng, 1, 3);
    let x2 = rand_tensor(&mut rng, 1, 3);

    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone());
    let (a, b) = (tape.constant(x1.clone()), tape.constant(x2.clone()));
    let y1 = tape.linear(a, wv, None).unwrap();
    let y2 = tape.linear(b, wv, None).unwrap();
    let s = tape.add(y1, y2).unwrap();
    let s = tape.act(s, Activation::Tanh);
    let out = tape.sum(s);
    let shared = tape.backward(out).unwrap().get(wv).unwrap().clone();

    let mut tape = Tape::new();
    let w1 = tape.leaf(w.clone());
    let w2 = tape.leaf(w.clone());
    let (a, b) = (tape.constant(x1), tape.constant(x2));
    let y1 = tape.linear(a, w1, None).unwrap();
    let y2 = tape.linear(b, w2, None).unwrap();
    let s = tape.add(y1, y2).unwrap();
    let s = tape.act(s, Activation::Tanh);
    let out = tape.sum(s);
    let g = tape.backward(out).unwrap();
    let mut split = g.get(w1).unwrap().clone();
    split.add_assign(g.get(w2).unwrap());
    for (p, q) in shared.data.iter().zip(&split.data) {
        assert!((p - q).abs() < 1e-14);
    }
}

#[test]
fn seeded_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut set = ParamSet::<f64>::new();
        let mlp = Mlp::init(&mut set, "m", &[4, 16, 1], Activation::Swish, true, &mut rng);
        let x = rand_tensor(&mut rng, 8, 4);
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, true);
        let xv = tape.constant(x);
        let y = mlp.forward(&mut tape, &bound, xv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        set.accumulate(&g, &bound, 1.0);
        (
            tape.value(s).item().to_bits(),
            set.flat_grads().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}

#[derive(Clone, Copy, Debug)]
enum UnaryCase {
    Act(Activation),
    Rms,
    Normalize,
    PosEnc,
    MeanRows,
    Slice,
    Scale,
}

fn unary_strategy() -> impl Strategy<Value = UnaryCase> {
    prop_oneof![
        Just(UnaryCase::Act(Activation::Relu)),
        Just(UnaryCase::Act(Activation::LeakyRelu)),
        Just(UnaryCase::Act(Activation::Softplus)),
        Just(UnaryCase::Act(Activation::Sigmoid)),
        Just(UnaryCase::Act(Activation::Swish)),
        Just(UnaryCase::Act(Activation::Tanh)),
        Just(UnaryCase::Act(Activation::Exp)),
        Just(UnaryCase::Rms),
        Just(UnaryCase::Normalize),
        Just(UnaryCase::PosEnc),
        Just(UnaryCase::MeanRows),
        Just(UnaryCase::Slice),
        Just(UnaryCase::Scale),
    ]
}

fn away_from_kinks(data: &mut [f64]) {
    for v in data {
        if v.abs() < 1e-3 {
            *v += 0.01;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unary_ops_match_finite_differences(case in unary_strategy(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rand_tensor(&mut rng, 3, 4);
        away_from_kinks(&mut x.data);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = match case {
                UnaryCase::Act(k) => t.act(v[0], k),
                UnaryCase::Rms => t.rms_norm(v[0]),
                UnaryCase::Normalize => t.normalize_rows(v[0]),
                UnaryCase::PosEnc => t.positional_encode(v[0], 3),
                UnaryCase::MeanRows => t.mean_rows(v[0]),
                UnaryCase::Slice => t.slice_cols(v[0], 1, 2).unwrap(),
                UnaryCase::Scale => t.scale(v[0], -1.7),
            };
            contract(t, y, seed + 1)
        };
        let err = check(&build, &[x]);
        prop_assert!(err <= 1e-4, "{:?}: {}", case, err);
    }

    #[test]
    fn binary_ops_match_finite_differences(which in 0usize..7, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = if which == 3 || which == 4 { rand_tensor(&mut rng, 1, 4) } else { rand_tensor(&mut rng, 3, 4) };
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = match which {
                0 => t.add(v[0], v[1]).unwrap(),
                1 => t.sub(v[0], v[1]).unwrap(),
                2 => t.mul(v[0], v[1]).unwrap(),
                3 => t.add_row(v[0], v[1]).unwrap(),
                4 => t.mul_row(v[0], v[1]).unwrap(),
                5 => t.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
                _ => return t.sq_error(v[0], v[1], Some(Tensor::filled(3, 4, 0.3))).unwrap(),
            };
            contract(t, y, seed + 2)
        };
        let err = check(&build, &[a, b]);
        prop_assert!(err <= 1e-4, "op {}: {}", which, err);
    }

    #[test]
    fn linear_with_bias_matches_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 1, 4);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            contract(t, y, seed + 3)
        };
        prop_assert!(check(&build, &[x, w, b]) <= 1e-4);
    }
}
