//! Central finite-difference checks of every layer type and of the Adam
//! optimizer's basic contracts.

use nnkit::{
    adam_step, seeded_rng, AdamConfig, AdamState, BiGru, GraphConv, Grads, Linear, ParamStore, ResidualBlock, Tape,
    Tensor, Var,
};
use rand::Rng;

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ c⊙y + ½Σ y²`, smooth in the layer output.
fn probe_loss(tape: &mut Tape<'_>, y: Var, coeffs: &Tensor) -> Var {
    let c = tape.input(coeffs.clone());
    let cy = tape.mul(c, y).unwrap();
    let yy = tape.mul(y, y).unwrap();
    let yy = tape.scale(yy, 0.5);
    let s = tape.add(cy, yy).unwrap();
    tape.sum(s)
}

/// Returns the largest relative error over all parameter entries.
fn check_gradients(store: &ParamStore, forward: &dyn Fn(&mut Tape<'_>) -> Var) -> f64 {
    let analytic: Grads = {
        let mut tape = Tape::new(store);
        let loss = forward(&mut tape);
        tape.backward(loss).unwrap()
    };
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new(s);
        let loss = forward(&mut tape);
        tape.value(loss).item()
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store.ids() {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + EPS;
            let up = eval(&probe);
            probe.get_mut(id).data_mut()[k] = orig - EPS;
            let down = eval(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic.get(id).data()[k];
            let diff = (a - numeric).abs();
            if diff > ABS_FLOOR {
                let rel = diff / a.abs().max(numeric.abs());
                assert!(
                    rel < REL_TOL,
                    "{}[{k}]: analytic {a} numeric {numeric} rel {rel}",
                    store.name(id)
                );
                worst = worst.max(rel);
            }
        }
    }
    worst
}

#[test]
fn linear_layer_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded_rng(seed);
        let (rows, inw, outw) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "fc", inw, outw, true, &mut rng);
        // Non-zero bias so its gradient path is exercised away from zero.
        *store.get_mut(layer.bias.unwrap()) = random_tensor(&[outw], &mut rng);
        let x = random_tensor(&[rows, inw], &mut rng);
        let c = random_tensor(&[rows, outw], &mut rng);
        check_gradients(&store, &|tape| {
            let xi = tape.input(x.clone());
            let y = layer.forward(tape, xi).unwrap();
            probe_loss(tape, y, &c)
        });
    }
}

#[test]
fn graph_conv_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded_rng(100 + seed);
        let n = rng.gen_range(1..6);
        let (inw, outw, rows) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let edges: Vec<(usize, usize)> = (0..n * 2).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
        let mut store = ParamStore::new();
        let layer = GraphConv::new(&mut store, "conv", n, &edges, inw, outw, &mut rng).unwrap();
        *store.get_mut(layer.bias) = random_tensor(&[n, outw], &mut rng);
        // Learnable input so dx is checked through a second conv.
        let x_id = store.add("x", random_tensor(&[rows, n * inw], &mut rng));
        let c = random_tensor(&[rows, n * outw], &mut rng);
        check_gradients(&store, &|tape| {
            let xi = tape.param(x_id);
            let y = layer.forward(tape, xi).unwrap();
            let y = tape.tanh(y);
            probe_loss(tape, y, &c)
        });
    }
}

#[test]
fn residual_block_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded_rng(200 + seed);
        let (rows, width) = (rng.gen_range(1..4), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let block = ResidualBlock::new(&mut store, "res", width, &mut rng);
        let x_id = store.add("x", random_tensor(&[rows, width], &mut rng));
        let c = random_tensor(&[rows, width], &mut rng);
        check_gradients(&store, &|tape| {
            let xi = tape.param(x_id);
            let y = block.forward(tape, xi).unwrap();
            probe_loss(tape, y, &c)
        });
    }
}

#[test]
fn bidirectional_recurrent_layer_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded_rng(300 + seed);
        let (steps, inw, hidden) = (rng.gen_range(1..6), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut store = ParamStore::new();
        let layer = BiGru::new(&mut store, "gru", inw, hidden, &mut rng);
        let x_id = store.add("x", random_tensor(&[steps, inw], &mut rng));
        let c = random_tensor(&[steps, 2 * hidden], &mut rng);
        check_gradients(&store, &|tape| {
            let xi = tape.param(x_id);
            let y = layer.forward(tape, xi).unwrap();
            probe_loss(tape, y, &c)
        });
    }
}

#[test]
fn rotation_products_match_finite_differences() {
    for seed in 0..10 {
        let mut rng = seeded_rng(400 + seed);
        let rows = rng.gen_range(1..4);
        let mut store = ParamStore::new();
        let a = store.add("a", random_tensor(&[rows, 9], &mut rng));
        let b = store.add("b", random_tensor(&[rows, 9], &mut rng));
        let v = store.add("v", random_tensor(&[rows, 3], &mut rng));
        let c = random_tensor(&[rows, 3], &mut rng);
        check_gradients(&store, &|tape| {
            let (a, b, v) = (tape.param(a), tape.param(b), tape.param(v));
            let ab = tape.rot_mul(a, b).unwrap();
            let y = tape.rot_apply(ab, v).unwrap();
            probe_loss(tape, y, &c)
        });
    }
}

#[test]
fn slicing_and_concatenation_route_gradients() {
    let mut rng = seeded_rng(7);
    let mut store = ParamStore::new();
    let a = store.add("a", random_tensor(&[3, 4], &mut rng));
    let b = store.add("b", random_tensor(&[2, 4], &mut rng));
    let c = random_tensor(&[5, 2], &mut rng);
    check_gradients(&store, &|tape| {
        let (a, b) = (tape.param(a), tape.param(b));
        let rows = tape.concat_rows(&[a, b]).unwrap();
        let left = tape.slice_cols(rows, 0, 1).unwrap();
        let right = tape.slice_cols(rows, 3, 1).unwrap();
        let y = tape.concat_cols(&[left, right]).unwrap();
        let mid = tape.slice_rows(y, 1, 3).unwrap();
        let extra = tape.sigmoid(mid);
        let extra = tape.sum(extra);
        let base = probe_loss(tape, y, &c);
        tape.add(base, extra).unwrap()
    });
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut rng = seeded_rng(1);
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
    let mut tape = Tape::new(&store);
    let x = tape.input(random_tensor(&[2, 3], &mut rng));
    let y = layer.forward(&mut tape, x).unwrap();
    let zero = tape.scale(y, 0.0);
    let loss = tape.sum(zero);
    let constant = tape.affine(loss, 1.0, 5.0);
    let grads = tape.backward(constant).unwrap();
    assert_eq!(grads.max_abs(), 0.0);
}

#[test]
fn quadratic_loss_gradient_matches_closed_form() {
    // L(w) = Σ (Xw − y)², ∇L = 2Xᵀ(Xw − y)
    let mut rng = seeded_rng(11);
    let (rows, inw) = (6, 4);
    let x = random_tensor(&[rows, inw], &mut rng);
    let target = random_tensor(&[rows, 1], &mut rng);
    let mut store = ParamStore::new();
    let layer = Linear::new(&mut store, "w", inw, 1, false, &mut rng);
    let w = store.get(layer.weight).clone();

    let mut tape = Tape::new(&store);
    let xi = tape.input(x.clone());
    let yi = tape.input(target.clone());
    let pred = layer.forward(&mut tape, xi).unwrap();
    let r = tape.sub(pred, yi).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();

    let residual: Vec<f64> = (0..rows)
        .map(|r| (0..inw).map(|k| x.get2(r, k) * w.data()[k]).sum::<f64>() - target.data()[r])
        .collect();
    for k in 0..inw {
        let expected: f64 = 2.0 * (0..rows).map(|r| x.get2(r, k) * residual[r]).sum::<f64>();
        let got = grads.get(layer.weight).data()[k];
        assert!((expected - got).abs() < 1e-12, "{expected} vs {got}");
    }
}

#[test]
fn non_finite_gradient_names_the_parameter() {
    let mut store = ParamStore::new();
    let p = store.add("layer.weight", Tensor::from_vec(&[1, 1], vec![1.0]).unwrap());
    let mut tape = Tape::new(&store);
    let v = tape.param(p);
    let huge = tape.scale(v, f64::INFINITY);
    let loss = tape.sum(huge);
    let err = tape.backward(loss).unwrap_err();
    assert!(err.to_string().contains("layer.weight"), "{err}");
}

#[test]
fn adam_with_zero_gradients_keeps_params_and_decays_moments() {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
    let mut state = AdamState::new(&store);
    state.first_moment[0] = Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
    state.second_moment[0] = Tensor::from_vec(&[2], vec![0.25, 0.25]).unwrap();
    let before = store.clone();
    let grads = Grads::zeros_like(&store);
    let hyper = AdamConfig {
        learning_rate: 0.0,
        ..AdamConfig::default()
    };
    adam_step(&mut store, &grads, &mut state, &hyper);
    assert_eq!(store.get(p), before.get(p));
    assert!((state.first_moment[0].data()[0] - 0.45).abs() < 1e-15);
    assert!((state.second_moment[0].data()[0] - 0.25 * 0.999).abs() < 1e-15);
}

fn quadratic_trajectory(seed: u64, steps: usize) -> Vec<f64> {
    // minimize (w − 3)²
    let mut rng = seeded_rng(seed);
    let mut store = ParamStore::new();
    let w = store.add_uniform("w", &[1, 1], 1.0, &mut rng);
    let mut state = AdamState::new(&store);
    let hyper = AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    };
    let mut traj = Vec::with_capacity(steps);
    for _ in 0..steps {
        let grads = {
            let mut tape = Tape::new(&store);
            let wv = tape.param(w);
            let d = tape.affine(wv, 1.0, -3.0);
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            tape.backward(loss).unwrap()
        };
        adam_step(&mut store, &grads, &mut state, &hyper);
        traj.push(store.get(w).item());
    }
    traj
}

#[test]
fn adam_converges_on_one_dimensional_quadratic() {
    let traj = quadratic_trajectory(5, 2000);
    let last = *traj.last().unwrap();
    assert!((last - 3.0).abs() < 1e-6, "ended at {last}");
}

#[test]
fn adam_runs_are_bit_identical_for_same_seed() {
    let a = quadratic_trajectory(9, 300);
    let b = quadratic_trajectory(9, 300);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
