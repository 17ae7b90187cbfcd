//! Central finite differences (step 1e-5) against the analytic gradients.

use fcplan::learn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Max relative error of `grad` against central differences of `f` around `x`.
fn check(x: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_layer_gradients() {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let conv = Conv3x3 { cin: rng.random_range(1..4), cout: rng.random_range(1..4), h: rng.random_range(2..7), w: rng.random_range(2..7) };
        let p = randv(&mut rng, conv.num_params());
        let x = randv(&mut rng, conv.cin * conv.h * conv.w);
        let g = randv(&mut rng, conv.cout * conv.h * conv.w);
        let out = |p: &[f64], x: &[f64]| {
            let mut y = vec![0.0; g.len()];
            conv.forward(p, x, &mut y);
            dot(&y, &g)
        };
        let mut dp = vec![0.0; p.len()];
        let mut dx = vec![0.0; x.len()];
        conv.backward(&p, &x, &g, &mut dp, Some(&mut dx));
        assert!(check(&p, &dp, |q| out(q, &x)) < TOL, "case {case} params");
        assert!(check(&x, &dx, |q| out(&p, q)) < TOL, "case {case} input");
    }
}

#[test]
fn dense_layer_gradients() {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
        let d = Dense { nin: rng.random_range(1..20), nout: rng.random_range(1..10) };
        let p = randv(&mut rng, d.num_params());
        let x = randv(&mut rng, d.nin);
        let g = randv(&mut rng, d.nout);
        let out = |p: &[f64], x: &[f64]| {
            let mut y = vec![0.0; d.nout];
            d.forward(p, x, &mut y);
            dot(&y, &g)
        };
        let mut dp = vec![0.0; p.len()];
        let mut dx = vec![0.0; x.len()];
        d.backward(&p, &x, &g, &mut dp, Some(&mut dx));
        assert!(check(&p, &dp, |q| out(q, &x)) < TOL);
        assert!(check(&x, &dx, |q| out(&p, q)) < TOL);
    }
}

#[test]
fn pool_layer_gradients() {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + case);
        let pool = MaxPool2 { c: rng.random_range(1..4), h: rng.random_range(1..8), w: rng.random_range(1..8) };
        let x = randv(&mut rng, pool.c * pool.h * pool.w);
        let g = randv(&mut rng, pool.c * pool.out_h() * pool.out_w());
        let out = |x: &[f64]| {
            let mut y = vec![0.0; g.len()];
            pool.forward(x, &mut y);
            dot(&y, &g)
        };
        let mut y = vec![0.0; g.len()];
        let arg = pool.forward(&x, &mut y);
        let mut dx = vec![0.0; x.len()];
        MaxPool2::backward(&arg, &g, &mut dx);
        assert!(check(&x, &dx, out) < TOL);
    }
}

#[test]
fn pool_tie_gradient_is_a_one_sided_derivative() {
    // At a tie the routed gradient is the derivative for perturbations that
    // keep the first element the winner: raising it, or lowering the others.
    let pool = MaxPool2 { c: 1, h: 2, w: 2 };
    let x = [0.5, 0.5, -1.0, 0.5];
    let f = |x: &[f64]| {
        let mut y = [0.0];
        pool.forward(x, &mut y);
        y[0]
    };
    let mut y = [0.0];
    let arg = pool.forward(&x, &mut y);
    let mut dx = [0.0; 4];
    MaxPool2::backward(&arg, &[1.0], &mut dx);
    assert_eq!(dx, [1.0, 0.0, 0.0, 0.0]);
    let mut up = x;
    up[0] += STEP;
    assert!(rel_err(dx[0], (f(&up) - f(&x)) / STEP) < TOL);
    for i in [1, 3] {
        let mut down = x;
        down[i] -= STEP;
        assert!(rel_err(dx[i], (f(&x) - f(&down)) / STEP) < TOL || (f(&x) - f(&down)).abs() < 1e-15);
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for _ in 0..200 {
        let x: f64 = rng.random_range(-40.0..40.0);
        let fd = (softplus(x + STEP) - softplus(x - STEP)) / (2.0 * STEP);
        assert!(rel_err(softplus_grad(x), fd) < TOL, "softplus at {x}");
        if x.abs() > 2.0 * STEP {
            let fd = (relu(x + STEP) - relu(x - STEP)) / (2.0 * STEP);
            assert!(rel_err(relu_grad(x), fd) < TOL);
        }
    }
}

#[test]
fn network_gradients_on_small_rasters() {
    for case in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let arch = Architecture { h: 6, w: 6, conv1: rng.random_range(2..5), conv2: rng.random_range(2..5) };
        let params: Vec<f64> = (0..arch.num_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = randv(&mut rng, arch.input_len());
        let target: Vec<f64> = (0..arch.output_len()).map(|_| rng.random_range(0.0..2.0)).collect();
        let mask: Vec<bool> = (0..arch.output_len()).map(|_| rng.random_bool(0.8)).collect();
        let loss = |p: &[f64]| masked_mse(&forward(&arch, p, &x).out, &target, &mask).0;
        let trace = forward(&arch, &params, &x);
        let (_, dout) = masked_mse(&trace.out, &target, &mask);
        let grad = backward(&arch, &params, &x, &trace, &dout);
        let err = check(&params, &grad, loss);
        assert!(err < TOL, "case {case}: {err}");
    }
}
