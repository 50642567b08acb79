//! Shared finite-difference gradient checker.
#![allow(dead_code)]

pub mod suite;

use qmamba_core::params::{Binding, ParamStore};
use qmamba_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

/// Relative error with a floor so that two tiny gradients compare by
/// absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Scalarises `out` as `sum(out * r)` with a fixed random `r`, so every
/// output element carries a distinct weight.
pub fn project(tape: &mut Tape, out: Var) -> Var {
    let shape = tape.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return tape.sum(out);
    }
    let r = tape.constant(random(&shape, -1.0, 1.0, 99));
    let m = tape.mul(out, r).unwrap();
    tape.sum(m)
}

/// Worst relative error between back-propagated and central-difference
/// gradients of `f` with respect to every element of every input.
pub fn check_op(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vs).unwrap();
        let l = project(&mut t, out);
        t.value(l).item()
    };
    let mut t = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let out = f(&mut t, &vs).unwrap();
    let l = project(&mut t, out);
    t.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vs.iter().enumerate() {
        let g = t.grad(*v).unwrap().clone();
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

/// Checks `fraction` of all scalar parameters of `store` (at least one
/// per tensor) against central differences of `loss`. Returns the worst
/// error and the number of entries checked.
pub fn check_params(
    store: &ParamStore,
    fraction: f64,
    seed: u64,
    loss: impl Fn(&mut Tape, &Binding) -> Result<Var>,
) -> (f64, usize, String) {
    let value = |s: &ParamStore| {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let l = loss(&mut t, &b).unwrap();
        t.value(l).item()
    };
    let mut t = Tape::new();
    let bind = store.bind(&mut t, true);
    let l = loss(&mut t, &bind).unwrap();
    t.backward(l).unwrap();
    let grads = store.collect_grads(&t, &bind);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let (mut worst, mut checked, mut worst_name) = (0.0f64, 0usize, String::new());
    for ((id, p), g) in store.iter().zip(&grads) {
        let g = g.as_ref().expect("all parameters trainable");
        let n = p.value.len();
        let picks = ((n as f64 * fraction).round() as usize).max(1);
        for _ in 0..picks {
            let i = rng.gen_range(0..n);
            let orig = p.value.data()[i];
            work.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let up = value(&work);
            work.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let down = value(&work);
            work.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(g.data()[i], (up - down) / (2.0 * FD_STEP));
            if e > worst {
                worst = e;
                worst_name = format!("{}[{i}]", p.name);
            }
            checked += 1;
        }
    }
    (worst, checked, worst_name)
}

/// Replaces exact zeros (zero-initialised projections and heads) with
/// small random values so every gradient path is exercised.
pub fn perturb_zeros(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
}
