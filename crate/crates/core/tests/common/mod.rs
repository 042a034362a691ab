//! Finite-difference gradient oracle shared by the integration tests.
#![allow(dead_code)]

use flex_core::autodiff::{DiffArray, ParamStore, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_array(shape: &[usize], seed: u64) -> DiffArray {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Elementwise comparison used by every gradient check: relative error
/// against the larger magnitude, floored so that near-zero gradients are
/// judged on an absolute scale.
pub fn rel_err(analytic: f32, numeric: f32, floor: f32) -> f32 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Five-point central difference: truncation error is fourth order in `eps`,
/// so a step large enough to sit well above f32 rounding noise stays accurate.
pub fn stencil(eval: impl Fn(f32) -> f64, eps: f32) -> f32 {
    let h = eps as f64;
    ((-eval(2.0 * eps) + 8.0 * eval(eps) - 8.0 * eval(-eps) + eval(-2.0 * eps)) / (12.0 * h)) as f32
}

/// Central differences of `f` with respect to every element of every input.
/// Returns (analytic, numeric) pairs flattened across inputs.
pub fn check_inputs<F>(inputs: &[DiffArray], eps: f32, f: F) -> Vec<(f32, f32)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::detached();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone().with_grad())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut pairs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let g = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let eval = |delta: f32| {
                let mut perturbed: Vec<DiffArray> = inputs.to_vec();
                perturbed[i].data_mut()[j] += delta;
                let mut t = Tape::detached();
                let vs: Vec<Var> = perturbed.into_iter().map(|a| t.leaf(a)).collect();
                let l = f(&mut t, &vs);
                t.item(l) as f64
            };
            let numeric = stencil(eval, eps);
            pairs.push((g[j], numeric));
        }
    }
    pairs
}

/// Central differences with respect to parameters of a store; checks up to
/// `per_param` evenly spaced entries of each parameter.
pub fn check_params<F>(store: &ParamStore, eps: f32, per_param: usize, f: F) -> Vec<(String, f32, f32)>
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape);
    tape.backward(loss).unwrap();
    let grads = tape.param_grads();
    drop(tape);
    let mut out = Vec::new();
    for (id, g) in grads {
        let p = store.get(id);
        let n = p.value.len();
        let step = (n / per_param.max(1)).max(1);
        for j in (0..n).step_by(step).take(per_param) {
            let eval = |delta: f32| {
                let mut s = store.clone();
                s.get_mut(id).value.data_mut()[j] += delta;
                let mut t = Tape::new(&s);
                let l = f(&mut t);
                t.item(l) as f64
            };
            let numeric = stencil(eval, eps);
            out.push((format!("{}[{}]", p.name, j), g[j], numeric));
        }
    }
    out
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights so every
/// element gets a distinct, nonzero upstream gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let w = random_array(&shape, seed);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
