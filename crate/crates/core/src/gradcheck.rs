//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes; it never touches the
//! tape's backward machinery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of the scalar `f(inputs)` with central differences.
///
/// `f` receives the tape and one [`Var`] per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").to_vec())
        .collect();

    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let n = (plus - minus) / (2.0 * step);
            report.max_rel_err = report.max_rel_err.max(rel_err(a, n, 1e-6));
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Reduces `out` to a scalar through a fixed random weighting, so every
/// output element contributes a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = uniform(&shape, -1.0, 1.0, &mut seeded(seed));
    let wv = tape.constant(w);
    let p = tape.mul(out, wv)?;
    Ok(tape.sum(p))
}

/// Like [`check`], for a module: differentiates w.r.t. every parameter in
/// `store` and every tensor in `inputs`.
///
/// Both sides run in training mode with the same context seed, so any
/// random selection is identical across evaluations.
pub fn check_module<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Ctx<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |st: &ParamStore<f64>, vals: &[Tensor<f64>]| -> Result<f64> {
        let mut ctx = Ctx::new(Mode::Train, false, 0);
        let vars: Vec<Var> = vals.iter().map(|t| ctx.input(t.clone())).collect();
        let out = f(&mut ctx, st, &vars)?;
        Ok(ctx.tape.value(out).data()[0])
    };

    let mut ctx = Ctx::new(Mode::Train, true, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone().with_grad(true))).collect();
    let out = f(&mut ctx, store, &vars)?;
    ctx.tape.backward(out)?;
    let param_grads = ctx.param_grads(store);
    let input_grads: Vec<Vec<f64>> = vars.iter().map(|&v| ctx.tape.grad(v).expect("input grad").to_vec()).collect();

    let mut report = GradReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    let mut record = |a: f64, n: f64| {
        report.max_rel_err = report.max_rel_err.max(rel_err(a, n, 1e-6));
        report.max_abs_err = report.max_abs_err.max((a - n).abs());
        report.checked += 1;
    };

    let mut work = store.clone();
    for (pi, grad) in param_grads.iter().enumerate() {
        let id = ParamId(pi);
        let n_el = store.get(id).value.len();
        for ei in 0..n_el {
            let a = grad.as_ref().map_or(0.0, |g| g[ei]);
            let orig = work.get(id).value.data()[ei];
            work.get_mut(id).value.data_mut()[ei] = orig + step;
            let plus = eval(&work, inputs)?;
            work.get_mut(id).value.data_mut()[ei] = orig - step;
            let minus = eval(&work, inputs)?;
            work.get_mut(id).value.data_mut()[ei] = orig;
            record(a, (plus - minus) / (2.0 * step));
        }
    }
    let mut vals = inputs.to_vec();
    for (ti, grads) in input_grads.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let orig = vals[ti].data()[ei];
            vals[ti].data_mut()[ei] = orig + step;
            let plus = eval(store, &vals)?;
            vals[ti].data_mut()[ei] = orig - step;
            let minus = eval(store, &vals)?;
            vals[ti].data_mut()[ei] = orig;
            record(a, (plus - minus) / (2.0 * step));
        }
    }
    Ok(report)
}
