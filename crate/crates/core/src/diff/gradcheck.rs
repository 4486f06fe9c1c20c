//! Central finite-difference gradient checking.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Step used by [`check_gradients`].
pub const FD_STEP: f32 = 1e-3;

/// Compares the tape gradient of the scalar produced by `f` against central
/// differences with step [`FD_STEP`], perturbing every entry of every input.
/// Returns the relative error `‖g_a − g_n‖ / max(‖g_a‖, ‖g_n‖)` of the
/// gradients of all inputs taken together, so an input whose true gradient
/// is zero does not turn roundoff into a failure.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> f32
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar finite loss");
    let eval = |ins: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x)).collect();
        let l = f(&mut t, &vs);
        t.value(l)[0] as f64
    };
    let (mut all_analytic, mut all_numeric) = (Vec::new(), Vec::new());
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.to_vec())
            .unwrap_or(vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0f32; analytic.len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            *n = ((plus - minus) / (2.0 * FD_STEP as f64)) as f32;
        }
        all_analytic.extend(analytic);
        all_numeric.extend(numeric);
    }
    relative_error(&all_analytic, &all_numeric)
}

pub fn relative_error(a: &[f32], b: &[f32]) -> f32 {
    let diff: f32 = libm::sqrtf(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
    let na = libm::sqrtf(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrtf(b.iter().map(|x| x * x).sum());
    diff / na.max(nb).max(1e-6)
}

/// `Σ w ⊙ x` with fixed random weights, turning any output into a scalar
/// whose gradient touches every entry.
pub fn random_projection(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let w = tape
        .constant_from(&shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .expect("shape taken from x");
    let p = tape.mul(x, w).expect("same shape");
    tape.sum(p)
}

/// Tensor with entries uniform in `[-scale, scale)`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("positive extents")
}
