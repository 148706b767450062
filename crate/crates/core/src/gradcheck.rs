//! Central finite-difference gradient checking against the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::tensor::Matrix;

/// Step for central differences in 64-bit precision.
pub const FD_STEP: f64 = 1e-6;

/// Gradient norms below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per input, `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, REL_FLOOR)`.
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error between two gradient tensors.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic.zip_map(numeric, |a, b| a - b).norm();
    diff / analytic.norm().max(numeric.norm()).max(REL_FLOOR)
}

/// Checks `d(⟨f(inputs), R⟩)/d inputs` where `R` is a fixed random projection, so every
/// output element participates even when `f` is not scalar-valued.
pub fn check_gradients<F>(inputs: &[Matrix], f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Matrix], projection: Option<&Matrix>| -> (Tape, Vec<Var>, Var, Matrix) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let proj = projection
            .cloned()
            .unwrap_or_else(|| Matrix::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(0x6ead)));
        let pv = tape.constant(proj.clone());
        let prod = tape.mul(out, pv);
        let loss = tape.sum(prod);
        (tape, vars, loss, proj)
    };

    let (mut tape, vars, loss, proj) = eval(inputs, None);
    tape.backward(loss);
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad_or_zero(v)).collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        for k in 0..input.len() {
            let orig = input.data()[k];
            work[i].data_mut()[k] = orig + FD_STEP;
            let (t, _, l, _) = eval(&work, Some(&proj));
            let plus = t.value(l).item();
            work[i].data_mut()[k] = orig - FD_STEP;
            let (t, _, l, _) = eval(&work, Some(&proj));
            let minus = t.value(l).item();
            work[i].data_mut()[k] = orig;
            numeric.data_mut()[k] = (plus - minus) / (2.0 * FD_STEP);
        }
        per_input.push(relative_error(&analytic[i], &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    GradCheckReport { per_input, max_rel_error }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // Custom op claiming d(x^2)/dx = x instead of 2x.
        let r = check_gradients(&[Matrix::row_vector(&[1.0, -2.0, 3.0])], |t, v| {
            let val = t.value(v[0]).map(|x| x * x);
            t.custom(&[v[0]], val, Box::new(|g, _, p| vec![Some(g.zip_map(p[0], |g, x| g * x))]))
        });
        assert!(r.max_rel_error > 0.1, "{r:?}");
    }

    #[test]
    fn exact_for_quadratic() {
        let r = check_gradients(&[Matrix::row_vector(&[1.0, -2.0, 3.0])], |t, v| t.mul(v[0], v[0]));
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}
