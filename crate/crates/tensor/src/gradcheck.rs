//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! every backward closure it is used to validate.

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare analytic gradients of `f` w.r.t. every input against central
/// differences with step `h`. `f` must return a scalar.
///
/// At most `max_per_input` coordinates per input are probed (evenly spaced),
/// which keeps large parameter tensors affordable. Relative errors use `floor`
/// as the smallest denominator so entries with a vanishing gradient are judged
/// on absolute error.
pub fn check_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    f: impl Fn(&mut Tape<T>, &[Var]) -> Var,
    h: f64,
    floor: f64,
    max_per_input: usize,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).expect("gradcheck: backward failed");
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor<T>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().to_f64()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst_input: 0, worst_index: 0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = T::from_f64(orig.to_f64() + h);
            let plus = eval(&probe);
            probe[i].data_mut()[j] = T::from_f64(orig.to_f64() - h);
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j].to_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_input = i;
                report.worst_index = j;
            }
        }
    }
    report
}

/// Reduce an arbitrary output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct direction.
pub fn random_projection<T: Scalar>(tape: &mut Tape<T>, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let weights = Tensor::from_fn(&shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        T::from_f64(((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
    });
    let w = tape.constant(weights);
    let p = tape.mul(y, w).expect("projection shape");
    tape.sum(p)
}
