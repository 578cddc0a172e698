//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward pass of the function under test,
//! so it stays independent of the backward implementation it validates.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_coords: usize,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Checks d(scalar f)/d(inputs) against central differences in f64.
///
/// `f` rebuilds the graph from leaf vars each call. At most `max_coords`
/// coordinates per input are probed (all of them if 0).
pub fn check_scalar_fn<F>(f: F, inputs: &[Tensor<f64>], max_coords: usize) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        tape.set_grad_enabled(false);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    assert_eq!(tape.value(out).numel(), 1, "gradcheck target must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = if max_coords == 0 || n <= max_coords { 1 } else { n / max_coords };
        let mut idx = ti % stride.max(1);
        while idx < n {
            let x = input.data()[idx];
            let h = 1e-5 * (1.0 + x.abs());
            work[ti].data_mut()[idx] = x + h;
            let fp = eval(&work);
            work[ti].data_mut()[idx] = x - h;
            let fm = eval(&work);
            work[ti].data_mut()[idx] = x;
            let fd = (fp - fm) / (2.0 * h);
            let an = analytic[ti].data()[idx];
            let e = rel_err(an, fd);
            if e > max_rel {
                max_rel = e;
            }
            checked += 1;
            idx += stride.max(1);
        }
    }
    GradCheckReport { max_rel_err: max_rel, checked_coords: checked }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let report = check_scalar_fn(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]).unwrap();
                tape.sum_all(sq)
            },
            &[x],
            0,
        );
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn detects_wrong_gradient() {
        // forward is x^2 but "backward" pretends it's x by routing the sum
        // through a detached square: gradient w.r.t. x is then wrong.
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let report = check_scalar_fn(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0]).unwrap();
                let frozen = tape.detach(sq);
                let half = tape.scale(vars[0], 0.0);
                let joined = tape.add(frozen, half).unwrap();
                tape.sum_all(joined)
            },
            &[x],
            0,
        );
        assert!(report.max_rel_err > 0.5, "should flag the bogus gradient");
    }
}
