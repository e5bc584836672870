//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape's backward pass: it only ever calls
//! the forward evaluation it is given. Test suites build a scalar function
//! of flat parameter vectors and compare analytic adjoints against this.

use crate::scalar::Scalar;

/// Central differences with step `h` for every coordinate of every input.
/// `f` must be a pure function of the inputs.
pub fn numeric_gradient<S: Scalar>(
    f: &dyn Fn(&[Vec<S>]) -> S,
    inputs: &[Vec<S>],
    h: f64,
) -> Vec<Vec<S>> {
    let hs = S::from_f64c(h);
    let two_h = S::from_f64c(2.0 * h);
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = vec![S::zero(); inputs[p].len()];
        for i in 0..inputs[p].len() {
            let mut plus = inputs.to_vec();
            plus[p][i] = plus[p][i] + hs;
            let mut minus = inputs.to_vec();
            minus[p][i] = minus[p][i] - hs;
            g[i] = (f(&plus) - f(&minus)) / two_h;
        }
        grads.push(g);
    }
    grads
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries do not blow up the ratio.
pub fn max_rel_error<S: Scalar>(analytic: &[S], numeric: &[S]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let a = a.to_f64c();
        let n = n.to_f64c();
        let denom = a.abs().max(n.abs()).max(1e-4);
        let rel = (a - n).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
