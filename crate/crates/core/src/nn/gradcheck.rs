//! Central-finite-difference verification of analytic gradients.
//!
//! Used by the module tests and the acceptance suite: any scalar-valued
//! graph builder over a [`ParamSet`] can be checked coordinate-by-coordinate
//! at double precision. Shapes should be miniature — the cost is two forward
//! passes per scalar parameter.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use super::params::ParamSet;
use super::tape::{Tape, Var};

/// Builds a scalar readout from leaves registered for `params`.
/// Must be deterministic (run dropout in eval mode).
pub type ScalarGraph<'a> = &'a dyn Fn(&Tape, &BTreeMap<String, Var>) -> Var;

/// Worst relative error between analytic and central-finite-difference
/// gradients over every coordinate of every tensor in `params`.
///
/// Relative error is `|a − fd| / max(|a|, |fd|)`, skipping coordinates where
/// both magnitudes fall below `1e-7` (agreeing zeros carry no information).
pub fn max_relative_gradient_error(params: &ParamSet, build: ScalarGraph<'_>) -> f64 {
    let tape = Tape::new();
    let leaves = params.leaves(&tape);
    let root = build(&tape, &leaves);
    let grads = tape.backward(root);

    let eval = |p: &ParamSet| -> f64 {
        let t = Tape::new();
        let l = p.leaves(&t);
        let r = build(&t, &l);
        t.scalar(r)
    };

    let mut worst: f64 = 0.0;
    for (name, tensor) in params.iter() {
        let analytic = grads
            .get(leaves[name])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(tensor.shape())));
        for i in 0..tensor.len() {
            let base = tensor.as_slice().expect("standard layout")[i];
            let h = 1e-5 * base.abs().max(1.0);
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            let denom = a.abs().max(fd.abs());
            if denom > 1e-7 {
                worst = worst.max((a - fd).abs() / denom);
            }
        }
    }
    worst
}
