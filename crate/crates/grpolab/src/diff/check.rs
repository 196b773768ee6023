//! Gradient checking against central finite differences.
//!
//! The finite-difference path goes through `evaluate` only, never through
//! `gradient`, so it is an independent oracle for every backward rule. The
//! comparison metric is `|a - n| / max(|a|, |n|, 0.001)`; the floor keeps
//! the ratio meaningful when both sides are near zero, where central
//! differences are dominated by cancellation noise.

use std::collections::BTreeMap;

use super::graph::{Bindings, ExprGraph};
use super::tensor::Tensor;
use super::DiffResult;

/// Default probe step for central differences.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Default maximum relative error tolerated by [`check_gradient`].
pub const DEFAULT_FD_TOLERANCE: f64 = 1e-4;

const REL_ERROR_FLOOR: f64 = 1e-3;

/// Per-leaf outcome of a gradient comparison.
#[derive(Debug, Clone)]
pub struct LeafCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_leaf: BTreeMap<String, LeafCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Compares two gradient maps entry by entry. Exposed so tests can feed
    /// a deliberately corrupted analytic gradient through the same metric.
    pub fn from_gradients(
        analytic: &BTreeMap<String, Tensor>,
        numeric: &BTreeMap<String, Tensor>,
        tolerance: f64,
    ) -> Self {
        let mut per_leaf = BTreeMap::new();
        let mut max_rel_error: f64 = 0.0;
        for (name, a) in analytic {
            let n = &numeric[name];
            let mut leaf = LeafCheck {
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                worst_index: 0,
            };
            for (i, (av, nv)) in a.data().iter().zip(n.data()).enumerate() {
                let abs = (av - nv).abs();
                let rel = abs / av.abs().max(nv.abs()).max(REL_ERROR_FLOOR);
                if rel > leaf.max_rel_error {
                    leaf.max_rel_error = rel;
                    leaf.worst_index = i;
                }
                leaf.max_abs_error = leaf.max_abs_error.max(abs);
            }
            max_rel_error = max_rel_error.max(leaf.max_rel_error);
            per_leaf.insert(name.clone(), leaf);
        }
        Self {
            per_leaf,
            max_rel_error,
            tolerance,
            passed: max_rel_error < tolerance,
        }
    }
}

/// Central finite-difference gradient of the scalar root with respect to one
/// leaf: entry `i` is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient(
    graph: &ExprGraph,
    bindings: &Bindings,
    leaf: &str,
    step: f64,
) -> DiffResult<Tensor> {
    let base = &bindings[leaf];
    let mut probe = bindings.clone();
    let mut out = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let original = base.data()[i];
        probe.get_mut(leaf).unwrap().data_mut()[i] = original + step;
        let plus = graph.evaluate(&probe)?.scalar_value().expect("scalar root");
        probe.get_mut(leaf).unwrap().data_mut()[i] = original - step;
        let minus = graph.evaluate(&probe)?.scalar_value().expect("scalar root");
        probe.get_mut(leaf).unwrap().data_mut()[i] = original;
        out.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(out)
}

/// Runs the analytic gradient and the finite-difference oracle over `wrt`
/// and reports the worst relative error.
pub fn check_gradient(
    graph: &ExprGraph,
    bindings: &Bindings,
    wrt: &[&str],
    step: f64,
    tolerance: f64,
) -> DiffResult<GradCheckReport> {
    let analytic = graph.gradient(bindings, wrt)?;
    let mut numeric = BTreeMap::new();
    for name in wrt {
        numeric.insert((*name).to_string(), fd_gradient(graph, bindings, name, step)?);
    }
    Ok(GradCheckReport::from_gradients(&analytic, &numeric, tolerance))
}
