//! Verifies the reverse-mode gradients of the policy's log-probability
//! graph against a central finite-difference oracle.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use grpolab::diff::check_gradient;
use grpolab::{PolicyConfig, PolicyParameters};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = PolicyConfig {
        vocab_size: 7,
        max_output_len: 4,
        prompt_feature_dim: 5,
        embed_dim: 6,
        hidden_dim: 4,
        init_scale: 0.4,
        seed: 11,
    };
    let params = PolicyParameters::init(&config)?;

    // A weighted sum of per-token log-probabilities: the same scalar root
    // the objectives differentiate, here with arbitrary weights.
    let features = vec![0.9, -0.3, 0.0, 0.25, -1.1];
    let tokens = vec![3, 5, 1, 0];
    let weights = vec![1.0, -0.7, 0.4, 2.0];
    let (graph, bindings) = params.weighted_logprob_graph(&features, &tokens, &weights)?;

    let names: Vec<&str> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let report = check_gradient(&graph, &bindings, &names, 1e-5, 1e-4)?;

    println!("parameter            max |analytic - numeric|   max relative error");
    for (name, leaf) in &report.per_leaf {
        println!(
            "{name:<20} {:>24.3e} {:>21.3e}",
            leaf.max_abs_error, leaf.max_rel_error
        );
    }
    println!(
        "\nworst relative error {:.3e} against tolerance {:.0e}: {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "PASS" } else { "FAIL" }
    );
    assert!(report.passed);
    Ok(())
}
