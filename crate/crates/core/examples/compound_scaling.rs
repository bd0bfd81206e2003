//! Scales the built-in baseline along depth, width and resolution together.

use sipa::cost::{count, score, CountingRules, TensorStorage};
use sipa::model::{apply_compound_scaling, constraint_residual, expand, micronet_baseline, ScalingCoefficients};

fn main() -> anyhow::Result<()> {
    let base = micronet_baseline();
    let rules = CountingRules::default();
    println!(
        "{:>4} {:>8} {:>10} {:>10} {:>10}",
        "phi", "input", "params", "ops", "total"
    );
    for phi in [0.0, 0.5, 1.0, 1.5, 2.0] {
        let c = ScalingCoefficients::new(1.2, 1.1, 1.15, phi);
        let spec = apply_compound_scaling(&base, &c);
        let graph = expand(&spec)?;
        let r = count(&graph, &rules, &TensorStorage::from_spec(&spec, &graph))?;
        println!(
            "{phi:>4} {:>8} {:>9.3}M {:>9.3}B {:>10.6}",
            format!("{}x{}", spec.input[0], spec.input[1]),
            r.params_effective / 1e6,
            r.ops_total as f64 / 1e9,
            score(&r).total
        );
    }
    let c = ScalingCoefficients::new(1.2, 1.1, 1.15, 1.0);
    println!("alpha * beta^2 * gamma^2 - 2 = {:+.4}", constraint_residual(&c));
    Ok(())
}
