//! Prices an early exit on a synthetic eval set: a threshold sweep, the tuned
//! plan under an accuracy floor, and the exit head's risk-coverage curve.

use sipa::cost::{exit_costs, CountingRules};
use sipa::exit::{risk_coverage, sweep, tune_threshold, EvalSet};
use sipa::model::micronet_baseline;
use std::collections::BTreeMap;

fn main() -> anyhow::Result<()> {
    let spec = micronet_baseline();
    let costs = exit_costs(&spec, 0, &CountingRules::default(), &BTreeMap::new())?.costs;
    println!(
        "main {:.1}M ops, exit path {:.1}M ({:.1}%), module {:.2}M",
        costs.c_main / 1e6,
        costs.c_path / 1e6,
        100.0 * costs.c_path / costs.c_main,
        costs.c_overhead / 1e6
    );
    let set = EvalSet::synthetic(10_000, 100, &[8.0, 12.0], 1);
    println!(
        "head accuracy {:.4}, main accuracy {:.4}",
        set.accuracy(0),
        set.accuracy(1)
    );
    for p in sweep(&set, 0, &[0.85, 0.88, 0.92], &costs)? {
        println!(
            "threshold {:.2}: exit ratio {:.4}, accuracy {:.4}, op score {:.6}",
            p.threshold, p.exit_ratio, p.total_accuracy, p.op_score
        );
    }
    let plan = tune_threshold(&set, 0, &costs, set.accuracy(1) - 0.005)?;
    println!("tuned: {}", serde_json::to_string(&plan)?);
    let curve = risk_coverage(&set, 0)?;
    for frac in [0.1, 0.25, 0.5, 0.75, 1.0] {
        let p = curve
            .iter()
            .find(|p| p.coverage >= frac)
            .unwrap_or(curve.last().unwrap());
        println!(
            "coverage {:.2}: risk {:.4} (confidence >= {:.4})",
            p.coverage, p.risk, p.threshold
        );
    }
    Ok(())
}
