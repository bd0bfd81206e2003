//! Counts the reference WRN-28-10 and shows where its operations go.

use sipa::cost::{count, score, CountingRules, TensorStorage};
use sipa::model::{expand, wrn28_10, Stage};
use std::collections::BTreeMap;

fn main() -> anyhow::Result<()> {
    let graph = expand(&wrn28_10())?;
    let report = count(&graph, &CountingRules::default(), &TensorStorage::default())?;
    let s = score(&report);
    println!("weight layers: {}", graph.weight_layer_count());
    println!(
        "parameters:    {} ({:.4}M)",
        report.params_raw,
        report.params_effective / 1e6
    );
    println!("mults / adds:  {} / {}", report.mults, report.adds);
    println!("scores:        param {:.6}, op {:.6}", s.param_score, s.op_score);

    let mut by_stage: BTreeMap<String, u64> = BTreeMap::new();
    for (layer, cost) in graph.layers.iter().zip(&report.per_layer) {
        let key = match layer.stage {
            Stage::Block(j) => format!("block {j}"),
            other => format!("{other:?}").to_lowercase(),
        };
        *by_stage.entry(key).or_default() += cost.mults + cost.adds;
    }
    for (stage, ops) in by_stage {
        println!(
            "  {stage:<12} {:>6.2}% of ops",
            100.0 * ops as f64 / report.ops_total as f64
        );
    }
    Ok(())
}
