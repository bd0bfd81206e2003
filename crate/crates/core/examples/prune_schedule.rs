//! Iterative magnitude pruning of a random baseline checkpoint over a
//! fourteen-round schedule, with the storage score after each round.

use sipa::checkpoint::{Checkpoint, DType};
use sipa::model::{expand, micronet_baseline};
use sipa::pipeline::score_model;
use sipa::prune::{run_schedule, IdentityRetrain, PruneConfig, PruneSchedule};

fn main() -> anyhow::Result<()> {
    let spec = micronet_baseline();
    let ckpt = Checkpoint::from_graph(&expand(&spec)?, DType::F16, 42);
    // 10% steps to 50%, then 2.5% steps to 60%, then 2% steps to 70%
    let sched = PruneSchedule::from_increments(&[(0.10, 5), (0.025, 4), (0.02, 5)])?;
    let cfg = PruneConfig::default();
    let out = run_schedule(&ckpt, &sched, &cfg, &mut IdentityRetrain)?;
    for rec in &out.history {
        println!(
            "round {:>2}: target {:.3}, sparsity {:.4}",
            rec.round, rec.target, rec.sparsity
        );
    }
    let rules = Default::default();
    let dense = score_model(&spec, None, &rules)?;
    let sparse = score_model(&spec, Some(&out.checkpoint), &rules)?;
    println!(
        "params {:.4}M -> {:.4}M, ops {:.4}B -> {:.4}B",
        dense.params_effective / 1e6,
        sparse.params_effective / 1e6,
        dense.ops_total as f64 / 1e9,
        sparse.ops_total as f64 / 1e9
    );
    Ok(())
}
