//! Model-based search over scaling coefficients of the baseline with an
//! in-process stand-in evaluator and an op-score budget.

use sipa::model::micronet_baseline;
use sipa::pipeline::SurrogateEvaluator;
use sipa::search::{smbo_search, Dim, FitnessParams, Metric, ScalingObjective, SearchConfig, SearchSpace};

fn main() -> anyhow::Result<()> {
    let space = SearchSpace::new([
        ("phi".to_string(), Dim::Real { lo: 0.0, hi: 2.0 }),
        ("alpha".to_string(), Dim::Real { lo: 1.0, hi: 1.4 }),
        ("beta".to_string(), Dim::Real { lo: 1.0, hi: 1.2 }),
        ("gamma".to_string(), Dim::Real { lo: 1.0, hi: 1.2 }),
        ("blocks.2.k".to_string(), Dim::Choice { values: vec![3.0, 5.0] }),
        ("blocks.4.r".to_string(), Dim::Int { lo: 1, hi: 3 }),
    ])?;
    let objective = ScalingObjective {
        base: micronet_baseline(),
        evaluator: &SurrogateEvaluator,
        rules: Default::default(),
        metric: Metric::OpScore,
    };
    let fit = FitnessParams {
        thres: 0.02,
        ..FitnessParams::default()
    };
    let cfg = SearchConfig {
        trials: 40,
        warmup: 10,
        seed: 3,
        jobs: 4,
        ..SearchConfig::default()
    };
    let out = smbo_search(&space, &objective, &cfg, &fit, vec![], &mut |t| {
        println!(
            "trial {:>2}: phi {:.3}, alpha {:.3}, accuracy {:.4}, op score {:.5}, fitness {:.4}",
            t.index,
            t.point["phi"],
            t.point["alpha"],
            t.accuracy.unwrap_or(f64::NAN),
            t.resource.unwrap_or(f64::NAN),
            t.fitness.unwrap_or(f64::NAN)
        );
        Ok(())
    })?;
    let best = out.best.expect("at least one trial succeeds");
    println!("best trial {}: {:?}", best.index, best.point);
    Ok(())
}
