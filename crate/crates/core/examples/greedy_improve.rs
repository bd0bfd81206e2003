//! Greedy forward selection of training methods against an evaluator whose
//! accuracy is additive in the chosen methods plus a little seeded noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sipa::search::{greedy_improve, Category, EvalError, EvalRequest, MethodCandidate};

fn main() -> anyhow::Result<()> {
    let table = [
        ("cosine-lr", Category::GeneralTraining, 0.012),
        ("mixup", Category::GeneralTraining, 0.020),
        ("autoaugment", Category::GeneralTraining, 0.015),
        ("swish", Category::Structural, 0.006),
        ("ghost-bn", Category::Structural, -0.004),
        ("label-smoothing", Category::LossRelated, 0.005),
        ("dropout", Category::Other, -0.010),
    ];
    let methods: Vec<MethodCandidate> = table
        .iter()
        .map(|(name, category, _)| MethodCandidate {
            name: name.to_string(),
            category: *category,
            config: String::new(),
        })
        .collect();
    let evaluator = |req: &EvalRequest| -> Result<f64, EvalError> {
        let names = req.payload["methods"].as_array().cloned().unwrap_or_default();
        let gain: f64 = names
            .iter()
            .map(|n| table.iter().find(|t| t.0 == n.as_str().unwrap()).map_or(0.0, |t| t.2))
            .sum();
        let noise = ChaCha8Rng::seed_from_u64(req.seed).random_range(-0.001..0.001);
        Ok(0.73 + gain + noise)
    };
    let out = greedy_improve(&methods, &evaluator, 3, 0.0, 11)?;
    println!("baseline {:.4}", out.baseline_mean);
    for d in &out.decisions {
        let verdict = if d.accepted { "keep" } else { "drop" };
        println!("{verdict} {:<16} {:.4} vs {:.4}", d.method, d.mean, d.reference);
    }
    println!(
        "accepted {:?}: {:.4} after {} evaluations",
        out.accepted, out.final_mean, out.evaluations
    );
    Ok(())
}
