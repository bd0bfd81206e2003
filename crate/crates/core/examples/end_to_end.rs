//! All four stages on the baseline with the in-process stand-in evaluator.
//! Artifacts go to the directory given as the first argument (default
//! `sipa-example-run`).

use sipa::pipeline::{render_records, run_pipeline_with, RunConfig, SurrogateEvaluator};
use std::path::{Path, PathBuf};

const CONFIG: &str = r#"{
    "model": "builtin:baseline",
    "seed": 1,
    "search": {
        "space": {
            "phi": {"type": "real", "lo": 0.0, "hi": 1.0},
            "alpha": {"type": "real", "lo": 1.0, "hi": 1.4}
        },
        "trials": 16,
        "warmup": 6,
        "fitness": {"thres": 0.02}
    },
    "improve": {
        "methods": [
            {"name": "mixup", "category": "general-training", "config": "effect=0.02"},
            {"name": "ghost-bn", "category": "structural", "config": "effect=-0.003"}
        ]
    },
    "prune": {"schedule": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.64], "retrain": true},
    "exit": {
        "eval": {"synthetic": {"samples": 5000, "classes": 100, "skill": [8.0, 12.0], "seed": 2}},
        "accuracy_floor": 0.78
    }
}"#;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| "sipa-example-run".into());
    let cfg: RunConfig = serde_json::from_str(CONFIG)?;
    let summary = run_pipeline_with(&cfg, Path::new("."), &out, Some(&SurrogateEvaluator))?;
    print!("{}", render_records(&summary.records));
    println!("artifacts in {}", out.display());
    Ok(())
}
