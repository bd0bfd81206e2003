#![allow(dead_code)]

use std::path::{Path, PathBuf};

/// A small four-stage run: search and improve through the evaluator, a
/// four-round prune of a random checkpoint and an exit tuned on a synthetic
/// eval set. `evaluator` is a shell command, or absent for in-process use.
pub fn smoke_config(evaluator: Option<&str>) -> serde_json::Value {
    let mut cfg = serde_json::json!({
        "model": "builtin:baseline",
        "seed": 7,
        "search": {
            "space": {
                "phi": {"type": "real", "lo": 0.0, "hi": 1.0},
                "alpha": {"type": "real", "lo": 1.0, "hi": 1.4},
                "blocks.0.k": {"type": "choice", "values": [3, 5]}
            },
            "trials": 12,
            "warmup": 6,
            "fitness": {"thres": 0.02}
        },
        "improve": {
            "methods": [
                {"name": "cosine-lr", "category": "general-training", "config": "effect=0.004"},
                {"name": "mixup", "category": "general-training", "config": "effect=0.006"},
                {"name": "swish", "category": "structural", "config": "effect=-0.002"},
                {"name": "label-smoothing", "category": "loss-related", "config": "effect=0.003"}
            ],
            "repeats": 2
        },
        "prune": {"schedule": [0.1, 0.3, 0.5, 0.64], "retrain": true},
        "exit": {
            "eval": {"synthetic": {"samples": 2000, "classes": 100, "skill": [8.0, 12.0], "seed": 3}},
            "accuracy_floor": 0.78
        }
    });
    if let Some(e) = evaluator {
        cfg["evaluator"] = e.into();
    }
    cfg
}

pub fn write_config(dir: &Path, cfg: &serde_json::Value) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

/// Every file under `root` with its contents, keyed by relative path.
pub fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
