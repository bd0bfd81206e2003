//! Renders a per-stage score table from counted values. The scores and the
//! Total column are always recomputed from the counts.

use sipa::cost::CostReport;
use sipa::pipeline::{render_records, Stage, StageRecord};

fn main() {
    // (stage, accuracy, parameters, operations)
    let rows = [
        (Stage::Searching, 0.7347, 0.238e6, 89_000_000u64),
        (Stage::Improving, 0.8047, 0.238e6, 89_000_000),
        (Stage::Pruning, 0.8005, 0.103e6, 34_000_000),
        (Stage::Accelerating, 0.8004, 0.109e6, 29_000_000),
    ];
    let records: Vec<StageRecord> = rows
        .iter()
        .map(|&(stage, acc, params, ops)| {
            StageRecord::new(
                stage,
                Some(acc),
                CostReport::from_totals(params, ops / 2, ops - ops / 2),
            )
        })
        .collect();
    print!("{}", render_records(&records));
}
