use proptest::prelude::*;
use sipa::cost::ExitCosts;
use sipa::exit::{
    confidence, cross_entropy, risk_coverage, softmax, softsmoothing_grad, softsmoothing_loss, sweep, tune_threshold,
    EvalSet, ExitPlan, NO_EXIT,
};

/// Richardson-extrapolated central difference of `f` along coordinate `j`.
fn fd(f: &dyn Fn(&[f64]) -> f64, z: &[f64], j: usize) -> f64 {
    let d = |h: f64| {
        let mut a = z.to_vec();
        let mut b = z.to_vec();
        a[j] += h;
        b[j] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    };
    // stay clear of the kink where the two largest logits swap
    let mut s = z.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let h = 1e-3f64.min((s[0] - s[1]) / 4.0);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-300)
}

fn target_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        (0..k).prop_map(move |c| {
            let mut y = vec![0.0; k];
            y[c] = 1.0;
            y
        }),
        ((0..k), 0.01f64..0.3).prop_map(move |(c, eps)| {
            let mut y = vec![eps / k as f64; k];
            y[c] += 1.0 - eps;
            y
        }),
    ]
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::sample::select(vec![2usize, 10, 100])
        .prop_flat_map(|k| (prop::collection::vec(-4.0f64..4.0, k), target_strategy(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn gradient_matches_finite_differences((z, y) in case()) {
        let full = |v: &[f64]| softsmoothing_loss(v, &y);
        let c = confidence(&softmax(&z));
        let detached = |v: &[f64]| (1.0 + c) * cross_entropy(v, &y);
        let fd_full: Vec<f64> = (0..z.len()).map(|j| fd(&full, &z, j)).collect();
        let fd_det: Vec<f64> = (0..z.len()).map(|j| fd(&detached, &z, j)).collect();
        let g_full = softsmoothing_grad(&z, &y, false);
        let g_det = softsmoothing_grad(&z, &y, true);
        prop_assert!(rel_err(&g_full, &fd_full) < 1e-6, "full {}", rel_err(&g_full, &fd_full));
        prop_assert!(rel_err(&g_det, &fd_det) < 1e-6, "detached {}", rel_err(&g_det, &fd_det));

        // detached and full differ by H times the gradient of max softmax
        let conf = |v: &[f64]| confidence(&softmax(v));
        let h = cross_entropy(&z, &y);
        for j in 0..z.len() {
            let want = h * fd(&conf, &z, j);
            prop_assert!((g_full[j] - g_det[j] - want).abs() < 1e-8);
        }
    }

    #[test]
    fn loss_between_h_and_2h((z, y) in case()) {
        let h = cross_entropy(&z, &y);
        let l = softsmoothing_loss(&z, &y);
        prop_assert!(l >= h && l <= 2.0 * h + 1e-15);
    }

    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-500.0f64..500.0, 1..50)) {
        let p = softmax(&z);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let c = confidence(&p);
        prop_assert!(c >= 1.0 / z.len() as f64 - 1e-15 && c <= 1.0);
    }

    #[test]
    fn sweep_properties(seed in any::<u64>(), n in 1usize..300, k in 2usize..8) {
        let set = EvalSet::synthetic(n, k, &[1.5, 4.0], seed);
        let costs = ExitCosts::new(100.0, 30.0, 5.0);
        let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let plans = sweep(&set, 0, &grid, &costs).unwrap();
        for w in plans.windows(2) {
            prop_assert!(w[1].exit_ratio <= w[0].exit_ratio);
            prop_assert!(w[1].expected_ops >= w[0].expected_ops);
        }
        let ends = sweep(&set, 0, &[0.0, 1.5], &costs).unwrap();
        prop_assert_eq!(ends[0].exit_ratio, 1.0);
        prop_assert_eq!(ends[0].total_accuracy, set.accuracy(0));
        prop_assert_eq!(ends[1].exit_ratio, 0.0);
        prop_assert_eq!(ends[1].total_accuracy, set.accuracy(1));
    }

    #[test]
    fn risk_coverage_is_strictly_increasing(seed in any::<u64>(), n in 1usize..300) {
        let set = EvalSet::synthetic(n, 4, &[2.0], seed);
        let pts = risk_coverage(&set, 0).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[1].coverage > w[0].coverage);
        }
        let last = pts.last().unwrap();
        prop_assert_eq!(last.coverage, 1.0);
        prop_assert!((last.risk - (1.0 - set.accuracy(0))).abs() < 1e-12);
        for p in &pts {
            prop_assert_eq!(p.risk, p.errors as f64 / p.accepted as f64);
        }
    }

    #[test]
    fn tuning_is_optimal_over_candidates(seed in any::<u64>(), n in 1usize..400, floor in 0.0f64..1.0) {
        let set = EvalSet::synthetic(n, 5, &[2.0, 5.0], seed);
        let costs = ExitCosts::new(100.0, 35.0, 8.0);
        let got = tune_threshold(&set, 0, &costs, floor).unwrap();
        let want = exhaustive(&set, &costs, floor);
        prop_assert_eq!(got, want);
    }
}

/// Brute force: sweep every candidate threshold, keep the best feasible plan.
fn exhaustive(set: &EvalSet, costs: &ExitCosts, floor: f64) -> ExitPlan {
    let mut thetas: Vec<f64> = set.outcomes(0).into_iter().map(|o| o.0).collect();
    thetas.push(NO_EXIT);
    let plans = sweep(set, 0, &thetas, costs).unwrap();
    let mut best: Option<ExitPlan> = None;
    for p in plans {
        if p.total_accuracy < floor {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                p.op_score < b.op_score
                    || (p.op_score == b.op_score && p.total_accuracy > b.total_accuracy)
                    || (p.op_score == b.op_score && p.total_accuracy == b.total_accuracy && p.threshold < b.threshold)
            }
        };
        if better {
            best = Some(p);
        }
    }
    best.unwrap_or_else(|| {
        let mut p = sweep(set, 0, &[NO_EXIT], costs).unwrap().remove(0);
        p.feasible = false;
        p
    })
}

#[test]
fn confident_half_fixture_tunes_to_boundary() {
    // exit head is right exactly on its confident half; main head is always right
    let n = 40;
    let mut exit = Vec::new();
    for i in 0..n {
        let conf_logit = if i < n / 2 {
            3.0 + i as f32 * 0.01
        } else {
            0.5 + i as f32 * 0.01
        };
        if i < n / 2 {
            exit.extend([conf_logit, 0.0]);
        } else {
            exit.extend([0.0, conf_logit]);
        }
    }
    let main = [6.0f32, 0.0].repeat(n);
    let set = EvalSet::new(2, vec![0; n], vec![exit, main]).unwrap();
    let costs = ExitCosts::new(100.0, 30.0, 5.0);
    let plan = tune_threshold(&set, 0, &costs, 1.0).unwrap();
    assert!(plan.feasible);
    assert_eq!(plan.exit_ratio, 0.5);
    assert_eq!(plan.total_accuracy, 1.0);
    let boundary = set.outcomes(0)[0].0;
    assert_eq!(plan.threshold, boundary);
}

#[test]
fn appendix_thresholds_give_non_increasing_ratios() {
    let set = EvalSet::synthetic(5000, 100, &[5.0, 9.0], 11);
    let costs = ExitCosts::new(0.034e9, 0.3891 * 0.034e9, 0.0);
    let plans = sweep(&set, 0, &[0.85, 0.88, 0.92], &costs).unwrap();
    assert!(plans[0].exit_ratio >= plans[1].exit_ratio);
    assert!(plans[1].exit_ratio >= plans[2].exit_ratio);
}
