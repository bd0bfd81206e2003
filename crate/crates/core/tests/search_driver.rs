use proptest::prelude::*;
use sipa::search::{
    fitness, greedy_improve, random_search, read_trial_log, smbo_search, Category, Dim, EvalError, EvalRequest,
    FitnessParams, MethodCandidate, Point, SearchConfig, SearchSpace, Trial, TrialLog,
};
use std::collections::BTreeMap;

fn line() -> SearchSpace {
    SearchSpace::new([("x".to_string(), Dim::Real { lo: -2.0, hi: 3.0 })]).unwrap()
}

const OPT: f64 = 1.1;

fn quadratic(p: &Point, _: usize, _: u64) -> Result<(f64, f64), EvalError> {
    let x = p["x"];
    Ok((1.0 - 0.1 * (x - OPT) * (x - OPT), 0.0))
}

fn no_sink(_: &Trial) -> std::io::Result<()> {
    Ok(())
}

#[test]
fn smbo_finds_quadratic_optimum() {
    let cfg = SearchConfig {
        trials: 50,
        warmup: 10,
        ..SearchConfig::default()
    };
    let mut hits = 0;
    for seed in 0..100 {
        let out = smbo_search(
            &line(),
            &quadratic,
            &SearchConfig { seed, ..cfg },
            &FitnessParams::default(),
            vec![],
            &mut no_sink,
        )
        .unwrap();
        let x = out.best.unwrap().point["x"];
        if (x - OPT).abs() <= 0.1 * 5.0 {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn smbo_concentrates_near_optimum() {
    // after warmup, guided proposals should land closer than uniform ones
    let cfg = SearchConfig {
        trials: 60,
        warmup: 10,
        ..SearchConfig::default()
    };
    let (mut guided, mut warm) = (0.0, 0.0);
    for seed in 0..30 {
        let out = smbo_search(
            &line(),
            &quadratic,
            &SearchConfig { seed, ..cfg },
            &FitnessParams::default(),
            vec![],
            &mut no_sink,
        )
        .unwrap();
        let d = |t: &Trial| (t.point["x"] - OPT).abs();
        warm += out.trials[..10].iter().map(d).sum::<f64>() / 10.0;
        guided += out.trials[10..].iter().map(d).sum::<f64>() / 50.0;
    }
    assert!(guided < 0.6 * warm, "guided {guided} warm {warm}");
}

#[test]
fn searches_are_reproducible_and_resumable() {
    let space = SearchSpace::new([
        ("x".to_string(), Dim::Real { lo: -2.0, hi: 3.0 }),
        (
            "k".to_string(),
            Dim::Choice {
                values: vec![3.0, 5.0, 7.0],
            },
        ),
        ("r".to_string(), Dim::Int { lo: 1, hi: 4 }),
    ])
    .unwrap();
    let obj = |p: &Point, _: usize, _: u64| -> Result<(f64, f64), EvalError> {
        Ok((
            1.0 - 0.1 * (p["x"] - OPT).powi(2) - 0.01 * (p["k"] - 5.0).abs() - 0.02 * p["r"],
            p["r"],
        ))
    };
    let fit = FitnessParams {
        thres: 3.5,
        ..FitnessParams::default()
    };
    let cfg = SearchConfig {
        trials: 30,
        warmup: 8,
        seed: 42,
        ..SearchConfig::default()
    };
    let a = smbo_search(&space, &obj, &cfg, &fit, vec![], &mut no_sink).unwrap();
    let b = smbo_search(&space, &obj, &cfg, &fit, vec![], &mut no_sink).unwrap();
    assert_eq!(a.trials, b.trials);
    let ra = random_search(&space, &obj, &cfg, &fit, vec![], &mut no_sink).unwrap();
    let rb = random_search(&space, &obj, &cfg, &fit, vec![], &mut no_sink).unwrap();
    assert_eq!(ra.trials, rb.trials);

    // stored trials have fitness computed exactly from accuracy and resource
    for t in &a.trials {
        assert_eq!(
            t.fitness.unwrap(),
            fitness(t.accuracy.unwrap(), t.resource.unwrap(), &fit)
        );
        assert!(space.dims.keys().all(|k| t.point.contains_key(k)));
    }

    // interrupt after 13 trials, resume from the log
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.log");
    let mut log = TrialLog::append(&path).unwrap();
    let short = SearchConfig { trials: 13, ..cfg };
    smbo_search(&space, &obj, &short, &fit, vec![], &mut |t| log.write(t)).unwrap();
    drop(log);
    // simulate a torn write at the end of the log
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"{\"index\": 13, \"poi"))
        .unwrap();
    let prior = read_trial_log(&path).unwrap();
    assert_eq!(prior.len(), 13);
    let resumed = smbo_search(&space, &obj, &cfg, &fit, prior, &mut no_sink).unwrap();
    assert_eq!(resumed.trials, a.trials);
}

#[test]
fn parallel_random_search_matches_serial() {
    let cfg = SearchConfig {
        trials: 40,
        seed: 7,
        ..SearchConfig::default()
    };
    let serial = random_search(
        &line(),
        &quadratic,
        &cfg,
        &FitnessParams::default(),
        vec![],
        &mut no_sink,
    )
    .unwrap();
    let par = random_search(
        &line(),
        &quadratic,
        &SearchConfig { jobs: 4, ..cfg },
        &FitnessParams::default(),
        vec![],
        &mut no_sink,
    )
    .unwrap();
    assert_eq!(serial.trials, par.trials);
}

#[test]
fn warmup_boundary_is_random_plus_one() {
    let cfg = SearchConfig {
        trials: 10,
        warmup: 9,
        seed: 3,
        ..SearchConfig::default()
    };
    let smbo = smbo_search(
        &line(),
        &quadratic,
        &cfg,
        &FitnessParams::default(),
        vec![],
        &mut no_sink,
    )
    .unwrap();
    let rand = random_search(
        &line(),
        &quadratic,
        &cfg,
        &FitnessParams::default(),
        vec![],
        &mut no_sink,
    )
    .unwrap();
    assert_eq!(smbo.trials[..9], rand.trials[..9]);
    assert_eq!(smbo.trials.len(), 10);
}

fn methods(names: &[&str]) -> Vec<MethodCandidate> {
    names
        .iter()
        .map(|n| MethodCandidate {
            name: n.to_string(),
            category: Category::GeneralTraining,
            config: format!("--{n}"),
        })
        .collect()
}

fn additive(effects: BTreeMap<String, f64>) -> impl Fn(&EvalRequest) -> Result<f64, EvalError> + Sync {
    move |r: &EvalRequest| {
        let names = r.payload["methods"].as_array().unwrap();
        Ok((0.5 + names.iter().map(|n| effects[n.as_str().unwrap()]).sum::<f64>()).clamp(0.0, 1.0))
    }
}

#[test]
fn greedy_hand_trace() {
    let effects = [("A", 0.1), ("B", -0.1), ("C", 0.05)]
        .map(|(n, e)| (n.to_string(), e))
        .into();
    let out = greedy_improve(&methods(&["A", "B", "C"]), &additive(effects), 1, 0.0, 0).unwrap();
    assert_eq!(out.accepted, vec!["A", "C"]);
    assert_eq!(out.evaluations, 4);
    assert!((out.final_mean - 0.65).abs() < 1e-12);

    let harmful = [("A", -0.1), ("B", -0.2)].map(|(n, e)| (n.to_string(), e)).into();
    let out = greedy_improve(&methods(&["A", "B"]), &additive(harmful), 2, 0.0, 0).unwrap();
    assert!(out.accepted.is_empty());
    assert_eq!(out.final_mean, out.baseline_mean);
    assert_eq!(out.evaluations, 6);
}

proptest! {
    #[test]
    fn greedy_accepts_exactly_positive_effects(
        effects in prop::collection::vec(-0.05f64..0.05, 0..8),
        repeats in 1usize..4,
    ) {
        let names: Vec<String> = (0..effects.len()).map(|i| format!("m{i}")).collect();
        let map: BTreeMap<String, f64> = names.iter().cloned().zip(effects.iter().copied()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let out = greedy_improve(&methods(&refs), &additive(map), repeats, 0.0, 1).unwrap();
        let want: Vec<String> = names.iter().zip(&effects).filter(|(_, &e)| e > 1e-12).map(|(n, _)| n.clone()).collect();
        prop_assert_eq!(out.evaluations, (1 + effects.len()) * repeats);
        // floating sums can blur effects within rounding; only check clear ones
        if effects.iter().all(|e| e.abs() > 1e-9) {
            prop_assert_eq!(out.accepted, want);
        }
    }

    #[test]
    fn fitness_properties(
        a1 in 0.0f64..1.0,
        a2 in 0.0f64..1.0,
        f in 0.0f64..3.0,
        pw in 0.01f64..3.0,
        w in 0.1f64..4.0,
        thres in 0.1f64..2.0,
    ) {
        let p = FitnessParams { penalty_weight: pw, w, thres, ..FitnessParams::default() };
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        prop_assert!(fitness(lo, f, &p) <= fitness(hi, f, &p));
        if f <= thres {
            prop_assert_eq!(fitness(a1, f, &p), a1);
        }
    }

    #[test]
    fn argmax_invariant_under_monotone_transform(accs in prop::collection::vec(0.0f64..1.0, 1..20)) {
        // within budget the penalty is zero, so any increasing transform keeps the winner
        let p = FitnessParams::default();
        let best = |v: &[f64]| {
            let mut b = 0;
            for i in 1..v.len() {
                if fitness(v[i], 0.0, &p) > fitness(v[b], 0.0, &p) {
                    b = i;
                }
            }
            b
        };
        let squashed: Vec<f64> = accs.iter().map(|a| a.powi(3) * 0.5 + 0.1).collect();
        prop_assert_eq!(best(&accs), best(&squashed));
    }
}
