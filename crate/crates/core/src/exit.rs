//! Early-exit planning from exported logits.
//!
//! An [`EvalSet`] holds the logits of every prediction head on a labelled
//! evaluation set: heads `0..H-1` are exit paths in network order and the
//! last head is the main path. A sample leaves at an exit when that head's
//! max-softmax confidence is at least the threshold.

use crate::cost::{ExitCosts, REFERENCE_OPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const EVAL_MAGIC: &[u8; 4] = b"SIEV";
pub const EVAL_VERSION: u8 = 1;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Threshold that no confidence can reach: the "never exit" plan.
pub const NO_EXIT: f64 = 1.0 + f64::EPSILON;

#[derive(Debug, Error)]
pub enum ExitError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not an eval-set file (bad magic)")]
    BadMagic,
    #[error("unsupported eval-set version {0}")]
    Version(u8),
    #[error("invalid eval set: {0}")]
    Invalid(String),
    #[error("eval set is empty")]
    Empty,
    #[error("head {head} is not an exit head (eval set has {heads} heads)")]
    Head { head: usize, heads: usize },
    #[error("accuracy floor {0} is outside [0, 1]")]
    Floor(f64),
}

/// Labels plus one N x K logit matrix per head.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    n: usize,
    k: usize,
    labels: Vec<u32>,
    heads: Vec<Vec<f32>>,
}

impl EvalSet {
    pub fn new(k: usize, labels: Vec<u32>, heads: Vec<Vec<f32>>) -> Result<EvalSet, ExitError> {
        let n = labels.len();
        if k == 0 {
            return Err(ExitError::Invalid("class count must be positive".into()));
        }
        if heads.is_empty() {
            return Err(ExitError::Invalid("at least one head is required".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(ExitError::Invalid(format!("label {bad} out of range for {k} classes")));
        }
        for (h, m) in heads.iter().enumerate() {
            if m.len() != n * k {
                return Err(ExitError::Invalid(format!(
                    "head {h} holds {} logits, expected {}",
                    m.len(),
                    n * k
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ExitError::Invalid(format!("head {h} has non-finite logits")));
            }
        }
        Ok(EvalSet { n, k, labels, heads })
    }

    pub fn samples(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn heads(&self) -> usize {
        self.heads.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn logits(&self, head: usize, sample: usize) -> &[f32] {
        &self.heads[head][sample * self.k..(sample + 1) * self.k]
    }

    /// Confidence and correctness of `head` on every sample.
    pub fn outcomes(&self, head: usize) -> Vec<(f64, bool)> {
        (0..self.n)
            .into_par_iter()
            .map(|i| {
                let z: Vec<f64> = self.logits(head, i).iter().map(|&v| v as f64).collect();
                let p = softmax(&z);
                let (arg, conf) = argmax(&p);
                (conf, arg == self.labels[i] as usize)
            })
            .collect()
    }

    /// Fraction of samples `head` classifies correctly.
    pub fn accuracy(&self, head: usize) -> f64 {
        let correct = self.outcomes(head).iter().filter(|o| o.1).count();
        correct as f64 / self.n.max(1) as f64
    }

    pub fn read_from(r: &mut impl Read) -> Result<EvalSet, ExitError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != EVAL_MAGIC {
            return Err(ExitError::BadMagic);
        }
        let mut v = [0u8; 1];
        r.read_exact(&mut v)?;
        if v[0] != EVAL_VERSION {
            return Err(ExitError::Version(v[0]));
        }
        let n = read_u32(r)? as usize;
        let k = read_u32(r)? as usize;
        let h = read_u32(r)? as usize;
        let labels = read_block(r, n, 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let cells = n
            .checked_mul(k)
            .ok_or_else(|| ExitError::Invalid("logit matrix too large".into()))?;
        let mut heads = Vec::with_capacity(h.min(64));
        for _ in 0..h {
            let m = read_block(r, cells, 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            heads.push(m);
        }
        EvalSet::new(k, labels, heads)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ExitError> {
        let as_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| ExitError::Invalid(format!("{what} does not fit in u32")))
        };
        w.write_all(EVAL_MAGIC)?;
        w.write_all(&[EVAL_VERSION])?;
        w.write_all(&as_u32(self.n, "sample count")?.to_le_bytes())?;
        w.write_all(&as_u32(self.k, "class count")?.to_le_bytes())?;
        w.write_all(&as_u32(self.heads.len(), "head count")?.to_le_bytes())?;
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        for m in &self.heads {
            for v in m {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<EvalSet, ExitError> {
        EvalSet::read_from(&mut bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<EvalSet, ExitError> {
        EvalSet::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ExitError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// A random eval set whose heads get more accurate with `skill`.
    ///
    /// Each sample has a difficulty in [0, 1); head `h` adds
    /// `skill[h] * (1 - difficulty)` to the true-class logit on top of unit
    /// Gaussian noise, so confident predictions tend to be correct.
    pub fn synthetic(n: usize, k: usize, skill: &[f64], seed: u64) -> EvalSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..k as u32)).collect();
        let difficulty: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let heads = skill
            .iter()
            .map(|&s| {
                let mut m = Vec::with_capacity(n * k);
                for i in 0..n {
                    for c in 0..k {
                        let mut z: f64 = rng.sample(normal);
                        if c == labels[i] as usize {
                            z += s * (1.0 - difficulty[i]);
                        }
                        m.push(z as f32);
                    }
                }
                m
            })
            .collect();
        EvalSet::new(k, labels, heads).expect("synthetic eval set is well formed")
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads `count * width` bytes without trusting the header for allocation.
fn read_block(r: &mut impl Read, count: usize, width: usize) -> Result<Vec<u8>, ExitError> {
    let bytes = count
        .checked_mul(width)
        .ok_or_else(|| ExitError::Invalid("block too large".into()))?;
    let mut buf = Vec::new();
    r.take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into());
    }
    Ok(buf)
}

/// Numerically stable softmax (the maximum logit is subtracted first).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index and value of the largest probability (first index wins ties).
fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
    )
}

/// Max-softmax confidence of a probability vector.
pub fn confidence(probs: &[f64]) -> f64 {
    argmax(probs).1
}

/// Cross-entropy of `target` against `softmax(logits)`, natural log.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> f64 {
    let p = softmax(logits);
    -target
        .iter()
        .zip(&p)
        .map(|(&y, &q)| if y == 0.0 { 0.0 } else { y * q.max(PROB_FLOOR).ln() })
        .sum::<f64>()
}

/// `(1 + confidence) * cross_entropy`: confident samples weigh up to twice as much.
pub fn softsmoothing_loss(logits: &[f64], target: &[f64]) -> f64 {
    let c = confidence(&softmax(logits));
    (1.0 + c) * cross_entropy(logits, target)
}

/// Gradient of [`softsmoothing_loss`] with respect to the logits.
///
/// With `detach_confidence` the confidence factor is a constant and the
/// gradient is `(1 + c) * (sum(y) * p - y)`. Otherwise the product rule adds
/// `H * p_m * (e_m - p)`, where `m` is the argmax of `p`.
pub fn softsmoothing_grad(logits: &[f64], target: &[f64], detach_confidence: bool) -> Vec<f64> {
    let p = softmax(logits);
    let (m, c) = argmax(&p);
    let mass: f64 = target.iter().sum();
    let mut g: Vec<f64> = p
        .iter()
        .zip(target)
        .map(|(&q, &y)| (1.0 + c) * (mass * q - y))
        .collect();
    if !detach_confidence {
        let h = cross_entropy(logits, target);
        for (j, gj) in g.iter_mut().enumerate() {
            let delta = if j == m { 1.0 } else { 0.0 };
            *gj += h * c * (delta - p[j]);
        }
    }
    g
}

/// Outcome of running with one exit head at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPlan {
    pub head: usize,
    pub threshold: f64,
    pub exit_ratio: f64,
    pub total_accuracy: f64,
    pub expected_ops: f64,
    pub op_score: f64,
    /// False when no threshold met the accuracy floor.
    #[serde(default = "yes")]
    pub feasible: bool,
}

fn yes() -> bool {
    true
}

/// Per-sample facts needed to price a threshold.
struct Prepared {
    exit: Vec<(f64, bool)>,
    main_correct: Vec<bool>,
}

fn prepare(set: &EvalSet, head: usize) -> Result<Prepared, ExitError> {
    if set.heads() < 2 || head >= set.heads() - 1 {
        return Err(ExitError::Head {
            head,
            heads: set.heads(),
        });
    }
    let main = set.outcomes(set.heads() - 1);
    Ok(Prepared {
        exit: set.outcomes(head),
        main_correct: main.into_iter().map(|o| o.1).collect(),
    })
}

fn plan_from_counts(
    head: usize,
    threshold: f64,
    n: usize,
    exited: usize,
    correct: usize,
    costs: &ExitCosts,
) -> ExitPlan {
    let exit_ratio = exited as f64 / n as f64;
    let expected_ops = costs.expected_ops(exit_ratio);
    ExitPlan {
        head,
        threshold,
        exit_ratio,
        total_accuracy: correct as f64 / n as f64,
        expected_ops,
        op_score: expected_ops / REFERENCE_OPS,
        feasible: true,
    }
}

/// Evaluates each threshold: exit ratio, combined accuracy and expected ops.
pub fn sweep(set: &EvalSet, head: usize, thresholds: &[f64], costs: &ExitCosts) -> Result<Vec<ExitPlan>, ExitError> {
    if set.samples() == 0 {
        return Err(ExitError::Empty);
    }
    let prep = prepare(set, head)?;
    Ok(thresholds
        .iter()
        .map(|&theta| {
            let mut exited = 0;
            let mut correct = 0;
            for (&(conf, ok), &main_ok) in prep.exit.iter().zip(&prep.main_correct) {
                if conf >= theta {
                    exited += 1;
                    correct += ok as usize;
                } else {
                    correct += main_ok as usize;
                }
            }
            plan_from_counts(head, theta, set.samples(), exited, correct, costs)
        })
        .collect())
}

/// Picks the threshold with the lowest op score whose combined accuracy is at
/// least `accuracy_floor`. Candidates are the observed confidences of `head`
/// plus a never-exit threshold; ties prefer higher accuracy, then smaller
/// thresholds. If nothing is feasible the never-exit plan is returned with
/// `feasible = false`.
pub fn tune_threshold(
    set: &EvalSet,
    head: usize,
    costs: &ExitCosts,
    accuracy_floor: f64,
) -> Result<ExitPlan, ExitError> {
    if !(0.0..=1.0).contains(&accuracy_floor) {
        return Err(ExitError::Floor(accuracy_floor));
    }
    if set.samples() == 0 {
        return Err(ExitError::Empty);
    }
    let prep = prepare(set, head)?;
    let n = set.samples();
    // samples by descending confidence; a threshold admits a prefix
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| prep.exit[b].0.total_cmp(&prep.exit[a].0));
    let main_total: usize = prep.main_correct.iter().filter(|&&c| c).count();

    let mut candidates = Vec::with_capacity(n + 1);
    let never = plan_from_counts(head, NO_EXIT, n, 0, main_total, costs);
    candidates.push(never.clone());
    let (mut exited, mut exit_ok, mut main_ok_exited) = (0usize, 0usize, 0usize);
    let mut i = 0;
    while i < n {
        let theta = prep.exit[order[i]].0;
        // admit every sample sharing this confidence
        while i < n && prep.exit[order[i]].0 == theta {
            let s = order[i];
            exited += 1;
            exit_ok += prep.exit[s].1 as usize;
            main_ok_exited += prep.main_correct[s] as usize;
            i += 1;
        }
        let correct = exit_ok + main_total - main_ok_exited;
        candidates.push(plan_from_counts(head, theta, n, exited, correct, costs));
    }

    let best = candidates
        .into_iter()
        .filter(|p| p.total_accuracy >= accuracy_floor)
        .min_by(|a, b| {
            a.op_score
                .total_cmp(&b.op_score)
                .then(b.total_accuracy.total_cmp(&a.total_accuracy))
                .then(a.threshold.total_cmp(&b.threshold))
        });
    Ok(best.unwrap_or(ExitPlan {
        feasible: false,
        ..never
    }))
}

/// One point of a risk-coverage curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub threshold: f64,
    pub accepted: usize,
    pub errors: usize,
    pub coverage: f64,
    pub risk: f64,
}

/// Coverage and selective risk of `head` at every distinct confidence,
/// ordered by increasing coverage.
pub fn risk_coverage(set: &EvalSet, head: usize) -> Result<Vec<RiskPoint>, ExitError> {
    if head >= set.heads() {
        return Err(ExitError::Head {
            head,
            heads: set.heads(),
        });
    }
    let mut outcomes = set.outcomes(head);
    outcomes.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n = outcomes.len();
    let mut points = Vec::new();
    let (mut accepted, mut errors, mut i) = (0, 0, 0);
    while i < n {
        let theta = outcomes[i].0;
        while i < n && outcomes[i].0 == theta {
            accepted += 1;
            errors += !outcomes[i].1 as usize;
            i += 1;
        }
        points.push(RiskPoint {
            threshold: theta,
            accepted,
            errors,
            coverage: accepted as f64 / n as f64,
            risk: errors as f64 / accepted as f64,
        });
    }
    Ok(points)
}

/// CSV with a `coverage,risk` header.
pub fn risk_coverage_csv(points: &[RiskPoint]) -> String {
    let mut s = String::from("coverage,risk\n");
    for p in points {
        s.push_str(&format!("{},{}\n", p.coverage, p.risk));
    }
    s
}
