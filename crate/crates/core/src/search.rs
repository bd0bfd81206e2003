//! Architecture search and training-method selection against an external
//! evaluator.
//!
//! Candidates are scored with a penalised fitness
//! `R = A - (penalty_weight * [F > thres])^w`, where `A` is the accuracy
//! reported by the evaluator and `F` the resource use computed by the cost
//! model. Two searchers share one driver: uniform random search and a
//! tree-structured Parzen estimator (TPE) variant of sequential model-based
//! optimisation.

use crate::cost::{count, score, CountingRules, TensorStorage};
use crate::model::{apply_compound_scaling, expand, ModelSpec, ScalingCoefficients};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("failed to run evaluator: {0}")]
    Spawn(#[source] io::Error),
    #[error("evaluator exited with {status}: {stderr}")]
    Status { status: String, stderr: String },
    #[error("evaluator output {0:?} is not an accuracy")]
    Output(String),
    #[error("accuracy {0} is outside [0, 1]")]
    Range(f64),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search space: {0}")]
    Space(String),
    #[error("invalid search settings: {0}")]
    Config(String),
    #[error("invalid fitness parameters: {0}")]
    Fitness(String),
    #[error("trial log: {0}")]
    Log(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ---- fitness ---------------------------------------------------------------

/// Which score the resource budget applies to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ParamScore,
    #[default]
    OpScore,
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitnessParams {
    pub penalty_weight: f64,
    pub w: f64,
    pub thres: f64,
    pub metric: Metric,
}

impl Default for FitnessParams {
    /// Penalty weight 1 and exponent 2; the budget is the reference
    /// network's operation count (op score 1).
    fn default() -> Self {
        FitnessParams {
            penalty_weight: 1.0,
            w: 2.0,
            thres: 1.0,
            metric: Metric::OpScore,
        }
    }
}

impl FitnessParams {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.penalty_weight > 0.0 && self.w > 0.0 && self.thres > 0.0) {
            return Err(SearchError::Fitness(format!(
                "penalty_weight {}, w {} and thres {} must all be positive",
                self.penalty_weight, self.w, self.thres
            )));
        }
        Ok(())
    }
}

/// `A - (penalty_weight * I(F > thres))^w`; exactly `A` within budget.
pub fn fitness(accuracy: f64, resource: f64, p: &FitnessParams) -> f64 {
    if resource > p.thres {
        accuracy - p.penalty_weight.powf(p.w)
    } else {
        accuracy
    }
}

// ---- search space ----------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dim {
    Int { lo: i64, hi: i64 },
    Real { lo: f64, hi: f64 },
    Choice { values: Vec<f64> },
}

impl Dim {
    fn validate(&self, name: &str) -> Result<(), SearchError> {
        let ok = match self {
            Dim::Int { lo, hi } => lo <= hi,
            Dim::Real { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            Dim::Choice { values } => !values.is_empty() && values.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(SearchError::Space(format!("dimension {name} is empty")))
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Dim::Int { lo, hi } => rng.random_range(lo..=hi) as f64,
            Dim::Real { lo, hi } => lo + rng.random::<f64>() * (hi - lo),
            Dim::Choice { ref values } => values[rng.random_range(0..values.len())],
        }
    }
}

/// Sampled coordinates keyed by dimension name.
pub type Point = BTreeMap<String, f64>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchSpace {
    pub dims: BTreeMap<String, Dim>,
}

impl SearchSpace {
    pub fn new(dims: impl IntoIterator<Item = (String, Dim)>) -> Result<SearchSpace, SearchError> {
        let s = SearchSpace {
            dims: dims.into_iter().collect(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        if self.dims.is_empty() {
            return Err(SearchError::Space("no dimensions".into()));
        }
        self.dims.iter().try_for_each(|(n, d)| d.validate(n))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Point {
        self.dims.iter().map(|(n, d)| (n.clone(), d.sample(rng))).collect()
    }
}

// ---- trials ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub point: Point,
    pub accuracy: Option<f64>,
    pub resource: Option<f64>,
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Wall time of the evaluation; not persisted so logs stay reproducible.
    #[serde(skip)]
    pub duration: Duration,
}

/// Equality ignores `duration`.
impl PartialEq for Trial {
    fn eq(&self, o: &Self) -> bool {
        self.index == o.index
            && self.point == o.point
            && self.accuracy == o.accuracy
            && self.resource == o.resource
            && self.fitness == o.fitness
            && self.error == o.error
    }
}

impl Trial {
    pub fn succeeded(&self) -> bool {
        self.fitness.is_some()
    }
}

/// Best successful trial: highest fitness, lowest index on ties.
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.succeeded())
        .fold(None, |best: Option<&Trial>, t| match best {
            Some(b) if b.fitness >= t.fitness => Some(b),
            _ => Some(t),
        })
}

/// Something that can be scored at a point: returns `(accuracy, resource)`.
pub trait Objective: Sync {
    fn evaluate(&self, point: &Point, index: usize, seed: u64) -> Result<(f64, f64), EvalError>;
}

impl<F> Objective for F
where
    F: Fn(&Point, usize, u64) -> Result<(f64, f64), EvalError> + Sync,
{
    fn evaluate(&self, point: &Point, index: usize, seed: u64) -> Result<(f64, f64), EvalError> {
        self(point, index, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub trials: usize,
    /// Random trials before the model-based proposals start.
    pub warmup: usize,
    pub seed: u64,
    /// Evaluations run concurrently; proposals within a batch only see
    /// trials from earlier batches.
    pub jobs: usize,
    /// Fraction of trials treated as "good" by the density model.
    pub gamma: f64,
    /// Candidates drawn from the good density per proposal.
    pub candidates: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            trials: 50,
            warmup: 10,
            seed: 0,
            jobs: 1,
            gamma: 0.25,
            candidates: 24,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: Option<Trial>,
    pub trials: Vec<Trial>,
}

/// Per-trial generator: seed xor trial index, so results do not depend on scheduling.
pub fn trial_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

#[derive(Clone, Copy, PartialEq)]
enum Strategy {
    Random,
    Tpe,
}

/// Uniform random search. `prior` holds trials from a resumed log; `sink`
/// sees every new trial as soon as its batch completes.
pub fn random_search(
    space: &SearchSpace,
    objective: &dyn Objective,
    cfg: &SearchConfig,
    fit: &FitnessParams,
    prior: Vec<Trial>,
    sink: &mut dyn FnMut(&Trial) -> io::Result<()>,
) -> Result<SearchOutcome, SearchError> {
    if cfg.trials == 0 {
        return Err(SearchError::Config("trials must be at least 1".into()));
    }
    drive(space, objective, cfg, fit, prior, sink, Strategy::Random)
}

/// TPE-style sequential model-based search: `warmup` random trials, then
/// each proposal maximises the good/bad density ratio over
/// `cfg.candidates` draws from the good density.
pub fn smbo_search(
    space: &SearchSpace,
    objective: &dyn Objective,
    cfg: &SearchConfig,
    fit: &FitnessParams,
    prior: Vec<Trial>,
    sink: &mut dyn FnMut(&Trial) -> io::Result<()>,
) -> Result<SearchOutcome, SearchError> {
    if cfg.warmup < 2 {
        return Err(SearchError::Config("warmup must be at least 2".into()));
    }
    if cfg.trials <= cfg.warmup {
        return Err(SearchError::Config(format!(
            "trials ({}) must exceed warmup ({})",
            cfg.trials, cfg.warmup
        )));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.candidates == 0 {
        return Err(SearchError::Config(
            "gamma must be in (0, 1) and candidates positive".into(),
        ));
    }
    drive(space, objective, cfg, fit, prior, sink, Strategy::Tpe)
}

fn drive(
    space: &SearchSpace,
    objective: &dyn Objective,
    cfg: &SearchConfig,
    fit: &FitnessParams,
    prior: Vec<Trial>,
    sink: &mut dyn FnMut(&Trial) -> io::Result<()>,
    strategy: Strategy,
) -> Result<SearchOutcome, SearchError> {
    space.validate()?;
    fit.validate()?;
    for (i, t) in prior.iter().enumerate() {
        if t.index != i {
            return Err(SearchError::Log(format!("trial {} found at position {i}", t.index)));
        }
    }
    let jobs = cfg.jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SearchError::Config(e.to_string()))?;
    let mut trials = prior;
    while trials.len() < cfg.trials {
        let start = trials.len();
        let end = (start + jobs).min(cfg.trials);
        let proposals: Vec<(usize, Point)> = (start..end)
            .map(|t| {
                let mut rng = trial_rng(cfg.seed, t);
                let point = if strategy == Strategy::Tpe && t >= cfg.warmup {
                    tpe_propose(space, &trials, cfg, &mut rng)
                } else {
                    space.sample(&mut rng)
                };
                (t, point)
            })
            .collect();
        let batch: Vec<Trial> = pool.install(|| {
            proposals
                .into_par_iter()
                .map(|(t, point)| run_trial(objective, fit, cfg.seed, t, point))
                .collect()
        });
        for t in batch {
            sink(&t)?;
            match (&t.error, t.fitness) {
                (Some(e), _) => log::warn!("trial {} failed: {e}", t.index),
                (None, Some(f)) => log::info!("trial {}: fitness {f:.6}", t.index),
                _ => {}
            }
            trials.push(t);
        }
    }
    Ok(SearchOutcome {
        best: best_trial(&trials).cloned(),
        trials,
    })
}

fn run_trial(objective: &dyn Objective, fit: &FitnessParams, seed: u64, index: usize, point: Point) -> Trial {
    let started = Instant::now();
    let result = objective.evaluate(&point, index, seed ^ index as u64);
    let duration = started.elapsed();
    match result {
        Ok((a, f)) => Trial {
            index,
            point,
            accuracy: Some(a),
            resource: Some(f),
            fitness: Some(fitness(a, f, fit)),
            error: None,
            duration,
        },
        Err(e) => Trial {
            index,
            point,
            accuracy: None,
            resource: None,
            fitness: None,
            error: Some(e.to_string()),
            duration,
        },
    }
}

// ---- Parzen estimators -----------------------------------------------------

fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Mixture of Gaussians truncated to [0, 1], one kernel per observation plus
/// a broad prior kernel.
struct Parzen {
    mus: Vec<f64>,
    sigmas: Vec<f64>,
    /// Probability mass of each kernel inside [0, 1].
    mass: Vec<f64>,
}

impl Parzen {
    fn fit(obs: &[f64]) -> Parzen {
        let mut sorted: Vec<f64> = obs.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = obs.len();
        let min_sigma = 1.0 / (n as f64 + 1.0).min(100.0);
        let mut mus = Vec::with_capacity(n + 1);
        let mut sigmas = Vec::with_capacity(n + 1);
        for (i, &m) in sorted.iter().enumerate() {
            let left = if i == 0 { m } else { m - sorted[i - 1] };
            let right = if i + 1 == n { 1.0 - m } else { sorted[i + 1] - m };
            mus.push(m);
            sigmas.push(left.max(right).clamp(min_sigma, 1.0));
        }
        mus.push(0.5);
        sigmas.push(1.0);
        let mass = mus
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| (norm_cdf((1.0 - m) / s) - norm_cdf(-m / s)).max(1e-300))
            .collect();
        Parzen { mus, sigmas, mass }
    }

    /// Probability of the interval [a, b] under the mixture.
    fn prob(&self, a: f64, b: f64) -> f64 {
        let k = self.mus.len() as f64;
        self.mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.mass)
            .map(|((&m, &s), &z)| (norm_cdf((b - m) / s) - norm_cdf((a - m) / s)) / z)
            .sum::<f64>()
            / k
    }

    /// Density at `x`.
    fn density(&self, x: f64) -> f64 {
        let k = self.mus.len() as f64;
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        self.mus
            .iter()
            .zip(&self.sigmas)
            .zip(&self.mass)
            .map(|((&m, &s), &z)| c / s * (-0.5 * ((x - m) / s).powi(2)).exp() / z)
            .sum::<f64>()
            / k
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let i = rng.random_range(0..self.mus.len());
        for _ in 0..64 {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            let x = self.mus[i] + self.sigmas[i] * z;
            if (0.0..=1.0).contains(&x) {
                return x;
            }
        }
        self.mus[i].clamp(0.0, 1.0)
    }
}

/// Per-dimension good/bad models.
enum DimModel {
    Numeric { good: Parzen, bad: Parzen },
    Categorical { good: Vec<f64>, bad: Vec<f64> },
    Fixed,
}

fn unit(dim: &Dim, x: f64) -> f64 {
    match *dim {
        Dim::Int { lo, hi } => (x - lo as f64 + 0.5) / (hi - lo + 1) as f64,
        Dim::Real { lo, hi } if hi > lo => (x - lo) / (hi - lo),
        _ => 0.5,
    }
}

fn laplace(values: &[f64], obs: &[f64]) -> Vec<f64> {
    let mut counts = vec![1.0; values.len()];
    for &o in obs {
        if let Some(i) = values.iter().position(|&v| v == o) {
            counts[i] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.into_iter().map(|c| c / total).collect()
}

fn tpe_propose(space: &SearchSpace, history: &[Trial], cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Point {
    let mut done: Vec<&Trial> = history.iter().filter(|t| t.succeeded()).collect();
    if done.len() < 2 {
        return space.sample(rng);
    }
    // best first; index breaks ties so the split is deterministic
    done.sort_by(|a, b| {
        b.fitness
            .unwrap()
            .total_cmp(&a.fitness.unwrap())
            .then(a.index.cmp(&b.index))
    });
    let n_good = ((cfg.gamma * done.len() as f64).ceil() as usize).clamp(1, done.len() - 1);
    let (good, bad) = done.split_at(n_good);

    let models: Vec<(&String, &Dim, DimModel)> = space
        .dims
        .iter()
        .map(|(name, dim)| {
            let coords =
                |set: &[&Trial]| -> Vec<f64> { set.iter().filter_map(|t| t.point.get(name).copied()).collect() };
            let model = match dim {
                Dim::Choice { values } => DimModel::Categorical {
                    good: laplace(values, &coords(good)),
                    bad: laplace(values, &coords(bad)),
                },
                Dim::Int { lo, hi } if lo == hi => DimModel::Fixed,
                Dim::Real { lo, hi } if lo == hi => DimModel::Fixed,
                _ => {
                    let u = |set: &[&Trial]| {
                        coords(set)
                            .into_iter()
                            .map(|x| unit(dim, x).clamp(0.0, 1.0))
                            .collect::<Vec<_>>()
                    };
                    DimModel::Numeric {
                        good: Parzen::fit(&u(good)),
                        bad: Parzen::fit(&u(bad)),
                    }
                }
            };
            (name, dim, model)
        })
        .collect();

    let mut best: Option<(f64, Point)> = None;
    for _ in 0..cfg.candidates {
        let mut point = Point::new();
        let mut score = 0.0;
        for (name, dim, model) in &models {
            let (x, l, g) = match (model, dim) {
                (DimModel::Fixed, _) => (dim.sample(rng), 1.0, 1.0),
                (DimModel::Categorical { good, bad }, Dim::Choice { values }) => {
                    let i = sample_weighted(good, rng);
                    (values[i], good[i], bad[i])
                }
                (DimModel::Numeric { good, bad }, Dim::Int { lo, hi }) => {
                    let span = (hi - lo + 1) as f64;
                    let u = good.sample(rng);
                    let x = (*lo + (u * span).floor() as i64).clamp(*lo, *hi);
                    let a = (x - lo) as f64 / span;
                    let b = a + 1.0 / span;
                    (x as f64, good.prob(a, b), bad.prob(a, b))
                }
                (DimModel::Numeric { good, bad }, Dim::Real { lo, hi }) => {
                    let u = good.sample(rng);
                    (lo + u * (hi - lo), good.density(u), bad.density(u))
                }
                _ => unreachable!("model kind follows dimension kind"),
            };
            score += (l.max(1e-300)).ln() - (g.max(1e-300)).ln();
            point.insert((*name).clone(), x);
        }
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, point));
        }
    }
    best.expect("at least one candidate").1
}

fn sample_weighted(p: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.len() - 1
}

// ---- trial log -------------------------------------------------------------

/// Reads a line-delimited trial log. A truncated final line (an interrupted
/// write) is ignored; any other malformed line is an error.
pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<Trial>, SearchError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Trial>(line) {
            Ok(t) => out.push(t),
            Err(_) if i + 1 == lines.len() => log::warn!("ignoring truncated last line of {}", path.display()),
            Err(e) => return Err(SearchError::Log(format!("{}:{}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// Append-only writer for a trial log.
pub struct TrialLog {
    file: File,
}

impl TrialLog {
    pub fn append(path: impl AsRef<Path>) -> io::Result<TrialLog> {
        Ok(TrialLog {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write(&mut self, t: &Trial) -> io::Result<()> {
        let line = serde_json::to_string(t).map_err(io::Error::other)?;
        writeln!(self.file, "{line}")?;
        self.file.flush()
    }
}

// ---- evaluator contract ----------------------------------------------------

/// Document handed to an evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    /// What is being evaluated: "search", "improve" or "retrain".
    pub task: String,
    pub index: usize,
    pub seed: u64,
    pub payload: serde_json::Value,
}

/// Trains or evaluates a configuration and reports an accuracy in [0, 1].
pub trait Evaluator: Sync {
    fn evaluate(&self, req: &EvalRequest) -> Result<f64, EvalError>;
}

impl<F> Evaluator for F
where
    F: Fn(&EvalRequest) -> Result<f64, EvalError> + Sync,
{
    fn evaluate(&self, req: &EvalRequest) -> Result<f64, EvalError> {
        self(req)
    }
}

/// Runs a shell command with the path of the JSON request as its only
/// argument. The last non-empty stdout line must be the accuracy; a nonzero
/// exit status is a failure.
#[derive(Clone, Debug)]
pub struct CommandEvaluator {
    pub command: String,
    /// Directory for request files; the system temp dir when unset.
    pub workdir: Option<PathBuf>,
}

impl CommandEvaluator {
    pub fn new(command: impl Into<String>) -> Self {
        CommandEvaluator {
            command: command.into(),
            workdir: None,
        }
    }

    /// Runs the command on an already written request file and returns its
    /// full stdout after checking the exit status.
    pub fn run_on(&self, request: &Path) -> Result<String, EvalError> {
        let out = Command::new("sh")
            .arg("-c")
            .arg(format!("{} \"$@\"", self.command))
            .arg("sh")
            .arg(request)
            .stdin(Stdio::null())
            .output()
            .map_err(EvalError::Spawn)?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: Vec<&str> = stderr.lines().rev().take(5).collect();
            return Err(EvalError::Status {
                status: out.status.to_string(),
                stderr: tail.into_iter().rev().collect::<Vec<_>>().join("\n"),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Parses the last non-empty line of evaluator output as an accuracy.
pub fn parse_accuracy(stdout: &str) -> Result<f64, EvalError> {
    let line = stdout
        .lines()
        .rev()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let a: f64 = line.parse().map_err(|_| EvalError::Output(line.to_string()))?;
    if !(0.0..=1.0).contains(&a) {
        return Err(EvalError::Range(a));
    }
    Ok(a)
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, req: &EvalRequest) -> Result<f64, EvalError> {
        let mut file = match &self.workdir {
            Some(d) => tempfile::Builder::new().prefix("trial-").suffix(".json").tempfile_in(d),
            None => tempfile::Builder::new().prefix("trial-").suffix(".json").tempfile(),
        }
        .map_err(EvalError::Spawn)?;
        serde_json::to_writer_pretty(&mut file, req).map_err(|e| EvalError::Other(e.to_string()))?;
        file.flush().map_err(EvalError::Spawn)?;
        parse_accuracy(&self.run_on(file.path())?)
    }
}

// ---- architecture objective ------------------------------------------------

/// Applies a search point to `base`: `blocks.<j>.<k|s|e|o|se|r>` override
/// block arguments and `alpha`/`beta`/`gamma`/`phi` drive compound scaling.
pub fn apply_point(base: &ModelSpec, point: &Point) -> Result<ModelSpec, String> {
    let mut spec = base.clone();
    let mut coeffs = ScalingCoefficients::new(1.0, 1.0, 1.0, 0.0);
    let mut scaled = false;
    for (key, &v) in point {
        let as_count = |what: &str| -> Result<usize, String> {
            if v < 0.0 || v.fract() != 0.0 {
                Err(format!("{key} = {v} is not a valid {what}"))
            } else {
                Ok(v as usize)
            }
        };
        match key.as_str() {
            "alpha" => (coeffs.alpha, scaled) = (v, true),
            "beta" => (coeffs.beta, scaled) = (v, true),
            "gamma" => (coeffs.gamma, scaled) = (v, true),
            "phi" => (coeffs.phi, scaled) = (v, true),
            _ => {
                let parts: Vec<&str> = key.split('.').collect();
                let ["blocks", j, field] = parts.as_slice() else {
                    return Err(format!("unknown search dimension {key}"));
                };
                let j: usize = j.parse().map_err(|_| format!("bad block index in {key}"))?;
                let b = spec
                    .blocks
                    .get_mut(j)
                    .ok_or_else(|| format!("{key}: model has {} blocks", base.blocks.len()))?;
                match *field {
                    "k" => b.k = as_count("kernel")?,
                    "s" => b.s = as_count("stride")?,
                    "e" => b.e = v,
                    "o" => b.o = as_count("channel count")?,
                    "se" => b.se = v,
                    "r" => b.r = as_count("repeat count")?,
                    _ => return Err(format!("unknown block field in {key}")),
                }
            }
        }
    }
    spec.rechain();
    if scaled {
        spec = apply_compound_scaling(&spec, &coeffs);
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

/// Scores architecture points: the evaluator supplies accuracy and the cost
/// model supplies the resource metric.
pub struct ScalingObjective<'a> {
    pub base: ModelSpec,
    pub evaluator: &'a dyn Evaluator,
    pub rules: CountingRules,
    pub metric: Metric,
}

impl ScalingObjective<'_> {
    pub fn resource(&self, spec: &ModelSpec) -> Result<f64, String> {
        let graph = expand(spec).map_err(|e| e.to_string())?;
        let report = count(&graph, &self.rules, &TensorStorage::from_spec(spec, &graph)).map_err(|e| e.to_string())?;
        let s = score(&report);
        Ok(match self.metric {
            Metric::ParamScore => s.param_score,
            Metric::OpScore => s.op_score,
            Metric::Total => s.total,
        })
    }
}

impl Objective for ScalingObjective<'_> {
    fn evaluate(&self, point: &Point, index: usize, seed: u64) -> Result<(f64, f64), EvalError> {
        let spec = apply_point(&self.base, point).map_err(EvalError::Other)?;
        let resource = self.resource(&spec).map_err(EvalError::Other)?;
        let req = EvalRequest {
            task: "search".into(),
            index,
            seed,
            payload: serde_json::json!({ "point": point, "spec": spec }),
        };
        Ok((self.evaluator.evaluate(&req)?, resource))
    }
}

// ---- greedy method selection -----------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    GeneralTraining,
    Structural,
    LossRelated,
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodCandidate {
    pub name: String,
    pub category: Category,
    /// Opaque configuration passed through to the evaluator.
    #[serde(default)]
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub method: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Mean of the accepted set before this method was tried.
    pub reference: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImproveOutcome {
    pub baseline_scores: Vec<f64>,
    pub baseline_mean: f64,
    pub accepted: Vec<String>,
    pub final_mean: f64,
    pub decisions: Vec<Decision>,
    pub evaluations: usize,
}

#[derive(Debug, Error)]
#[error("evaluation {evaluation} failed: {source}")]
pub struct ImproveError {
    pub evaluation: usize,
    #[source]
    pub source: EvalError,
    /// Decisions made before the failure.
    pub partial: Box<ImproveOutcome>,
}

/// Greedy forward selection: starting from the baseline, each method is
/// tried on top of the accepted set and kept iff its mean accuracy over
/// `repeats` runs beats the current mean by more than `margin`. Uses exactly
/// `(1 + methods.len()) * repeats` evaluations.
pub fn greedy_improve(
    methods: &[MethodCandidate],
    evaluator: &dyn Evaluator,
    repeats: usize,
    margin: f64,
    seed: u64,
) -> Result<ImproveOutcome, ImproveError> {
    let repeats = repeats.max(1);
    let mut out = ImproveOutcome::default();
    let mut accepted: Vec<&MethodCandidate> = Vec::new();

    let run = |set: &[&MethodCandidate], out: &mut ImproveOutcome| -> Result<Vec<f64>, ImproveError> {
        let mut scores = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let index = out.evaluations;
            let req = EvalRequest {
                task: "improve".into(),
                index,
                seed: seed ^ index as u64,
                payload: serde_json::json!({
                    "methods": set.iter().map(|m| &m.name).collect::<Vec<_>>(),
                    "configs": set.iter().map(|m| &m.config).collect::<Vec<_>>(),
                }),
            };
            out.evaluations += 1;
            match evaluator.evaluate(&req) {
                Ok(a) => scores.push(a),
                Err(source) => {
                    return Err(ImproveError {
                        evaluation: index,
                        source,
                        partial: Box::new(out.clone()),
                    })
                }
            }
        }
        Ok(scores)
    };

    let base = run(&[], &mut out)?;
    out.baseline_mean = mean(&base);
    out.baseline_scores = base;
    out.final_mean = out.baseline_mean;
    for m in methods {
        let mut trial_set = accepted.clone();
        trial_set.push(m);
        let scores = run(&trial_set, &mut out)?;
        let mu = mean(&scores);
        let keep = mu > out.final_mean + margin;
        log::info!(
            "method {}: mean {mu:.6} vs {:.6} -> {}",
            m.name,
            out.final_mean,
            if keep { "accept" } else { "reject" }
        );
        out.decisions.push(Decision {
            method: m.name.clone(),
            scores,
            mean: mu,
            reference: out.final_mean,
            accepted: keep,
        });
        if keep {
            accepted.push(m);
            out.accepted.push(m.name.clone());
            out.final_mean = mu;
        }
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::micronet_baseline;

    #[test]
    fn fitness_examples() {
        let p = FitnessParams {
            thres: 1.0,
            ..FitnessParams::default()
        };
        assert_eq!(fitness(0.8, 0.5, &p), 0.8);
        assert_eq!(fitness(0.8, 1.0, &p), 0.8);
        assert!((fitness(0.8, 1.5, &p) - (-0.2)).abs() < 1e-15);
        let half = FitnessParams {
            penalty_weight: 0.5,
            ..p
        };
        assert!((fitness(0.8, 1.5, &half) - 0.55).abs() < 1e-15);
        assert!(FitnessParams { w: 0.0, ..p }.validate().is_err());
    }

    #[test]
    fn space_json() {
        let s: SearchSpace = serde_json::from_str(
            r#"{"x": {"type": "real", "lo": 0, "hi": 1}, "k": {"type": "choice", "values": [3, 5]},
                "r": {"type": "int", "lo": 1, "hi": 4}}"#,
        )
        .unwrap();
        s.validate().unwrap();
        let bad: SearchSpace = serde_json::from_str(r#"{"r": {"type": "int", "lo": 4, "hi": 1}}"#).unwrap();
        assert!(bad.validate().is_err());
    }

    fn quad(point: &Point, _i: usize, _s: u64) -> Result<(f64, f64), EvalError> {
        let x = point["x"];
        Ok((1.0 - (x - 0.3) * (x - 0.3), 0.0))
    }

    #[test]
    fn constant_objective_prefers_first_trial() {
        let space = SearchSpace::new([("x".to_string(), Dim::Real { lo: 0.0, hi: 1.0 })]).unwrap();
        let konst = |_: &Point, _: usize, _: u64| -> Result<(f64, f64), EvalError> { Ok((0.5, 0.0)) };
        let cfg = SearchConfig {
            trials: 5,
            ..SearchConfig::default()
        };
        let out = random_search(&space, &konst, &cfg, &FitnessParams::default(), vec![], &mut |_| Ok(())).unwrap();
        assert_eq!(out.best.unwrap().index, 0);
        let one = SearchConfig { trials: 1, ..cfg };
        let out = random_search(&space, &quad, &one, &FitnessParams::default(), vec![], &mut |_| Ok(())).unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best.unwrap().index, 0);
    }

    #[test]
    fn failures_are_recorded_and_skipped() {
        let space = SearchSpace::new([("x".to_string(), Dim::Real { lo: 0.0, hi: 1.0 })]).unwrap();
        let flaky = |p: &Point, i: usize, s: u64| -> Result<(f64, f64), EvalError> {
            if i.is_multiple_of(2) {
                Err(EvalError::Other("nope".into()))
            } else {
                quad(p, i, s)
            }
        };
        let cfg = SearchConfig {
            trials: 14,
            warmup: 4,
            ..SearchConfig::default()
        };
        let out = smbo_search(&space, &flaky, &cfg, &FitnessParams::default(), vec![], &mut |_| Ok(())).unwrap();
        assert_eq!(out.trials.iter().filter(|t| t.error.is_some()).count(), 7);
        assert_eq!(out.best.unwrap().index % 2, 1);
    }

    #[test]
    fn smbo_preconditions() {
        let space = SearchSpace::new([("x".to_string(), Dim::Real { lo: 0.0, hi: 1.0 })]).unwrap();
        let cfg = SearchConfig {
            trials: 5,
            warmup: 5,
            ..SearchConfig::default()
        };
        assert!(smbo_search(&space, &quad, &cfg, &FitnessParams::default(), vec![], &mut |_| Ok(())).is_err());
        let cfg = SearchConfig {
            trials: 5,
            warmup: 1,
            ..SearchConfig::default()
        };
        assert!(smbo_search(&space, &quad, &cfg, &FitnessParams::default(), vec![], &mut |_| Ok(())).is_err());
    }

    #[test]
    fn parzen_mass_is_normalised() {
        let p = Parzen::fit(&[0.1, 0.15, 0.9]);
        assert!((p.prob(0.0, 1.0) - 1.0).abs() < 1e-12);
        let steps = 10_000;
        let integral: f64 = (0..steps)
            .map(|i| p.density((i as f64 + 0.5) / steps as f64))
            .sum::<f64>()
            / steps as f64;
        assert!((integral - 1.0).abs() < 1e-4);
    }

    #[test]
    fn points_override_blocks_and_scale() {
        let base = micronet_baseline();
        let mut p = Point::new();
        p.insert("blocks.1.o".into(), 32.0);
        p.insert("blocks.1.k".into(), 5.0);
        let spec = apply_point(&base, &p).unwrap();
        assert_eq!(spec.blocks[1].o, 32);
        assert_eq!(spec.blocks[2].i, 32);
        assert_eq!(spec.blocks[1].k, 5);
        p.insert("phi".into(), 1.0);
        p.insert("gamma".into(), 1.4);
        let scaled = apply_point(&base, &p).unwrap();
        assert_eq!(scaled.input[0], 45);
        p.insert("blocks.1.k".into(), 4.0);
        assert!(apply_point(&base, &p).unwrap_err().contains("odd"));
        let mut bad = Point::new();
        bad.insert("depth".into(), 1.0);
        assert!(apply_point(&base, &bad).is_err());
    }

    #[test]
    fn accuracy_parsing() {
        assert_eq!(parse_accuracy("log line\n0.75\n\n").unwrap(), 0.75);
        assert!(matches!(parse_accuracy("1.5"), Err(EvalError::Range(_))));
        assert!(matches!(parse_accuracy("done"), Err(EvalError::Output(_))));
    }

    #[test]
    fn command_evaluator_contract() {
        let req = EvalRequest {
            task: "search".into(),
            index: 3,
            seed: 9,
            payload: serde_json::json!({"x": 1}),
        };
        let ok = CommandEvaluator::new(
            r#"awk '/"index": 3/ { f = 1 } END { print "training..."; print (f ? 0.625 : 0.1) }'"#,
        );
        assert_eq!(ok.evaluate(&req).unwrap(), 0.625);
        let fails = CommandEvaluator::new("echo boom >&2; exit 3");
        match fails.evaluate(&req) {
            Err(EvalError::Status { stderr, .. }) => assert_eq!(stderr, "boom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn greedy_counts_and_partial_log() {
        let effects: BTreeMap<&str, f64> = [("A", 0.1), ("B", -0.1), ("C", 0.05)].into();
        let eval = |r: &EvalRequest| -> Result<f64, EvalError> {
            let names = r.payload["methods"].as_array().unwrap();
            Ok(0.5 + names.iter().map(|n| effects[n.as_str().unwrap()]).sum::<f64>())
        };
        let methods: Vec<MethodCandidate> = ["A", "B", "C"]
            .iter()
            .map(|n| MethodCandidate {
                name: n.to_string(),
                category: Category::Other,
                config: String::new(),
            })
            .collect();
        let out = greedy_improve(&methods, &eval, 1, 0.0, 0).unwrap();
        assert_eq!(out.accepted, vec!["A", "C"]);
        assert_eq!(out.evaluations, 4);
        let out = greedy_improve(&methods, &eval, 3, 0.0, 0).unwrap();
        assert_eq!(out.evaluations, 12);

        let failing = |r: &EvalRequest| -> Result<f64, EvalError> {
            if r.index == 2 {
                Err(EvalError::Other("crash".into()))
            } else {
                Ok(0.5)
            }
        };
        let err = greedy_improve(&methods, &failing, 1, 0.0, 0).unwrap_err();
        assert_eq!(err.evaluation, 2);
        assert_eq!(err.partial.decisions.len(), 1);
    }
}
