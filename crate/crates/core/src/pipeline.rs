//! The four-stage pipeline (search, improve, prune, accelerate) and the
//! per-stage records it persists.
//!
//! Artifacts of a run live under one directory:
//!
//! ```text
//! stages/<stage>.record   one StageRecord per executed stage (JSON)
//! trials.log              search trials, one JSON object per line
//! ckpt/round-<r>.sipa     checkpoint after each pruning round
//! exitplan.record         the tuned ExitPlan (JSON)
//! ```
//!
//! plus `model.json` (the searched spec), `improve.json`, `prune.json` and
//! `eval.siev` when the eval set is synthesised.

use crate::checkpoint::{Checkpoint, CheckpointError, DType};
use crate::cost::{
    count, exit_costs, score, CostError, CostReport, CountingRules, ScoreReport, TableRow, TensorStorage,
};
use crate::exit::{tune_threshold, EvalSet, ExitError, ExitPlan};
use crate::model::{expand, micronet_baseline, wrn28_10, LayerGraph, ModelSpec, SpecError};
use crate::prune::{
    run_schedule, IdentityRetrain, PruneConfig, PruneError, PruneSchedule, RetrainHook, RoundRecord, ScheduleOutcome,
};
use crate::search::{
    apply_point, greedy_improve, random_search, read_trial_log, smbo_search, CommandEvaluator, EvalError, EvalRequest,
    Evaluator, FitnessParams, ImproveError, ImproveOutcome, MethodCandidate, ScalingObjective, SearchConfig,
    SearchError, SearchSpace, TrialLog,
};
use serde::{Deserialize, Serialize};
use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Improve(#[from] ImproveError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads and deserializes a JSON file.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes pretty JSON with a trailing newline, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

// ---- stage records ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Searching,
    Improving,
    Pruning,
    Accelerating,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Stage, String> {
        [Stage::Searching, Stage::Improving, Stage::Pruning, Stage::Accelerating]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?} (searching, improving, pruning, accelerating)"))
    }
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Searching => "searching",
            Stage::Improving => "improving",
            Stage::Pruning => "pruning",
            Stage::Accelerating => "accelerating",
        }
    }
}

/// Accuracy and cost of the model after one stage. The score is always
/// derived from the cost report; a stored score is ignored on read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "StageRecordRepr")]
pub struct StageRecord {
    pub stage: Stage,
    pub accuracy: Option<f64>,
    pub cost: CostReport,
    pub score: ScoreReport,
}

#[derive(Deserialize)]
struct StageRecordRepr {
    stage: Stage,
    #[serde(default)]
    accuracy: Option<f64>,
    cost: CostReport,
    #[allow(dead_code)]
    #[serde(default)]
    score: Option<serde_json::Value>,
}

impl From<StageRecordRepr> for StageRecord {
    fn from(r: StageRecordRepr) -> Self {
        StageRecord::new(r.stage, r.accuracy, r.cost)
    }
}

impl StageRecord {
    pub fn new(stage: Stage, accuracy: Option<f64>, mut cost: CostReport) -> StageRecord {
        // per-layer detail is not part of a record
        cost.per_layer.clear();
        let score = score(&cost);
        StageRecord {
            stage,
            accuracy,
            cost,
            score,
        }
    }
}

/// Renders records as a score table in pipeline order.
pub fn render_records(records: &[StageRecord]) -> String {
    let mut sorted: Vec<&StageRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.stage);
    let rows: Vec<TableRow<'_>> = sorted
        .iter()
        .map(|r| TableRow {
            stage: r.stage.name(),
            accuracy: r.accuracy,
            cost: &r.cost,
        })
        .collect();
    crate::cost::render_table(&rows)
}

// ---- models and storage ----------------------------------------------------

/// `builtin:wrn28-10`, `builtin:baseline` or a path to a JSON spec
/// (relative paths resolve against `base_dir`).
pub fn resolve_model(name: &str, base_dir: &Path) -> Result<ModelSpec, PipelineError> {
    match name {
        "builtin:wrn28-10" => Ok(wrn28_10()),
        "builtin:baseline" => Ok(micronet_baseline()),
        other if other.starts_with("builtin:") => Err(PipelineError::Config(format!(
            "unknown built-in model {other} (expected builtin:wrn28-10 or builtin:baseline)"
        ))),
        path => {
            let path = base_dir.join(path);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Ok(ModelSpec::parse(&text)?)
        }
    }
}

/// Bit widths from the spec's quantization patterns, falling back to the
/// checkpoint dtype; masks from the checkpoint.
pub fn storage_for(spec: &ModelSpec, graph: &LayerGraph, ckpt: Option<&Checkpoint>) -> TensorStorage {
    let mut st = TensorStorage::from_spec(spec, graph);
    if let Some(c) = ckpt {
        for (name, bits) in c.bits() {
            st.bits.entry(name).or_insert(bits);
        }
        st.masks = c.masks();
    }
    st
}

/// Counts `spec`, optionally with the masks and dtypes of `ckpt`.
pub fn score_model(
    spec: &ModelSpec,
    ckpt: Option<&Checkpoint>,
    rules: &CountingRules,
) -> Result<CostReport, PipelineError> {
    let graph = expand(spec)?;
    if let Some(c) = ckpt {
        for (name, shape) in graph.tensors() {
            if let Some(t) = c.get(&name) {
                if t.shape != shape {
                    return Err(PipelineError::Config(format!(
                        "checkpoint tensor {name} has shape {:?}, model expects {shape:?}",
                        t.shape
                    )));
                }
            }
        }
    }
    Ok(count(&graph, rules, &storage_for(spec, &graph, ckpt))?)
}

// ---- evaluators ------------------------------------------------------------

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// A deterministic stand-in for training, for smoke tests and demos only.
///
/// * `search`: accuracy grows with the log of the candidate's raw parameter count.
/// * `improve`: 0.75 plus one effect per method; a method config of the form
///   `effect=<x>` sets its effect, otherwise it is derived from the name.
/// * `retrain`: decays quadratically with the round's sparsity.
pub fn surrogate_accuracy(req: &EvalRequest) -> Result<f64, EvalError> {
    let acc = match req.task.as_str() {
        "search" => {
            let spec: ModelSpec = serde_json::from_value(req.payload["spec"].clone())
                .map_err(|e| EvalError::Other(format!("surrogate: bad spec: {e}")))?;
            let graph = expand(&spec).map_err(|e| EvalError::Other(e.to_string()))?;
            let report = count(&graph, &CountingRules::default(), &TensorStorage::default())
                .map_err(|e| EvalError::Other(e.to_string()))?;
            0.45 + 0.06 * (1.0 + report.params_raw as f64 / 1e5).ln()
        }
        "improve" => {
            let names = req.payload["methods"].as_array().cloned().unwrap_or_default();
            let configs = req.payload["configs"].as_array().cloned().unwrap_or_default();
            let effect = |i: usize| -> f64 {
                let cfg = configs.get(i).and_then(|c| c.as_str()).unwrap_or("");
                if let Some(x) = cfg.strip_prefix("effect=").and_then(|x| x.trim().parse().ok()) {
                    return x;
                }
                let name = names[i].as_str().unwrap_or("");
                ((fnv1a(name) % 21) as f64 - 10.0) / 1000.0
            };
            0.75 + (0..names.len()).map(effect).sum::<f64>()
        }
        "retrain" => {
            let s = req.payload["sparsity"].as_f64().unwrap_or(0.0);
            0.805 - 0.02 * s * s
        }
        other => return Err(EvalError::Other(format!("surrogate: unknown task {other}"))),
    };
    Ok(acc.clamp(0.0, 1.0))
}

/// The surrogate as an [`Evaluator`].
pub struct SurrogateEvaluator;

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, req: &EvalRequest) -> Result<f64, EvalError> {
        surrogate_accuracy(req)
    }
}

/// Retraining through the evaluator contract. Each round's pruned
/// checkpoint is written to `<dir>/round-<r>.sipa`; the request payload
/// names it (`checkpoint`) and a path where the evaluator may leave a
/// fine-tuned checkpoint (`output`). If that file exists afterwards it
/// replaces the pruned weights. The reported accuracy is recorded.
pub struct EvaluatorRetrain<'a> {
    pub evaluator: &'a dyn Evaluator,
    pub dir: PathBuf,
    pub seed: u64,
}

impl RetrainHook for EvaluatorRetrain<'_> {
    fn retrain(
        &mut self,
        round: usize,
        ckpt: &Checkpoint,
    ) -> Result<(Checkpoint, Option<f64>), Box<dyn StdError + Send + Sync>> {
        fs::create_dir_all(&self.dir)?;
        let input = self.dir.join(format!("round-{round}.sipa"));
        let output = self.dir.join(format!("round-{round}.retrained.sipa"));
        ckpt.save(&input)?;
        if output.exists() {
            fs::remove_file(&output)?;
        }
        let sparsity = crate::prune::sparsity_report(ckpt, &PruneConfig::default()).sparsity;
        let req = EvalRequest {
            task: "retrain".into(),
            index: round,
            seed: self.seed ^ round as u64,
            payload: serde_json::json!({
                "round": round,
                "sparsity": sparsity,
                "checkpoint": input,
                "output": output,
            }),
        };
        let acc = self.evaluator.evaluate(&req)?;
        let out = if output.exists() {
            let c = Checkpoint::load(&output)?;
            fs::remove_file(&output)?;
            c
        } else {
            ckpt.clone()
        };
        Ok((out, Some(acc)))
    }
}

// ---- end-to-end configuration ----------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    #[default]
    Smbo,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchStage {
    pub space: SearchSpace,
    #[serde(default)]
    pub strategy: SearchStrategy,
    pub trials: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub fitness: FitnessParams,
}

fn default_warmup() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImproveStage {
    pub methods: Vec<MethodCandidate>,
    #[serde(default = "one")]
    pub repeats: usize,
    #[serde(default)]
    pub margin: f64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneStage {
    pub schedule: PruneSchedule,
    #[serde(default)]
    pub config: PruneConfig,
    /// Starting checkpoint; random weights for the model when absent.
    #[serde(default)]
    pub checkpoint: Option<String>,
    /// Fine-tune through the evaluator after every round.
    #[serde(default)]
    pub retrain: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEval {
    pub samples: usize,
    pub classes: usize,
    /// True-class logit margin per head, exits first and the main head last.
    pub skill: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EvalSource {
    Path(String),
    Synthetic { synthetic: SyntheticEval },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitStage {
    pub eval: EvalSource,
    /// Exit of the model to plan (also the eval-set head index).
    #[serde(default)]
    pub exit: usize,
    pub accuracy_floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    #[serde(default)]
    pub evaluator: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub jobs: usize,
    #[serde(default)]
    pub rules: CountingRules,
    #[serde(default)]
    pub search: Option<SearchStage>,
    #[serde(default)]
    pub improve: Option<ImproveStage>,
    #[serde(default)]
    pub prune: Option<PruneStage>,
    #[serde(default)]
    pub exit: Option<ExitStage>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<StageRecord>,
    pub plan: Option<ExitPlan>,
    pub spec: ModelSpec,
}

/// [`run_schedule`] that also saves the checkpoint after every round as
/// `<dir>/round-<r>.sipa`.
pub fn prune_rounds(
    start: &Checkpoint,
    sched: &PruneSchedule,
    cfg: &PruneConfig,
    hook: &mut dyn RetrainHook,
    dir: &Path,
) -> Result<ScheduleOutcome, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut history: Vec<RoundRecord> = Vec::with_capacity(sched.len());
    let mut current = start.clone();
    for (r, &target) in sched.rounds().iter().enumerate() {
        let round = r + 1;
        let mut hook_at = |_: usize, c: &Checkpoint| hook.retrain(round, c);
        let step =
            run_schedule(&current, &PruneSchedule::new(vec![target])?, cfg, &mut hook_at).map_err(|e| match e {
                PruneError::Hook { source, .. } => PruneError::Hook { round, source },
                other => other,
            })?;
        let mut rec = step.history.into_iter().next().expect("one round");
        rec.round = round;
        step.checkpoint.save(dir.join(format!("round-{round}.sipa")))?;
        history.push(rec);
        current = step.checkpoint;
    }
    Ok(ScheduleOutcome {
        history,
        checkpoint: current,
    })
}

fn record_path(out: &Path, stage: Stage) -> PathBuf {
    out.join("stages").join(format!("{}.record", stage.name()))
}

/// Runs every configured stage in order, writing artifacts to `out` as
/// each stage completes. Relative paths in the config resolve against
/// `base_dir`. A search interrupted earlier resumes from `out/trials.log`.
/// Accuracies come from the configured evaluator command.
pub fn run_pipeline(cfg: &RunConfig, base_dir: &Path, out: &Path) -> Result<RunSummary, PipelineError> {
    let command = cfg.evaluator.as_deref().map(CommandEvaluator::new);
    run_pipeline_with(cfg, base_dir, out, command.as_ref().map(|e| e as &dyn Evaluator))
}

/// [`run_pipeline`] with an in-process evaluator in place of the command.
pub fn run_pipeline_with(
    cfg: &RunConfig,
    base_dir: &Path,
    out: &Path,
    evaluator: Option<&dyn Evaluator>,
) -> Result<RunSummary, PipelineError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    cfg.rules.validate()?;
    let needs_eval = cfg.search.is_some() || cfg.improve.is_some() || cfg.prune.as_ref().is_some_and(|p| p.retrain);
    if needs_eval && evaluator.is_none() {
        return Err(PipelineError::Config(
            "an evaluator is required by the configured stages".into(),
        ));
    }
    let base = resolve_model(&cfg.model, base_dir)?;
    base.validate()?;
    let mut records = Vec::new();

    // searching
    let (spec, search_acc) = match &cfg.search {
        Some(s) => {
            let evaluator = evaluator.expect("checked above");
            let objective = ScalingObjective {
                base: base.clone(),
                evaluator,
                rules: cfg.rules.clone(),
                metric: s.fitness.metric,
            };
            let scfg = SearchConfig {
                trials: s.trials,
                warmup: s.warmup,
                seed: cfg.seed,
                jobs: cfg.jobs,
                ..SearchConfig::default()
            };
            let log_path = out.join("trials.log");
            let mut prior = read_trial_log(&log_path)?;
            prior.truncate(s.trials);
            // rewrite the log if it had a torn tail or more trials than asked for
            let lines = fs::read_to_string(&log_path).map(|t| t.lines().filter(|l| !l.trim().is_empty()).count());
            if lines.is_ok_and(|n| n != prior.len()) {
                let text: String = prior
                    .iter()
                    .map(|t| serde_json::to_string(t).expect("trials serialize") + "\n")
                    .collect();
                fs::write(&log_path, text).map_err(io_err(&log_path))?;
            }
            let mut log = TrialLog::append(&log_path).map_err(io_err(&log_path))?;
            let mut sink = |t: &crate::search::Trial| log.write(t);
            let outcome = match s.strategy {
                SearchStrategy::Smbo => smbo_search(&s.space, &objective, &scfg, &s.fitness, prior, &mut sink)?,
                SearchStrategy::Random => random_search(&s.space, &objective, &scfg, &s.fitness, prior, &mut sink)?,
            };
            let best = outcome
                .best
                .ok_or_else(|| PipelineError::Config("every search trial failed".into()))?;
            let spec = apply_point(&base, &best.point).map_err(PipelineError::Config)?;
            (spec, best.accuracy)
        }
        None => (base.clone(), None),
    };
    write_json(&out.join("model.json"), &spec)?;
    let dense = score_model(&spec, None, &cfg.rules)?;
    let rec = StageRecord::new(Stage::Searching, search_acc, dense.clone());
    write_json(&record_path(out, Stage::Searching), &rec)?;
    records.push(rec);

    // improving
    if let Some(im) = &cfg.improve {
        let evaluator = evaluator.expect("checked above");
        let outcome: ImproveOutcome = greedy_improve(&im.methods, evaluator, im.repeats, im.margin, cfg.seed)?;
        write_json(&out.join("improve.json"), &outcome)?;
        let rec = StageRecord::new(Stage::Improving, Some(outcome.final_mean), dense.clone());
        write_json(&record_path(out, Stage::Improving), &rec)?;
        records.push(rec);
    }

    // pruning
    let mut final_ckpt: Option<Checkpoint> = None;
    if let Some(p) = &cfg.prune {
        let graph = expand(&spec)?;
        let start = match &p.checkpoint {
            Some(path) => Checkpoint::load(base_dir.join(path))?,
            None => Checkpoint::from_graph(&graph, DType::F32, cfg.seed),
        };
        let ckpt_dir = out.join("ckpt");
        let ScheduleOutcome {
            history,
            checkpoint: current,
        } = match (p.retrain, evaluator) {
            (true, Some(evaluator)) => {
                let mut hook = EvaluatorRetrain {
                    evaluator,
                    dir: ckpt_dir.clone(),
                    seed: cfg.seed,
                };
                prune_rounds(&start, &p.schedule, &p.config, &mut hook, &ckpt_dir)?
            }
            _ => prune_rounds(&start, &p.schedule, &p.config, &mut IdentityRetrain, &ckpt_dir)?,
        };
        write_json(&out.join("prune.json"), &history)?;
        // without retraining the pruned model's accuracy is unknown
        let accuracy = history.last().and_then(|r| r.accuracy);
        let cost = score_model(&spec, Some(&current), &cfg.rules)?;
        let rec = StageRecord::new(Stage::Pruning, accuracy, cost);
        write_json(&record_path(out, Stage::Pruning), &rec)?;
        records.push(rec);
        final_ckpt = Some(current);
    }

    // accelerating
    let mut plan = None;
    if let Some(x) = &cfg.exit {
        if x.exit >= spec.exits.len() {
            return Err(PipelineError::Config(format!(
                "exit {} requested but the model defines {} exits",
                x.exit,
                spec.exits.len()
            )));
        }
        let set = match &x.eval {
            EvalSource::Path(path) => EvalSet::load(base_dir.join(path))?,
            EvalSource::Synthetic { synthetic: s } => {
                let set = EvalSet::synthetic(s.samples, s.classes, &s.skill, s.seed);
                set.save(out.join("eval.siev"))?;
                set
            }
        };
        let masks = final_ckpt.as_ref().map(Checkpoint::masks).unwrap_or_default();
        let breakdown = exit_costs(&spec, x.exit, &cfg.rules, &masks)?;
        let p = tune_threshold(&set, x.exit, &breakdown.costs, x.accuracy_floor)?;
        write_json(&out.join("exitplan.record"), &p)?;
        let rec = StageRecord::new(
            Stage::Accelerating,
            Some(p.total_accuracy),
            breakdown.expected_report(p.exit_ratio),
        );
        write_json(&record_path(out, Stage::Accelerating), &rec)?;
        records.push(rec);
        plan = Some(p);
    }

    Ok(RunSummary { records, plan, spec })
}

/// Loads every `*.record` file in `dir`, in pipeline order.
pub fn load_records(dir: &Path) -> Result<Vec<StageRecord>, PipelineError> {
    let mut records: Vec<StageRecord> = Vec::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "record"))
        .collect();
    paths.sort();
    for p in paths {
        records.push(read_json(&p)?);
    }
    records.sort_by_key(|r| r.stage);
    Ok(records)
}
