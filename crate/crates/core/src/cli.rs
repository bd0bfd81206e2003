//! Command-line front end. The binary only parses arguments and calls [`run`].

use crate::checkpoint::{Checkpoint, DType};
use crate::cost::{exit_costs, CountingRules};
use crate::exit::{risk_coverage, risk_coverage_csv, sweep, tune_threshold, EvalSet};
use crate::model::{expand, LayerKind};
use crate::pipeline::{
    load_records, prune_rounds, read_json, render_records, resolve_model, score_model, surrogate_accuracy, write_json,
    EvaluatorRetrain, RunConfig, Stage, StageRecord,
};
use crate::prune::{magnitude_prune, sparsity_report, IdentityRetrain, PruneConfig, PruneSchedule};
use crate::search::{
    apply_point, greedy_improve, random_search, read_trial_log, smbo_search, CommandEvaluator, EvalRequest,
    FitnessParams, MethodCandidate, Metric, ScalingObjective, SearchConfig, SearchSpace, TrialLog,
};
use crate::trainmath::{cosine_lr, label_smooth, swish, BetaSampler, CosineScheduleParams};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "sipa",
    version,
    about = "Cost model, pruning, early-exit and search tooling for efficient networks"
)]
pub struct Cli {
    /// Seed for every random choice (default 0, or the run config's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel evaluations during search.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (a CSV file for risk-coverage).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count a model and print its score row.
    Score(ScoreArgs),
    /// Render stage records (files or directories) as a score table.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
    },
    /// Prune a checkpoint once to a target sparsity.
    Prune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        target: f64,
    },
    /// Prune over a schedule, optionally retraining between rounds.
    PruneSchedule {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluator command run after every round.
        #[arg(long)]
        retrain_cmd: Option<String>,
    },
    /// Architecture search.
    #[command(subcommand)]
    Search(SearchCommand),
    /// Greedy selection of training methods.
    Improve {
        #[arg(long)]
        methods: PathBuf,
        #[arg(long)]
        evaluator: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
    },
    /// Tune (or sweep) an early-exit threshold.
    ExitPlan(ExitPlanArgs),
    /// Risk-coverage curve of an exit head as CSV.
    RiskCoverage {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        head: usize,
    },
    /// Run the configured stages end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Small utilities.
    #[command(subcommand)]
    Util(UtilCommand),
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Spec file, `builtin:wrn28-10` or `builtin:baseline`.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Label the row with a pipeline stage; with --out, also write its record.
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Measured accuracy to show alongside the scores.
    #[arg(long)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum SearchCommand {
    /// Search compound-scaling coefficients and per-block arguments.
    Scaling(ScalingArgs),
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum Strategy {
    #[default]
    Smbo,
    Random,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MetricArg {
    ParamScore,
    OpScore,
    Total,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long)]
    pub base: String,
    #[arg(long)]
    pub space: PathBuf,
    #[arg(long)]
    pub evaluator: String,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value_t = Strategy::Smbo)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 1.0)]
    pub penalty_weight: f64,
    #[arg(long, default_value_t = 2.0)]
    pub w: f64,
    #[arg(long, default_value_t = 1.0)]
    pub thres: f64,
    #[arg(long, value_enum, default_value_t = MetricArg::OpScore)]
    pub metric: MetricArg,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExitPlanArgs {
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub model: String,
    /// Exit index; also the eval-set head holding that exit's logits.
    #[arg(long)]
    pub head: usize,
    #[arg(long)]
    pub accuracy_floor: Option<f64>,
    /// Evaluate these thresholds instead of tuning.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
    /// Checkpoint whose masks apply to the costs.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum UtilCommand {
    /// Deterministic stand-in evaluator for smoke tests; prints an accuracy.
    SurrogateEval { request: PathBuf },
    /// Write a synthetic eval set (one skill per head, main head last).
    SynthEval {
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        skill: Vec<f64>,
        path: PathBuf,
    },
    /// Write a random checkpoint for a model.
    SynthCkpt {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "f32")]
        dtype: String,
        path: PathBuf,
    },
    /// Print a model's layers with their costs.
    Expand {
        #[arg(long)]
        model: String,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Cosine learning rate at an epoch.
    Lr {
        #[arg(long)]
        eta_min: f64,
        #[arg(long)]
        eta_max: f64,
        #[arg(long)]
        t_max: f64,
        #[arg(long)]
        epoch: f64,
    },
    /// Smoothed one-hot target as JSON.
    Smooth {
        #[arg(long)]
        class: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        eps: f64,
    },
    Swish {
        #[arg(long, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
    },
    /// Draw mixup coefficients from Beta(a, b).
    Beta {
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = 1.0)]
        b: f64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
}

fn rules_from(path: Option<&Path>) -> Result<CountingRules> {
    let rules = match path {
        Some(p) => read_json(p)?,
        None => CountingRules::default(),
    };
    rules.validate()?;
    Ok(rules)
}

fn out_dir(cli_out: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let dir = cli_out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let jobs = cli.jobs.unwrap_or(1).max(1);
    let here = Path::new(".");
    match cli.command {
        Command::Score(a) => {
            let spec = resolve_model(&a.model, here)?;
            let ckpt = a.ckpt.as_deref().map(Checkpoint::load).transpose()?;
            let rules = rules_from(a.rules.as_deref())?;
            let report = score_model(&spec, ckpt.as_ref(), &rules)?;
            let label = a.stage.map(Stage::name).unwrap_or(spec.name.as_str());
            let row = crate::cost::TableRow {
                stage: label,
                accuracy: a.accuracy,
                cost: &report,
            };
            print!("{}", crate::cost::render_table(&[row]));
            if let (Some(stage), Some(out)) = (a.stage, &cli.out) {
                let rec = StageRecord::new(stage, a.accuracy, report);
                write_json(&out.join("stages").join(format!("{}.record", stage.name())), &rec)?;
            }
        }
        Command::Report { records } => {
            let mut all = Vec::new();
            for p in &records {
                if p.is_dir() {
                    let stages = p.join("stages");
                    all.extend(load_records(if stages.is_dir() { &stages } else { p })?);
                } else {
                    all.push(read_json::<StageRecord>(p)?);
                }
            }
            if all.is_empty() {
                bail!("no stage records found");
            }
            print!("{}", render_records(&all));
        }
        Command::Prune { ckpt, config, target } => {
            let cfg: PruneConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let pruned = magnitude_prune(&Checkpoint::load(&ckpt)?, &cfg, target)?;
            let dir = out_dir(&cli.out, ".")?;
            let path = dir.join("pruned.sipa");
            pruned.save(&path)?;
            let rep = sparsity_report(&pruned, &cfg);
            println!(
                "{} nnz {} of {} (sparsity {:.6})",
                path.display(),
                rep.nnz,
                rep.size,
                rep.sparsity
            );
        }
        Command::PruneSchedule {
            ckpt,
            schedule,
            config,
            retrain_cmd,
        } => {
            let cfg: PruneConfig = config.as_deref().map(read_json).transpose()?.unwrap_or_default();
            let sched: PruneSchedule = read_json(&schedule)?;
            let start = Checkpoint::load(&ckpt)?;
            let dir = out_dir(&cli.out, ".")?;
            let ckpt_dir = dir.join("ckpt");
            let outcome = match retrain_cmd {
                Some(cmd) => {
                    let evaluator = CommandEvaluator::new(cmd);
                    let mut hook = EvaluatorRetrain {
                        evaluator: &evaluator,
                        dir: ckpt_dir.clone(),
                        seed,
                    };
                    prune_rounds(&start, &sched, &cfg, &mut hook, &ckpt_dir)?
                }
                None => prune_rounds(&start, &sched, &cfg, &mut IdentityRetrain, &ckpt_dir)?,
            };
            write_json(&dir.join("prune.json"), &outcome.history)?;
            println!("round  target    sparsity  accuracy");
            for r in &outcome.history {
                let acc = r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
                println!("{:>5}  {:.4}    {:.6}  {acc}", r.round, r.target, r.sparsity);
            }
        }
        Command::Search(SearchCommand::Scaling(a)) => {
            let base = resolve_model(&a.base, here)?;
            let space: SearchSpace = read_json(&a.space)?;
            let fit = FitnessParams {
                penalty_weight: a.penalty_weight,
                w: a.w,
                thres: a.thres,
                metric: match a.metric {
                    MetricArg::ParamScore => Metric::ParamScore,
                    MetricArg::OpScore => Metric::OpScore,
                    MetricArg::Total => Metric::Total,
                },
            };
            let evaluator = CommandEvaluator::new(a.evaluator);
            let objective = ScalingObjective {
                base: base.clone(),
                evaluator: &evaluator,
                rules: rules_from(a.rules.as_deref())?,
                metric: fit.metric,
            };
            let cfg = SearchConfig {
                trials: a.trials,
                warmup: a.warmup,
                seed,
                jobs,
                ..SearchConfig::default()
            };
            let dir = out_dir(&cli.out, ".")?;
            let log_path = dir.join("trials.log");
            let mut prior = read_trial_log(&log_path)?;
            prior.truncate(a.trials);
            if !prior.is_empty() {
                log::info!("resuming from {} logged trials", prior.len());
            }
            let mut log = TrialLog::append(&log_path).with_context(|| format!("opening {}", log_path.display()))?;
            let mut sink = |t: &crate::search::Trial| log.write(t);
            let outcome = match a.strategy {
                Strategy::Smbo => smbo_search(&space, &objective, &cfg, &fit, prior, &mut sink)?,
                Strategy::Random => random_search(&space, &objective, &cfg, &fit, prior, &mut sink)?,
            };
            let Some(best) = outcome.best else {
                bail!("every trial failed");
            };
            let spec = apply_point(&base, &best.point).map_err(anyhow::Error::msg)?;
            write_json(&dir.join("model.json"), &spec)?;
            print_json(&best)?;
        }
        Command::Improve {
            methods,
            evaluator,
            repeats,
            margin,
        } => {
            let methods: Vec<MethodCandidate> = read_json(&methods)?;
            let evaluator = CommandEvaluator::new(evaluator);
            let outcome = greedy_improve(&methods, &evaluator, repeats, margin, seed)?;
            if let Some(out) = &cli.out {
                write_json(&out.join("improve.json"), &outcome)?;
            }
            print_json(&outcome)?;
        }
        Command::ExitPlan(a) => {
            let set = EvalSet::load(&a.eval)?;
            let spec = resolve_model(&a.model, here)?;
            if a.head >= spec.exits.len() {
                bail!(
                    "model {} defines {} exits; --head {} is out of range",
                    spec.name,
                    spec.exits.len(),
                    a.head
                );
            }
            let masks = match &a.ckpt {
                Some(p) => Checkpoint::load(p)?.masks(),
                None => Default::default(),
            };
            let costs = exit_costs(&spec, a.head, &rules_from(a.rules.as_deref())?, &masks)?.costs;
            match (&a.thresholds, a.accuracy_floor) {
                (Some(ts), _) => print_json(&sweep(&set, a.head, ts, &costs)?)?,
                (None, Some(floor)) => {
                    let plan = tune_threshold(&set, a.head, &costs, floor)?;
                    if !plan.feasible {
                        log::warn!("no threshold reaches accuracy {floor}; exit disabled");
                    }
                    if let Some(out) = &cli.out {
                        write_json(&out.join("exitplan.record"), &plan)?;
                    }
                    print_json(&plan)?;
                }
                (None, None) => bail!("give --accuracy-floor to tune or --thresholds to sweep"),
            }
        }
        Command::RiskCoverage { eval, head } => {
            let set = EvalSet::load(&eval)?;
            let csv = risk_coverage_csv(&risk_coverage(&set, head)?);
            match &cli.out {
                Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Run { config } => {
            let mut cfg: RunConfig = read_json(&config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(j) = cli.jobs {
                cfg.jobs = j.max(1);
            }
            let base_dir = config.parent().unwrap_or(here);
            let dir = out_dir(&cli.out, "sipa-run")?;
            let summary = crate::pipeline::run_pipeline(&cfg, base_dir, &dir)?;
            print!("{}", render_records(&summary.records));
            if let Some(plan) = &summary.plan {
                println!(
                    "exit {} at threshold {:.4}: exit ratio {:.4}, accuracy {:.4}",
                    plan.head, plan.threshold, plan.exit_ratio, plan.total_accuracy
                );
            }
        }
        Command::Util(u) => util(u, seed)?,
    }
    Ok(())
}

fn util(cmd: UtilCommand, seed: u64) -> Result<()> {
    match cmd {
        UtilCommand::SurrogateEval { request } => {
            let req: EvalRequest = read_json(&request)?;
            println!("{}", surrogate_accuracy(&req)?);
        }
        UtilCommand::SynthEval {
            samples,
            classes,
            skill,
            path,
        } => {
            if skill.len() < 2 || classes < 2 || samples == 0 {
                bail!("need samples > 0, at least 2 classes and at least 2 heads");
            }
            EvalSet::synthetic(samples, classes, &skill, seed).save(&path)?;
        }
        UtilCommand::SynthCkpt { model, dtype, path } => {
            let dtype = match dtype.as_str() {
                "f32" => DType::F32,
                "f16" => DType::F16,
                other => bail!("unknown dtype {other} (f32 or f16)"),
            };
            let graph = expand(&resolve_model(&model, Path::new("."))?)?;
            Checkpoint::from_graph(&graph, dtype, seed).save(&path)?;
        }
        UtilCommand::Expand { model, rules } => {
            let spec = resolve_model(&model, Path::new("."))?;
            let graph = expand(&spec)?;
            let report = crate::cost::count(&graph, &rules_from(rules.as_deref())?, &Default::default())?;
            let mut out = std::io::stdout().lock();
            writeln!(
                out,
                "{:<28} {:<14} {:>16} {:>12} {:>14} {:>14}",
                "layer", "kind", "output", "params", "mults", "adds"
            )?;
            for (l, c) in graph.layers.iter().zip(&report.per_layer) {
                let kind = match l.kind {
                    LayerKind::Conv2d { .. } => "conv",
                    LayerKind::Dense { .. } => "dense",
                    LayerKind::BatchNorm => "batchnorm",
                    LayerKind::Activation(_) => "activation",
                    LayerKind::Pool(_) => "pool",
                    LayerKind::Add { .. } => "add",
                    LayerKind::ChannelScale { .. } => "scale",
                    LayerKind::Softmax => "softmax",
                };
                let shape = format!("{}x{}x{}", l.output.h, l.output.w, l.output.c);
                writeln!(
                    out,
                    "{:<28} {:<14} {:>16} {:>12} {:>14} {:>14}",
                    l.name, kind, shape, c.params_raw, c.mults, c.adds
                )?;
            }
            writeln!(
                out,
                "total: {} params, {} mults, {} adds, {} weight layers",
                report.params_raw,
                report.mults,
                report.adds,
                graph.weight_layer_count()
            )?;
        }
        UtilCommand::Lr {
            eta_min,
            eta_max,
            t_max,
            epoch,
        } => println!(
            "{}",
            cosine_lr(epoch, &CosineScheduleParams::new(eta_min, eta_max, t_max)?)
        ),
        UtilCommand::Smooth { class, classes, eps } => print_json(&label_smooth(class, classes, eps)?)?,
        UtilCommand::Swish { x, beta } => println!("{}", swish(x, beta)),
        UtilCommand::Beta { a, b, count } => {
            let mut s = BetaSampler::new(a, b, seed)?;
            for _ in 0..count {
                println!("{}", s.sample());
            }
        }
    }
    Ok(())
}
