//! Magnitude pruning over checkpoints.
//!
//! Masks are cumulative: a position pruned in one call stays pruned in every
//! later call. Sparsity is always measured against the prunable raw parameter
//! count, so a schedule of targets is a list of absolute sparsities.

use crate::checkpoint::{Checkpoint, Mask, Tensor};
use crate::pattern;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::error::Error as StdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("target sparsity {0} is outside (0, 1)")]
    Target(f64),
    #[error("target sparsity {target} is below the current sparsity {current}")]
    BelowCurrent { target: f64, current: f64 },
    #[error("no prunable tensors (all tensors excluded)")]
    EmptyPrunableSet,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("retrain hook failed in round {round}: {source}")]
    Hook {
        round: usize,
        #[source]
        source: Box<dyn StdError + Send + Sync>,
    },
    #[error("retrained checkpoint lost tensor {0}")]
    MissingTensor(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Weight,
    /// Whole output filters (first dimension) scored by their L1 norm.
    Filter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    Layerwise,
}

/// Per-tensor divisor applied to magnitudes before global comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    #[default]
    LayerL2,
    LayerL1,
    LayerMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub granularity: Granularity,
    pub scope: Scope,
    pub normalization: Normalization,
    /// Name patterns (`*` wildcard) that are never pruned.
    pub exclusions: Vec<String>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            granularity: Granularity::Weight,
            scope: Scope::Global,
            normalization: Normalization::LayerL2,
            exclusions: vec!["*.bias".into(), "*bn*".into(), "*classifier*".into()],
        }
    }
}

impl PruneConfig {
    pub fn is_excluded(&self, name: &str) -> bool {
        self.exclusions.iter().any(|p| pattern::matches(p, name))
    }

    /// Whether `t` takes part in pruning under this configuration.
    pub fn is_prunable(&self, t: &Tensor) -> bool {
        if self.is_excluded(&t.name) || t.is_empty() {
            return false;
        }
        match self.granularity {
            Granularity::Weight => true,
            Granularity::Filter => t.shape.len() >= 2 && !looks_depthwise(&t.shape),
        }
    }
}

/// Depthwise kernels are stored as `[C, 1, k, k]`.
fn looks_depthwise(shape: &[usize]) -> bool {
    shape.len() == 4 && shape[1] == 1 && shape[0] > 1
}

/// Strictly increasing absolute sparsity targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr")]
pub struct PruneSchedule {
    rounds: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScheduleRepr {
    Rounds { rounds: Vec<f64> },
    Bare(Vec<f64>),
}

impl TryFrom<ScheduleRepr> for PruneSchedule {
    type Error = PruneError;

    fn try_from(r: ScheduleRepr) -> Result<Self, PruneError> {
        match r {
            ScheduleRepr::Rounds { rounds } | ScheduleRepr::Bare(rounds) => PruneSchedule::new(rounds),
        }
    }
}

impl PruneSchedule {
    pub fn new(rounds: Vec<f64>) -> Result<PruneSchedule, PruneError> {
        for (i, &r) in rounds.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return Err(PruneError::Schedule(format!(
                    "round {} target {r} is outside (0, 1)",
                    i + 1
                )));
            }
            if i > 0 && r <= rounds[i - 1] {
                return Err(PruneError::Schedule(format!(
                    "round {} target {r} does not increase",
                    i + 1
                )));
            }
        }
        Ok(PruneSchedule { rounds })
    }

    /// Builds targets from `(increment, count)` steps, e.g. `[(0.1, 5), (0.025, 4), (0.02, 5)]`.
    pub fn from_increments(steps: &[(f64, usize)]) -> Result<PruneSchedule, PruneError> {
        let mut rounds = Vec::new();
        let mut acc = 0.0;
        for &(inc, n) in steps {
            for _ in 0..n {
                acc += inc;
                // keep decimal targets tidy (0.1 * 3 would be 0.30000000000000004)
                rounds.push((acc * 1e9).round() / 1e9);
            }
        }
        PruneSchedule::new(rounds)
    }

    pub fn rounds(&self) -> &[f64] {
        &self.rounds
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub nnz: usize,
    pub size: usize,
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
    pub nnz: usize,
    pub size: usize,
    pub sparsity: f64,
}

/// Per-tensor and global sparsity over the prunable tensors of `ckpt`.
/// `nnz` counts positions kept by the mask.
pub fn sparsity_report(ckpt: &Checkpoint, cfg: &PruneConfig) -> SparsityReport {
    let tensors: Vec<TensorSparsity> = ckpt
        .tensors()
        .iter()
        .filter(|t| cfg.is_prunable(t))
        .map(|t| {
            let nnz = t.kept();
            TensorSparsity {
                name: t.name.clone(),
                nnz,
                size: t.len(),
                sparsity: 1.0 - nnz as f64 / t.len() as f64,
            }
        })
        .collect();
    let nnz: usize = tensors.iter().map(|t| t.nnz).sum();
    let size: usize = tensors.iter().map(|t| t.size).sum();
    let sparsity = if size == 0 { 0.0 } else { 1.0 - nnz as f64 / size as f64 };
    SparsityReport {
        tensors,
        nnz,
        size,
        sparsity,
    }
}

/// A pruning candidate. Ordering is total: key, then tensor name order, then
/// flat index, so equal keys resolve deterministically.
#[derive(Clone, Copy, Debug)]
struct Candidate {
    key: f64,
    tensor: u32,
    index: u32,
}

fn cmp_candidates(a: &Candidate, b: &Candidate) -> Ordering {
    a.key
        .total_cmp(&b.key)
        .then(a.tensor.cmp(&b.tensor))
        .then(a.index.cmp(&b.index))
}

fn tensor_norm(t: &Tensor, norm: Normalization) -> f64 {
    let vals = (0..t.len()).map(|i| (t.effective(i) as f64).abs());
    match norm {
        Normalization::None => 1.0,
        Normalization::LayerL2 => vals.map(|v| v * v).sum::<f64>().sqrt(),
        Normalization::LayerL1 => vals.sum(),
        Normalization::LayerMax => vals.fold(0.0, f64::max),
    }
}

fn scaled(v: f64, norm: f64) -> f64 {
    if norm > 0.0 {
        v / norm
    } else {
        0.0
    }
}

/// Prunes `ckpt` to `target` sparsity over its prunable tensors and returns
/// the updated checkpoint. Masked values are zeroed.
pub fn magnitude_prune(ckpt: &Checkpoint, cfg: &PruneConfig, target: f64) -> Result<Checkpoint, PruneError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(PruneError::Target(target));
    }
    let mut out = ckpt.clone();
    // indices of prunable tensors, in name order for tie-breaking
    let mut order: Vec<usize> = out
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| cfg.is_prunable(t))
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(PruneError::EmptyPrunableSet);
    }
    order.sort_by(|&a, &b| out.tensors()[a].name.cmp(&out.tensors()[b].name));

    let total: usize = order.iter().map(|&i| out.tensors()[i].len()).sum();
    let pruned: usize = order.iter().map(|&i| pruned_count(&out.tensors()[i])).sum();
    let goal = (target * total as f64).round() as usize;
    if goal < pruned {
        return Err(PruneError::BelowCurrent {
            target,
            current: pruned as f64 / total as f64,
        });
    }

    // make sure every prunable tensor carries a mask
    for &i in &order {
        let t = &mut out.tensors_mut()[i];
        if t.mask.is_none() {
            t.mask = Some(Mask::dense(t.shape.clone()));
        }
    }

    match (cfg.scope, cfg.granularity) {
        (Scope::Global, Granularity::Weight) => {
            let norms: Vec<f64> = order
                .par_iter()
                .map(|&i| tensor_norm(&out.tensors()[i], cfg.normalization))
                .collect();
            let mut cands: Vec<Candidate> = order
                .par_iter()
                .zip(norms.par_iter())
                .enumerate()
                .flat_map_iter(|(rank, (&i, &norm))| weight_candidates(&out.tensors()[i], rank as u32, norm))
                .collect();
            let need = goal - pruned;
            select_lowest(&mut cands, need);
            for c in &cands[..need] {
                prune_at(&mut out, order[c.tensor as usize], c.index as usize);
            }
        }
        (Scope::Layerwise, Granularity::Weight) => {
            for &i in &order {
                let t = &out.tensors()[i];
                let want = (target * t.len() as f64).round() as usize;
                let have = pruned_count(t);
                if want <= have {
                    continue;
                }
                let mut cands = weight_candidates(t, 0, 1.0).collect::<Vec<_>>();
                let need = want - have;
                select_lowest(&mut cands, need);
                for c in &cands[..need] {
                    prune_at(&mut out, i, c.index as usize);
                }
            }
        }
        (Scope::Global, Granularity::Filter) => {
            let mut cands: Vec<Candidate> = order
                .par_iter()
                .enumerate()
                .flat_map_iter(|(rank, &i)| {
                    let t = &out.tensors()[i];
                    filter_candidates(t, rank as u32, tensor_norm(t, cfg.normalization))
                })
                .collect();
            cands.sort_by(cmp_candidates);
            let mut done = pruned;
            for c in cands {
                if done >= goal {
                    break;
                }
                done += prune_filter(&mut out, order[c.tensor as usize], c.index as usize);
            }
        }
        (Scope::Layerwise, Granularity::Filter) => {
            for &i in &order {
                let t = &out.tensors()[i];
                let want = (target * t.len() as f64).round() as usize;
                let mut done = pruned_count(t);
                let mut cands: Vec<Candidate> = filter_candidates(t, 0, 1.0).collect();
                cands.sort_by(cmp_candidates);
                for c in cands {
                    if done >= want {
                        break;
                    }
                    done += prune_filter(&mut out, i, c.index as usize);
                }
            }
        }
    }
    out.apply_masks();
    Ok(out)
}

fn pruned_count(t: &Tensor) -> usize {
    t.len() - t.kept()
}

fn weight_candidates(t: &Tensor, rank: u32, norm: f64) -> impl Iterator<Item = Candidate> + '_ {
    (0..t.len())
        .filter(move |&j| t.mask.as_ref().is_none_or(|m| m.is_kept(j)))
        .map(move |j| Candidate {
            key: scaled((t.values()[j] as f64).abs(), norm),
            tensor: rank,
            index: j as u32,
        })
}

/// One candidate per filter that still has a kept weight; `index` is the filter number.
fn filter_candidates(t: &Tensor, rank: u32, norm: f64) -> impl Iterator<Item = Candidate> + '_ {
    let per = t.len() / t.shape[0];
    (0..t.shape[0]).filter_map(move |f| {
        let range = f * per..(f + 1) * per;
        let alive = range.clone().any(|j| t.mask.as_ref().is_none_or(|m| m.is_kept(j)));
        alive.then(|| Candidate {
            key: scaled(range.map(|j| (t.effective(j) as f64).abs()).sum(), norm),
            tensor: rank,
            index: f as u32,
        })
    })
}

/// Partially sorts so the `n` lowest candidates come first (in no particular order).
fn select_lowest(cands: &mut [Candidate], n: usize) {
    if n > 0 && n < cands.len() {
        cands.select_nth_unstable_by(n - 1, cmp_candidates);
    }
}

fn prune_at(ckpt: &mut Checkpoint, tensor: usize, idx: usize) {
    if let Some(m) = ckpt.tensors_mut()[tensor].mask.as_mut() {
        m.prune(idx);
    }
}

/// Masks a whole filter; returns how many weights were newly pruned.
fn prune_filter(ckpt: &mut Checkpoint, tensor: usize, filter: usize) -> usize {
    let t = &mut ckpt.tensors_mut()[tensor];
    let per = t.len() / t.shape[0];
    let m = t.mask.as_mut().expect("prunable tensors carry masks");
    let mut n = 0;
    for j in filter * per..(filter + 1) * per {
        if m.is_kept(j) {
            m.prune(j);
            n += 1;
        }
    }
    n
}

/// Fine-tunes a pruned checkpoint between rounds.
///
/// Implementations return the retrained checkpoint and, if known, its
/// accuracy. Masks missing from the returned checkpoint are restored.
pub trait RetrainHook {
    fn retrain(
        &mut self,
        round: usize,
        ckpt: &Checkpoint,
    ) -> Result<(Checkpoint, Option<f64>), Box<dyn StdError + Send + Sync>>;
}

impl<F> RetrainHook for F
where
    F: FnMut(usize, &Checkpoint) -> Result<(Checkpoint, Option<f64>), Box<dyn StdError + Send + Sync>>,
{
    fn retrain(
        &mut self,
        round: usize,
        ckpt: &Checkpoint,
    ) -> Result<(Checkpoint, Option<f64>), Box<dyn StdError + Send + Sync>> {
        self(round, ckpt)
    }
}

/// Returns the checkpoint unchanged with no accuracy.
pub struct IdentityRetrain;

impl RetrainHook for IdentityRetrain {
    fn retrain(
        &mut self,
        _round: usize,
        ckpt: &Checkpoint,
    ) -> Result<(Checkpoint, Option<f64>), Box<dyn StdError + Send + Sync>> {
        Ok((ckpt.clone(), None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub target: f64,
    pub sparsity: f64,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub history: Vec<RoundRecord>,
    pub checkpoint: Checkpoint,
}

/// Prunes to each scheduled target in turn, retraining after every round.
pub fn run_schedule(
    ckpt: &Checkpoint,
    sched: &PruneSchedule,
    cfg: &PruneConfig,
    hook: &mut dyn RetrainHook,
) -> Result<ScheduleOutcome, PruneError> {
    let mut current = ckpt.clone();
    let mut history = Vec::with_capacity(sched.len());
    for (r, &target) in sched.rounds().iter().enumerate() {
        let round = r + 1;
        let pruned = magnitude_prune(&current, cfg, target)?;
        let (mut retrained, accuracy) = hook
            .retrain(round, &pruned)
            .map_err(|source| PruneError::Hook { round, source })?;
        restore_masks(&pruned, &mut retrained)?;
        let sparsity = sparsity_report(&retrained, cfg).sparsity;
        log::info!("prune round {round}: target {target:.4}, sparsity {sparsity:.4}, accuracy {accuracy:?}");
        history.push(RoundRecord {
            round,
            target,
            sparsity,
            accuracy,
        });
        current = retrained;
    }
    Ok(ScheduleOutcome {
        history,
        checkpoint: current,
    })
}

/// Copies masks from `pruned` onto `retrained` and zeroes masked values, so a
/// hook that drops or ignores masks cannot revive pruned weights.
fn restore_masks(pruned: &Checkpoint, retrained: &mut Checkpoint) -> Result<(), PruneError> {
    for t in pruned.tensors() {
        let Some(mask) = &t.mask else { continue };
        let dst = retrained
            .tensors_mut()
            .iter_mut()
            .find(|d| d.name == t.name)
            .ok_or_else(|| PruneError::MissingTensor(t.name.clone()))?;
        if dst.shape != t.shape {
            return Err(PruneError::MissingTensor(t.name.clone()));
        }
        dst.mask = Some(mask.clone());
    }
    retrained.apply_masks();
    Ok(())
}
