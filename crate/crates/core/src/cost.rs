//! Parameter-storage and math-operation counting under MicroNet-style rules.
//!
//! A multiply-accumulate is one multiplication plus one addition. Storage is
//! reported in 32-bit-equivalent parameters: a 16-bit weight counts as half a
//! parameter, and a pruned tensor pays for its surviving weights plus one bit
//! per position for the sparsity bitmask.

use crate::checkpoint::Mask;
use crate::model::{Activation, LayerGraph, LayerKind, ModelSpec, PoolKind, SpecError, Stage};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

/// WideResNet-28-10 parameter count used to normalize storage.
pub const REFERENCE_PARAMS: f64 = 36.5e6;
/// WideResNet-28-10 math operations used to normalize compute.
pub const REFERENCE_OPS: f64 = 10.49e9;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("mask for {tensor} has shape {mask:?}, tensor has shape {tensor_shape:?}")]
    MaskShape {
        tensor: String,
        mask: Vec<usize>,
        tensor_shape: Vec<usize>,
    },
    #[error("unsupported bit width {bits} for {tensor}")]
    BitWidth { tensor: String, bits: u8 },
    #[error("invalid counting rules: {0}")]
    Rules(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnPolicy {
    /// Folded into the preceding convolution: no parameters, no operations.
    #[default]
    Folded,
    /// Two parameters per channel, one mult and one add per output element.
    Affine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityAccounting {
    /// Masks are ignored; every weight is stored and used.
    Off,
    #[default]
    NonzeroPlusBitmask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizationAccounting {
    Off,
    #[default]
    BitsOver32,
}

/// Counting rules. Activation costs are per element: ReLU is charged as
/// `relu_ops` additions (a comparison), sigmoid as `sigmoid_ops`
/// multiplications, swish as a sigmoid plus one multiplication. Softmax pays
/// `sigmoid_ops` multiplications and one addition per element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountingRules {
    pub count_bias: bool,
    pub bn_policy: BnPolicy,
    pub relu_ops: u64,
    pub sigmoid_ops: u64,
    /// Additions per input element for average pooling.
    pub pool_adds: u64,
    pub sparsity_accounting: SparsityAccounting,
    pub quantization_accounting: QuantizationAccounting,
}

impl Default for CountingRules {
    fn default() -> Self {
        CountingRules {
            count_bias: true,
            bn_policy: BnPolicy::Folded,
            relu_ops: 1,
            sigmoid_ops: 4,
            pool_adds: 1,
            sparsity_accounting: SparsityAccounting::NonzeroPlusBitmask,
            quantization_accounting: QuantizationAccounting::BitsOver32,
        }
    }
}

impl CountingRules {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.sigmoid_ops < 1 {
            return Err(CostError::Rules("sigmoid_ops must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-tensor storage inputs for [`count`]: optional prune masks and bit
/// widths. Tensors without an entry are dense and 32-bit.
#[derive(Clone, Debug, Default)]
pub struct TensorStorage {
    pub masks: BTreeMap<String, Mask>,
    pub bits: BTreeMap<String, u8>,
}

impl TensorStorage {
    /// Bit widths for every tensor of `graph` taken from the spec's
    /// quantization patterns.
    pub fn from_spec(spec: &ModelSpec, graph: &LayerGraph) -> TensorStorage {
        let mut bits = BTreeMap::new();
        for (name, _) in graph.tensors() {
            if let Some(b) = spec.bits_for(&name) {
                bits.insert(name, b);
            }
        }
        // BN affine parameters are not graph tensors but may still be matched
        for l in &graph.layers {
            if l.kind == LayerKind::BatchNorm {
                let name = l.weight_name();
                if let Some(b) = spec.bits_for(&name) {
                    bits.insert(name, b);
                }
            }
        }
        TensorStorage {
            masks: BTreeMap::new(),
            bits,
        }
    }

    pub fn with_masks(mut self, masks: BTreeMap<String, Mask>) -> Self {
        self.masks = masks;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params_raw: u64,
    pub params_effective: f64,
    pub mults: u64,
    pub adds: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostReportRepr")]
pub struct CostReport {
    pub params_raw: u64,
    pub params_effective: f64,
    pub mults: u64,
    pub adds: u64,
    pub ops_total: u64,
    pub per_layer: Vec<LayerCost>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostReportRepr {
    #[serde(default)]
    params_raw: u64,
    params_effective: f64,
    mults: u64,
    adds: u64,
    ops_total: Option<u64>,
    #[serde(default)]
    per_layer: Vec<LayerCost>,
}

impl TryFrom<CostReportRepr> for CostReport {
    type Error = String;

    fn try_from(r: CostReportRepr) -> Result<Self, Self::Error> {
        let total = r.mults + r.adds;
        if let Some(t) = r.ops_total {
            if t != total {
                return Err(format!("ops_total {t} != mults + adds ({total})"));
            }
        }
        if r.params_effective.is_nan() || r.params_effective < 0.0 {
            return Err("params_effective must be >= 0".into());
        }
        Ok(CostReport {
            params_raw: r.params_raw,
            params_effective: r.params_effective,
            mults: r.mults,
            adds: r.adds,
            ops_total: total,
            per_layer: r.per_layer,
        })
    }
}

impl CostReport {
    fn from_layers(per_layer: Vec<LayerCost>) -> CostReport {
        let params_raw = per_layer.iter().map(|l| l.params_raw).sum();
        let params_effective = per_layer.iter().map(|l| l.params_effective).sum();
        let mults = per_layer.iter().map(|l| l.mults).sum();
        let adds = per_layer.iter().map(|l| l.adds).sum();
        CostReport {
            params_raw,
            params_effective,
            mults,
            adds,
            ops_total: mults + adds,
            per_layer,
        }
    }

    /// A report built from totals only, e.g. counts published elsewhere.
    pub fn from_totals(params_effective: f64, mults: u64, adds: u64) -> CostReport {
        CostReport {
            params_raw: params_effective.round() as u64,
            params_effective,
            mults,
            adds,
            ops_total: mults + adds,
            per_layer: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub param_score: f64,
    pub op_score: f64,
    pub total: f64,
}

pub fn score(report: &CostReport) -> ScoreReport {
    let param_score = report.params_effective / REFERENCE_PARAMS;
    let op_score = report.ops_total as f64 / REFERENCE_OPS;
    ScoreReport {
        param_score,
        op_score,
        total: param_score + op_score,
    }
}

struct TensorCost {
    raw: u64,
    effective: f64,
    /// Weights that still participate in arithmetic.
    active: u64,
}

fn tensor_cost(
    name: &str,
    shape: &[usize],
    rules: &CountingRules,
    storage: &TensorStorage,
    maskable: bool,
) -> Result<TensorCost, CostError> {
    let size: u64 = shape.iter().product::<usize>() as u64;
    let bits = storage.bits.get(name).copied().unwrap_or(32);
    if bits != 16 && bits != 32 {
        return Err(CostError::BitWidth {
            tensor: name.into(),
            bits,
        });
    }
    let factor = match rules.quantization_accounting {
        QuantizationAccounting::Off => 1.0,
        QuantizationAccounting::BitsOver32 => bits as f64 / 32.0,
    };
    let mask = if maskable { storage.masks.get(name) } else { None };
    if let Some(m) = mask {
        if m.shape != shape {
            return Err(CostError::MaskShape {
                tensor: name.into(),
                mask: m.shape.clone(),
                tensor_shape: shape.to_vec(),
            });
        }
    }
    let (effective, active) = match (mask, rules.sparsity_accounting) {
        (Some(m), SparsityAccounting::NonzeroPlusBitmask) => {
            let nnz = m.kept() as u64;
            (nnz as f64 * factor + size as f64 / 32.0, nnz)
        }
        _ => (size as f64 * factor, size),
    };
    Ok(TensorCost {
        raw: size,
        effective,
        active,
    })
}

/// Counts one graph. Convolution and dense weights are used once per output
/// position; with sparsity accounting their operations scale with the
/// number of surviving weights.
pub fn count(graph: &LayerGraph, rules: &CountingRules, storage: &TensorStorage) -> Result<CostReport, CostError> {
    rules.validate()?;
    let mut per_layer = Vec::with_capacity(graph.layers.len());
    for layer in &graph.layers {
        let out = layer.output.elements();
        let inp = layer.input.elements();
        let mut lc = LayerCost {
            layer: layer.name.clone(),
            params_raw: 0,
            params_effective: 0.0,
            mults: 0,
            adds: 0,
        };
        match layer.kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                let shape = layer.weight_shape().expect("weight layer");
                let uses = (layer.output.h * layer.output.w) as u64;
                let w = tensor_cost(&layer.weight_name(), &shape, rules, storage, true)?;
                lc.params_raw += w.raw;
                lc.params_effective += w.effective;
                lc.mults += uses * w.active;
                lc.adds += uses * w.active;
                if let (Some(n), true) = (layer.bias_len(), rules.count_bias) {
                    let b = tensor_cost(&layer.bias_name(), &[n], rules, storage, false)?;
                    lc.params_raw += b.raw;
                    lc.params_effective += b.effective;
                    lc.adds += out;
                }
            }
            LayerKind::BatchNorm => {
                if rules.bn_policy == BnPolicy::Affine {
                    let c = layer.output.c;
                    let p = tensor_cost(&layer.weight_name(), &[2 * c], rules, storage, false)?;
                    lc.params_raw += p.raw;
                    lc.params_effective += p.effective;
                    lc.mults += out;
                    lc.adds += out;
                }
            }
            LayerKind::Activation(Activation::Relu) => lc.adds += rules.relu_ops * out,
            LayerKind::Activation(Activation::Sigmoid) => lc.mults += rules.sigmoid_ops * out,
            LayerKind::Activation(Activation::Swish) => lc.mults += (rules.sigmoid_ops + 1) * out,
            LayerKind::Pool(PoolKind::Global) => lc.adds += rules.pool_adds * inp,
            LayerKind::Pool(PoolKind::Avg { kernel, .. } | PoolKind::Max { kernel, .. }) => {
                lc.adds += rules.pool_adds * (kernel * kernel) as u64 * out
            }
            LayerKind::Add { .. } => lc.adds += out,
            LayerKind::ChannelScale { .. } => lc.mults += out,
            LayerKind::Softmax => {
                lc.mults += rules.sigmoid_ops * out;
                lc.adds += out;
            }
        }
        per_layer.push(lc);
    }
    Ok(CostReport::from_layers(per_layer))
}

/// Mean operations per sample when a fraction `exit_ratio` of samples stop
/// at an early exit. `c_path` is the cost up to and including the exit
/// module; non-exiting samples pay the full network plus `c_overhead`.
pub fn expected_ops_with_exit(c_main: f64, c_path: f64, c_overhead: f64, exit_ratio: f64) -> f64 {
    exit_ratio * c_path + (1.0 - exit_ratio) * (c_main + c_overhead)
}

/// Operation counts needed to price an early exit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitCosts {
    pub c_main: f64,
    pub c_path: f64,
    pub c_overhead: f64,
}

impl ExitCosts {
    pub fn new(c_main: f64, c_path: f64, c_overhead: f64) -> Self {
        ExitCosts {
            c_main,
            c_path,
            c_overhead,
        }
    }

    pub fn expected_ops(&self, exit_ratio: f64) -> f64 {
        expected_ops_with_exit(self.c_main, self.c_path, self.c_overhead, exit_ratio)
    }
}

/// Costs of the main network and of exit module `exit` of `spec`.
#[derive(Clone, Debug)]
pub struct ExitCostBreakdown {
    pub main: CostReport,
    pub module: CostReport,
    /// Main-path layers up to and including the attachment block.
    pub prefix_mults: u64,
    pub prefix_adds: u64,
    pub costs: ExitCosts,
}

impl ExitCostBreakdown {
    /// Expected per-sample cost of the network with its exit at `exit_ratio`.
    /// Parameters cover the main network plus the exit module; mults and adds
    /// are averaged separately and rounded to whole operations.
    pub fn expected_report(&self, exit_ratio: f64) -> CostReport {
        let r = exit_ratio;
        let avg = |prefix: u64, main: u64, module: u64| -> u64 {
            (r * (prefix + module) as f64 + (1.0 - r) * (main + module) as f64).round() as u64
        };
        let mults = avg(self.prefix_mults, self.main.mults, self.module.mults);
        let adds = avg(self.prefix_adds, self.main.adds, self.module.adds);
        CostReport {
            params_raw: self.main.params_raw + self.module.params_raw,
            params_effective: self.main.params_effective + self.module.params_effective,
            mults,
            adds,
            ops_total: mults + adds,
            per_layer: Vec::new(),
        }
    }
}

pub fn exit_costs(
    spec: &ModelSpec,
    exit: usize,
    rules: &CountingRules,
    masks: &BTreeMap<String, Mask>,
) -> Result<ExitCostBreakdown, CostError> {
    let main_graph = crate::model::expand(spec)?;
    let exit_graph = crate::model::expand_exit(spec, exit)?;
    let attach = spec.exits[exit].attach_after_block;
    let main = count(
        &main_graph,
        rules,
        &TensorStorage::from_spec(spec, &main_graph).with_masks(masks.clone()),
    )?;
    let module = count(
        &exit_graph,
        rules,
        &TensorStorage::from_spec(spec, &exit_graph).with_masks(masks.clone()),
    )?;
    let (prefix_mults, prefix_adds) = main_graph
        .layers
        .iter()
        .zip(&main.per_layer)
        .filter(|(l, _)| match l.stage {
            Stage::Stem => true,
            Stage::Block(j) => j <= attach,
            _ => false,
        })
        .fold((0, 0), |(m, a), (_, c)| (m + c.mults, a + c.adds));
    let costs = ExitCosts::new(
        main.ops_total as f64,
        (prefix_mults + prefix_adds + module.ops_total) as f64,
        module.ops_total as f64,
    );
    Ok(ExitCostBreakdown {
        main,
        module,
        prefix_mults,
        prefix_adds,
        costs,
    })
}

/// One row of a per-stage score table.
#[derive(Clone, Debug)]
pub struct TableRow<'a> {
    pub stage: &'a str,
    pub accuracy: Option<f64>,
    pub cost: &'a CostReport,
}

/// Renders rows in the column layout
/// `Stage | Accuracy | Parameters(n) | FLOPS(n) | Parameters(s) | FLOPS(s) | Total`.
pub fn render_table(rows: &[TableRow<'_>]) -> String {
    let mut out = String::new();
    let sw = rows.iter().map(|r| r.stage.len()).max().unwrap_or(0).max(12);
    let _ = writeln!(
        out,
        "{:<sw$} | {:>8} | {:>13} | {:>10} | {:>13} | {:>10} | {:>10}",
        "Stage", "Accuracy", "Parameters(n)", "FLOPS(n)", "Parameters(s)", "FLOPS(s)", "Total"
    );
    let _ = writeln!(out, "{}", "-".repeat(sw + 8 + 13 + 10 + 13 + 10 + 10 + 18));
    for row in rows {
        let s = score(row.cost);
        let acc = row
            .accuracy
            .map(|a| format!("{:.2}%", a * 100.0))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<sw$} | {:>8} | {:>13} | {:>10} | {:>13.6} | {:>10.6} | {:>10.6}",
            row.stage,
            acc,
            format!("{:.3}M", row.cost.params_effective / 1e6),
            format!("{:.3}B", row.cost.ops_total as f64 / 1e9),
            s.param_score,
            s.op_score,
            s.total
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, Padding, Shape, Source};

    fn conv_graph(cin: usize, cout: usize, hw: usize, k: usize) -> LayerGraph {
        LayerGraph {
            input: Shape::new(hw, hw, cin),
            layers: vec![Layer {
                name: "c".into(),
                kind: LayerKind::Conv2d {
                    out_channels: cout,
                    kernel: k,
                    stride: 1,
                    groups: 1,
                    padding: Padding::Same,
                    bias: false,
                },
                source: Source::Input,
                input: Shape::new(hw, hw, cin),
                output: Shape::new(hw, hw, cout),
                stage: Stage::Stem,
            }],
        }
    }

    #[test]
    fn conv3x3_counts() {
        let g = conv_graph(16, 32, 32, 3);
        let r = count(&g, &CountingRules::default(), &TensorStorage::default()).unwrap();
        assert_eq!(r.params_raw, 4608);
        assert_eq!(r.mults, 4_718_592);
        assert_eq!(r.adds, 4_718_592);
        assert_eq!(r.ops_total, 9_437_184);
        assert_eq!(r.params_effective, 4608.0);
    }

    #[test]
    fn half_precision_halves_storage() {
        let g = conv_graph(16, 32, 32, 3);
        let mut st = TensorStorage::default();
        st.bits.insert("c.weight".into(), 16);
        let r = count(&g, &CountingRules::default(), &st).unwrap();
        assert_eq!(r.params_effective, 2304.0);
        assert_eq!(r.params_raw, 4608);
    }

    #[test]
    fn bitmask_accounting() {
        // 1000-weight dense layer, 640 pruned, 16-bit
        let g = LayerGraph {
            input: Shape::new(1, 1, 40),
            layers: vec![Layer {
                name: "fc".into(),
                kind: LayerKind::Dense {
                    out_features: 25,
                    bias: false,
                },
                source: Source::Input,
                input: Shape::new(1, 1, 40),
                output: Shape::new(1, 1, 25),
                stage: Stage::Classifier,
            }],
        };
        let mut keep = vec![1u8; 1000];
        keep[..640].iter_mut().for_each(|v| *v = 0);
        let mut st = TensorStorage::default();
        st.bits.insert("fc.weight".into(), 16);
        st.masks
            .insert("fc.weight".into(), Mask::new(vec![25, 40], keep).unwrap());
        let r = count(&g, &CountingRules::default(), &st).unwrap();
        assert_eq!(r.params_effective, 211.25);
        assert_eq!(r.mults, 360);

        let off = CountingRules {
            sparsity_accounting: SparsityAccounting::Off,
            ..CountingRules::default()
        };
        let r = count(&g, &off, &st).unwrap();
        assert_eq!(r.params_effective, 500.0);
        assert_eq!(r.mults, 1000);
    }

    #[test]
    fn mask_shape_mismatch() {
        let g = conv_graph(4, 4, 8, 3);
        let mut st = TensorStorage::default();
        st.masks
            .insert("c.weight".into(), Mask::new(vec![4, 4, 3, 1], vec![1; 48]).unwrap());
        assert!(matches!(
            count(&g, &CountingRules::default(), &st),
            Err(CostError::MaskShape { .. })
        ));
    }

    #[test]
    fn score_examples() {
        let s = score(&CostReport::from_totals(36.5e6, 5_245_000_000, 5_245_000_000));
        assert_eq!((s.param_score, s.op_score, s.total), (1.0, 1.0, 2.0));
        let s = score(&CostReport::from_totals(0.365e6, 0, 0));
        assert!((s.param_score - 0.01).abs() < 1e-15);
        let s = score(&CostReport::from_totals(0.238e6, 44_500_000, 44_500_000));
        assert!((s.param_score - 0.006534).abs() / 0.006534 < 0.01);
        assert!((s.op_score - 0.008447).abs() / 0.008447 < 0.01);
        assert_eq!(s.total, s.param_score + s.op_score);
    }

    #[test]
    fn expected_ops_endpoints() {
        assert_eq!(expected_ops_with_exit(100.0, 40.0, 10.0, 0.0), 110.0);
        assert_eq!(expected_ops_with_exit(100.0, 40.0, 10.0, 1.0), 40.0);
        let a = expected_ops_with_exit(100.0, 40.0, 10.0, 0.3);
        let b = expected_ops_with_exit(100.0, 40.0, 10.0, 0.6);
        assert!(b < a);
    }

    #[test]
    fn report_rejects_inconsistent_total() {
        let bad = r#"{"params_effective": 1.0, "mults": 2, "adds": 3, "ops_total": 4}"#;
        assert!(serde_json::from_str::<CostReport>(bad).is_err());
        let ok = r#"{"params_effective": 1.0, "mults": 2, "adds": 3}"#;
        assert_eq!(serde_json::from_str::<CostReport>(ok).unwrap().ops_total, 5);
    }

    #[test]
    fn rules_reject_zero_sigmoid_cost() {
        let rules = CountingRules {
            sigmoid_ops: 0,
            ..CountingRules::default()
        };
        let g = conv_graph(1, 1, 1, 1);
        assert!(count(&g, &rules, &TensorStorage::default()).is_err());
    }
}
