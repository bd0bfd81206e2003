//! Declarative architecture descriptions.
//!
//! A [`ModelSpec`] is a small JSON document: a stem convolution, an ordered
//! list of block groups (MBConv or basic residual blocks described by
//! `k, s, e, i, o, se, r`), an optional head convolution, a classifier and
//! any number of early-exit modules. [`expand`] lowers it into a
//! [`LayerGraph`] of primitive layers with propagated shapes, which is what
//! the cost model counts.

mod builtin;
mod graph;
mod scaling;

pub use builtin::{micronet_baseline, wrn28_10};
pub use graph::{expand, expand_exit, Layer, LayerGraph, LayerKind, PoolKind, Shape, Source, Stage};
pub use scaling::{
    apply_compound_scaling, apply_compound_scaling_with_divisor, constraint_residual, round_channels,
    ScalingCoefficients, DEFAULT_CHANNEL_DIVISOR,
};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid model spec: {0}")]
    Invalid(String),
    #[error("spatial collapse at {layer}: output would be {height}x{width}")]
    SpatialCollapse { layer: String, height: usize, width: usize },
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, SpecError> {
    Err(SpecError::Invalid(msg.into()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Inverted bottleneck with optional squeeze-excite.
    #[default]
    Mbconv,
    /// Two k x k convolutions with an identity or 1x1 projection shortcut.
    Basic,
}

impl BlockKind {
    fn is_mbconv(&self) -> bool {
        *self == BlockKind::Mbconv
    }
}

/// One block group: `r` repetitions of a block, the first with stride `s`
/// and input channels `i`, the rest with stride 1 and input channels `o`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockArgs {
    #[serde(default, skip_serializing_if = "BlockKind::is_mbconv")]
    pub kind: BlockKind,
    pub k: usize,
    pub s: usize,
    pub e: f64,
    pub i: usize,
    pub o: usize,
    pub se: f64,
    pub r: usize,
}

impl BlockArgs {
    pub fn mbconv(k: usize, s: usize, e: f64, i: usize, o: usize, se: f64, r: usize) -> Self {
        BlockArgs {
            kind: BlockKind::Mbconv,
            k,
            s,
            e,
            i,
            o,
            se,
            r,
        }
    }

    pub fn basic(k: usize, s: usize, i: usize, o: usize, r: usize) -> Self {
        BlockArgs {
            kind: BlockKind::Basic,
            k,
            s,
            e: 1.0,
            i,
            o,
            se: 0.0,
            r,
        }
    }

    /// Arguments of repetition `rep` (0-based) within the group.
    pub fn repetition(&self, rep: usize) -> BlockArgs {
        if rep == 0 {
            self.clone()
        } else {
            BlockArgs {
                s: 1,
                i: self.o,
                r: 1,
                ..self.clone()
            }
        }
    }

    /// Width of the depthwise stage of an MBConv block.
    pub fn expanded_channels(&self) -> usize {
        ((self.i as f64) * self.e).round() as usize
    }

    /// Width of the squeeze-excite bottleneck, computed from block input channels.
    pub fn se_channels(&self) -> usize {
        ((self.se * self.i as f64) - 1e-9).ceil().max(1.0) as usize
    }

    fn validate(&self, at: &str) -> Result<(), SpecError> {
        if self.k == 0 || self.k.is_multiple_of(2) {
            return invalid(format!("{at}: kernel must be odd (k={})", self.k));
        }
        if self.s != 1 && self.s != 2 {
            return invalid(format!("{at}: stride must be 1 or 2 (s={})", self.s));
        }
        if self.i == 0 || self.o == 0 {
            return invalid(format!("{at}: channel counts must be >= 1"));
        }
        if self.r == 0 {
            return invalid(format!("{at}: repeats must be >= 1"));
        }
        if !self.e.is_finite() || self.e < 1.0 {
            return invalid(format!("{at}: expansion ratio must be >= 1 (e={})", self.e));
        }
        if !(0.0..=1.0).contains(&self.se) {
            return invalid(format!("{at}: se ratio must lie in [0, 1] (se={})", self.se));
        }
        if self.kind == BlockKind::Basic && (self.e != 1.0 || self.se != 0.0) {
            return invalid(format!("{at}: basic blocks take e=1 and se=0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

fn yes() -> bool {
    true
}

/// A plain convolution used for the stem and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub padding: Padding,
    #[serde(default = "yes")]
    pub batchnorm: bool,
    #[serde(default)]
    pub activation: Option<Activation>,
    #[serde(default)]
    pub bias: bool,
}

impl ConvSpec {
    fn validate(&self, at: &str) -> Result<(), SpecError> {
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return invalid(format!("{at}: kernel must be odd (k={})", self.kernel));
        }
        if self.stride == 0 {
            return invalid(format!("{at}: stride must be >= 1"));
        }
        if self.out_channels == 0 {
            return invalid(format!("{at}: out_channels must be >= 1"));
        }
        Ok(())
    }
}

/// Early-exit module: blocks run on the features after `attach_after_block`,
/// followed by global pooling, a dense classifier and a softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitSpec {
    pub attach_after_block: usize,
    pub module_blocks: Vec<BlockArgs>,
}

impl ExitSpec {
    /// One MBConv block at the tapped width, then pool + classifier.
    pub fn default_for(spec: &ModelSpec, attach_after_block: usize) -> ExitSpec {
        let c = spec.blocks[attach_after_block].o;
        ExitSpec {
            attach_after_block,
            module_blocks: vec![BlockArgs::mbconv(3, 1, 4.0, c, c, 0.25, 1)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// (height, width, channels)
    pub input: [usize; 3],
    pub stem: ConvSpec,
    pub blocks: Vec<BlockArgs>,
    pub head: Option<ConvSpec>,
    /// Number of classes.
    pub classifier: usize,
    #[serde(default)]
    pub exits: Vec<ExitSpec>,
    /// Tensor-name pattern to bit width.
    #[serde(default)]
    pub quantization: BTreeMap<String, u8>,
}

impl ModelSpec {
    /// Parses and validates a model-spec document. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<ModelSpec, SpecError> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| match e.classify() {
            serde_json::error::Category::Data => SpecError::Invalid(e.to_string()),
            _ => SpecError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            },
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model spec serializes")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let [h, w, c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return invalid("input dimensions must be >= 1");
        }
        self.stem.validate("stem")?;
        if self.blocks.is_empty() {
            return invalid("at least one block group is required");
        }
        let mut prev = self.stem.out_channels;
        for (j, b) in self.blocks.iter().enumerate() {
            let at = format!("blocks[{j}]");
            b.validate(&at)?;
            if b.i != prev {
                return invalid(format!(
                    "channel chaining: {at}.i = {} but the preceding output has {prev} channels",
                    b.i
                ));
            }
            prev = b.o;
        }
        if let Some(head) = &self.head {
            head.validate("head")?;
        }
        if self.classifier < 2 {
            return invalid("classifier must have at least 2 classes");
        }
        for (x, exit) in self.exits.iter().enumerate() {
            if exit.attach_after_block + 1 >= self.blocks.len() {
                return invalid(format!(
                    "exits[{x}]: attach_after_block {} must precede the last block",
                    exit.attach_after_block
                ));
            }
            let mut prev = self.blocks[exit.attach_after_block].o;
            for (j, b) in exit.module_blocks.iter().enumerate() {
                let at = format!("exits[{x}].module_blocks[{j}]");
                b.validate(&at)?;
                if b.i != prev {
                    return invalid(format!(
                        "channel chaining: {at}.i = {} but the tapped features have {prev} channels",
                        b.i
                    ));
                }
                prev = b.o;
            }
        }
        for (pattern, bits) in &self.quantization {
            if *bits != 16 && *bits != 32 {
                return invalid(format!("quantization[{pattern}]: bit width must be 16 or 32"));
            }
        }
        expand(self)?;
        for x in 0..self.exits.len() {
            expand_exit(self, x)?;
        }
        Ok(())
    }

    /// Bit width for a tensor: exact pattern match first, then the longest
    /// matching wildcard pattern.
    pub fn bits_for(&self, tensor: &str) -> Option<u8> {
        if let Some(b) = self.quantization.get(tensor) {
            return Some(*b);
        }
        self.quantization
            .iter()
            .filter(|(p, _)| crate::pattern::matches(p, tensor))
            .max_by_key(|(p, _)| p.len())
            .map(|(_, b)| *b)
    }

    /// Re-establishes channel chaining from each block's output channels.
    pub(crate) fn rechain(&mut self) {
        let mut prev = self.stem.out_channels;
        for b in &mut self.blocks {
            b.i = prev;
            prev = b.o;
        }
        for exit in &mut self.exits {
            if let Some(tap) = self.blocks.get(exit.attach_after_block) {
                let mut prev = tap.o;
                for b in &mut exit.module_blocks {
                    b.i = prev;
                    prev = b.o;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "tiny",
        "input": [32, 32, 3],
        "stem": {"kernel": 3, "stride": 1, "out_channels": 16},
        "blocks": [{"k": 3, "s": 1, "e": 1, "i": 16, "o": 16, "se": 0, "r": 1}],
        "head": null,
        "classifier": 100,
        "exits": [],
        "quantization": {}
    }"#;

    #[test]
    fn parses_minimal_document() {
        let spec = ModelSpec::parse(MINIMAL).unwrap();
        assert_eq!(spec.blocks.len(), 1);
        assert_eq!(spec.classifier, 100);
        assert_eq!(spec.blocks[0], BlockArgs::mbconv(3, 1, 1.0, 16, 16, 0.0, 1));
    }

    #[test]
    fn rejects_broken_channel_chain() {
        let text = MINIMAL.replace(
            r#"[{"k": 3, "s": 1, "e": 1, "i": 16, "o": 16, "se": 0, "r": 1}]"#,
            r#"[{"k": 3, "s": 1, "e": 1, "i": 16, "o": 24, "se": 0, "r": 1},
                {"k": 3, "s": 1, "e": 1, "i": 16, "o": 24, "se": 0, "r": 1}]"#,
        );
        let err = ModelSpec::parse(&text).unwrap_err();
        assert!(
            matches!(&err, SpecError::Invalid(m) if m.contains("channel chaining")),
            "{err}"
        );
    }

    #[test]
    fn rejects_even_kernel() {
        let text = MINIMAL.replace(r#""k": 3"#, r#""k": 4"#);
        let err = ModelSpec::parse(&text).unwrap_err();
        assert!(
            matches!(&err, SpecError::Invalid(m) if m.contains("kernel must be odd")),
            "{err}"
        );
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace(r#""name": "tiny","#, r#""name": "tiny", "colour": 1,"#);
        assert!(matches!(ModelSpec::parse(&text), Err(SpecError::Invalid(_))));
        let text = MINIMAL.replace(r#""se": 0,"#, r#""se": 0, "dropout": 0.2,"#);
        assert!(matches!(ModelSpec::parse(&text), Err(SpecError::Invalid(_))));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = ModelSpec::parse("{\n  \"name\": \"x\",\n  oops }").unwrap_err();
        match err {
            SpecError::Syntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn rejects_exit_after_last_block() {
        let mut spec = ModelSpec::parse(MINIMAL).unwrap();
        spec.exits.push(ExitSpec {
            attach_after_block: 0,
            module_blocks: vec![],
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn rejects_bad_bit_width() {
        let mut spec = ModelSpec::parse(MINIMAL).unwrap();
        spec.quantization.insert("*".into(), 8);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn valid_padding_can_collapse() {
        let mut spec = ModelSpec::parse(MINIMAL).unwrap();
        spec.input = [2, 2, 3];
        spec.stem.padding = Padding::Valid;
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, SpecError::SpatialCollapse { .. }), "{err}");
    }

    #[test]
    fn bit_width_lookup_prefers_longest_pattern() {
        let mut spec = ModelSpec::parse(MINIMAL).unwrap();
        spec.quantization.insert("*".into(), 16);
        spec.quantization.insert("classifier.*".into(), 32);
        assert_eq!(spec.bits_for("stem.conv.weight"), Some(16));
        assert_eq!(spec.bits_for("classifier.weight"), Some(32));
        spec.quantization.clear();
        assert_eq!(spec.bits_for("stem.conv.weight"), None);
    }

    #[test]
    fn builtins_round_trip() {
        for spec in [wrn28_10(), micronet_baseline()] {
            let back = ModelSpec::parse(&spec.to_json()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn se_width_uses_block_input() {
        let b = BlockArgs::mbconv(3, 2, 6.0, 16, 24, 0.25, 1);
        assert_eq!(b.se_channels(), 4);
        assert_eq!(b.expanded_channels(), 96);
        let b = BlockArgs::mbconv(3, 1, 6.0, 10, 10, 0.25, 1);
        assert_eq!(b.se_channels(), 3);
    }
}
