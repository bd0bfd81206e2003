use super::{Activation, BlockArgs, BlockKind, ModelSpec, Padding, SpecError};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Shape { h, w, c }
    }

    pub fn elements(&self) -> u64 {
        (self.h * self.w * self.c) as u64
    }
}

/// Where a layer reads its (first) operand from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Avg { kernel: usize, stride: usize },
    Max { kernel: usize, stride: usize },
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        padding: Padding,
        bias: bool,
    },
    Dense {
        out_features: usize,
        bias: bool,
    },
    BatchNorm,
    Activation(Activation),
    Pool(PoolKind),
    /// Elementwise sum with the output of `other`.
    Add {
        other: Source,
    },
    /// Per-channel multiply by the 1x1xC output of layer `gate`.
    ChannelScale {
        gate: usize,
    },
    Softmax,
}

/// Which part of the network a layer came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stem,
    Block(usize),
    Head,
    Classifier,
    Exit(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub source: Source,
    pub input: Shape,
    pub output: Shape,
    pub stage: Stage,
}

impl Layer {
    /// Weight tensor shape, `[out, in/groups, k, k]` for convolutions and
    /// `[out, in]` for dense layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                groups,
                ..
            } => Some(vec![out_channels, self.input.c / groups, kernel, kernel]),
            LayerKind::Dense { out_features, .. } => Some(vec![out_features, self.input.c]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match self.kind {
            LayerKind::Conv2d {
                out_channels,
                bias: true,
                ..
            } => Some(out_channels),
            LayerKind::Dense {
                out_features,
                bias: true,
            } => Some(out_features),
            _ => None,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn is_depthwise(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { groups, .. } if groups > 1 && groups == self.input.c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl LayerGraph {
    fn output_of(&self, src: Source) -> Option<Shape> {
        match src {
            Source::Input => Some(self.input),
            Source::Layer(j) => self.layers.get(j).map(|l| l.output),
        }
    }

    /// Checks that every layer's declared input shape equals its source's
    /// output shape and that binary operands agree.
    pub fn check_shapes(&self) -> Result<(), String> {
        for (idx, layer) in self.layers.iter().enumerate() {
            if let Source::Layer(j) = layer.source {
                if j >= idx {
                    return Err(format!("{}: source {j} is not an earlier layer", layer.name));
                }
            }
            let src = self
                .output_of(layer.source)
                .ok_or_else(|| format!("{}: dangling source", layer.name))?;
            if src != layer.input {
                return Err(format!(
                    "{}: input {:?} != source output {src:?}",
                    layer.name, layer.input
                ));
            }
            match layer.kind {
                LayerKind::Add { other } => {
                    let earlier = match other {
                        Source::Input => true,
                        Source::Layer(j) => j < idx,
                    };
                    let o = self.output_of(other).filter(|_| earlier);
                    if o != Some(layer.input) {
                        return Err(format!("{}: residual operand shape mismatch", layer.name));
                    }
                }
                LayerKind::ChannelScale { gate } => {
                    let g = self.layers.get(gate).filter(|_| gate < idx).map(|l| l.output);
                    if g != Some(Shape::new(1, 1, layer.input.c)) {
                        return Err(format!("{}: gate shape mismatch", layer.name));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Names and shapes of all weight and bias tensors, in layer order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(shape) = l.weight_shape() {
                out.push((l.weight_name(), shape));
            }
            if let Some(n) = l.bias_len() {
                out.push((l.bias_name(), vec![n]));
            }
        }
        out
    }

    /// Number of convolution and dense layers.
    pub fn weight_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.weight_shape().is_some()).count()
    }
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(len.div_ceil(stride)),
        Padding::Valid => len.checked_sub(kernel).map(|d| d / stride + 1),
    }
}

struct Builder {
    graph: LayerGraph,
    cur: Source,
    shape: Shape,
    stage: Stage,
}

impl Builder {
    fn new(input: Shape, stage: Stage) -> Self {
        Builder {
            graph: LayerGraph {
                input,
                layers: Vec::new(),
            },
            cur: Source::Input,
            shape: input,
            stage,
        }
    }

    fn push_from(&mut self, src: Source, name: String, kind: LayerKind) -> Result<usize, SpecError> {
        let input = self.graph.output_of(src).expect("builder sources are valid");
        let output = match kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                let h = conv_out(input.h, kernel, stride, padding).unwrap_or(0);
                let w = conv_out(input.w, kernel, stride, padding).unwrap_or(0);
                Shape::new(h, w, out_channels)
            }
            LayerKind::Dense { out_features, .. } => Shape::new(1, 1, out_features),
            LayerKind::Pool(PoolKind::Global) => Shape::new(1, 1, input.c),
            LayerKind::Pool(PoolKind::Avg { kernel, stride } | PoolKind::Max { kernel, stride }) => {
                let h = conv_out(input.h, kernel, stride, Padding::Valid).unwrap_or(0);
                let w = conv_out(input.w, kernel, stride, Padding::Valid).unwrap_or(0);
                Shape::new(h, w, input.c)
            }
            _ => input,
        };
        if output.h == 0 || output.w == 0 {
            return Err(SpecError::SpatialCollapse {
                layer: name,
                height: output.h,
                width: output.w,
            });
        }
        let idx = self.graph.layers.len();
        self.graph.layers.push(Layer {
            name,
            kind,
            source: src,
            input,
            output,
            stage: self.stage,
        });
        self.cur = Source::Layer(idx);
        self.shape = output;
        Ok(idx)
    }

    fn push(&mut self, name: String, kind: LayerKind) -> Result<usize, SpecError> {
        self.push_from(self.cur, name, kind)
    }

    fn conv(
        &mut self,
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<usize, SpecError> {
        self.push(
            name,
            LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                groups,
                padding: Padding::Same,
                bias: false,
            },
        )
    }

    fn bn_act(&mut self, prefix: &str, act: Option<Activation>) -> Result<(), SpecError> {
        self.push(format!("{prefix}_bn"), LayerKind::BatchNorm)?;
        if let Some(a) = act {
            self.push(format!("{prefix}_act"), LayerKind::Activation(a))?;
        }
        Ok(())
    }

    fn mbconv(&mut self, prefix: &str, b: &BlockArgs) -> Result<(), SpecError> {
        let block_in = self.cur;
        let mid = b.expanded_channels();
        if b.e != 1.0 {
            self.conv(format!("{prefix}.expand_conv"), mid, 1, 1, 1)?;
            self.bn_act(&format!("{prefix}.expand"), Some(Activation::Swish))?;
        }
        let dw_width = self.shape.c;
        self.conv(format!("{prefix}.dw_conv"), dw_width, b.k, b.s, dw_width)?;
        self.bn_act(&format!("{prefix}.dw"), Some(Activation::Swish))?;
        if b.se > 0.0 {
            let features = self.cur;
            let width = self.shape.c;
            self.push(format!("{prefix}.se_pool"), LayerKind::Pool(PoolKind::Global))?;
            self.push(
                format!("{prefix}.se_reduce"),
                LayerKind::Dense {
                    out_features: b.se_channels(),
                    bias: true,
                },
            )?;
            self.push(
                format!("{prefix}.se_reduce_act"),
                LayerKind::Activation(Activation::Swish),
            )?;
            self.push(
                format!("{prefix}.se_expand"),
                LayerKind::Dense {
                    out_features: width,
                    bias: true,
                },
            )?;
            let gate = self.push(format!("{prefix}.se_gate"), LayerKind::Activation(Activation::Sigmoid))?;
            self.push_from(features, format!("{prefix}.se_scale"), LayerKind::ChannelScale { gate })?;
        }
        self.conv(format!("{prefix}.project_conv"), b.o, 1, 1, 1)?;
        self.bn_act(&format!("{prefix}.project"), None)?;
        if b.s == 1 && b.i == b.o {
            self.push(format!("{prefix}.add"), LayerKind::Add { other: block_in })?;
        }
        Ok(())
    }

    fn basic(&mut self, prefix: &str, b: &BlockArgs) -> Result<(), SpecError> {
        let block_in = self.cur;
        let shortcut = if b.s != 1 || b.i != b.o {
            let idx = self.push_from(
                block_in,
                format!("{prefix}.shortcut_conv"),
                LayerKind::Conv2d {
                    out_channels: b.o,
                    kernel: 1,
                    stride: b.s,
                    groups: 1,
                    padding: Padding::Same,
                    bias: false,
                },
            )?;
            self.cur = block_in;
            self.shape = self.graph.output_of(block_in).expect("block input exists");
            Source::Layer(idx)
        } else {
            block_in
        };
        self.conv(format!("{prefix}.conv1"), b.o, b.k, b.s, 1)?;
        self.bn_act(&format!("{prefix}.conv1"), Some(Activation::Relu))?;
        self.conv(format!("{prefix}.conv2"), b.o, b.k, 1, 1)?;
        self.bn_act(&format!("{prefix}.conv2"), None)?;
        self.push(format!("{prefix}.add"), LayerKind::Add { other: shortcut })?;
        self.push(format!("{prefix}.act"), LayerKind::Activation(Activation::Relu))?;
        Ok(())
    }

    fn group(&mut self, prefix: &str, g: &BlockArgs) -> Result<(), SpecError> {
        for rep in 0..g.r {
            let b = g.repetition(rep);
            let p = format!("{prefix}.{rep}");
            match b.kind {
                BlockKind::Mbconv => self.mbconv(&p, &b)?,
                BlockKind::Basic => self.basic(&p, &b)?,
            }
        }
        Ok(())
    }

    fn classifier(&mut self, prefix: &str, classes: usize) -> Result<(), SpecError> {
        self.push(format!("{prefix}pool"), LayerKind::Pool(PoolKind::Global))?;
        self.push(
            format!("{prefix}classifier"),
            LayerKind::Dense {
                out_features: classes,
                bias: true,
            },
        )?;
        Ok(())
    }
}

/// Lowers a spec's main path into primitive layers.
pub fn expand(spec: &ModelSpec) -> Result<LayerGraph, SpecError> {
    let [h, w, c] = spec.input;
    let mut b = Builder::new(Shape::new(h, w, c), Stage::Stem);
    let stem = &spec.stem;
    b.push(
        "stem.conv".into(),
        LayerKind::Conv2d {
            out_channels: stem.out_channels,
            kernel: stem.kernel,
            stride: stem.stride,
            groups: 1,
            padding: stem.padding,
            bias: stem.bias,
        },
    )?;
    if stem.batchnorm {
        b.push("stem.bn".into(), LayerKind::BatchNorm)?;
    }
    if let Some(a) = stem.activation {
        b.push("stem.act".into(), LayerKind::Activation(a))?;
    }
    for (j, g) in spec.blocks.iter().enumerate() {
        b.stage = Stage::Block(j);
        b.group(&format!("blocks.{j}"), g)?;
    }
    if let Some(head) = &spec.head {
        b.stage = Stage::Head;
        b.push(
            "head.conv".into(),
            LayerKind::Conv2d {
                out_channels: head.out_channels,
                kernel: head.kernel,
                stride: head.stride,
                groups: 1,
                padding: head.padding,
                bias: head.bias,
            },
        )?;
        if head.batchnorm {
            b.push("head.bn".into(), LayerKind::BatchNorm)?;
        }
        if let Some(a) = head.activation {
            b.push("head.act".into(), LayerKind::Activation(a))?;
        }
    }
    b.stage = Stage::Classifier;
    b.classifier("", spec.classifier)?;
    Ok(b.graph)
}

/// Lowers exit module `exit` into its own graph whose input is the feature
/// map after the tapped block group.
pub fn expand_exit(spec: &ModelSpec, exit: usize) -> Result<LayerGraph, SpecError> {
    let x = spec
        .exits
        .get(exit)
        .ok_or_else(|| SpecError::Invalid(format!("no exit module with index {exit}")))?;
    let main = expand(spec)?;
    let tap = main
        .layers
        .iter()
        .rev()
        .find(|l| l.stage == Stage::Block(x.attach_after_block))
        .map(|l| l.output)
        .ok_or_else(|| SpecError::Invalid(format!("exit {exit} taps a missing block")))?;
    let mut b = Builder::new(tap, Stage::Exit(exit));
    for (j, g) in x.module_blocks.iter().enumerate() {
        b.group(&format!("exits.{exit}.blocks.{j}"), g)?;
    }
    b.classifier(&format!("exits.{exit}."), spec.classifier)?;
    b.push(format!("exits.{exit}.softmax"), LayerKind::Softmax)?;
    Ok(b.graph)
}
