use super::{Activation, BlockArgs, ConvSpec, ExitSpec, ModelSpec, Padding};
use std::collections::BTreeMap;

/// WideResNet-28-10 for 32x32x3 inputs and 100 classes: a 3x3 stem, three
/// groups of four basic residual blocks at widths 160/320/640, global pool
/// and a dense classifier. This is the normalization reference for scoring.
pub fn wrn28_10() -> ModelSpec {
    ModelSpec {
        name: "wrn-28-10".into(),
        input: [32, 32, 3],
        stem: ConvSpec {
            kernel: 3,
            stride: 1,
            out_channels: 16,
            padding: Padding::Same,
            batchnorm: false,
            activation: None,
            bias: false,
        },
        blocks: vec![
            BlockArgs::basic(3, 1, 16, 160, 4),
            BlockArgs::basic(3, 2, 160, 320, 4),
            BlockArgs::basic(3, 2, 320, 640, 4),
        ],
        head: None,
        classifier: 100,
        exits: Vec::new(),
        quantization: BTreeMap::new(),
    }
}

/// A small EfficientNet-style CIFAR-100 network with one early exit after
/// block group 3, stored at 16 bits. Representative of the searched model
/// family; the exact searched block arguments are not reproduced.
pub fn micronet_baseline() -> ModelSpec {
    let blocks = vec![
        BlockArgs::mbconv(3, 1, 1.0, 32, 16, 0.25, 1),
        BlockArgs::mbconv(3, 1, 6.0, 16, 24, 0.25, 2),
        BlockArgs::mbconv(5, 2, 6.0, 24, 40, 0.25, 2),
        BlockArgs::mbconv(3, 2, 6.0, 40, 80, 0.25, 2),
        BlockArgs::mbconv(5, 1, 6.0, 80, 96, 0.25, 2),
        BlockArgs::mbconv(5, 2, 4.0, 96, 128, 0.25, 1),
    ];
    let mut spec = ModelSpec {
        name: "micronet-baseline".into(),
        input: [32, 32, 3],
        stem: ConvSpec {
            kernel: 3,
            stride: 1,
            out_channels: 32,
            padding: Padding::Same,
            batchnorm: true,
            activation: Some(Activation::Swish),
            bias: false,
        },
        blocks,
        head: Some(ConvSpec {
            kernel: 1,
            stride: 1,
            out_channels: 384,
            padding: Padding::Same,
            batchnorm: true,
            activation: Some(Activation::Swish),
            bias: false,
        }),
        classifier: 100,
        exits: Vec::new(),
        quantization: BTreeMap::from([("*".to_string(), 16)]),
    };
    spec.exits.push(ExitSpec::default_for(&spec, 3));
    spec
}
