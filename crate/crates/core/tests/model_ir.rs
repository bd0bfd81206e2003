use proptest::prelude::*;
use sipa::model::{
    apply_compound_scaling, expand, expand_exit, micronet_baseline, wrn28_10, Activation, BlockArgs, ConvSpec,
    LayerKind, ModelSpec, Padding, ScalingCoefficients, Shape, Source,
};
use std::collections::BTreeMap;

fn single_block(block: BlockArgs) -> ModelSpec {
    ModelSpec {
        name: "one".into(),
        input: [32, 32, 3],
        stem: ConvSpec {
            kernel: 3,
            stride: 1,
            out_channels: block.i,
            padding: Padding::Same,
            batchnorm: true,
            activation: Some(Activation::Swish),
            bias: false,
        },
        blocks: vec![block],
        head: None,
        classifier: 100,
        exits: vec![],
        quantization: BTreeMap::new(),
    }
}

fn find<'a>(g: &'a sipa::model::LayerGraph, name: &str) -> Option<&'a sipa::model::Layer> {
    g.layers.iter().find(|l| l.name == name)
}

#[test]
fn identity_block_has_residual_and_no_expansion() {
    let g = expand(&single_block(BlockArgs::mbconv(3, 1, 1.0, 16, 16, 0.0, 1))).unwrap();
    assert!(find(&g, "blocks.0.0.expand_conv").is_none());
    let dw = find(&g, "blocks.0.0.dw_conv").unwrap();
    assert_eq!(dw.weight_shape().unwrap(), vec![16, 1, 3, 3]);
    assert!(dw.is_depthwise());
    assert_eq!(
        find(&g, "blocks.0.0.project_conv").unwrap().weight_shape().unwrap(),
        vec![16, 16, 1, 1]
    );
    assert!(find(&g, "blocks.0.0.add").is_some());
    assert!(find(&g, "blocks.0.0.se_pool").is_none());
    g.check_shapes().unwrap();
}

#[test]
fn strided_expanded_block_with_se() {
    let g = expand(&single_block(BlockArgs::mbconv(3, 2, 6.0, 16, 24, 0.25, 1))).unwrap();
    let exp = find(&g, "blocks.0.0.expand_conv").unwrap();
    assert_eq!(exp.weight_shape().unwrap(), vec![96, 16, 1, 1]);
    let dw = find(&g, "blocks.0.0.dw_conv").unwrap();
    assert_eq!(dw.output, Shape::new(16, 16, 96));
    let reduce = find(&g, "blocks.0.0.se_reduce").unwrap();
    assert_eq!(reduce.output.c, 4);
    let proj = find(&g, "blocks.0.0.project_conv").unwrap();
    assert_eq!(proj.weight_shape().unwrap(), vec![24, 96, 1, 1]);
    assert!(find(&g, "blocks.0.0.add").is_none());
    g.check_shapes().unwrap();
}

#[test]
fn wrn28_10_structure() {
    let spec = wrn28_10();
    assert_eq!(spec.classifier, 100);
    let g = expand(&spec).unwrap();
    g.check_shapes().unwrap();
    // 25 3x3 convolutions + 3 projection shortcuts + 1 dense classifier
    let convs3 = g
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv2d { kernel: 3, .. }))
        .count();
    let shortcuts = g.layers.iter().filter(|l| l.name.ends_with("shortcut_conv")).count();
    assert_eq!(convs3, 25);
    assert_eq!(shortcuts, 3);
    assert_eq!(g.weight_layer_count(), 29);
    assert_eq!(g.layers.last().unwrap().output, Shape::new(1, 1, 100));
}

#[test]
fn exit_graph_starts_at_tap() {
    let spec = micronet_baseline();
    let main = expand(&spec).unwrap();
    let exit = expand_exit(&spec, 0).unwrap();
    exit.check_shapes().unwrap();
    let tap = main
        .layers
        .iter()
        .rev()
        .find(|l| l.name.starts_with("blocks.3."))
        .unwrap()
        .output;
    assert_eq!(exit.input, tap);
    assert!(matches!(exit.layers.last().unwrap().kind, LayerKind::Softmax));
    // identity exit block references the graph input for its residual
    let add = exit.layers.iter().find(|l| l.name.ends_with(".add")).unwrap();
    assert_eq!(add.kind, LayerKind::Add { other: Source::Input });
}

fn block_strategy() -> impl Strategy<Value = (usize, usize, f64, usize, f64, usize)> {
    (
        prop::sample::select(vec![1usize, 3, 5, 7]),
        1usize..=2,
        prop::sample::select(vec![1.0, 2.0, 4.0, 6.0]),
        1usize..48,
        prop::sample::select(vec![0.0, 0.25, 0.5]),
        1usize..3,
    )
}

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (
        8usize..40,
        1usize..32,
        prop::collection::vec(block_strategy(), 1..5),
        prop::option::of(8usize..64),
        any::<bool>(),
    )
        .prop_map(|(res, stem_out, blocks, head, basic)| {
            let mut prev = stem_out;
            let blocks = blocks
                .into_iter()
                .map(|(k, s, e, o, se, r)| {
                    let b = if basic {
                        BlockArgs::basic(k, s, prev, o, r)
                    } else {
                        BlockArgs::mbconv(k, s, e, prev, o, se, r)
                    };
                    prev = o;
                    b
                })
                .collect();
            ModelSpec {
                name: "random".into(),
                input: [res, res, 3],
                stem: ConvSpec {
                    kernel: 3,
                    stride: 1,
                    out_channels: stem_out,
                    padding: Padding::Same,
                    batchnorm: true,
                    activation: Some(Activation::Relu),
                    bias: false,
                },
                blocks,
                head: head.map(|c| ConvSpec {
                    kernel: 1,
                    stride: 1,
                    out_channels: c,
                    padding: Padding::Same,
                    batchnorm: true,
                    activation: Some(Activation::Swish),
                    bias: false,
                }),
                classifier: 10,
                exits: vec![],
                quantization: BTreeMap::new(),
            }
        })
}

proptest! {
    #[test]
    fn expansion_is_shape_consistent(spec in spec_strategy()) {
        spec.validate().unwrap();
        let g = expand(&spec).unwrap();
        prop_assert!(g.check_shapes().is_ok(), "{:?}", g.check_shapes());
        // block order preserved
        let mut last = 0;
        for l in &g.layers {
            if let sipa::model::Stage::Block(j) = l.stage {
                prop_assert!(j >= last);
                last = j;
            }
        }
    }

    #[test]
    fn parse_inverts_serialize(spec in spec_strategy()) {
        let back = ModelSpec::parse(&spec.to_json()).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn scaled_specs_revalidate(
        spec in spec_strategy(),
        alpha in 0.5f64..2.0,
        beta in 0.5f64..2.0,
        gamma in 0.5f64..2.0,
        phi in 0.0f64..2.0,
    ) {
        let out = apply_compound_scaling(&spec, &ScalingCoefficients::new(alpha, beta, gamma, phi));
        prop_assert!(out.validate().is_ok(), "{:?}", out.validate());
        let ident = apply_compound_scaling(&spec, &ScalingCoefficients::new(1.0, 1.0, 1.0, phi));
        prop_assert_eq!(&ident, &spec);
        let zero = apply_compound_scaling(&spec, &ScalingCoefficients::new(alpha, beta, gamma, 0.0));
        prop_assert_eq!(&zero, &spec);
    }
}
