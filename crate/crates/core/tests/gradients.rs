//! Reverse-mode gradients against central differences in f64, for each
//! primitive and for the composed blocks.

#[path = "common/gradsuite.rs"]
mod gradsuite;

use gradsuite::{binary_planes, mini_config, randn, rng, Case, TOL};
use relwear_core::nn::{Inputs, Model};
use relwear_core::tensor::{Mode, Tape, Tensor};

fn assert_within(cases: Vec<Case>) {
    for (name, err) in cases {
        assert!(err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn dense_gradient() {
    assert_within(gradsuite::dense());
}

#[test]
fn conv_gradient_strided_padded() {
    assert_within(gradsuite::conv());
}

#[test]
fn conv_relu_pool_chain_gradient() {
    assert_within(gradsuite::chain());
}

#[test]
fn norm_gradient_train_and_eval() {
    assert_within(gradsuite::norm());
}

#[test]
fn bce_gradient() {
    assert_within(gradsuite::bce());
}

#[test]
fn head_gradient_with_dropout() {
    assert_within(gradsuite::head());
}

#[test]
fn plain_bottleneck_gradient() {
    assert_within(gradsuite::plain_bottleneck());
}

#[test]
fn attention_bottleneck_gradient() {
    assert_within(gradsuite::attention_bottleneck());
}

#[test]
fn attention_unit_gradient() {
    assert_within(gradsuite::attention_unit());
}

#[test]
fn mini_backbone_gradient_all_parameters() {
    assert_within(gradsuite::mini_backbone());
}

#[test]
fn attention_parameters_receive_gradient() {
    let model = Model::<f64>::new(&mini_config(), 3).unwrap();
    let mut r = rng(16);
    let inputs = Inputs {
        stem: randn(&mut r, &[2, 3, 8, 8], 1.0),
        attention: Some(binary_planes(&mut r, &[2, 3, 8, 8])),
    };
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &inputs, Mode::Train, &mut rng(0)).unwrap();
    let loss = tape.bce_loss(out.prob, &[1.0, 0.0]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let ids = model.attention_params();
    assert_eq!(ids.len(), 4);
    for id in ids {
        let name = &model.params().names()[id.index()];
        if name.ends_with(".kernel") {
            let g = grads.get(vars[id.index()]).unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }
}

#[test]
fn zero_scaled_branch_gets_exactly_zero_gradient() {
    let mut r = rng(17);
    let x = randn(&mut r, &[2, 2, 5, 5], 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let k_live = tape.param(randn(&mut r, &[3, 2, 3, 3], 0.5));
    let b_live = tape.param(randn(&mut r, &[3], 0.5));
    let k_dead = tape.param(randn(&mut r, &[3, 2, 3, 3], 0.5));
    let b_dead = tape.param(randn(&mut r, &[3], 0.5));
    let live = tape.conv2d(xv, k_live, b_live, 1, 1).unwrap();
    let dead = tape.conv2d(xv, k_dead, b_dead, 1, 1).unwrap();
    let dead = tape.relu(dead).unwrap();
    let dead = tape.scale(dead, 0.0).unwrap();
    let y = tape.add(live, dead).unwrap();
    let y = tape.sigmoid(y).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    for v in [k_dead, b_dead] {
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 0.0));
    }
    assert!(g.get(k_live).unwrap().data().iter().any(|&d| d != 0.0));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_its_input(
        seed in 0u64..10_000,
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
        stride in 1usize..3,
        size in 1usize..4,
    ) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[2, 3, 7, 6], 1.0).cast::<f32>();
        let y = randn(&mut r, &[2, 3, 7, 6], 1.0).cast::<f32>();
        let k = randn(&mut r, &[4, 3, size, size], 0.5).cast::<f32>();
        let pad = size / 2;
        let conv = |input: Tensor<f32>| {
            let mut t = Tape::<f32>::new();
            let iv = t.constant(input);
            let kv = t.constant(k.clone());
            let bv = t.constant(Tensor::zeros(&[4]).unwrap());
            let out = t.conv2d(iv, kv, bv, stride, pad).unwrap();
            t.value(out).unwrap().clone()
        };
        let mixed: Vec<f32> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = conv(Tensor::new(x.shape().to_vec(), mixed).unwrap());
        let (cx, cy) = (conv(x), conv(y));
        let scale = lhs.data().iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
            let rhs = a * p + b * q;
            proptest::prop_assert!((l - rhs).abs() / scale <= 1e-5, "{l} vs {rhs}");
        }
    }
}
