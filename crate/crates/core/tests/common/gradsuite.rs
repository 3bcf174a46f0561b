//! Finite-difference checks shared by the gradient tests and the acceptance
//! run. Each check returns the worst relative error per case.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use relwear_core::nn::{
    AttentionMode, AttentionUnit, BlockPlan, Bottleneck, Ctx, Head, Inputs, Model, ModelConfig, ParamStore,
    Placement,
};
use relwear_core::tensor::{finite_diff_check, Mode, RunningStats, Tape, Tensor, Var, DEFAULT_FD_EPS};
use relwear_core::Result;

pub const TOL: f64 = 1e-4;

/// Step for graphs containing relu: with many pre-activations a larger step
/// eventually straddles a kink, where the central difference is meaningless.
const KINK_EPS: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Move every parameter and running statistic off its initial value so no
/// check runs at a symmetric point.
pub fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for s in store.stats_mut() {
        for m in &mut s.mean {
            *m = 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        for v in &mut s.var {
            *v = rng.random_range(0.5..1.5);
        }
    }
}

/// Gradient check over the store's parameters plus `extra` leaves.
/// Parameters whose name satisfies `frozen` enter as constants.
fn check_store<F>(store: &ParamStore<f64>, extra: &[Tensor<f64>], frozen: impl Fn(&str) -> bool, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var], &[Var]) -> Result<Var>,
{
    let free: Vec<bool> = store.names().iter().map(|n| !frozen(n)).collect();
    let mut points: Vec<Tensor<f64>> = store
        .tensors()
        .iter()
        .zip(&free)
        .filter(|(_, &keep)| keep)
        .map(|(t, _)| t.clone())
        .collect();
    let n_free = points.len();
    points.extend_from_slice(extra);
    finite_diff_check(
        |tape, vars| {
            let mut next = vars[..n_free].iter();
            let all: Vec<Var> = store
                .tensors()
                .iter()
                .zip(&free)
                .map(|(t, &keep)| if keep { *next.next().unwrap() } else { tape.constant(t.clone()) })
                .collect();
            f(tape, &all, &vars[n_free..])
        },
        &points,
        KINK_EPS,
    )
    .unwrap()
}

/// Under batch statistics a per-channel bias feeding a normalization has an
/// exactly zero true gradient, where relative error is meaningless; those
/// are checked in eval mode instead.
fn conv_bias(name: &str) -> bool {
    name.ends_with(".bias") && !name.starts_with("head.")
}

fn none(_: &str) -> bool {
    false
}

pub type Case = (String, f64);

pub fn dense() -> Vec<Case> {
    let mut r = rng(1);
    let x = randn(&mut r, &[4, 5], 1.0);
    let w = randn(&mut r, &[5, 3], 0.5);
    let b = randn(&mut r, &[3], 0.5);
    let lw = weights(&mut r, 12);
    let err = finite_diff_check(
        |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            t.weighted_sum(y, &lw)
        },
        &[x, w, b],
        DEFAULT_FD_EPS,
    )
    .unwrap();
    vec![("dense".into(), err)]
}

pub fn conv() -> Vec<Case> {
    let mut out = Vec::new();
    for (stride, padding, size) in [(1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 0, 2)] {
        let mut r = rng(2 + stride as u64);
        let x = randn(&mut r, &[2, 3, 6, 5], 1.0);
        let k = randn(&mut r, &[4, 3, size, size], 0.5);
        let b = randn(&mut r, &[4], 0.5);
        let oh = (6 + 2 * padding - size) / stride + 1;
        let ow = (5 + 2 * padding - size) / stride + 1;
        let lw = weights(&mut r, 2 * 4 * oh * ow);
        let err = finite_diff_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                t.weighted_sum(y, &lw)
            },
            &[x, k, b],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        out.push((format!("conv {size}x{size} stride {stride} pad {padding}"), err));
    }
    out
}

pub fn chain() -> Vec<Case> {
    let mut r = rng(7);
    let x = randn(&mut r, &[2, 2, 8, 8], 1.0);
    let k = randn(&mut r, &[3, 2, 3, 3], 0.5);
    let b = randn(&mut r, &[3], 0.3);
    let lw = weights(&mut r, 6);
    let err = finite_diff_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let y = t.relu(y)?;
            let y = t.avg_pool(y, 2)?;
            let y = t.resize_area(y, 3, 3)?;
            let y = t.scale(y, 0.7)?;
            // a value used twice accumulates both contributions
            let y = t.add(y, y)?;
            let y = t.global_avg_pool(y)?;
            let y = t.sigmoid(y)?;
            t.weighted_sum(y, &lw)
        },
        &[x, k, b],
        KINK_EPS,
    )
    .unwrap();
    vec![("conv-relu-pool-resize chain".into(), err)]
}

pub fn norm() -> Vec<Case> {
    let mut r = rng(4);
    let x = randn(&mut r, &[3, 2, 3, 3], 1.5);
    let gamma = randn(&mut r, &[2], 1.0);
    let beta = randn(&mut r, &[2], 1.0);
    let lw = weights(&mut r, 54);
    let mut running = RunningStats::new(2);
    running.mean = vec![0.3, -0.2];
    running.var = vec![0.7, 1.4];
    let mut out = Vec::new();
    for mode in [Mode::Train, Mode::Eval] {
        let err = finite_diff_check(
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, mode)?;
                t.weighted_sum(y, &lw)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            DEFAULT_FD_EPS,
        )
        .unwrap();
        out.push((format!("norm {mode:?}"), err));
    }
    let x2 = randn(&mut r, &[5, 2], 1.0);
    let lw2 = weights(&mut r, 10);
    let err = finite_diff_check(
        |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, Mode::Train)?;
            t.weighted_sum(y, &lw2)
        },
        &[x2, gamma, beta],
        DEFAULT_FD_EPS,
    )
    .unwrap();
    out.push(("norm Train N×C".into(), err));
    out
}

pub fn bce() -> Vec<Case> {
    let mut r = rng(5);
    let logits = randn(&mut r, &[6, 1], 1.0);
    let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let err = finite_diff_check(
        |t, v| {
            let p = t.sigmoid(v[0])?;
            t.bce_loss(p, &labels)
        },
        &[logits],
        DEFAULT_FD_EPS,
    )
    .unwrap();
    vec![("sigmoid + bce".into(), err)]
}

pub fn head() -> Vec<Case> {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::default();
    let head = Head::new(&mut store, &mut r, 6, &[5, 4], 0.5).unwrap();
    perturb(&mut store, &mut r);
    let x = randn(&mut r, &[4, 6], 1.0);
    let labels = [1.0, 0.0, 0.0, 1.0];
    [Mode::Train, Mode::Eval]
        .into_iter()
        .map(|mode| {
            let err = check_store(&store, std::slice::from_ref(&x), none, |tape, vars, ex| {
                // the same dropout masks on every evaluation
                let mut dr = rng(99);
                let mut cx = Ctx::new(tape, vars, store.stats(), mode, &mut dr);
                let p = head.forward(&mut cx, ex[0])?;
                cx.tape.bce_loss(p, &labels)
            });
            (format!("head {mode:?}"), err)
        })
        .collect()
}

fn block_plan(attention: bool, stride: usize, in_channels: usize, out_channels: usize) -> BlockPlan {
    BlockPlan {
        stage: 0,
        in_channels,
        width: 3,
        out_channels,
        stride,
        in_side: 6,
        mid_side: 6 / stride,
        attention,
    }
}

fn block(plan: &BlockPlan, seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::default();
    let block = Bottleneck::new(&mut store, &mut r, "b", plan).unwrap();
    perturb(&mut store, &mut r);
    let x = randn(&mut r, &[3, plan.in_channels, plan.in_side, plan.in_side], 1.0);
    // attention input above the block's resolution so the resize is exercised
    let att = randn(&mut r, &[3, 3, 9, 9], 1.0);
    let out_numel = 3 * plan.out_channels * plan.mid_side * plan.mid_side;
    let lw = weights(&mut r, out_numel);
    let kind = if plan.attention { "attention" } else { "plain" };
    [(Mode::Eval, none as fn(&str) -> bool), (Mode::Train, conv_bias)]
        .into_iter()
        .map(|(mode, frozen)| {
            let err = check_store(&store, &[x.clone(), att.clone()], frozen, |tape, vars, ex| {
                let mut dr = rng(0);
                let mut cx = Ctx::new(tape, vars, store.stats(), mode, &mut dr);
                let y = block.forward(&mut cx, ex[0], plan.attention.then_some(ex[1]))?;
                cx.tape.weighted_sum(y, &lw)
            });
            let shape = format!("{}->{} stride {}", plan.in_channels, plan.out_channels, plan.stride);
            (format!("{kind} bottleneck {shape} {mode:?}"), err)
        })
        .collect()
}

pub fn plain_bottleneck() -> Vec<Case> {
    let mut out = block(&block_plan(false, 1, 4, 4), 10);
    out.extend(block(&block_plan(false, 2, 2, 4), 11));
    out
}

pub fn attention_bottleneck() -> Vec<Case> {
    let mut out = block(&block_plan(true, 1, 4, 4), 12);
    out.extend(block(&block_plan(true, 2, 2, 6), 13));
    out
}

pub fn attention_unit() -> Vec<Case> {
    let mut r = rng(14);
    let mut store = ParamStore::<f64>::default();
    let unit = AttentionUnit::new(&mut store, &mut r, "unit", (2, 3, 4)).unwrap();
    perturb(&mut store, &mut r);
    let att = randn(&mut r, &[2, 3, 7, 8], 1.0);
    let lw = weights(&mut r, 2 * 2 * 3 * 4);
    let err = check_store(&store, &[att], none, |tape, vars, ex| {
        let mut dr = rng(0);
        let mut cx = Ctx::new(tape, vars, store.stats(), Mode::Train, &mut dr);
        let y = unit.forward(&mut cx, ex[0])?;
        cx.tape.weighted_sum(y, &lw)
    });
    vec![("attention unit".into(), err)]
}

pub fn mini_config() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 1,
        stem_pool: 1,
        layout: vec![1, 1],
        widths: vec![2, 3],
        expansion: 2,
        attention: AttentionMode::Soft,
        placement: Placement::All,
        head: vec![4],
        dropout: 0.5,
    }
}

pub fn binary_planes(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| f64::from(r.random_range(0u8..2))).collect()).unwrap()
}

/// Two-unit soft-attention backbone with every parameter checked.
pub fn mini_backbone() -> Vec<Case> {
    let mut model = Model::<f64>::new(&mini_config(), 3).unwrap();
    assert_eq!(model.attention_unit_count(), 2);
    let mut r = rng(15);
    perturb(model.params_mut(), &mut r);
    let inputs = Inputs {
        stem: randn(&mut r, &[3, 3, 8, 8], 1.0),
        attention: Some(binary_planes(&mut r, &[3, 3, 8, 8])),
    };
    let labels = [1.0, 0.0, 1.0];
    [(Mode::Eval, none as fn(&str) -> bool), (Mode::Train, conv_bias)]
        .into_iter()
        .map(|(mode, frozen)| {
            let err = check_store(model.params(), &[], frozen, |tape, vars, _| {
                let mut dr = rng(5);
                let out = model.forward(tape, vars, &inputs, mode, &mut dr)?;
                tape.bce_loss(out.prob, &labels)
            });
            (format!("2-unit backbone {mode:?}"), err)
        })
        .collect()
}

/// Every case above.
pub fn all() -> Vec<Case> {
    [
        dense, conv, chain, norm, bce, head, plain_bottleneck, attention_bottleneck, attention_unit, mini_backbone,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
