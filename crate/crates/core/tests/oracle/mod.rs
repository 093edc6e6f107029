//! Independent counting oracles shared by the efficiency tests and the
//! acceptance harness.

use kinesig::autodiff::{OpKind, OpRecord};
use kinesig::keypoints::NUM_JOINTS;
use kinesig::models::{ModelConfig, ModelKind, ModelOptions};
use kinesig::nn::{Ctx, Mode};
use kinesig::{Model64, Tensor64};

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

/// Sums the FLOP convention over every recorded op.
pub fn trace_flops(trace: &[OpRecord]) -> u64 {
    trace
        .iter()
        .map(|r| {
            let out = numel(&r.output);
            match r.kind {
                OpKind::MatMul | OpKind::BatchMatMul => 2 * out * *r.inputs[0].last().unwrap() as u64,
                OpKind::Add
                | OpKind::AddBroadcast
                | OpKind::Mul
                | OpKind::Scale
                | OpKind::Relu
                | OpKind::TemporalDiff => out,
                OpKind::Softmax | OpKind::LayerNorm | OpKind::BatchNorm => 5 * out,
                OpKind::L2Normalize => 3 * out,
                OpKind::MeanAxis => numel(&r.inputs[0]),
                _ => 0,
            }
        })
        .sum()
}

pub fn traced(config: &ModelConfig, frames: usize) -> u64 {
    let model: Model64 = config.build().unwrap();
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx
        .tape
        .constant(Tensor64::from_fn(vec![1, frames, NUM_JOINTS, 2], |i| (i % 7) as f64 * 0.1));
    model.forward(&mut ctx, x).unwrap();
    trace_flops(&ctx.tape.trace())
}

pub fn matrix() -> Vec<(String, ModelOptions)> {
    let base = ModelOptions {
        n_classes: 5,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        dropout_p: 0.2,
        ..ModelOptions::default()
    };
    let mut out = Vec::new();
    let mut add = |name: &str, o: ModelOptions| out.push((name.to_string(), o));
    add("str", ModelOptions { kind: ModelKind::Str, ..base.clone() });
    add(
        "str no joint embedding, 1 head",
        ModelOptions { kind: ModelKind::Str, joint_embedding: false, n_heads: 1, ..base.clone() },
    );
    add("ttr k=9", ModelOptions { kind: ModelKind::Ttr, ..base.clone() });
    add(
        "ttr velocity no pe",
        ModelOptions { kind: ModelKind::Ttr, velocity: true, positional: false, ..base.clone() },
    );
    add("ttr k=1", ModelOptions { kind: ModelKind::Ttr, stride: 1, d_ff: Some(12), ..base.clone() });
    add("msttr", ModelOptions { kind: ModelKind::Msttr, ..base.clone() });
    add(
        "msttr residual shared",
        ModelOptions { kind: ModelKind::Msttr, residual: true, share_backbone: true, ..base.clone() },
    );
    add("msttr velocity", ModelOptions { kind: ModelKind::Msttr, velocity: true, ..base.clone() });
    add("dual", base.clone());
    add("dual ttr", ModelOptions { dual_temporal: ModelKind::Ttr, n_layers: 1, ..base.clone() });
    out
}

pub fn linear(i: usize, o: usize) -> usize {
    i * o + o
}

fn block(d: usize, ff: usize) -> usize {
    2 * 2 * d + 3 * d * d + linear(d, d) + linear(d, ff) + linear(ff, d)
}

/// Hand enumeration of every learnable tensor, by layer.
pub fn enumerate_params(o: &ModelOptions, kind: ModelKind) -> usize {
    let d = o.d_model;
    let ff = o.d_ff.unwrap_or(2 * d);
    let tokens = |k: usize| {
        let t = if o.velocity { o.frames - 1 } else { o.frames };
        t.div_ceil(k)
    };
    let encoder = |k: usize| {
        linear(o.in_channels, d) + if o.positional { tokens(k) * d } else { 0 } + o.n_layers * block(d, ff) + 2 * d
    };
    let classifier = linear(d, o.n_classes);
    match kind {
        ModelKind::Str => {
            linear(o.in_channels, d)
                + if o.joint_embedding { NUM_JOINTS * d } else { 0 }
                + o.n_layers * block(d, ff)
                + 2 * d
                + classifier
        }
        ModelKind::Ttr => encoder(o.stride) + classifier,
        ModelKind::Msttr => {
            let branches = if o.share_backbone { encoder(3) } else { encoder(3) + encoder(5) };
            branches + linear(2 * d, d) + if o.residual { linear(o.in_channels, d) } else { 0 } + classifier
        }
        ModelKind::Dual => {
            let fusion = linear(2 * d, 2 * d) + 2 * 2 * d + linear(2 * d, d) + 2 * d + linear(d, o.n_classes);
            enumerate_params(o, ModelKind::Str) + enumerate_params(o, o.dual_temporal) + fusion
        }
    }
}
