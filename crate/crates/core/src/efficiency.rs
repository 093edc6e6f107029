//! Parameter counts, analytic forward FLOPs and measured throughput.
//!
//! FLOP conventions: an `m×k · k×n` product costs `2mkn`; softmax costs 5
//! per element; layer and batch normalization 5 per element; L2
//! normalization 3 per element; means 1 per input element; every other
//! elementwise op (bias add, residual add, scaling, ReLU, frame
//! differences) 1 per output element. Reshapes, slicing, concatenation and
//! eval-mode dropout are free. The loss is not part of the forward pass.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::Dataset;
use crate::models::{
    DualConfig, Model, ModelConfig, MsTtrConfig, StrConfig, TemporalConfig, TtrConfig, MS_STRIDES,
};
use crate::nn::{Ctx, Mode, Module};
use crate::scalar::Scalar;

pub const SOFTMAX_FLOPS: u64 = 5;
pub const NORM_FLOPS: u64 = 5;
pub const L2_FLOPS: u64 = 3;

/// Sum of element counts of all learnable tensors.
pub fn count_params<T: Scalar, M: Module<T> + ?Sized>(model: &M) -> usize {
    model.num_params()
}

fn linear(rows: u64, d_in: u64, d_out: u64) -> u64 {
    2 * rows * d_in * d_out + rows * d_out
}

/// One pre-norm block over `groups` independent sets of `len` tokens.
fn block(groups: u64, len: u64, d: u64, heads: u64, d_ff: u64) -> u64 {
    let n = groups * len;
    let norms = 2 * NORM_FLOPS * n * d;
    let qkv = 3 * 2 * n * d * d;
    let scores = 2 * groups * len * len * d;
    let scale = groups * heads * len * len;
    let softmax = SOFTMAX_FLOPS * groups * heads * len * len;
    let mix = 2 * groups * len * len * d;
    let out = linear(n, d, d);
    let ffn = linear(n, d, d_ff) + n * d_ff + linear(n, d_ff, d);
    let residuals = 2 * n * d;
    norms + qkv + scores + scale + softmax + mix + out + ffn + residuals
}

fn str_flops(c: &StrConfig, frames: u64, joints: u64) -> u64 {
    let d = c.d_model as u64;
    let n = frames * joints;
    let mut f = linear(n, c.in_channels as u64, d);
    if c.use_joint_embedding {
        f += n * d;
    }
    f += c.n_layers as u64 * block(frames, joints, d, c.n_heads as u64, c.d_ff as u64);
    f += NORM_FLOPS * n * d;
    f += n * d + frames * d;
    f + linear(1, d, c.n_classes as u64)
}

fn encoder_flops(c: &TtrConfig, frames: u64, joints: u64, k: u64) -> u64 {
    let d = c.d_model as u64;
    let ch = c.in_channels as u64;
    let mut f = 0;
    let mut t = frames;
    if c.use_velocity_input {
        t -= 1;
        f += t * joints * ch;
    }
    let tokens = t.div_ceil(k);
    let n = joints * tokens;
    f += linear(n, ch, d);
    if c.use_positional_encoding {
        f += n * d;
    }
    f += c.n_layers as u64 * block(joints, tokens, d, c.n_heads as u64, c.d_ff as u64);
    f += NORM_FLOPS * n * d;
    f + n * d + joints * d
}

fn ttr_flops(c: &TtrConfig, frames: u64, joints: u64) -> u64 {
    encoder_flops(c, frames, joints, c.stride as u64) + linear(1, c.d_model as u64, c.n_classes as u64)
}

fn msttr_flops(c: &MsTtrConfig, frames: u64, joints: u64) -> u64 {
    let b = &c.branch;
    let d = b.d_model as u64;
    let mut f: u64 = MS_STRIDES
        .iter()
        .map(|&k| encoder_flops(b, frames, joints, k as u64))
        .sum();
    f += linear(1, 2 * d, d);
    if c.residual {
        let ch = b.in_channels as u64;
        f += frames * joints * ch + linear(1, ch, d) + d;
    }
    f + linear(1, d, b.n_classes as u64)
}

fn dual_flops(c: &DualConfig, frames: u64, joints: u64) -> u64 {
    let d = c.d_model() as u64;
    let classes = c.n_classes() as u64;
    let temporal = match &c.temporal {
        TemporalConfig::Ttr(t) => ttr_flops(t, frames, joints),
        TemporalConfig::MsTtr(m) => msttr_flops(m, frames, joints),
    };
    let head = linear(1, 2 * d, 2 * d)
        + NORM_FLOPS * 2 * d
        + 2 * d
        + linear(1, 2 * d, d)
        + NORM_FLOPS * d
        + d
        + linear(1, d, classes);
    str_flops(&c.spatial, frames, joints) + temporal + 2 * L2_FLOPS * d + head
}

/// Analytic eval-mode forward FLOPs for one sequence of `frames × joints`.
pub fn estimate_flops(config: &ModelConfig, frames: usize, joints: usize) -> u64 {
    let (t, v) = (frames as u64, joints as u64);
    match config {
        ModelConfig::Str(c) => str_flops(c, t, v),
        ModelConfig::Ttr(c) => ttr_flops(c, t, v),
        ModelConfig::Msttr(c) => msttr_flops(c, t, v),
        ModelConfig::Dual(c) => dual_flops(c, t, v),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    /// Total measured wall-clock time, split evenly across repetitions.
    pub duration: Duration,
    pub repetitions: usize,
    pub batch_size: usize,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self {
            duration: Duration::from_secs(5),
            repetitions: 5,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub sequences_per_sec: f64,
    pub sequences_per_sec_std: f64,
    pub frames_per_sec: f64,
    pub frames_per_sec_std: f64,
    pub repetitions: usize,
    pub frames_per_sequence: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Eval-mode inference rate over `dataset`, after one warm-up batch.
pub fn measure_throughput<T: Scalar>(
    model: &Model<T>,
    dataset: &Dataset,
    config: ThroughputConfig,
) -> Result<Throughput> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.repetitions < 5 || config.batch_size == 0 {
        return Err(Error::Config("throughput needs >= 5 repetitions and a positive batch size".into()));
    }
    let with_conf = model.in_channels() == 3;
    let order: Vec<usize> = (0..dataset.len()).collect();
    let batches: Vec<_> = order
        .chunks(config.batch_size)
        .map(|idx| dataset.batch_tensor::<T>(idx, with_conf))
        .collect::<Result<_>>()?;
    let run = |x: &crate::tensor::Tensor<T>| -> Result<()> {
        let mut ctx = Ctx::new(Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        model.forward(&mut ctx, xv)?;
        Ok(())
    };
    run(&batches[0])?;
    let per_rep = config.duration / config.repetitions as u32;
    let mut rates = Vec::with_capacity(config.repetitions);
    for _ in 0..config.repetitions {
        let start = Instant::now();
        let mut seen = 0usize;
        'outer: loop {
            for x in &batches {
                run(x)?;
                seen += x.shape()[0];
                if start.elapsed() >= per_rep {
                    break 'outer;
                }
            }
        }
        rates.push(seen as f64 / start.elapsed().as_secs_f64());
    }
    let frames = dataset.sequences[0].num_frames;
    let (mean, std) = mean_std(&rates);
    Ok(Throughput {
        sequences_per_sec: mean,
        sequences_per_sec_std: std,
        frames_per_sec: mean * frames as f64,
        frames_per_sec_std: std * frames as f64,
        repetitions: config.repetitions,
        frames_per_sequence: frames,
    })
}

/// One Table III row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub model: String,
    pub params: usize,
    pub flops: u64,
    pub throughput: Throughput,
}
