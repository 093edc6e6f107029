//! Training loop and accuracy evaluation.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::Dataset;
use crate::models::{argmax_rows, Head, LossWeights, Model, ModelConfig, ModelKind};
use crate::nn::{mix, Ctx, Mode, Module};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "KINESIG_THREADS";

/// Sequences per evaluation forward pass. Fixed so results do not depend
/// on the thread count.
pub const EVAL_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    /// Multiply the rate by `gamma` every `every` epochs.
    pub every: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    /// Stop after this many epochs without a test-accuracy improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            epochs: 120,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            loss_weights: LossWeights::default(),
            lr_decay: None,
            patience: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if let Some(d) = self.lr_decay {
            if d.every == 0 || !(d.gamma > 0.0) {
                return Err(Error::Config("step decay needs every >= 1 and gamma > 0".into()));
            }
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) => self.lr * d.gamma.powi((epoch / d.every) as i32),
            None => self.lr,
        }
    }
}

/// Mean training losses of one epoch, plus the test accuracy after it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: BTreeMap<Head, f64>,
    pub total_loss: f64,
    pub test_accuracy: f64,
}

/// Top-1 accuracy of every head on one dataset, and the confusion matrix
/// of the prediction head (rows: true class, columns: predicted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub prediction_head: Head,
    pub accuracy: BTreeMap<Head, f64>,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    /// Accuracy of the prediction head.
    pub fn accuracy(&self) -> f64 {
        self.accuracy[&self.prediction_head]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub train: Evaluation,
    pub test: Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub model: ModelKind,
    pub epochs: Vec<EpochLog>,
    /// Model with the highest test accuracy (earliest on ties).
    pub best: Snapshot,
    /// Model after the last epoch run.
    pub last: Snapshot,
}

pub struct TrainOutcome<T> {
    pub best: Model<T>,
    pub last: Model<T>,
    pub metrics: Metrics,
}

fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|s| s.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

fn check_classes<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<()> {
    if model.n_classes() != dataset.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset has {}",
            model.n_classes(),
            dataset.num_classes()
        )));
    }
    Ok(())
}

struct Counts {
    correct: BTreeMap<Head, usize>,
    confusion: Vec<Vec<usize>>,
}

fn eval_chunk<T: Scalar>(model: &Model<T>, dataset: &Dataset, labels: &[usize], idx: &[usize]) -> Result<Counts> {
    let classes = model.n_classes();
    let x = dataset.batch_tensor::<T>(idx, model.in_channels() == 3)?;
    let mut ctx = Ctx::new(Mode::Eval);
    let xv = ctx.tape.constant(x);
    let out = model.forward(&mut ctx, xv)?;
    let mut correct = BTreeMap::new();
    let mut confusion = vec![vec![0; classes]; classes];
    let prediction = out.prediction();
    for &(head, logits) in &out.heads {
        let preds = argmax_rows(ctx.tape.value(logits).data(), classes);
        let mut c = 0;
        for (&p, &i) in preds.iter().zip(idx) {
            if p == labels[i] {
                c += 1;
            }
            if logits == prediction {
                confusion[labels[i]][p] += 1;
            }
        }
        correct.insert(head, c);
    }
    Ok(Counts { correct, confusion })
}

/// Top-1 accuracy per head in eval mode. Ties between logits go to the
/// lowest class index.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_classes(model, dataset)?;
    let labels = dataset.labels();
    let order: Vec<usize> = (0..dataset.len()).collect();
    let parts: Vec<Result<Counts>> = thread_pool().install(|| {
        order
            .par_chunks(EVAL_CHUNK)
            .map(|idx| eval_chunk(model, dataset, &labels, idx))
            .collect()
    });
    let classes = model.n_classes();
    let mut correct: BTreeMap<Head, usize> = BTreeMap::new();
    let mut confusion = vec![vec![0; classes]; classes];
    for part in parts {
        let part = part?;
        for (h, c) in part.correct {
            *correct.entry(h).or_default() += c;
        }
        for (row, add) in confusion.iter_mut().zip(&part.confusion) {
            for (a, b) in row.iter_mut().zip(add) {
                *a += b;
            }
        }
    }
    let n = dataset.len();
    let prediction_head = match model.kind() {
        ModelKind::Str => Head::Spatial,
        ModelKind::Ttr | ModelKind::Msttr => Head::Temporal,
        ModelKind::Dual => Head::Fusion,
    };
    Ok(Evaluation {
        n,
        prediction_head,
        accuracy: correct
            .into_iter()
            .map(|(h, c)| (h, c as f64 / n as f64))
            .collect(),
        confusion,
    })
}

/// Consecutive batch bounds; a trailing batch of one joins the previous
/// batch so batch normalization always sees at least two samples.
pub fn batch_bounds(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = e;
    }
    out
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGrad { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Trains with Adam on `train`, scoring `test` after every epoch. Returns
/// both the best-test-accuracy model and the final one.
pub fn train<T: Scalar>(train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.len() < 2 || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.classes != test.classes {
        return Err(Error::Config("train and test sets have different class lists".into()));
    }
    let mut model = config.model.build::<T>()?;
    check_classes(&model, train)?;
    let mut adam = AdamState::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    let with_conf = model.in_channels() == 3;
    let labels = train.labels();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[config.seed, 0x5348_5546]));
    let mut logs = Vec::new();
    let mut best: Option<(f64, usize, Model<T>)> = None;
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch - 1);
        adam.set_lr(lr);
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<Head, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (b, (s, e)) in batch_bounds(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[s..e];
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let x = train.batch_tensor::<T>(idx, with_conf)?;
            let mut ctx = Ctx::with_seed(Mode::Train, config.seed, step);
            let xv = ctx.tape.constant(x);
            let losses = model
                .forward(&mut ctx, xv)
                .and_then(|out| model.loss(&mut ctx, &out, &y, config.loss_weights))
                .map_err(|err| diverged(err, epoch, b))?;
            let value = ctx.tape.value(losses.total).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            let w = idx.len() as f64;
            total += value * w;
            for &(h, v) in &losses.terms {
                *sums.entry(h).or_default() += ctx.tape.value(v).item().to_f64_lossy() * w;
            }
            ctx.tape.backward(losses.total).map_err(|err| diverged(err, epoch, b))?;
            model.zero_grads();
            model.collect_grads(&ctx.tape);
            let stats = ctx.take_batch_stats();
            model.apply_batch_stats(&stats);
            adam.step(&mut model).map_err(|err| diverged(err, epoch, b))?;
            step += 1;
        }
        let n = train.len() as f64;
        let test_accuracy = evaluate(&model, test)?.accuracy();
        logs.push(EpochLog {
            epoch,
            lr,
            loss: sums.into_iter().map(|(h, v)| (h, v / n)).collect(),
            total_loss: total / n,
            test_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| test_accuracy > *acc) {
            best = Some((test_accuracy, epoch, model.clone()));
        }
        if let (Some(p), Some((_, best_epoch, _))) = (config.patience, &best) {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch");
    let last_epoch = logs.len();
    let snapshot = |m: &Model<T>, epoch| -> Result<Snapshot> {
        Ok(Snapshot {
            epoch,
            train: evaluate(m, train)?,
            test: evaluate(m, test)?,
        })
    };
    let metrics = Metrics {
        model: model.kind(),
        best: snapshot(&best_model, best_epoch)?,
        last: snapshot(&model, last_epoch)?,
        epochs: logs,
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        metrics,
    })
}

/// Predicted class of every sequence, in dataset order.
pub fn predict<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Vec<usize>> {
    check_classes(model, dataset)?;
    let mut out = Vec::with_capacity(dataset.len());
    let order: Vec<usize> = (0..dataset.len()).collect();
    for idx in order.chunks(EVAL_CHUNK) {
        let x = dataset.batch_tensor::<T>(idx, model.in_channels() == 3)?;
        let mut ctx = Ctx::new(Mode::Eval);
        let xv = ctx.tape.constant(x);
        let logits = model.forward(&mut ctx, xv)?.prediction();
        out.extend(argmax_rows(ctx.tape.value(logits).data(), model.n_classes()));
    }
    Ok(out)
}
