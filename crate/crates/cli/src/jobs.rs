use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use kinesig::efficiency::{count_params, estimate_flops, measure_throughput, EfficiencyReport, ThroughputConfig};
use kinesig::gradcheck::{check_model, tiny_options, GradCheckConfig};
use kinesig::keypoints::{load_jsonl, preprocess, save_jsonl, split, Dataset, Preprocess, SplitSpec};
use kinesig::models::checkpoint::Checkpoint;
use kinesig::models::{LossWeights, Model, ModelConfig, ModelKind, ModelOptions};
use kinesig::nn::Mode;
use kinesig::report::{method_name, report, RunSummary};
use kinesig::synth::{generate_dataset, SynthConfig, SynthMode};
use kinesig::train::{evaluate, train, Metrics, StepDecay, TrainConfig};
use kinesig::Scalar;

use crate::args::{
    BenchArgs, Cli, Command, DataFlags, EvalArgs, GradcheckArgs, ModeArg, ModelArg, ModelFlags, Precision,
    ReportArgs, SynthArgs, TemporalArg, TrainArgs,
};
use crate::manifest::{read_json, write_json, Manifest, FILE};
use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub path: PathBuf,
    pub preprocess: Preprocess,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    Config(ModelConfig),
    Checkpoint(PathBuf),
}

/// A fully resolved command, as stored in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Job {
    Synth {
        config: SynthConfig,
        out: PathBuf,
    },
    Train {
        data: DataSpec,
        split: SplitSpec,
        train: TrainConfig,
        precision: Precision,
        out: PathBuf,
    },
    Eval {
        data: DataSpec,
        checkpoint: PathBuf,
        out: PathBuf,
    },
    Gradcheck {
        model: ModelConfig,
        batch: usize,
        frames: usize,
        step: f64,
        tolerance: f64,
        floor: f64,
        seed: u64,
        out: Option<PathBuf>,
    },
    Bench {
        data: DataSpec,
        model: BenchModel,
        throughput: ThroughputConfig,
        precision: Precision,
        out: PathBuf,
    },
    Report {
        runs: Vec<PathBuf>,
        bench: Vec<PathBuf>,
        out: PathBuf,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Synth { .. } => "synth",
            Job::Train { .. } => "train",
            Job::Eval { .. } => "eval",
            Job::Gradcheck { .. } => "gradcheck",
            Job::Bench { .. } => "bench",
            Job::Report { .. } => "report",
        }
    }

    /// Files whose contents determine the outputs.
    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Job::Synth { .. } | Job::Gradcheck { .. } => vec![],
            Job::Train { data, .. } => vec![data.path.clone()],
            Job::Eval { data, checkpoint, .. } => vec![data.path.clone(), checkpoint.clone()],
            Job::Bench { data, model, .. } => match model {
                BenchModel::Config(_) => vec![data.path.clone()],
                BenchModel::Checkpoint(c) => vec![data.path.clone(), c.clone()],
            },
            Job::Report { runs, bench, .. } => runs
                .iter()
                .flat_map(|r| [r.join("metrics.json"), r.join(FILE)])
                .chain(bench.iter().map(|b| b.join("efficiency.json")))
                .collect(),
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Job::Synth { out, .. }
            | Job::Train { out, .. }
            | Job::Eval { out, .. }
            | Job::Bench { out, .. }
            | Job::Report { out, .. } => Some(out),
            Job::Gradcheck { out, .. } => out.as_deref(),
        }
    }

    pub fn with_out(mut self, dir: PathBuf) -> Self {
        match &mut self {
            Job::Synth { out, .. }
            | Job::Train { out, .. }
            | Job::Eval { out, .. }
            | Job::Bench { out, .. }
            | Job::Report { out, .. } => *out = dir,
            Job::Gradcheck { out, .. } => *out = Some(dir),
        }
        self
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let job = match cli.command {
        Command::Synth(a) => synth_job(a)?,
        Command::Train(a) => train_job(a)?,
        Command::Eval(a) => eval_job(a),
        Command::Gradcheck(a) => gradcheck_job(a)?,
        Command::Bench(a) => bench_job(a)?,
        Command::Report(a) => report_job(a),
        Command::Replay(a) => {
            let manifest = Manifest::read(&a.manifest)?;
            manifest.verify_inputs()?;
            let job = manifest.job;
            match a.out {
                Some(out) => job.with_out(out),
                None => job,
            }
        }
    };
    execute(&job)
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn synth_job(a: SynthArgs) -> Result<Job, Failure> {
    let mut config = match &a.config {
        Some(path) => read_json::<SynthConfig>(path)?,
        None => SynthConfig::default(),
    };
    if let Some(m) = a.mode {
        config.mode = match m {
            ModeArg::PostureOnly => SynthMode::PostureOnly,
            ModeArg::RhythmOnly => SynthMode::RhythmOnly,
            ModeArg::Mixed => SynthMode::Mixed,
            ModeArg::Micro => SynthMode::Micro,
            ModeArg::Stillness => SynthMode::Stillness,
        };
    }
    if let Some(v) = a.identities {
        config.n_identities = v;
    }
    if let Some(v) = a.sequences {
        config.sequences_per_identity = v;
    }
    if let Some(v) = a.frames {
        config.frames = v;
    }
    if let Some(v) = a.fps {
        config.fps = v;
    }
    if let Some(v) = a.noise {
        config.noise_sigma = v;
    }
    if let Some(v) = a.amplitude {
        config.amplitude = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;
    Ok(Job::Synth { config, out: a.out })
}

fn data_spec(d: &DataFlags) -> DataSpec {
    DataSpec {
        path: d.data.clone(),
        preprocess: Preprocess {
            normalize: !d.no_normalize,
            stride: d.frame_stride,
            frames: d.input_frames,
        },
    }
}

fn model_config(m: &ModelFlags, n_classes: usize, frames: usize, seed: u64) -> Result<ModelConfig, Failure> {
    let options = ModelOptions {
        kind: kind(m.model),
        n_classes,
        d_model: m.d_model,
        n_layers: m.layers,
        n_heads: m.heads,
        d_ff: m.d_ff,
        dropout_p: m.dropout,
        stride: m.k,
        velocity: m.velocity,
        positional: m.positional.on(),
        joint_embedding: m.joint_embedding.on(),
        dual_temporal: match m.temporal {
            TemporalArg::Ttr => ModelKind::Ttr,
            TemporalArg::Msttr => ModelKind::Msttr,
        },
        share_backbone: m.share_backbone,
        residual: m.residual,
        frames,
        in_channels: 2,
        seed,
    };
    Ok(options.config()?)
}

fn kind(m: ModelArg) -> ModelKind {
    match m {
        ModelArg::Str => ModelKind::Str,
        ModelArg::Ttr => ModelKind::Ttr,
        ModelArg::Msttr => ModelKind::Msttr,
        ModelArg::Dual => ModelKind::Dual,
    }
}

/// Class count of the data file, read without preprocessing.
fn classes_in(path: &Path) -> Result<usize, Failure> {
    Ok(load_jsonl(path)?.num_classes())
}

fn train_job(a: TrainArgs) -> Result<Job, Failure> {
    let data = data_spec(&a.data);
    let n_classes = classes_in(&data.path)?;
    let model = model_config(&a.model, n_classes, data.preprocess.frames, a.seed)?;
    let lr_decay = match a.lr_step.as_deref() {
        None => None,
        Some([every, gamma]) => {
            if !(every.fract() == 0.0 && *every >= 1.0) {
                return Err(invalid("--lr-step needs a whole number of epochs"));
            }
            Some(StepDecay {
                every: *every as usize,
                gamma: *gamma,
            })
        }
        Some(_) => return Err(invalid("--lr-step takes N,GAMMA")),
    };
    let w = &a.loss_weights;
    if w.len() != 3 {
        return Err(invalid("--loss-weights takes three comma-separated values"));
    }
    let train = TrainConfig {
        model,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        loss_weights: LossWeights {
            spatial: w[0],
            temporal: w[1],
            fusion: w[2],
        },
        lr_decay,
        patience: a.patience,
    };
    train.validate()?;
    Ok(Job::Train {
        data,
        split: SplitSpec {
            train_fraction: a.train_fraction,
            seed: a.seed,
        },
        train,
        precision: a.precision,
        out: a.out,
    })
}

fn eval_job(a: EvalArgs) -> Job {
    Job::Eval {
        data: data_spec(&a.data),
        checkpoint: a.checkpoint,
        out: a.out,
    }
}

fn gradcheck_job(a: GradcheckArgs) -> Result<Job, Failure> {
    if !a.tiny && a.d_model.is_none() {
        return Err(invalid("gradcheck needs --tiny or an explicit --d-model"));
    }
    let mut options = tiny_options(kind(a.model), a.layers);
    if let Some(d) = a.d_model {
        options.d_model = d;
        options.d_ff = Some(2 * d);
    }
    options.frames = a.frames;
    let defaults = GradCheckConfig::default();
    Ok(Job::Gradcheck {
        model: options.config()?,
        batch: a.batch,
        frames: a.frames,
        step: defaults.step,
        tolerance: a.tolerance,
        floor: defaults.floor,
        seed: a.seed,
        out: a.out,
    })
}

fn bench_job(a: BenchArgs) -> Result<Job, Failure> {
    let data = data_spec(&a.data);
    let model = match &a.checkpoint {
        Some(path) => BenchModel::Checkpoint(path.clone()),
        None => {
            let n_classes = classes_in(&data.path)?;
            BenchModel::Config(model_config(&a.model, n_classes, data.preprocess.frames, a.seed)?)
        }
    };
    if !(a.duration > 0.0 && a.duration.is_finite()) {
        return Err(invalid("--duration must be positive"));
    }
    let throughput = ThroughputConfig {
        duration: Duration::from_secs_f64(a.duration),
        repetitions: a.repetitions,
        batch_size: a.batch_size,
    };
    if throughput.repetitions < 5 || throughput.batch_size == 0 {
        return Err(invalid("bench needs --repetitions >= 5 and a positive --batch-size"));
    }
    Ok(Job::Bench {
        data,
        model,
        throughput,
        precision: a.precision,
        out: a.out,
    })
}

fn report_job(a: ReportArgs) -> Job {
    Job::Report {
        runs: a.runs,
        bench: a.bench,
        out: a.out,
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_data(spec: &DataSpec) -> Result<Dataset, Failure> {
    Ok(preprocess(&load_jsonl(&spec.path)?, spec.preprocess)?)
}

/// Runs a resolved job and writes its outputs plus a manifest.
pub fn execute(job: &Job) -> Result<(), Failure> {
    let outputs = match job {
        Job::Synth { config, out } => {
            let dataset = generate_dataset(config)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            save_jsonl(&dataset, out)?;
            println!(
                "wrote {} sequences of {} identities to {}",
                dataset.len(),
                dataset.num_classes(),
                out.display()
            );
            vec![out.clone()]
        }
        Job::Train {
            data,
            split: spec,
            train: config,
            precision,
            out,
        } => {
            let dataset = load_data(data)?;
            let (tr, te) = split(&dataset, *spec)?;
            create_dir(out)?;
            match precision {
                Precision::F32 => run_train::<f32>(&tr, &te, config, out)?,
                Precision::F64 => run_train::<f64>(&tr, &te, config, out)?,
            }
        }
        Job::Eval { data, checkpoint, out } => {
            let dataset = load_data(data)?;
            let ck = Checkpoint::load(checkpoint)?;
            create_dir(out)?;
            let evaluation = match ck.scalar.as_str() {
                "f64" => evaluate_checked(&ck.into_model::<f64>()?, &dataset)?,
                _ => evaluate_checked(&ck.into_model::<f32>()?, &dataset)?,
            };
            let path = out.join("evaluation.json");
            write_json(&path, &evaluation)?;
            println!("accuracy {:.4} on {} sequences", evaluation.accuracy(), evaluation.n);
            vec![path]
        }
        Job::Gradcheck {
            model,
            batch,
            frames,
            step,
            tolerance,
            floor,
            seed,
            out,
        } => {
            let gc = GradCheckConfig {
                step: *step,
                tolerance: *tolerance,
                floor: *floor,
                mode: Mode::Train,
                seed: *seed,
            };
            let rep = check_model(model, *batch, *frames, gc)?;
            for p in &rep.params {
                println!(
                    "{} {:<32} {:>6} elements  max rel error {:.3e}",
                    if p.passed { "ok  " } else { "FAIL" },
                    p.name,
                    p.numel,
                    p.max_rel_error
                );
            }
            let verdict = if rep.passed { "PASS" } else { "FAIL" };
            println!(
                "{verdict} {} parameters, max rel error {:.3e} (tolerance {:e})",
                rep.params.len(),
                rep.max_rel_error(),
                rep.tolerance
            );
            let mut outputs = vec![];
            if let Some(dir) = out {
                create_dir(dir)?;
                let path = dir.join("gradcheck.json");
                write_json(&path, &rep)?;
                outputs.push(path);
            }
            if !rep.passed {
                write_manifest(job, outputs)?;
                return Err(Failure::Runtime("gradient check failed".into()));
            }
            outputs
        }
        Job::Bench {
            data,
            model,
            throughput,
            precision,
            out,
        } => {
            let dataset = load_data(data)?;
            let config = match model {
                BenchModel::Config(c) => c.clone(),
                BenchModel::Checkpoint(p) => Checkpoint::load(p)?.config,
            };
            let rep = match precision {
                Precision::F32 => bench::<f32>(&config, model, &dataset, *throughput)?,
                Precision::F64 => bench::<f64>(&config, model, &dataset, *throughput)?,
            };
            create_dir(out)?;
            let path = out.join("efficiency.json");
            write_json(&path, &rep)?;
            println!(
                "{}: {} params, {} FLOPs, {:.2} ± {:.2} frames/s",
                rep.model, rep.params, rep.flops, rep.throughput.frames_per_sec, rep.throughput.frames_per_sec_std
            );
            vec![path]
        }
        Job::Report { runs, bench, out } => {
            let mut summaries = Vec::new();
            for dir in runs {
                let manifest = Manifest::read(&dir.join(FILE))?;
                let Job::Train { train: config, .. } = manifest.job else {
                    return Err(invalid(format!("{} is not a training run", dir.display())));
                };
                let metrics: Metrics = read_json(&dir.join("metrics.json"))?;
                summaries.push(RunSummary::new(&config, &metrics));
            }
            let efficiency = bench
                .iter()
                .map(|dir| read_json::<EfficiencyReport>(&dir.join("efficiency.json")))
                .collect::<Result<Vec<_>, _>>()?;
            let rep = report(&summaries, &efficiency);
            create_dir(out)?;
            let text = rep.to_text();
            let (txt, json) = (out.join("report.txt"), out.join("report.json"));
            fs::write(&txt, &text).map_err(|e| io_err(&txt, e))?;
            fs::write(&json, rep.to_json() + "\n").map_err(|e| io_err(&json, e))?;
            print!("{text}");
            vec![txt, json]
        }
    };
    write_manifest(job, outputs)
}

fn write_manifest(job: &Job, outputs: Vec<PathBuf>) -> Result<(), Failure> {
    let manifest = Manifest::new(job, outputs)?;
    let path = match job {
        Job::Synth { out, .. } => {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest.json");
            out.with_file_name(name)
        }
        _ => match job.out() {
            Some(dir) => dir.join(FILE),
            None => return Ok(()),
        },
    };
    manifest.write(&path)
}

fn run_train<T: Scalar>(tr: &Dataset, te: &Dataset, config: &TrainConfig, out: &Path) -> Result<Vec<PathBuf>, Failure> {
    let outcome = train::<T>(tr, te, config)?;
    let m = &outcome.metrics;
    for e in &m.epochs {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  test accuracy {:.4}",
            e.epoch, e.lr, e.total_loss, e.test_accuracy
        );
    }
    let metrics = out.join("metrics.json");
    let best = out.join("checkpoint.json");
    let last = out.join("last.json");
    write_json(&metrics, m)?;
    Checkpoint::from_model(&outcome.best).save(&best)?;
    Checkpoint::from_model(&outcome.last).save(&last)?;
    println!(
        "best test accuracy {:.4} at epoch {}; final {:.4}",
        m.best.test.accuracy(),
        m.best.epoch,
        m.last.test.accuracy()
    );
    Ok(vec![metrics, best, last])
}

fn evaluate_checked<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<kinesig::train::Evaluation, Failure> {
    if dataset.num_classes() != model.n_classes() {
        return Err(invalid(format!(
            "data has {} identities but the checkpoint was trained on {}",
            dataset.num_classes(),
            model.n_classes()
        )));
    }
    Ok(evaluate(model, dataset)?)
}

fn bench<T: Scalar>(
    config: &ModelConfig,
    source: &BenchModel,
    dataset: &Dataset,
    throughput: ThroughputConfig,
) -> Result<EfficiencyReport, Failure> {
    let model: Model<T> = match source {
        BenchModel::Config(c) => c.build()?,
        BenchModel::Checkpoint(p) => Checkpoint::load(p)?.into_model()?,
    };
    let frames = dataset.sequences.first().map(|s| s.num_frames).unwrap_or(0);
    Ok(EfficiencyReport {
        model: method_name(config),
        params: count_params(&model),
        flops: estimate_flops(config, frames, kinesig::keypoints::NUM_JOINTS),
        throughput: measure_throughput(&model, dataset, throughput)?,
    })
}
