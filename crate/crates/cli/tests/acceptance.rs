//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p kinesig-cli --test acceptance -- 5a 6` runs a subset.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestError, TestRunner};

use kinesig::efficiency::{count_params, estimate_flops, measure_throughput, EfficiencyReport, ThroughputConfig};
use kinesig::gradcheck::{check_model, tiny_options, GradCheckConfig, TINY_FRAMES};
use kinesig::keypoints::{preprocess, split, strided_len, subsample_stride, velocity, Preprocess, SplitSpec, NUM_JOINTS};
use kinesig::models::fusion::{fuse, l2_normalize};
use kinesig::models::{
    Head, Model, ModelKind, ModelOptions, MsTtrConfig, MsTtrModel, StrConfig, StrModel, TtrConfig, TtrModel,
};
use kinesig::nn::{Ctx, Mode};
use kinesig::report::report;
use kinesig::synth::{generate_dataset, SynthConfig, SynthMode};
use kinesig::train::{train, Metrics, TrainConfig};
use kinesig::{Model64, Tensor64};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, &str, fn() -> Outcome); 11] = [
        ("1", "gradient integrity", gradients),
        ("2", "attention and permutation invariants", invariants),
        ("3", "velocity, stride and fusion contracts", contracts),
        ("4", "overfit sanity", overfit),
        ("5a", "posture-only: STR", posture),
        ("5b", "rhythm-only: STR vs MS-TTR", rhythm),
        ("5c", "micro-gestures: MS-TTR vs TTR", micro),
        ("5d", "mixed: fusion vs streams", mixed),
        ("6", "velocity ablation direction", stillness),
        ("7", "efficiency reporting", efficiency),
        ("8", "reproducibility from manifests", reproducibility),
    ];
    let mut failed = 0;
    let mut stream_time = Duration::ZERO;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id || (f == "5" && id.starts_with('5'))) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed();
        if id.starts_with('5') {
            stream_time += secs;
        }
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} {verdict} {name}: {detail} ({:.1}s)", secs.as_secs_f64());
    }
    if stream_time > Duration::ZERO {
        let ok = stream_time < Duration::from_secs(30 * 60);
        failed += !ok as usize;
        println!(
            "criterion 5 {} runtime: {:.0}s of 1800s",
            if ok { "PASS" } else { "FAIL" },
            stream_time.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cases = [
        (ModelKind::Str, 1, 2, Mode::Eval),
        (ModelKind::Ttr, 2, TINY_FRAMES, Mode::Eval),
        (ModelKind::Msttr, 1, TINY_FRAMES, Mode::Eval),
        (ModelKind::Dual, 1, 6, Mode::Train),
    ];
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for (kind, layers, frames, mode) in cases {
        let config = tiny_options(kind, layers).config().map_err(|e| e.to_string())?;
        let gc = GradCheckConfig { mode, seed: 5, ..GradCheckConfig::default() };
        let rep = check_model(&config, 2, frames, gc).map_err(|e| e.to_string())?;
        if let Some(p) = rep.failures().next() {
            return Err(format!("{} {}: rel error {:.3e}", kind.name(), p.name, p.max_rel_error));
        }
        worst = worst.max(rep.max_rel_error());
        tensors += rep.params.len();
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 120.0, format!("took {secs:.0}s"))?;
    Ok(format!("{tensors} tensors, max rel error {worst:.2e} < 1e-4"))
}

const FRAMES: usize = 5;
const JOINTS: usize = 6;

fn small_str(joint_embedding: bool) -> StrModel<f64> {
    StrModel::new(StrConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        use_joint_embedding: joint_embedding,
        dropout_p: 0.2,
        n_classes: 3,
        n_joints: JOINTS,
        in_channels: 2,
        seed: 1,
    })
    .unwrap()
}

fn small_ttr(positional: bool) -> TtrModel<f64> {
    TtrModel::new(TtrConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        stride: 1,
        use_positional_encoding: positional,
        max_frames: FRAMES,
        n_classes: 3,
        seed: 1,
        ..TtrConfig::default()
    })
    .unwrap()
}

fn permute(data: &[f64], perm: &[usize], frames: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for t in 0..FRAMES {
        for v in 0..JOINTS {
            let (st, sv) = if frames { (perm[t], v) } else { (t, perm[v]) };
            for c in 0..2 {
                out[(t * JOINTS + v) * 2 + c] = data[(st * JOINTS + sv) * 2 + c];
            }
        }
    }
    out
}

fn outputs(data: &[f64], f: impl FnOnce(&mut Ctx<f64>, kinesig::autodiff::Var) -> kinesig::models::StreamOutput) -> Vec<f64> {
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(Tensor64::from_f64(vec![1, FRAMES, JOINTS, 2], data).unwrap());
    let out = f(&mut ctx, x);
    let mut v = ctx.tape.value(out.embedding).data().to_vec();
    v.extend_from_slice(ctx.tape.value(out.logits).data());
    v
}

fn diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fail<T: std::fmt::Debug>(what: &str, e: TestError<T>) -> String {
    format!("{what}: {e}")
}

fn invariants() -> Outcome {
    const CASES: u32 = 100;
    let runner = || TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() });
    let coords = || prop::collection::vec(-2.0f64..2.0, FRAMES * JOINTS * 2);
    let perm = |n: usize| {
        Just((0..n).collect::<Vec<usize>>())
            .prop_shuffle()
            .prop_filter("non-identity", |p| p.iter().enumerate().any(|(i, &j)| i != j))
    };

    runner()
        .run(&prop::collection::vec(-700.0f64..700.0, 1..40), |xs| {
            let n = xs.len();
            let mut ctx = Ctx::<f64>::new(Mode::Eval);
            let x = ctx.tape.constant(Tensor64::from_f64(vec![1, n], &xs).unwrap());
            let y = ctx.tape.softmax(x).unwrap();
            let s: f64 = ctx.tape.value(y).data().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9, "sum {}", s);
            Ok(())
        })
        .map_err(|e| fail("softmax", e))?;

    let (with, without) = (small_str(true), small_str(false));
    runner()
        .run(&(coords(), perm(FRAMES)), |(d, p)| {
            let f = |d: &[f64]| outputs(d, |c, x| with.forward(c, x).unwrap());
            prop_assert!(diff(&f(&d), &f(&permute(&d, &p, true))) < 1e-9);
            Ok(())
        })
        .map_err(|e| fail("STR frame permutation", e))?;
    runner()
        .run(&(coords(), perm(JOINTS)), |(d, p)| {
            let f = |d: &[f64]| outputs(d, |c, x| without.forward(c, x).unwrap());
            let g = |d: &[f64]| outputs(d, |c, x| with.forward(c, x).unwrap());
            let q = permute(&d, &p, false);
            prop_assert!(diff(&f(&d), &f(&q)) < 1e-9);
            prop_assert!(diff(&g(&d), &g(&q)) > 1e-9);
            Ok(())
        })
        .map_err(|e| fail("STR joint permutation", e))?;

    let (plain, positional) = (small_ttr(false), small_ttr(true));
    runner()
        .run(&(coords(), perm(FRAMES)), |(d, p)| {
            let f = |d: &[f64]| outputs(d, |c, x| plain.forward(c, x).unwrap());
            let g = |d: &[f64]| outputs(d, |c, x| positional.forward(c, x).unwrap());
            let q = permute(&d, &p, true);
            prop_assert!(diff(&f(&d), &f(&q)) < 1e-9);
            prop_assert!(diff(&g(&d), &g(&q)) > 1e-9);
            Ok(())
        })
        .map_err(|e| fail("TTR frame permutation", e))?;
    Ok(format!("{CASES} instances each of 4 properties"))
}

fn contracts() -> Outcome {
    let err = |e: kinesig::Error| e.to_string();
    check(velocity(&[0.0, 1.0, 3.0, 6.0], 4).map_err(err)? == vec![1.0, 2.0, 3.0], "velocity values")?;
    let xs: Vec<f64> = (0..30 * NUM_JOINTS * 2).map(|i| (i as f64 * 0.01).sin()).collect();
    check(velocity(&xs, 30).map_err(err)?.len() == 29 * NUM_JOINTS * 2, "velocity length")?;
    check(velocity(&[1.0], 1).is_err(), "velocity of one frame")?;

    let frames: Vec<f64> = (0..30).map(f64::from).collect();
    check(subsample_stride(&frames, 30, 9).map_err(err)? == vec![0.0, 9.0, 18.0, 27.0], "k=9 frames")?;
    let lens = [9, 3, 5].map(|k| strided_len(30, k));
    check(lens == [4, 10, 6], format!("strided lengths {lens:?}"))?;

    let input = Tensor64::from_fn(vec![1, 30, 3, 2], |i| (i as f64 * 0.37).sin());
    let ttr = TtrModel::<f64>::new(TtrConfig { d_model: 8, n_classes: 3, ..TtrConfig::default() }).map_err(err)?;
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(input.clone());
    let out = ttr.forward(&mut ctx, x).map_err(err)?;
    check(ctx.tape.shape(out.attention[0]) == [3, 4, 4], "TTR k=9 attends over 4 frames")?;
    let ms = MsTtrModel::<f64>::new(MsTtrConfig {
        branch: TtrConfig { d_model: 8, n_layers: 1, n_classes: 3, ..TtrConfig::default() },
        ..MsTtrConfig::default()
    })
    .map_err(err)?;
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(input);
    let out = ms.forward_detailed(&mut ctx, x).map_err(err)?;
    let tokens: Vec<usize> = out.stream.attention.iter().map(|a| ctx.tape.shape(*a)[1]).collect();
    check(tokens == [10, 6], format!("MS-TTR tokens {tokens:?}"))?;
    check(ctx.tape.shape(out.concatenated) == [1, 16], "MS-TTR concatenation is 2d")?;

    let f = fuse(&l2_normalize(&[3.0, 4.0]), &l2_normalize(&[0.0, 2.0])).map_err(err)?;
    check(f == vec![0.6, 0.8, 0.0, 1.0], format!("fuse {f:?}"))?;
    check(fuse(&[1.0], &[1.0, 2.0]).is_err(), "fuse of unequal widths")?;

    let (d, c, b) = (8, 5, 3);
    let o = ModelOptions { kind: ModelKind::Dual, d_model: d, n_classes: c, n_layers: 1, frames: 6, ..ModelOptions::default() };
    let Model::Dual(m) = o.config().map_err(err)?.build::<f64>().map_err(err)? else {
        return Err("not a dual model".into());
    };
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(Tensor64::from_fn(vec![b, 6, NUM_JOINTS, 2], |i| (i as f64 * 0.011).cos()));
    let out = m.forward(&mut ctx, x).map_err(err)?;
    let shapes = [
        ctx.tape.shape(out.spatial.embedding).to_vec(),
        ctx.tape.shape(out.temporal.embedding).to_vec(),
        ctx.tape.shape(out.fused).to_vec(),
        ctx.tape.shape(out.fusion_logits).to_vec(),
    ];
    check(shapes == [vec![b, d], vec![b, d], vec![b, 2 * d], vec![b, c]], format!("dual shapes {shapes:?}"))?;
    let acts = m.fusion.forward_detailed(&mut ctx, out.fused).map_err(err)?;
    let hidden = [ctx.tape.shape(acts.h1).to_vec(), ctx.tape.shape(acts.h2).to_vec()];
    check(hidden == [vec![b, 2 * d], vec![b, d]], format!("fusion hidden widths {hidden:?}"))?;
    Ok("velocity T-1 frames, k=9/3/5 give 4/10/6 frames, fusion 2d→2d→d→C".into())
}

/// One-layer, one-head settings shared by the training criteria; the class
/// count is filled in from the data.
fn options(kind: ModelKind, d: usize, classes: usize, seed: u64) -> ModelOptions {
    ModelOptions {
        kind,
        n_classes: classes,
        d_model: d,
        n_layers: 1,
        n_heads: 1,
        dropout_p: 0.1,
        seed,
        ..ModelOptions::default()
    }
}

fn run(synth: SynthConfig, o: ModelOptions, epochs: usize, lr: f64, batch: usize) -> Result<Metrics, String> {
    let err = |e: kinesig::Error| e.to_string();
    let seed = synth.seed;
    let ds = preprocess(&generate_dataset(&synth).map_err(err)?, Preprocess::default()).map_err(err)?;
    let (tr, te) = split(&ds, SplitSpec { train_fraction: 0.8, seed }).map_err(err)?;
    let o = ModelOptions { n_classes: ds.num_classes(), ..o };
    let cfg = TrainConfig {
        epochs,
        lr,
        batch_size: batch,
        seed,
        ..TrainConfig::new(o.config().map_err(err)?)
    };
    Ok(train::<f32>(&tr, &te, &cfg).map_err(err)?.metrics)
}

fn synth(mode: SynthMode, seed: u64) -> SynthConfig {
    SynthConfig { mode, seed, ..SynthConfig::default() }
}

/// Final-epoch test accuracy of the prediction head.
fn test_acc(m: &Metrics) -> f64 {
    m.last.test.accuracy()
}

fn overfit() -> Outcome {
    let data = SynthConfig { n_identities: 4, sequences_per_identity: 10, ..synth(SynthMode::Mixed, 0) };
    let o = options(ModelKind::Dual, 8, 4, 0);
    let a = run(data.clone(), o.clone(), 50, 3e-3, 8)?;
    let b = run(data, o, 50, 3e-3, 8)?;
    check(a == b, "two runs with the same seed differ")?;
    let acc = a.last.train.accuracy[&Head::Fusion];
    check(acc == 1.0, format!("train accuracy {acc}"))?;
    Ok(format!("train accuracy {acc} after 50 epochs, identical rerun"))
}

fn posture() -> Outcome {
    let acc = test_acc(&run(synth(SynthMode::PostureOnly, 0), options(ModelKind::Str, 16, 0, 0), 8, 3e-3, 32)?);
    check(acc >= 0.95, format!("STR {acc:.3} < 0.95"))?;
    Ok(format!("STR {acc:.3} >= 0.95"))
}

fn rhythm() -> Outcome {
    let s = test_acc(&run(synth(SynthMode::RhythmOnly, 0), options(ModelKind::Str, 16, 0, 0), 8, 3e-3, 32)?);
    let t = test_acc(&run(synth(SynthMode::RhythmOnly, 0), options(ModelKind::Msttr, 16, 0, 0), 40, 3e-3, 32)?);
    check(s <= 0.3 && t >= 0.8, format!("STR {s:.3} (<= 0.3), MS-TTR {t:.3} (>= 0.8)"))?;
    Ok(format!("STR {s:.3} <= 0.3, MS-TTR {t:.3} >= 0.8"))
}

fn micro() -> Outcome {
    let single = test_acc(&run(synth(SynthMode::Micro, 0), options(ModelKind::Ttr, 16, 0, 0), 40, 3e-3, 32)?);
    let multi = test_acc(&run(synth(SynthMode::Micro, 0), options(ModelKind::Msttr, 16, 0, 0), 40, 3e-3, 32)?);
    let gap = (multi - single) * 100.0;
    check(gap >= 10.0, format!("MS-TTR {multi:.3} vs TTR {single:.3}, gap {gap:.1} points"))?;
    Ok(format!("MS-TTR {multi:.3} vs TTR (k=9) {single:.3}, gap {gap:.1} >= 10 points"))
}

fn mixed() -> Outcome {
    let mut ahead = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let m = run(synth(SynthMode::Mixed, seed), options(ModelKind::Dual, 16, 0, seed), 15, 3e-3, 32)?;
        let acc = &m.last.test.accuracy;
        let (f, s, t) = (acc[&Head::Fusion], acc[&Head::Spatial], acc[&Head::Temporal]);
        let best = s.max(t);
        check(f >= best - 0.01, format!("seed {seed}: fusion {f:.3} below max stream {best:.3} by over 1 point"))?;
        ahead += (f > best) as usize;
        rows.push(format!("{f:.2}/{s:.2}/{t:.2}"));
    }
    check(ahead >= 3, format!("fusion strictly ahead on {ahead} of 5 seeds"))?;
    Ok(format!("fusion/STR/MS-TTR per seed {}, fusion ahead on {ahead}/5", rows.join(" ")))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn stillness() -> Outcome {
    let (mut pos, mut vel) = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let o = options(ModelKind::Ttr, 16, 0, seed);
        pos.push(test_acc(&run(synth(SynthMode::Stillness, seed), o.clone(), 30, 3e-3, 32)?));
        let o = ModelOptions { velocity: true, ..o };
        vel.push(test_acc(&run(synth(SynthMode::Stillness, seed), o, 30, 3e-3, 32)?));
    }
    let (p, v) = (median(pos), median(vel));
    check(v < p, format!("velocity median {v:.3} not below position median {p:.3}"))?;
    Ok(format!("median TTR {p:.3} > TTR + velocity {v:.3}"))
}

fn efficiency() -> Outcome {
    let mut effs = Vec::new();
    let raw = generate_dataset(&SynthConfig { n_identities: 5, sequences_per_identity: 2, ..SynthConfig::default() })
        .map_err(|e| e.to_string())?;
    let configs = oracle::matrix();
    for (name, o) in &configs {
        let config = o.config().map_err(|e| e.to_string())?;
        let model: Model64 = config.build().map_err(|e| e.to_string())?;
        let (params, expected) = (count_params(&model), oracle::enumerate_params(o, o.kind));
        check(params == expected, format!("{name}: {params} params, oracle {expected}"))?;
        let (flops, traced) = (estimate_flops(&config, o.frames, NUM_JOINTS), oracle::traced(&config, o.frames));
        check(flops == traced, format!("{name}: {flops} FLOPs, trace {traced}"))?;
        let data = preprocess(&raw, Preprocess { frames: o.frames, ..Preprocess::default() }).map_err(|e| e.to_string())?;
        let throughput = measure_throughput(
            &model,
            &data,
            ThroughputConfig { duration: Duration::from_millis(100), repetitions: 5, batch_size: 4 },
        )
        .map_err(|e| e.to_string())?;
        check(throughput.frames_per_sec > 0.0, format!("{name}: no throughput"))?;
        effs.push(EfficiencyReport { model: name.clone(), params, flops, throughput });
    }
    let table = report(&[], &effs).efficiency;
    check(table.columns == ["Model", "Params (M)", "FLOPs (G)", "FPS"], format!("columns {:?}", table.columns))?;
    let rows: usize = table.groups.iter().map(|(_, r)| r.len()).sum();
    check(rows == configs.len(), format!("{rows} rows"))?;
    Ok(format!("{} configs: params and FLOPs exact, throughput table with {rows} rows", configs.len()))
}

fn kinesig_cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_kinesig"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        o.status.success(),
        format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()),
    )
}

fn same_file(a: &Path, b: &Path) -> Result<(), String> {
    let read = |p: &Path| fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    check(read(a)? == read(b)?, format!("{} differs on replay", a.display()))
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let p = |name: &str| dir.join(name);
    let s = |name: &str| p(name).to_str().unwrap().to_string();

    let data = s("d.jsonl");
    kinesig_cli(&["synth", "--mode", "mixed", "--identities", "3", "--sequences", "5", "--seed", "3", "--out", &data])?;
    let model = ["--model", "dual", "--d-model", "8", "--layers", "1"];
    let mut train = vec!["train", "--data", &data, "--epochs", "2", "--batch-size", "4", "--seed", "4"];
    train.extend_from_slice(&model);
    let run_dir = s("run");
    train.extend_from_slice(&["--out", &run_dir]);
    kinesig_cli(&train)?;
    let ck = s("run/checkpoint.json");
    kinesig_cli(&["eval", "--data", &data, "--checkpoint", &ck, "--out", &s("eval")])?;
    kinesig_cli(&["gradcheck", "--model", "str", "--tiny", "--frames", "2", "--out", &s("grad")])?;
    let mut bench = vec!["bench", "--data", &data, "--duration", "0.5", "--batch-size", "4"];
    bench.extend_from_slice(&model);
    let bench_dir = s("bench");
    bench.extend_from_slice(&["--out", &bench_dir]);
    kinesig_cli(&bench)?;
    kinesig_cli(&["report", "--runs", &run_dir, "--bench", &bench_dir, "--out", &s("report")])?;

    kinesig_cli(&["replay", &s("d.jsonl.manifest.json"), "--out", &s("d2.jsonl")])?;
    same_file(&p("d.jsonl"), &p("d2.jsonl"))?;
    let replays = [
        ("run", vec!["metrics.json", "checkpoint.json", "last.json"]),
        ("eval", vec!["evaluation.json"]),
        ("grad", vec!["gradcheck.json"]),
        ("report", vec!["report.txt", "report.json"]),
    ];
    let mut files = 1;
    for (job, outputs) in &replays {
        let again = format!("{job}-again");
        kinesig_cli(&["replay", &s(&format!("{job}/manifest.json")), "--out", &s(&again)])?;
        for f in outputs {
            same_file(&p(job).join(f), &p(&again).join(f))?;
            files += 1;
        }
    }
    kinesig_cli(&["replay", &s("bench/manifest.json"), "--out", &s("bench-again")])?;
    let load = |d: &str| -> Result<EfficiencyReport, String> {
        let text = fs::read_to_string(p(d).join("efficiency.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    let (a, b) = (load("bench")?, load("bench-again")?);
    check((&a.model, a.params, a.flops) == (&b.model, b.params, b.flops), "bench counts differ on replay")?;
    Ok(format!("synth/train/eval/gradcheck/report: {files} files byte-identical; bench counts identical"))
}
