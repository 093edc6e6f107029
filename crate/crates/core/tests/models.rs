use kinesig::gradcheck::tiny_options;
use kinesig::models::fusion::{fuse, l2_normalize, total_loss, L2_EPS};
use kinesig::models::{
    FusionHead, LossWeights, Model, ModelKind, MsTtrConfig, MsTtrModel, StrConfig, StrModel, TtrConfig, TtrModel,
};
use kinesig::nn::{AttentionBlock, Ctx, Init, Mode, Module, SelfAttention, LAYER_NORM_EPS, BATCH_NORM_EPS};
use kinesig::tensor::Tensor;
use kinesig::Tensor64;

type Rows = Vec<Vec<f64>>;

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect()
}

fn rows(t: &Tensor64) -> Rows {
    t.data().chunks(t.last_dim()).map(|r| r.to_vec()).collect()
}

fn affine(x: &Rows, w: &Tensor64, b: Option<&Tensor64>) -> Rows {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..dout)
                .map(|j| {
                    let s: f64 = (0..din).map(|i| r[i] * w.data()[i * dout + j]).sum();
                    s + b.map_or(0.0, |b| b.data()[j])
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, g: &Tensor64, b: &Tensor64) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i]).collect()
        })
        .collect()
}

/// Explicit double loop over query and key tokens; returns output and the
/// per-head weight matrices.
fn attention(x: &Rows, a: &SelfAttention<f64>) -> (Rows, Vec<Rows>) {
    let q = affine(x, &a.w_q.value, None);
    let k = affine(x, &a.w_k.value, None);
    let v = affine(x, &a.w_v.value, None);
    let (n, d) = (x.len(), q[0].len());
    let dk = d / a.heads;
    let mut out = vec![vec![0.0; d]; n];
    let mut maps = Vec::new();
    for h in 0..a.heads {
        let cols = h * dk..(h + 1) * dk;
        let mut map = vec![vec![0.0; n]; n];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n {
                map[i][j] = e[j] / z;
                for c in cols.clone() {
                    out[i][c] += map[i][j] * v[j][c];
                }
            }
        }
        maps.push(map);
    }
    (out, maps)
}

fn block(x: &Rows, b: &AttentionBlock<f64>) -> Rows {
    let bias = |l: &kinesig::nn::Linear<f64>| l.bias.as_ref().map(|p| p.value.clone());
    let (att, _) = attention(&layer_norm(x, &b.ln1.gamma.value, &b.ln1.beta.value), &b.attn);
    let a = affine(&att, &b.out.weight.value, bias(&b.out).as_ref());
    let h: Rows = x.iter().zip(&a).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect();
    let n2 = layer_norm(&h, &b.ln2.gamma.value, &b.ln2.beta.value);
    let f = affine(&n2, &b.ff1.weight.value, bias(&b.ff1).as_ref());
    let f: Rows = f.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    let f = affine(&f, &b.ff2.weight.value, bias(&b.ff2).as_ref());
    h.iter().zip(&f).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect()
}

fn mean_rows(x: &Rows) -> Vec<f64> {
    let n = x.len() as f64;
    (0..x[0].len()).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "index {i}: {x} vs {y}");
    }
}

fn sized_attention(d: usize, heads: usize, suffix: &str) -> SelfAttention<f64> {
    SelfAttention::new(&mut Init::new(3), "a", suffix, d, heads).unwrap()
}

fn run_attention(a: &SelfAttention<f64>, x: &Rows) -> (Vec<f64>, Vec<f64>) {
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let mut ctx = Ctx::new(Mode::Eval);
    let xv = ctx.tape.constant(Tensor64::from_f64(vec![1, x.len(), x[0].len()], &flat).unwrap());
    let out = a.forward(&mut ctx, xv).unwrap();
    (ctx.tape.value(out.output).data().to_vec(), ctx.tape.value(out.weights).data().to_vec())
}

// [DERIVED] spatial attention over V = 5 joints against the double loop.
#[test]
fn spatial_attention_matches_double_loop() {
    for heads in [1, 2] {
        let a = sized_attention(8, heads, "");
        let x = rows(&Tensor64::from_f64(vec![5, 8], &noise(40, heads as u64)).unwrap());
        let (out, weights) = run_attention(&a, &x);
        let (want, maps) = attention(&x, &a);
        close(&out, &want.concat(), 1e-10);
        close(&weights, &maps.concat().concat(), 1e-10);
    }
}

// [DERIVED] temporal attention over T' = 6 frames against the double loop.
#[test]
fn temporal_attention_matches_double_loop() {
    let a = sized_attention(8, 1, "^t");
    assert_eq!(a.w_q.name, "a.W_Q^t");
    let x = rows(&Tensor64::from_f64(vec![6, 8], &noise(48, 9)).unwrap());
    let (out, _) = run_attention(&a, &x);
    close(&out, &attention(&x, &a).0.concat(), 1e-10);
}

// [TRIVIAL] one token attends only to itself; identical tokens split evenly.
#[test]
fn attention_single_and_identical_tokens() {
    let a = sized_attention(4, 1, "");
    let x = vec![vec![0.3, -0.2, 0.9, 0.1]];
    let (out, w) = run_attention(&a, &x);
    assert_eq!(w, vec![1.0]);
    close(&out, &affine(&x, &a.w_v.value, None)[0], 1e-15);

    let (_, w) = run_attention(&a, &vec![x[0].clone(), x[0].clone()]);
    close(&w, &[0.5; 4], 1e-15);
}

// [DERIVED] one-layer STR, 2 joints, 1 frame, against a plain-loop forward.
#[test]
fn str_toy_matches_reference_forward() {
    let m = StrModel::<f64>::new(StrConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        use_joint_embedding: true,
        dropout_p: 0.2,
        n_classes: 3,
        n_joints: 2,
        in_channels: 2,
        seed: 21,
    })
    .unwrap();
    let x = [0.4, -1.1, 0.7, 0.25];
    let mut ctx = Ctx::new(Mode::Eval);
    let xv = ctx.tape.constant(Tensor64::from_f64(vec![1, 1, 2, 2], &x).unwrap());
    let out = m.forward(&mut ctx, xv).unwrap();

    let tokens = vec![x[..2].to_vec(), x[2..].to_vec()];
    let mut h = affine(&tokens, &m.input.weight.value, m.input.bias.as_ref().map(|b| &b.value));
    let e = rows(&m.joint_embedding.as_ref().unwrap().value);
    for (r, e) in h.iter_mut().zip(&e) {
        r.iter_mut().zip(e).for_each(|(v, e)| *v += e);
    }
    let h = block(&h, &m.blocks[0]);
    let h = layer_norm(&h, &m.final_norm.gamma.value, &m.final_norm.beta.value);
    let f_s = mean_rows(&h);
    let logits = affine(&vec![f_s.clone()], &m.classifier.weight.value, m.classifier.bias.as_ref().map(|b| &b.value));
    close(ctx.tape.value(out.embedding).data(), &f_s, 1e-12);
    close(ctx.tape.value(out.logits).data(), &logits[0], 1e-12);
    assert_eq!(ctx.tape.shape(out.logits), &[1, 3]);
    assert_eq!(ctx.tape.shape(out.embedding), &[1, 4]);
}

fn ttr_config(stride: usize, positional: bool, velocity: bool, frames: usize) -> TtrConfig {
    TtrConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 8,
        stride,
        use_positional_encoding: positional,
        use_velocity_input: velocity,
        dropout_p: 0.2,
        n_classes: 3,
        max_frames: frames,
        in_channels: 2,
        seed: 8,
    }
}

// [DERIVED] one-layer TTR, 1 joint, T = 2, against a plain-loop forward.
#[test]
fn ttr_toy_matches_reference_forward() {
    let m = TtrModel::<f64>::new(ttr_config(1, true, false, 2)).unwrap();
    let x = [0.5, -0.3, -0.8, 1.2];
    let mut ctx = Ctx::new(Mode::Eval);
    let xv = ctx.tape.constant(Tensor64::from_f64(vec![1, 2, 1, 2], &x).unwrap());
    let out = m.forward(&mut ctx, xv).unwrap();

    let enc = &m.encoder;
    let frames = vec![x[..2].to_vec(), x[2..].to_vec()];
    let mut h = affine(&frames, &enc.input.weight.value, enc.input.bias.as_ref().map(|b| &b.value));
    let p = rows(&enc.positional.as_ref().unwrap().value);
    for (r, p) in h.iter_mut().zip(&p) {
        r.iter_mut().zip(p).for_each(|(v, p)| *v += p);
    }
    let h = layer_norm(&block(&h, &enc.blocks[0]), &enc.final_norm.gamma.value, &enc.final_norm.beta.value);
    close(ctx.tape.value(out.embedding).data(), &mean_rows(&h), 1e-12);
}

fn constant_input(frames: usize, joints: usize, value: impl Fn(usize) -> f64) -> Tensor64 {
    Tensor::from_fn(vec![1, frames, joints, 2], |i| value(i % (joints * 2)))
}

// [TRIVIAL] identical tokens make attention an average, so a still sequence
// embeds like a single frame.
#[test]
fn ttr_constant_input_equals_single_frame() {
    let m = TtrModel::<f64>::new(ttr_config(9, false, false, 30)).unwrap();
    let embed = |t: Tensor64| {
        let mut ctx = Ctx::new(Mode::Eval);
        let x = ctx.tape.constant(t);
        let out = m.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(out.attention[0]), &[3, 4, 4]);
        ctx.tape.value(out.embedding).data().to_vec()
    };
    let value = |i: usize| (i as f64 * 0.37).sin();
    let still = embed(constant_input(30, 3, value));
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(constant_input(1, 3, value));
    let out = m.forward(&mut ctx, x).unwrap();
    close(&still, ctx.tape.value(out.embedding).data(), 1e-12);
}

// [TRIVIAL] T = 30 with k = 9 leaves 4 frames for attention.
#[test]
fn ttr_attends_over_four_frames_at_stride_nine() {
    let m = TtrModel::<f64>::new(ttr_config(9, true, false, 30)).unwrap();
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(Tensor::from_fn(vec![2, 30, 3, 2], |i| (i as f64).cos()));
    let out = m.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(out.attention[0]), &[6, 4, 4]);
}

// [TRIVIAL] every constant sequence has zero velocity, hence the same logits.
#[test]
fn velocity_input_ignores_held_posture() {
    let m = TtrModel::<f64>::new(ttr_config(3, true, true, 30)).unwrap();
    let logits = |v: f64| {
        let mut ctx = Ctx::new(Mode::Eval);
        let x = ctx.tape.constant(constant_input(30, 4, |i| v * (i as f64 + 1.0)));
        let out = m.forward(&mut ctx, x).unwrap();
        ctx.tape.value(out.logits).data().to_vec()
    };
    let a = logits(0.1);
    assert_eq!(a, logits(-3.0));
    assert_eq!(a, logits(250.0));
}

fn msttr_config(frames: usize) -> MsTtrConfig {
    MsTtrConfig {
        branch: ttr_config(1, true, false, frames),
        share_backbone: false,
        residual: false,
    }
}

// [PAPER] T = 30 gives branch token counts 10 and 6.
#[test]
fn msttr_branch_token_counts() {
    let m = MsTtrModel::<f64>::new(msttr_config(30)).unwrap();
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(Tensor::from_fn(vec![1, 30, 2, 2], |i| (i as f64 * 0.1).sin()));
    let out = m.forward_detailed(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(out.stream.attention[0]), &[2, 10, 10]);
    assert_eq!(ctx.tape.shape(out.stream.attention[1]), &[2, 6, 6]);
    assert_eq!(ctx.tape.shape(out.concatenated), &[1, 8]);
    assert_eq!(ctx.tape.shape(out.stream.embedding), &[1, 4]);
}

// [TRIVIAL] each branch is a standalone TTR with the same weights.
#[test]
fn msttr_branch_equals_standalone_ttr() {
    let ms = MsTtrModel::<f64>::new(msttr_config(30)).unwrap();
    let input = Tensor::from_fn(vec![2, 30, 3, 2], |i| (i as f64 * 0.21).cos());
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(input.clone());
    let out = ms.forward_detailed(&mut ctx, x).unwrap();
    for (i, k) in [3, 5].into_iter().enumerate() {
        let mut ttr = TtrModel::<f64>::new(ttr_config(k, true, false, 30)).unwrap();
        ttr.encoder = ms.branches[i].clone();
        let mut c2 = Ctx::new(Mode::Eval);
        let x2 = c2.tape.constant(input.clone());
        let alone = ttr.forward(&mut c2, x2).unwrap();
        assert_eq!(
            ctx.tape.value(out.branch_embeddings[i]).data(),
            c2.tape.value(alone.embedding).data(),
            "k={k}"
        );
    }
}

// [TRIVIAL] normalization examples.
#[test]
fn l2_normalize_examples() {
    close(&l2_normalize(&[3.0, 4.0]), &[0.6, 0.8], 1e-15);
    assert_eq!(l2_normalize(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
    let v = l2_normalize(&noise(17, 4));
    assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
}

// [TRIVIAL] concatenation in (spatial, temporal) order.
#[test]
fn fuse_examples() {
    assert_eq!(fuse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
    let (a, b) = (noise(5, 1), noise(5, 2));
    assert_eq!(fuse(&a, &b).unwrap().len(), 10);
    assert_ne!(fuse(&a, &b).unwrap(), fuse(&b, &a).unwrap());
    assert!(fuse(&a, &b[..4]).is_err());
}

fn fusion_head() -> FusionHead<f64> {
    let mut head = FusionHead::new(&mut Init::new(5), 2, 2, 0.2);
    for (i, v) in head.bn1.running_mean.value.data_mut().iter_mut().enumerate() {
        *v = 0.1 * i as f64 - 0.1;
    }
    for (i, v) in head.bn2.running_var.value.data_mut().iter_mut().enumerate() {
        *v = 0.5 + i as f64;
    }
    head.bn1.gamma.value.data_mut()[2] = 1.5;
    head.bn2.beta.value.data_mut()[1] = -0.2;
    head
}

fn bn_eval(x: &Rows, bn: &kinesig::nn::BatchNorm<f64>) -> Rows {
    let (m, v) = (bn.running_mean.value.data(), bn.running_var.value.data());
    let (g, b) = (bn.gamma.value.data(), bn.beta.value.data());
    x.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(i, x)| (x - m[i]) / (v[i] + BATCH_NORM_EPS).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

// [DERIVED] 2d = 4, d = 2, C = 2 head in eval mode against a hand forward.
#[test]
fn fusion_head_matches_reference_forward() {
    let head = fusion_head();
    let f = vec![vec![0.6, 0.8, -0.28, 0.96], vec![1.0, 0.0, 0.0, -1.0]];
    let bias = |l: &kinesig::nn::Linear<f64>| l.bias.as_ref().map(|p| p.value.clone());
    let relu = |x: Rows| -> Rows { x.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect() };
    let h1 = relu(bn_eval(&affine(&f, &head.w1.weight.value, bias(&head.w1).as_ref()), &head.bn1));
    let h2 = relu(bn_eval(&affine(&h1, &head.w2.weight.value, bias(&head.w2).as_ref()), &head.bn2));
    let want = affine(&h2, &head.w3.weight.value, bias(&head.w3).as_ref());

    let run = || {
        let mut ctx = Ctx::new(Mode::Eval);
        let x = ctx.tape.constant(Tensor64::from_f64(vec![2, 4], &f.concat()).unwrap());
        let y = head.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 2]);
        ctx.tape.value(y).data().to_vec()
    };
    let got = run();
    close(&got, &want.concat(), 1e-12);
    assert_eq!(got, run());
}

// [TRIVIAL] positive rescaling of a raw embedding is removed by normalization.
#[test]
fn fusion_is_invariant_to_embedding_scale() {
    let head = fusion_head();
    let (a, b) = (noise(6, 11), noise(6, 12));
    let logits = |c: f64| {
        let mut ctx = Ctx::new(Mode::Eval);
        let av = ctx.tape.constant(Tensor64::from_fn(vec![3, 2], |i| a[i] * c));
        let bv = ctx.tape.constant(Tensor64::from_f64(vec![3, 2], &b).unwrap());
        let fa = ctx.tape.l2_normalize(av, L2_EPS).unwrap();
        let fb = ctx.tape.l2_normalize(bv, L2_EPS).unwrap();
        let fused = ctx.tape.concat(fa, fb).unwrap();
        let y = head.forward(&mut ctx, fused).unwrap();
        (ctx.tape.value(fused).data().to_vec(), ctx.tape.value(y).data().to_vec())
    };
    let (f1, l1) = logits(1.0);
    for c in [1e-3, 0.5, 7.0, 1e4] {
        let (f, l) = logits(c);
        close(&f, &f1, 1e-9);
        close(&l, &l1, 1e-9);
        assert_eq!(
            kinesig::models::argmax_rows(&l, 2),
            kinesig::models::argmax_rows(&l1, 2)
        );
    }
}

// [TRIVIAL] uniform logits give 3 ln C; the total is the plain sum.
#[test]
fn total_loss_of_uniform_logits() {
    let c = 7;
    let mut ctx = Ctx::<f64>::new(Mode::Eval);
    let z = [0; 3].map(|_| ctx.tape.constant(Tensor::zeros(vec![4, c])));
    let t = total_loss(&mut ctx, z[0], z[1], z[2], &[0, 3, 6, 2], LossWeights::default()).unwrap();
    let total = ctx.tape.value(t.total).item();
    assert!((total - 3.0 * (c as f64).ln()).abs() < 1e-12);
    let parts = [t.spatial, t.temporal, t.fusion].map(|v| ctx.tape.value(v).item());
    assert_eq!(total, parts[0] + parts[1] + parts[2]);
}

fn tiny_dual() -> Model<f64> {
    let mut o = tiny_options(ModelKind::Dual, 1);
    o.dual_temporal = ModelKind::Ttr;
    o.stride = 3;
    o.config().unwrap().build().unwrap()
}

fn dual_input() -> Tensor64 {
    Tensor::from_fn(vec![3, 4, kinesig::keypoints::NUM_JOINTS, 2], |i| (i as f64 * 0.013).sin())
}

/// Gradients of every `str.` parameter under `L_STR + L_FUS`, or under the
/// full loss when `full`.
fn str_grads(model: &mut Model<f64>, full: bool) -> Vec<(String, Vec<f64>)> {
    let labels = [0, 1, 2];
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(dual_input());
    let out = model.forward(&mut ctx, x).unwrap();
    let loss = model.loss(&mut ctx, &out, &labels, LossWeights::default()).unwrap();
    let l = if full {
        loss.total
    } else {
        let s = loss.terms[0].1;
        let f = loss.terms[2].1;
        ctx.tape.add(s, f).unwrap()
    };
    ctx.tape.backward(l).unwrap();
    model.collect_grads(&ctx.tape);
    let mut grads = Vec::new();
    model.visit_params(&mut |p| {
        if p.name.starts_with("str.") {
            grads.push((p.name.clone(), p.grad.as_ref().unwrap().data().to_vec()));
        }
    });
    grads
}

fn partial_loss(model: &Model<f64>) -> f64 {
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(dual_input());
    let out = model.forward(&mut ctx, x).unwrap();
    let loss = model.loss(&mut ctx, &out, &[0, 1, 2], LossWeights::default()).unwrap();
    ctx.tape.value(loss.terms[0].1).item() + ctx.tape.value(loss.terms[2].1).item()
}

// [DERIVED] the temporal head contributes nothing to spatial gradients.
#[test]
fn spatial_gradients_ignore_temporal_loss() {
    let mut model = tiny_dual();
    let full = str_grads(&mut model, true);
    let partial = str_grads(&mut model, false);
    assert!(!full.is_empty());
    for ((_, a), (_, b)) in full.iter().zip(&partial) {
        close(a, b, 1e-12 * (1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()))));
    }

    let h = 1e-6;
    for (name, g) in partial.iter().take(4) {
        for i in [0, g.len() / 2, g.len() - 1] {
            let set = |m: &mut Model<f64>, v: Option<f64>| {
                let mut old = 0.0;
                m.visit_params_mut(&mut |p| {
                    if &p.name == name {
                        old = p.value.data()[i];
                        if let Some(v) = v {
                            p.value.data_mut()[i] = v;
                        }
                    }
                });
                old
            };
            let w = set(&mut model, None);
            set(&mut model, Some(w + h));
            let plus = partial_loss(&model);
            set(&mut model, Some(w - h));
            let minus = partial_loss(&model);
            set(&mut model, Some(w));
            let numeric = (plus - minus) / (2.0 * h);
            let err = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-5);
            assert!(err < 1e-4, "{name}[{i}]: analytic {} numeric {numeric}", g[i]);
        }
    }
}

// [TRIVIAL] dual widths: embeddings d, fused 2d, logits C.
#[test]
fn dual_output_widths() {
    let Model::Dual(m) = tiny_dual() else { unreachable!() };
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(dual_input());
    let out = m.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(out.spatial.embedding), &[3, 8]);
    assert_eq!(ctx.tape.shape(out.temporal.embedding), &[3, 8]);
    assert_eq!(ctx.tape.shape(out.fused), &[3, 16]);
    assert_eq!(ctx.tape.shape(out.fusion_logits), &[3, 4]);
    for row in ctx.tape.value(out.fused).data().chunks(8) {
        assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

// [TRIVIAL] every layer's attention rows sum to one.
#[test]
fn str_attention_rows_sum_to_one() {
    let Model::Dual(m) = tiny_dual() else { unreachable!() };
    let mut ctx = Ctx::new(Mode::Eval);
    let x = ctx.tape.constant(dual_input());
    let out = m.spatial.forward(&mut ctx, x).unwrap();
    for map in &out.attention {
        for row in ctx.tape.value(*map).data().chunks(kinesig::keypoints::NUM_JOINTS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

// [DERIVED] mixed-mode posture groups differ only in joint labels, so the
// temporal stream sees identical input sets while the spatial stream does not.
#[test]
fn mixed_postures_are_invisible_to_the_temporal_stream() {
    use kinesig::synth::{generate_identities, generate_sequence, SynthConfig, SynthMode};
    use rand::SeedableRng;
    let cfg = SynthConfig {
        n_identities: 4,
        mode: SynthMode::Mixed,
        noise_sigma: 0.0,
        posture_jitter: 0.0,
        ..SynthConfig::default()
    };
    let ids = generate_identities(&cfg).unwrap();
    let mut other = ids[2].clone();
    other.gestures = ids[0].gestures.clone();
    let input = |p| {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = generate_sequence(p, 30, 60.0, "s", &mut rng).unwrap();
        Tensor64::from_f64(vec![1, 30, kinesig::keypoints::NUM_JOINTS, 2], &s.frames).unwrap()
    };
    let (a, b) = (input(&ids[0]), input(&other));
    assert_ne!(a, b);

    let ttr = TtrModel::<f64>::new(ttr_config(3, true, false, 30)).unwrap();
    let str_model = StrModel::<f64>::new(StrConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 8,
        use_joint_embedding: true,
        dropout_p: 0.0,
        n_classes: 3,
        n_joints: kinesig::keypoints::NUM_JOINTS,
        in_channels: 2,
        seed: 2,
    })
    .unwrap();
    let embed = |x: &Tensor64, temporal: bool| {
        let mut ctx = Ctx::new(Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let out = if temporal { ttr.forward(&mut ctx, xv) } else { str_model.forward(&mut ctx, xv) }.unwrap();
        ctx.tape.value(out.embedding).data().to_vec()
    };
    let gap = |t| {
        let (ea, eb) = (embed(&a, t), embed(&b, t));
        ea.iter().zip(&eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    assert!(gap(true) < 1e-9, "{}", gap(true));
    assert!(gap(false) > 1e-3, "{}", gap(false));
}
