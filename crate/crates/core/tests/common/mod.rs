//! Finite-difference gradient oracle shared by the gradient tests and the acceptance run.
#![allow(dead_code)]

use lficam::backbone::BackboneConfig;
use lficam::nn::{Ctx, ParamKind, ParamStore};
use lficam::tensor::{BatchNormOpts, Tape, Tensor, Var};
use lficam::{LfiCamModel, ModelConfig, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so no finite-difference step crosses a ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.01..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Scalar probe `sum(out * r)` with a fixed random `r`, so every output
/// element receives a distinct upstream gradient.
pub fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = rand_tensor(&mut rng(seed ^ 0xabcdef), &shape, -1.0, 1.0);
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Compares reverse-mode gradients of `f` with central differences for every
/// element of every input. Min-max normalization statistics seen in the
/// analytic pass are replayed in the perturbed passes, matching the
/// constant-statistics convention of the backward rule.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let frozen = tape.normalization_stats().to_vec();
    let grads = tape.backward(loss).unwrap();
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::no_grad().with_frozen_normalization(frozen.clone());
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let l = f(&mut t, &vs).unwrap();
        t.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient").to_f64_vec();
        let mut numeric = vec![0.0; input.numel()];
        let mut values = inputs.to_vec();
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = input.data()[j];
            values[i].data_mut()[j] = x + STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = x - STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = x;
            *slot = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

type OpCase = (&'static str, fn(u64) -> f64);

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn case_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, cin, cout) = (dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let (h, w) = (dims(&mut r, 3, 6), dims(&mut r, 3, 6));
    let k = dims(&mut r, 1, 3);
    let stride = dims(&mut r, 1, 2);
    let pad = dims(&mut r, 0, 1);
    let bias = r.random_bool(0.5);
    let x = rand_tensor(&mut r, &[b, cin, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[cout, cin, k, k], -1.0, 1.0);
    let bt = rand_tensor(&mut r, &[cout], -1.0, 1.0);
    let mut inputs = vec![x, wt];
    if bias {
        inputs.push(bt);
    }
    check_inputs(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)?;
        probe(t, y, seed)
    })
}

fn case_conv_unbatched(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = rand_tensor(&mut r, &[1, 4, 4], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[1, 1, 2, 2], -1.0, 1.0);
    check_inputs(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        t.sum(y)
    })
}

fn case_batch_norm(seed: u64, train: bool) -> f64 {
    let mut r = rng(seed);
    let (b, c) = (dims(&mut r, 2, 3), dims(&mut r, 1, 3));
    let (h, w) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let x = rand_tensor(&mut r, &[b, c, h, w], -2.0, 2.0);
    let g = rand_tensor(&mut r, &[c], 0.5, 1.5);
    let be = rand_tensor(&mut r, &[c], -0.5, 0.5);
    let mut running = rand_tensor(&mut r, &[2, c], -0.5, 0.5);
    for v in &mut running.data_mut()[c..] {
        *v = v.abs() + 0.5;
    }
    let opts = BatchNormOpts {
        train,
        ..BatchNormOpts::default()
    };
    check_inputs(&[x, g, be], |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], &running, opts)?;
        probe(t, y, seed)
    })
}

fn case_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = away_from_zero(&mut r, &[2, 3, 4]);
    check_inputs(&[x], |t, v| {
        let y = t.relu(v[0])?;
        probe(t, y, seed)
    })
}

fn case_add_mul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 4)];
    let a = rand_tensor(&mut r, &shape, -1.0, 1.0);
    let b = rand_tensor(&mut r, &shape, -1.0, 1.0);
    check_inputs(&[a, b], |t, v| {
        let s = t.add(v[0], v[1])?;
        let p = t.mul(s, v[1])?;
        probe(t, p, seed)
    })
}

fn case_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [2, dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
    let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
    check_inputs(&[x], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        probe(t, y, seed)
    })
}

fn case_max_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, s) = if r.random_bool(0.5) { (2, 2) } else { (3, 1) };
    let shape = [2, 2, dims(&mut r, 3, 6), dims(&mut r, 3, 6)];
    let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
    check_inputs(&[x], |t, v| {
        let y = t.max_pool(v[0], k, s)?;
        probe(t, y, seed)
    })
}

fn case_bilinear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [2, 2, dims(&mut r, 1, 5), dims(&mut r, 1, 5)];
    let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
    let (oh, ow) = (dims(&mut r, 1, 8), dims(&mut r, 1, 8));
    check_inputs(&[x], |t, v| {
        let y = t.bilinear_resize(v[0], oh, ow)?;
        probe(t, y, seed)
    })
}

fn case_avg_pool_down(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (fh, fw) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let (m, n) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let x = rand_tensor(&mut r, &[2, 1, m * fh, n * fw], 0.0, 1.0);
    check_inputs(&[x], |t, v| {
        let y = t.avg_pool_down(v[0], fh, fw)?;
        probe(t, y, seed)
    })
}

fn case_linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, i, o) = (dims(&mut r, 1, 3), dims(&mut r, 1, 5), dims(&mut r, 1, 4));
    let x = rand_tensor(&mut r, &[b, i], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[o, i], -1.0, 1.0);
    let bias = rand_tensor(&mut r, &[o], -1.0, 1.0);
    check_inputs(&[x, w, bias], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        probe(t, y, seed)
    })
}

fn case_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [dims(&mut r, 1, 3), dims(&mut r, 1, 6)];
    let x = rand_tensor(&mut r, &shape, -3.0, 3.0);
    check_inputs(&[x], |t, v| {
        let y = t.softmax(v[0])?;
        probe(t, y, seed)
    })
}

fn case_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, k) = (dims(&mut r, 1, 4), dims(&mut r, 2, 5));
    let x = rand_tensor(&mut r, &[b, k], -3.0, 3.0);
    let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
    check_inputs(&[x], |t, v| t.cross_entropy(v[0], &labels))
}

fn case_minmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [2, dims(&mut r, 1, 3), dims(&mut r, 1, 4), dims(&mut r, 2, 4)];
    let x = rand_tensor(&mut r, &shape, -1.0, 1.0);
    check_inputs(&[x], |t, v| {
        let y = t.minmax_normalize(v[0])?;
        probe(t, y, seed)
    })
}

fn case_attention_primitives(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, c, h, w) = (dims(&mut r, 1, 2), dims(&mut r, 1, 4), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
    let f = rand_tensor(&mut r, &[b, c, h, w], -1.0, 1.0);
    let plane = rand_tensor(&mut r, &[b, 1, h, w], 0.0, 1.0);
    let weights = rand_tensor(&mut r, &[b, c], 0.0, 1.0);
    check_inputs(&[f, plane, weights], |t, v| {
        let masked = t.mul_plane(v[0], v[1])?;
        let cam = t.weighted_channel_sum(v[2], v[0])?;
        let attended = t.attend(cam, masked)?;
        probe(t, attended, seed)
    })
}

fn case_fin(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = dims(&mut r, 2, 4);
    let mut store = ParamStore::<f64>::new();
    let fin = lficam::attention::Fin::init(&mut store, &mut r, n, 2);
    // Move BN scales away from their initial values so the check is generic.
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).kind == ParamKind::Trainable && !store.entry(id).name.ends_with("conv.weight") {
            let n = store.get(id).numel();
            let shift = rand_tensor(&mut r, &[n], -0.3, 0.3);
            for (v, d) in store.get_mut(id).data_mut().iter_mut().zip(shift.data()) {
                *v += d;
            }
        }
    }
    let masks = rand_tensor(&mut r, &[2, n, 3, 3], 0.0, 1.0);
    check_store(&mut store, |_| true, None, &mut r, |ctx| {
        let m = ctx.tape.constant(masks.clone());
        let s = fin.forward(ctx, m)?;
        probe(ctx.tape, s, seed)
    })
}

/// Like `check_inputs`, but for the trainable entries of a parameter store
/// bound through a train-mode `Ctx`. With `samples`, only that many randomly
/// chosen scalars among the selected tensors are checked.
pub fn check_store<F>(
    store: &mut ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    samples: Option<usize>,
    r: &mut ChaCha8Rng,
    f: F,
) -> f64
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let (loss, bindings) = {
        let mut ctx = Ctx::new(&mut tape, store, true);
        let loss = f(&mut ctx).unwrap();
        (loss, ctx.bindings())
    };
    let frozen = tape.normalization_stats().to_vec();
    let grads = tape.backward(loss).unwrap();
    let mut pool = Vec::new();
    for (id, var) in &bindings {
        let entry = store.entry(*id);
        if entry.kind != ParamKind::Trainable || !select(&entry.name) {
            continue;
        }
        let g = grads.get(*var).expect("bound parameter gradient");
        pool.extend(g.data().iter().enumerate().map(|(j, &gv)| (*id, j, gv)));
    }
    assert!(!pool.is_empty(), "no parameters selected");
    let picks: Vec<_> = match samples {
        Some(k) => (0..k).map(|_| pool[r.random_range(0..pool.len())]).collect(),
        None => pool,
    };
    let eval = |store: &ParamStore<f64>| -> f64 {
        let mut t = Tape::no_grad().with_frozen_normalization(frozen.clone());
        let mut ctx = Ctx::new(&mut t, store, true);
        let l = f(&mut ctx).unwrap();
        t.value(l).data()[0]
    };
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for (id, j, g) in picks {
        let x = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = x + STEP;
        let up = eval(store);
        store.get_mut(id).data_mut()[j] = x - STEP;
        let down = eval(store);
        store.get_mut(id).data_mut()[j] = x;
        analytic.push(g);
        numeric.push((up - down) / (2.0 * STEP));
    }
    rel_err(&analytic, &numeric)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("conv2d", case_conv),
        ("conv2d 1x4x4 sum", case_conv_unbatched),
        ("batch_norm train", |s| case_batch_norm(s, true)),
        ("batch_norm eval", |s| case_batch_norm(s, false)),
        ("relu", case_relu),
        ("add/mul", case_add_mul),
        ("global_avg_pool", case_gap),
        ("max_pool", case_max_pool),
        ("bilinear_resize", case_bilinear),
        ("avg_pool_down", case_avg_pool_down),
        ("linear", case_linear),
        ("softmax", case_softmax),
        ("cross_entropy", case_cross_entropy),
        ("minmax_normalize", case_minmax),
        ("mul_plane/weighted_sum/attend", case_attention_primitives),
        ("fin stack", case_fin),
    ]
}

/// Tiny 2-class model used by the end-to-end checks.
pub fn toy_model_config(attention_layer: lficam::backbone::AttentionLayer) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: (8, 8),
            widths: vec![3, 4],
            blocks_per_stage: 1,
            stage_strides: vec![2, 2],
            residual: true,
            num_classes: 2,
            attention_layer,
            ..BackboneConfig::default()
        },
        fin_depth: 2,
        use_fin: true,
    }
}

/// Batch of three random images with random labels for the toy model.
pub fn toy_batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng(seed ^ 0x77);
    let images = rand_tensor(&mut r, &[3, 3, 8, 8], 0.0, 1.0);
    let labels = (0..3).map(|_| r.random_range(0..2)).collect();
    (images, labels)
}

/// End-to-end check of the cross-entropy loss with respect to `samples`
/// randomly chosen FIN parameters and as many backbone parameters; returns
/// the worse of the two relative errors.
pub fn check_model(seed: u64, attention_layer: lficam::backbone::AttentionLayer, samples: usize) -> f64 {
    let mut r = rng(seed);
    let model = LfiCamModel::<f64>::new(toy_model_config(attention_layer), seed).unwrap();
    let (images, labels) = toy_batch(seed);
    let mut store = model.store().clone();
    let loss = |ctx: &mut Ctx<'_, f64>| {
        let x = ctx.tape.constant(images.clone());
        let out = model.forward_batch(ctx, x, true)?;
        ctx.tape.cross_entropy(out.logits, &labels)
    };
    let fin = check_store(&mut store, |n| n.starts_with("fin."), Some(samples), &mut r, loss);
    let backbone = check_store(&mut store, |n| n.starts_with("backbone."), Some(samples), &mut r, loss);
    fin.max(backbone)
}

/// Largest |d loss / d w| over the FIN convolution weights of the toy model.
pub fn fin_conv_gradient(seed: u64) -> f64 {
    let model = LfiCamModel::<f64>::new(toy_model_config(lficam::backbone::AttentionLayer::Last), seed).unwrap();
    let (images, labels) = toy_batch(seed);
    let mut tape = Tape::new();
    let (loss, bindings) = {
        let mut ctx = Ctx::new(&mut tape, model.store(), true);
        let x = ctx.tape.constant(images);
        let out = model.forward_batch(&mut ctx, x, true).unwrap();
        let loss = ctx.tape.cross_entropy(out.logits, &labels).unwrap();
        (loss, ctx.bindings())
    };
    let grads = tape.backward(loss).unwrap();
    bindings
        .iter()
        .filter(|(id, _)| {
            let name = &model.store().entry(*id).name;
            name.starts_with("fin.") && name.ends_with("conv.weight")
        })
        .flat_map(|(_, v)| grads.get(*v).unwrap().to_f64_vec())
        .fold(0.0, |m, g| m.max(g.abs()))
}
