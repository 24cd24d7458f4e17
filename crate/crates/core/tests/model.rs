use lficam::attention::{build_masks, rgb_to_gray_downsample, MaskStack};
use lficam::backbone::{AttentionLayer, BackboneConfig};
use lficam::oracles::{score_cam, vanilla_cam};
use lficam::{LfiCamModel, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(layer: AttentionLayer, widths: Vec<usize>) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: (16, 16),
            stage_strides: vec![2; widths.len()],
            widths,
            blocks_per_stage: 1,
            num_classes: 3,
            attention_layer: layer,
            ..BackboneConfig::default()
        },
        fin_depth: 2,
        use_fin: true,
    }
}

fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(&[3, 16, 16], (0..3 * 256).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Moves every batch-norm buffer away from (0, 1) so eval mode is not an identity.
fn perturb_buffers(model: &mut LfiCamModel<f64>, rng: &mut ChaCha8Rng) {
    let store = model.store_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.entry(id).name.ends_with(".running") {
            let t = store.get_mut(id);
            let c = t.shape()[1];
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if i < c { rng.random_range(-0.3..0.3) } else { rng.random_range(0.5..2.0) };
            }
        }
    }
}

#[test]
fn zero_attention_equals_plain_backbone() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for layer in [AttentionLayer::Last, AttentionLayer::Stage(0)] {
        let model = LfiCamModel::<f64>::new(config(layer, vec![4, 8]), 3).unwrap();
        for _ in 0..20 {
            let img = image(&mut rng);
            let taps = model.forward_features(&img).unwrap();
            let (m, n) = (taps.f_l.shape()[1], taps.f_l.shape()[2]);
            let attended = model.classify_with_attention(&taps, &Tensor::zeros(&[1, m, n])).unwrap();
            assert_eq!(attended, model.plain_logits(&img).unwrap());
        }
    }
}

#[test]
fn unit_attention_doubles_last_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 8]), 4).unwrap();
    let head = model.backbone().head();
    let w = model.store().get(head.weight).clone();
    let b = model.store().get(head.bias).clone();
    let img = image(&mut rng);
    let taps = model.forward_features(&img).unwrap();
    let logits = model.classify_with_attention(&taps, &Tensor::full(&[1, 4, 4], 1.0)).unwrap();
    let (n, plane) = (taps.f_last.shape()[0], 16);
    for c in 0..3 {
        let expect: f64 = b.data()[c]
            + (0..n)
                .map(|k| {
                    let mean = taps.f_last.data()[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64;
                    w.data()[c * n + k] * 2.0 * mean
                })
                .sum::<f64>();
        assert!((logits.data()[c] - expect).abs() < 1e-12);
    }
}

#[test]
fn attention_shape_mismatch_is_rejected() {
    let model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 8]), 0).unwrap();
    let taps = model.forward_features(&Tensor::zeros(&[3, 16, 16])).unwrap();
    assert!(model.classify_with_attention(&taps, &Tensor::zeros(&[1, 3, 4])).is_err());
    assert!(model.lfi_cam_forward(&Tensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn importance_is_a_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = LfiCamModel::<f32>::new(config(AttentionLayer::Last, vec![4, 8]), 5).unwrap();
    for _ in 0..200 {
        let masks = Tensor::new(&[8, 4, 4], (0..128).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap();
        let s = model.fin_forward(&MaskStack { masks }).unwrap();
        assert!(s.as_slice().iter().all(|&v| v >= 0.0));
        assert!((s.as_slice().iter().sum::<f32>() - 1.0).abs() <= 1e-5);
    }
}

/// Direct loops for `depth` x [conv3x3 p1, eval BN, ReLU], GAP and softmax.
fn fin_reference(model: &LfiCamModel<f64>, masks: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
    let mut x = masks.data().to_vec();
    for (conv, bn) in model.fin().layers() {
        let k = model.store().get(conv.weight).data();
        let gamma = model.store().get(bn.gamma).data();
        let beta = model.store().get(bn.beta).data();
        let stats = model.store().get(bn.running).data();
        let mut y = vec![0.0; c * h * w];
        for o in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let xv = x[(ci * h + ii as usize) * w + jj as usize];
                                acc += k[((o * c + ci) * 3 + di) * 3 + dj] * xv;
                            }
                        }
                    }
                    let z = (acc - stats[o]) / (stats[c + o] + 1e-5).sqrt() * gamma[o] + beta[o];
                    y[(o * h + i) * w + j] = z.max(0.0);
                }
            }
        }
        x = y;
    }
    let pooled: Vec<f64> = (0..c).map(|o| x[o * h * w..(o + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
    let top = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = pooled.iter().map(|v| (v - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn fin_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut cfg = config(AttentionLayer::Last, vec![4, 8]);
    cfg.fin_depth = 3;
    let mut model = LfiCamModel::<f64>::new(cfg, 42).unwrap();
    perturb_buffers(&mut model, &mut rng);
    for _ in 0..5 {
        let img = image(&mut rng);
        let taps = model.forward_features(&img).unwrap();
        let gray = rgb_to_gray_downsample(&img, 4, 4).unwrap();
        let masks = build_masks(&gray, &taps.f_last).unwrap();
        let got = model.fin_forward(&masks).unwrap();
        let want = fin_reference(&model, &masks.masks);
        for (g, w) in got.as_slice().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }
}

#[test]
fn lfi_cam_forward_agrees_with_its_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 8]), 6).unwrap();
    perturb_buffers(&mut model, &mut rng);
    let img = image(&mut rng);
    let out = model.lfi_cam_forward(&img).unwrap();
    let taps = model.forward_features(&img).unwrap();
    let gray = rgb_to_gray_downsample(&img, 4, 4).unwrap();
    let importance = model.fin_forward(&build_masks(&gray, &taps.f_last).unwrap()).unwrap();
    let cam = lficam::attention::assemble_cam(&importance, &taps.f_last).unwrap();
    let logits = model.classify_with_attention(&taps, &cam.normalized).unwrap();
    for (a, b) in out.logits.data().iter().zip(logits.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in out.cam.normalized.data().iter().zip(cam.normalized.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn score_cam_single_channel_is_normalized_relu() {
    let model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 1]), 7).unwrap();
    let img = image(&mut ChaCha8Rng::seed_from_u64(7));
    let taps = model.forward_features(&img).unwrap();
    let sc = score_cam(&model, &img, 0, 4).unwrap();
    assert_eq!(sc.weights.scores.len(), 1);
    let f = taps.f_last.data();
    let relu: Vec<f64> = f.iter().map(|v| v.max(0.0)).collect();
    let (lo, hi) = relu.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for (got, r) in sc.map.normalized.data().iter().zip(&relu) {
        let want = if hi > lo { (r - lo) / (hi - lo) } else { 0.0 };
        assert!((got - want).abs() < 1e-9);
    }
}

#[test]
fn score_cam_with_uniform_head_weights_every_channel_equally() {
    let mut model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 8]), 8).unwrap();
    let head = model.backbone().head().clone();
    for v in model.store_mut().get_mut(head.weight).data_mut() {
        *v = 0.5;
    }
    let img = image(&mut ChaCha8Rng::seed_from_u64(8));
    let sc = score_cam(&model, &img, 2, 3).unwrap();
    for s in &sc.weights.scores {
        assert!((s - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn vanilla_cam_uses_the_head_row() {
    let mut model = LfiCamModel::<f64>::new(config(AttentionLayer::Last, vec![4, 2]), 9).unwrap();
    let head = model.backbone().head().clone();
    model.store_mut().get_mut(head.weight).data_mut()[2..4].copy_from_slice(&[2.0, -1.0]);
    let img = image(&mut ChaCha8Rng::seed_from_u64(9));
    let taps = model.forward_features(&img).unwrap();
    let cam = vanilla_cam(&model, &img, 1).unwrap();
    let f = taps.f_last.data();
    for p in 0..16 {
        let want = (2.0 * f[p] - f[16 + p]).max(0.0);
        assert!((cam.raw.data()[p] - want).abs() < 1e-12);
    }
    assert!(vanilla_cam(&model, &img, 3).is_err());
    assert!(score_cam(&model, &img, 3, 1).is_err());
}
