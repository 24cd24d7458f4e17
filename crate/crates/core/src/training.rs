//! SGD training loop, learning-rate schedule, augmentation and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LfiCamModel, ModelConfig};
use crate::nn::{Ctx, ParamKind};
use crate::tensor::{argmax, kernels, Scalar, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Zero-pad 4, random crop back, random horizontal flip.
    Cifar,
    /// Random resized crop back to the input size, random horizontal flip.
    ImageNet,
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::None => "none",
            Augmentation::Cifar => "cifar",
            Augmentation::ImageNet => "imagenet",
        })
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" | "off" => Ok(Augmentation::None),
            "cifar" => Ok(Augmentation::Cifar),
            "imagenet" => Ok(Augmentation::ImageNet),
            other => Err(Error::Config(format!("unknown augmentation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_fin: bool,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.1,
            momentum: 0.9,
            batch_size: 64,
            weight_decay: 5e-4,
            seed: 0,
            use_fin: true,
            augmentation: Augmentation::Cifar,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Step schedule: `base_lr` until `floor(E/2)`, `/10` until `floor(3E/4)`, then `/100`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let e = config.epochs;
    if epoch < e / 2 {
        config.base_lr
    } else if epoch < e * 3 / 4 {
        config.base_lr / 10.0
    } else {
        config.base_lr / 100.0
    }
}

/// In-place `v = momentum*v + (g + wd*p); p -= lr*v`.
pub fn sgd_momentum_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(
            "sgd_momentum_step",
            format!("param {} / grad {} / velocity {}", param.len(), grad.len(), velocity.len()),
        ));
    }
    let (lr, m, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + (g + wd * *p);
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Cifar-style augmentation with explicit choices: the output is the `h x w`
/// window at `(dy, dx)` of the 4-pixel zero-padded image, optionally mirrored.
/// `(4, 4)` without flip is the identity.
pub fn augment_cifar_with(image: &Tensor<f32>, dy: usize, dx: usize, flip: bool) -> Result<Tensor<f32>> {
    const PAD: usize = 4;
    let (c, h, w) = chw(image)?;
    if dy > 2 * PAD || dx > 2 * PAD {
        return Err(Error::invalid("augment", format!("crop offset ({dy},{dx}) beyond padding")));
    }
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Crops `[y0, y0+ch) x [x0, x0+cw)`, resizes bilinearly back to `h x w`, optionally mirrors.
pub fn augment_resized_crop_with(
    image: &Tensor<f32>,
    y0: usize,
    x0: usize,
    crop_h: usize,
    crop_w: usize,
    flip: bool,
) -> Result<Tensor<f32>> {
    let (c, h, w) = chw(image)?;
    if crop_h == 0 || crop_w == 0 || y0 + crop_h > h || x0 + crop_w > w {
        return Err(Error::invalid("augment", "crop window leaves the image"));
    }
    let src = image.data();
    let mut crop = Vec::with_capacity(c * crop_h * crop_w);
    for ch in 0..c {
        for y in y0..y0 + crop_h {
            let row = (ch * h + y) * w;
            crop.extend_from_slice(&src[row + x0..row + x0 + crop_w]);
        }
    }
    let mut out = kernels::bilinear_forward(&crop, c, crop_h, crop_w, h, w);
    if flip {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }
    Tensor::new(image.shape(), out)
}

pub fn augment(image: &Tensor<f32>, rng: &mut impl Rng, mode: Augmentation) -> Result<Tensor<f32>> {
    match mode {
        Augmentation::None => Ok(image.clone()),
        Augmentation::Cifar => {
            let dy = rng.random_range(0..=8);
            let dx = rng.random_range(0..=8);
            let flip = rng.random_bool(0.5);
            augment_cifar_with(image, dy, dx, flip)
        }
        Augmentation::ImageNet => {
            let (_, h, w) = chw(image)?;
            let area = (h * w) as f64;
            let mut window = (0, 0, h, w);
            for _ in 0..10 {
                let target = area * rng.random_range(0.08..=1.0);
                let ratio = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln()).exp();
                let cw = (target * ratio).sqrt().round() as usize;
                let ch = (target / ratio).sqrt().round() as usize;
                if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
                    window = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw), ch, cw);
                    break;
                }
            }
            let flip = rng.random_bool(0.5);
            augment_resized_crop_with(image, window.0, window.1, window.2, window.3, flip)
        }
    }
}

fn chw(image: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape("augment", format!("expected [C,H,W], got {s:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Error on the training batches as seen during the epoch, in percent.
    pub train_err: f64,
    /// Top-1 test error in percent; NaN without a test set.
    pub test_err: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{:.2},{:.2}",
            self.epoch, self.lr, self.train_loss, self.train_err, self.test_err
        )
    }
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_err,test_err";

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    velocity: Vec<Option<Vec<f32>>>,
}

impl Optimizer {
    pub fn new(model: &LfiCamModel) -> Self {
        Optimizer {
            velocity: vec![None; model.store().len()],
        }
    }
}

/// One SGD step on one batch; returns `(mean loss, misclassified count)`.
pub fn train_step(
    model: &mut LfiCamModel,
    opt: &mut Optimizer,
    images: Tensor<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let (loss_var, logits, bindings, running) = {
        let mut ctx = Ctx::new(&mut tape, model.store(), true);
        let x = ctx.tape.constant(images);
        let out = model.forward_batch(&mut ctx, x, cfg.use_fin)?;
        let loss = ctx.tape.cross_entropy(out.logits, labels)?;
        let running = ctx.take_running_updates();
        (loss, out.logits, ctx.bindings(), running)
    };
    let loss = tape.value(loss_var).data()[0] as f64;
    let k = tape.shape(logits)[1];
    let wrong = tape
        .value(logits)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) != l)
        .count();
    if !loss.is_finite() {
        return Ok((loss, wrong));
    }
    let grads = tape.backward(loss_var)?;
    let store = model.store_mut();
    for (id, var) in bindings {
        if store.entry(id).kind != ParamKind::Trainable {
            continue;
        }
        let Some(g) = grads.get(var) else { continue };
        let v = opt.velocity[id.index()].get_or_insert_with(|| vec![0.0; g.numel()]);
        sgd_momentum_step(store.get_mut(id).data_mut(), g.data(), v, lr, cfg.momentum, cfg.weight_decay)?;
    }
    for (id, stats) in running {
        *store.get_mut(id) = stats;
    }
    Ok((loss, wrong))
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) on `train`,
/// reporting test error on `test` after every epoch.
pub fn train_model(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<(LfiCamModel, Vec<EpochMetrics>)> {
    train_model_with(train, test, cfg, model_cfg, |_| {})
}

/// `train_model` with a callback invoked after each epoch.
pub fn train_model_with(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(LfiCamModel, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        use_fin: cfg.use_fin,
        ..model_cfg.clone()
    };
    let mut model = LfiCamModel::new(model_cfg.clone(), cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if train.is_empty() {
        return Err(Error::invalid("train_model", "training set is empty"));
    }
    let (h, w) = model_cfg.backbone.input_size;
    if train.height != h || train.width != w {
        return Err(Error::shape(
            "train_model",
            format!("dataset images are {}x{}, model expects {h}x{w}", train.height, train.width),
        ));
    }
    for (i, item) in train.items.iter().enumerate() {
        if item.label >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: item.label,
                classes: model.num_classes(),
            });
        }
    }
    // Separate streams so shuffling does not depend on the augmentation mode.
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut opt = Optimizer::new(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut wrong) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let item = &train.items[i];
                let img = augment(&item.pixels, &mut aug_rng, cfg.augmentation)?;
                data.extend_from_slice(img.data());
                labels.push(item.label);
            }
            let images = Tensor::new(&[chunk.len(), 3, h, w], data)?;
            let (loss, miss) = train_step(&mut model, &mut opt, images, &labels, cfg, lr)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            wrong += miss;
        }
        let test_err = if test.is_empty() {
            f64::NAN
        } else {
            evaluate_top1(&model, test)?
        };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_err: 100.0 * wrong as f64 / train.len() as f64,
            test_err,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok((model, metrics))
}

/// Eval-mode predictions for every image of `data`.
pub fn predict_all(model: &LfiCamModel, data: &Dataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 100;
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (images, _) = data.batch(chunk)?;
        let logits = model.logits(&images)?;
        let k = logits.shape()[1];
        preds.extend(logits.data().chunks(k).map(argmax));
    }
    Ok(preds)
}

/// Percentage of images whose argmax prediction differs from the label.
pub fn evaluate_top1(model: &LfiCamModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate_top1", "dataset is empty"));
    }
    let preds = predict_all(model, data)?;
    let wrong = preds.iter().zip(&data.items).filter(|(p, i)| **p != i.label).count();
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let cfg = TrainConfig {
            epochs: 4,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..4).map(|e| lr_at_epoch(&cfg, e)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.1 / 10.0, 0.1 / 100.0]);
        let cfg = TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(&cfg, 149), 0.1);
        assert_eq!(lr_at_epoch(&cfg, 150), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 224), 0.01);
        assert_eq!(lr_at_epoch(&cfg, 225), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 299), 0.001);
    }

    #[test]
    fn momentum_recurrence() {
        let (mut w, mut v) = ([1.0f64], [0.0f64]);
        sgd_momentum_step(&mut w, &[0.1], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((w[0] - 0.99).abs() < 1e-12);
        sgd_momentum_step(&mut w, &[0.1], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((v[0] - 0.19).abs() < 1e-12);
        assert!((w[0] - 0.971).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_and_plain_sgd() {
        let (mut w, mut v) = ([0.3f64, -2.0], [0.0; 2]);
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, [0.3, -2.0]);
        let (mut w, mut v) = ([1.0f64], [0.0]);
        sgd_momentum_step(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        sgd_momentum_step(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn cifar_center_crop_is_identity() {
        let img = Tensor::new(&[3, 6, 5], (0..90).map(|v| v as f32 / 90.0).collect()).unwrap();
        assert_eq!(augment_cifar_with(&img, 4, 4, false).unwrap(), img);
        let flipped = augment_cifar_with(&img, 4, 4, true).unwrap();
        assert_eq!(flipped.data()[0], img.data()[4]);
        let shifted = augment_cifar_with(&img, 0, 0, false).unwrap();
        assert_eq!(shifted.shape(), img.shape());
        assert_eq!(shifted.data()[0], 0.0);
    }

    #[test]
    fn full_window_resized_crop_is_identity() {
        let img = Tensor::new(&[3, 4, 4], (0..48).map(|v| v as f32).collect()).unwrap();
        assert_eq!(augment_resized_crop_with(&img, 0, 0, 4, 4, false).unwrap(), img);
    }

    #[test]
    fn augmentation_stream_is_reproducible() {
        let img = Tensor::new(&[3, 8, 8], (0..192).map(|v| v as f32 / 192.0).collect()).unwrap();
        for mode in [Augmentation::Cifar, Augmentation::ImageNet] {
            let run = |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..5).map(|_| augment(&img, &mut rng, mode).unwrap()).collect::<Vec<_>>()
            };
            assert_eq!(run(9), run(9));
            assert!(run(9).iter().all(|t| t.shape() == img.shape()));
        }
    }
}
