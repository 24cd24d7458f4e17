//! Thresholded-CAM masks, IoU across independently trained models, and
//! localization against ground-truth boxes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{weighted_cam, AttentionMap};
use crate::data::{quantize, BBox, Dataset};
use crate::error::{Error, Result};
use crate::model::LfiCamModel;
use crate::oracles::{score_cam, vanilla_cam};
use crate::tensor::{kernels, Scalar};

/// Default byte threshold for "high temperature" pixels.
pub const DEFAULT_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "BinaryMask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(BinaryMask { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Upsamples the normalized map bilinearly to `h x w`, quantizes to bytes and
/// keeps pixels whose byte is at least `threshold`.
pub fn threshold_cam<T: Scalar>(cam: &AttentionMap<T>, threshold: u8, h: usize, w: usize) -> BinaryMask {
    let (m, n) = (cam.height(), cam.width());
    let up = kernels::bilinear_forward(cam.normalized.data(), 1, m, n, h, w);
    let bits = up.iter().map(|v| quantize(v.as_f64()) >= threshold).collect();
    BinaryMask {
        height: h,
        width: w,
        bits,
    }
}

/// `|a ∩ b| / |a ∪ b|`; 1 when both are empty, 0 when exactly one is.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            "iou",
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of selected pixels inside `bbox`; 0 for an empty mask.
pub fn mask_in_box(mask: &BinaryMask, bbox: &BBox) -> f64 {
    let (mut total, mut inside) = (0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                total += 1;
                inside += bbox.contains_pixel(x, y) as usize;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        inside as f64 / total as f64
    }
}

pub fn localization_score<T: Scalar>(cam: &AttentionMap<T>, bbox: &BBox, threshold: u8, h: usize, w: usize) -> f64 {
    mask_in_box(&threshold_cam(cam, threshold, h, w), bbox)
}

/// Which explanation to compare across models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamMethod {
    /// The map built from the learned importance vector.
    Lfi,
    /// The learned map with the importance vector permuted by a fixed random
    /// permutation per model (drawn from `seed` and the model's position).
    ShuffledImportance { seed: u64 },
    /// Score-CAM for the model's predicted class.
    Score,
    /// Vanilla CAM for the model's predicted class.
    Vanilla,
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CamMethod::Lfi => f.write_str("lfi"),
            CamMethod::ShuffledImportance { .. } => f.write_str("shuffled"),
            CamMethod::Score => f.write_str("score"),
            CamMethod::Vanilla => f.write_str("cam"),
        }
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lfi" => Ok(CamMethod::Lfi),
            "shuffled" => Ok(CamMethod::ShuffledImportance { seed: 0 }),
            "score" => Ok(CamMethod::Score),
            "cam" => Ok(CamMethod::Vanilla),
            other => Err(Error::Config(format!("unknown cam method `{other}`"))),
        }
    }
}

/// Predictions and maps of one model over a dataset.
#[derive(Debug, Clone)]
pub struct ModelCams {
    pub predictions: Vec<usize>,
    pub cams: Vec<AttentionMap<f32>>,
}

impl ModelCams {
    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let right = self
            .predictions
            .iter()
            .zip(&data.items)
            .filter(|(p, i)| **p == i.label)
            .count();
        100.0 * right as f64 / data.len().max(1) as f64
    }
}

/// Runs `model` over `data` and collects one map per image. `position`
/// decorrelates the shuffled-importance permutation between models.
pub fn compute_cams(model: &LfiCamModel, data: &Dataset, method: CamMethod, position: usize) -> Result<ModelCams> {
    const CHUNK: usize = 100;
    let n_channels = model.config().backbone.last_channels();
    let perm: Vec<usize> = match method {
        CamMethod::ShuffledImportance { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (position as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut p: Vec<usize> = (0..n_channels).collect();
            p.shuffle(&mut rng);
            p
        }
        _ => Vec::new(),
    };
    let mut predictions = Vec::with_capacity(data.len());
    let mut cams = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (images, _) = data.batch(chunk)?;
        let outs = model.lfi_cam_batch(&images)?;
        for (out, &i) in outs.into_iter().zip(chunk) {
            let pred = out.predicted_class();
            let image = &data.items[i].pixels;
            let cam = match method {
                CamMethod::Lfi => out.cam,
                CamMethod::ShuffledImportance { .. } => {
                    let shuffled = out.importance.permuted(&perm)?;
                    weighted_cam(shuffled.as_slice(), &out.f_last)?
                }
                CamMethod::Score => score_cam(model, image, pred, 64)?.map,
                CamMethod::Vanilla => vanilla_cam(model, image, pred)?,
            };
            predictions.push(pred);
            cams.push(cam);
        }
    }
    Ok(ModelCams { predictions, cams })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub model_id: String,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    pub mean_iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub baseline: usize,
    /// Mean of `mean_iou` over the non-baseline rows.
    pub average: f64,
}

impl fmt::Display for StabilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{},{:.2},{:.6}", r.model_id, r.accuracy, r.mean_iou)?;
        }
        write!(f, "average,{:.6}", self.average)
    }
}

/// Baseline = most accurate model (first on ties); every other model is scored
/// by the mean over `data` of the IoU between its thresholded maps and the baseline's.
pub fn stability_from_cams(ids: &[String], all: &[ModelCams], data: &Dataset, threshold: u8) -> Result<StabilityReport> {
    if all.len() < 2 || ids.len() != all.len() {
        return Err(Error::invalid("stability_protocol", "need at least two models"));
    }
    if data.is_empty() {
        return Err(Error::invalid("stability_protocol", "test set is empty"));
    }
    let (h, w) = (data.height, data.width);
    let accuracies: Vec<f64> = all.iter().map(|c| c.accuracy(data)).collect();
    let mut baseline = 0;
    for (i, &a) in accuracies.iter().enumerate() {
        if a > accuracies[baseline] {
            baseline = i;
        }
    }
    let base_masks: Vec<BinaryMask> = all[baseline].cams.iter().map(|c| threshold_cam(c, threshold, h, w)).collect();
    let mut rows = Vec::with_capacity(all.len());
    let mut others = Vec::with_capacity(all.len() - 1);
    for (i, cams) in all.iter().enumerate() {
        let mut total = 0.0;
        for (cam, base) in cams.cams.iter().zip(&base_masks) {
            total += iou(base, &threshold_cam(cam, threshold, h, w))?;
        }
        let mean_iou = total / data.len() as f64;
        if i != baseline {
            others.push(mean_iou);
        }
        rows.push(StabilityRow {
            model_id: ids[i].clone(),
            accuracy: accuracies[i],
            mean_iou,
        });
    }
    // Summing in sorted order makes the average independent of listing order.
    others.sort_by(f64::total_cmp);
    let average = others.iter().sum::<f64>() / others.len() as f64;
    Ok(StabilityReport { rows, baseline, average })
}

pub fn stability_protocol(
    ids: &[String],
    models: &[&LfiCamModel],
    data: &Dataset,
    threshold: u8,
    method: CamMethod,
) -> Result<StabilityReport> {
    if models.len() < 2 {
        return Err(Error::invalid("stability_protocol", "need at least two models"));
    }
    for m in models {
        let (h, w) = m.config().backbone.input_size;
        if (h, w) != (data.height, data.width) {
            return Err(Error::shape(
                "stability_protocol",
                format!("model expects {h}x{w}, test images are {}x{}", data.height, data.width),
            ));
        }
    }
    let cams: Vec<ModelCams> = models
        .iter()
        .enumerate()
        .map(|(i, m)| compute_cams(m, data, method, i))
        .collect::<Result<_>>()?;
    stability_from_cams(ids, &cams, data, threshold)
}
