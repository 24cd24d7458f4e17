//! Gradient-free reference explainers: Score-CAM and vanilla CAM.

use crate::attention::{normalize_map, weighted_cam, AttentionMap};
use crate::error::{Error, Result};
use crate::model::LfiCamModel;
use crate::tensor::{kernels, softmax_rows, Scalar, Tensor};

/// Per-channel Score-CAM weights for one target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCamWeights<T = f32> {
    /// Softmax score of `target` on each channel-masked input.
    pub scores: Vec<T>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCam<T = f32> {
    pub map: AttentionMap<T>,
    pub weights: ScoreCamWeights<T>,
}

fn check_class<T: Scalar>(model: &LfiCamModel<T>, class: usize, op: &'static str) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::invalid(
            op,
            format!("class {class} out of range for {} classes", model.num_classes()),
        ));
    }
    Ok(())
}

/// The `N` masked copies of `image`: each is the image times the bilinearly
/// upsampled, min-max normalized feature map `k`, shape `[N,3,h,w]`.
pub fn score_cam_inputs<T: Scalar>(image: &Tensor<T>, f_last: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, m, w_) = match f_last.shape() {
        [n, m, w] => (*n, *m, *w),
        s => return Err(Error::shape("score_cam", format!("F_last must be [N,m,n], got {s:?}"))),
    };
    let (h, w) = match image.shape() {
        [3, h, w] => (*h, *w),
        s => return Err(Error::shape("score_cam", format!("image must be [3,h,w], got {s:?}"))),
    };
    let up = kernels::bilinear_forward(f_last.data(), n, m, w_, h, w);
    let plane = h * w;
    let img = image.data();
    let mut out = Vec::with_capacity(n * 3 * plane);
    for k in 0..n {
        let a = normalize_map(&Tensor::new(&[h, w], up[k * plane..(k + 1) * plane].to_vec())?);
        for c in 0..3 {
            out.extend(img[c * plane..(c + 1) * plane].iter().zip(a.data()).map(|(&p, &s)| p * s));
        }
    }
    Tensor::new(&[n, 3, h, w], out)
}

/// Score-CAM for class `target`, forwarding the masked inputs in chunks of
/// `batch_size`. The map weights the native-resolution feature maps.
pub fn score_cam<T: Scalar>(
    model: &LfiCamModel<T>,
    image: &Tensor<T>,
    target: usize,
    batch_size: usize,
) -> Result<ScoreCam<T>> {
    check_class(model, target, "score_cam")?;
    if batch_size == 0 {
        return Err(Error::invalid("score_cam", "batch_size must be at least 1"));
    }
    let taps = model.forward_features(image)?;
    let masked = score_cam_inputs(image, &taps.f_last)?;
    let n = masked.shape()[0];
    let k = model.num_classes();
    let mut scores = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let chunk: Vec<Tensor<T>> = (start..end).map(|i| masked.index0(i)).collect::<Result<_>>()?;
        let logits = model.logits(&Tensor::stack(&chunk)?)?;
        let probs = softmax_rows(logits.data(), k);
        scores.extend(probs.chunks(k).map(|row| row[target]));
        start = end;
    }
    let map = weighted_cam(&scores, &taps.f_last)?;
    Ok(ScoreCam {
        map,
        weights: ScoreCamWeights { scores, target },
    })
}

/// `ReLU(sum_k head[c,k] * F_last[k])` with the usual normalized view.
pub fn vanilla_cam<T: Scalar>(model: &LfiCamModel<T>, image: &Tensor<T>, class: usize) -> Result<AttentionMap<T>> {
    check_class(model, class, "vanilla_cam")?;
    let taps = model.forward_features(image)?;
    let head = model.store().get(model.backbone().head().weight);
    let n = head.shape()[1];
    weighted_cam(&head.data()[class * n..(class + 1) * n], &taps.f_last)
}
