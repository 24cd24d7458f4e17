//! Attention branch: grayscale input preparation, feature-map masking, the
//! Feature Importance Network, CAM assembly and the `(1 + L) * F` mechanism.
//!
//! The tape-level functions (`*_var`) are what the model runs during
//! training; the tensor-level functions take and return plain tensors and
//! run the same code on a gradient-free tape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Downsampled grayscale input, `[1, m, n]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage<T = f32> {
    pub data: Tensor<T>,
}

/// Gray image times each normalized last-layer feature map, `[N, m, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack<T = f32> {
    pub masks: Tensor<T>,
}

/// Softmax output of the FIN: one weight per last-layer channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector<T = f32> {
    pub scores: Tensor<T>,
}

impl<T: Scalar> ImportanceVector<T> {
    pub fn as_slice(&self) -> &[T] {
        self.scores.data()
    }

    /// Reorders the scores: entry `k` becomes `scores[perm[k]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let s = self.scores.data();
        if perm.len() != s.len() {
            return Err(Error::shape(
                "permute_importance",
                format!("permutation of {} for {} scores", perm.len(), s.len()),
            ));
        }
        let data = perm.iter().map(|&i| s[i]).collect();
        Ok(ImportanceVector {
            scores: Tensor::new(&[s.len()], data)?,
        })
    }
}

/// Single-channel non-negative map with its `[0, 1]` rescaled view.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T = f32> {
    pub raw: Tensor<T>,
    pub normalized: Tensor<T>,
}

impl<T: Scalar> AttentionMap<T> {
    /// Builds the normalized view from a non-negative `[1, m, n]` map.
    pub fn from_raw(raw: Tensor<T>) -> Result<Self> {
        match raw.shape() {
            [1, _, _] => {}
            s => return Err(Error::shape("attention_map", format!("expected [1,m,n], got {s:?}"))),
        }
        if raw.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("attention_map", "raw map has negative entries"));
        }
        let normalized = normalize_map(&raw);
        Ok(AttentionMap { raw, normalized })
    }

    pub fn height(&self) -> usize {
        self.raw.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.raw.shape()[2]
    }
}

/// Grayscale conversion of `[B,3,h,w]` images followed by non-overlapping
/// average pooling to `[B,1,m,n]`.
pub fn gray_downsample_batch<T: Scalar>(images: &Tensor<T>, m: usize, n: usize) -> Result<Tensor<T>> {
    let (b, h, w) = match images.shape() {
        [b, 3, h, w] => (*b, *h, *w),
        s => return Err(Error::shape("rgb_to_gray_downsample", format!("expected [B,3,h,w], got {s:?}"))),
    };
    if m == 0 || n == 0 || h % m != 0 || w % n != 0 {
        return Err(Error::invalid(
            "rgb_to_gray_downsample",
            format!("{h}x{w} is not an integer multiple of {m}x{n}"),
        ));
    }
    let plane = h * w;
    let coef = LUMA.map(T::from_f64);
    let src = images.data();
    let mut gray = vec![T::zero(); b * plane];
    for bi in 0..b {
        let base = bi * 3 * plane;
        for i in 0..plane {
            gray[bi * plane + i] =
                coef[0] * src[base + i] + coef[1] * src[base + plane + i] + coef[2] * src[base + 2 * plane + i];
        }
    }
    let pooled = crate::tensor::kernels::avg_pool_down(&gray, b, h, w, h / m, w / n);
    Tensor::new(&[b, 1, m, n], pooled)
}

/// Grayscale + downsample of one `[3,h,w]` image.
pub fn rgb_to_gray_downsample<T: Scalar>(image: &Tensor<T>, m: usize, n: usize) -> Result<GrayImage<T>> {
    let batched = image.clone().unsqueeze0();
    let g = gray_downsample_batch(&batched, m, n)?;
    Ok(GrayImage {
        data: g.reshape(&[1, m, n])?,
    })
}

/// Min-max rescale of the whole tensor to `[0, 1]`; a constant input maps to zeros.
pub fn normalize_map<T: Scalar>(map: &Tensor<T>) -> Tensor<T> {
    let (lo, range) = crate::tensor::kernels::plane_min_range(map.data());
    if range > T::zero() {
        map.map(|v| (v - lo) / range)
    } else {
        Tensor::zeros(map.shape())
    }
}

/// `gray ⊗ normalize(F_last[k])` for every channel `k`, on the tape.
pub fn build_masks_var<T: Scalar>(tape: &mut Tape<T>, gray: Var, f_last: Var) -> Result<Var> {
    let normalized = tape.minmax_normalize(f_last)?;
    tape.mul_plane(normalized, gray)
}

pub fn build_masks<T: Scalar>(gray: &GrayImage<T>, f_last: &Tensor<T>) -> Result<MaskStack<T>> {
    let (n, m, w) = match f_last.shape() {
        [n, m, w] => (*n, *m, *w),
        s => return Err(Error::shape("build_masks", format!("F_last must be [N,m,n], got {s:?}"))),
    };
    if gray.data.shape() != [1, m, w] {
        return Err(Error::shape(
            "build_masks",
            format!("gray {:?} vs feature maps {:?}", gray.data.shape(), f_last.shape()),
        ));
    }
    let mut tape = Tape::no_grad();
    let g = tape.constant(gray.data.clone().unsqueeze0());
    let f = tape.constant(f_last.clone().unsqueeze0());
    let masks = build_masks_var(&mut tape, g, f)?;
    Ok(MaskStack {
        masks: tape.value(masks).clone().reshape(&[n, m, w])?,
    })
}

/// `ReLU(sum_k w_k F_last[k])` and its normalized view, on the tape.
/// Returns `(raw [B,1,m,n], normalized [B,1,m,n])`.
pub fn assemble_cam_var<T: Scalar>(tape: &mut Tape<T>, importance: Var, f_last: Var) -> Result<(Var, Var)> {
    let combined = tape.weighted_channel_sum(importance, f_last)?;
    let raw = tape.relu(combined)?;
    let normalized = tape.minmax_normalize(raw)?;
    Ok((raw, normalized))
}

pub fn assemble_cam<T: Scalar>(importance: &ImportanceVector<T>, f_last: &Tensor<T>) -> Result<AttentionMap<T>> {
    weighted_cam(importance.as_slice(), f_last)
}

/// CAM from arbitrary per-channel weights (shared by the CAM oracles).
pub fn weighted_cam<T: Scalar>(weights: &[T], f_last: &Tensor<T>) -> Result<AttentionMap<T>> {
    let (n, m, w) = match f_last.shape() {
        [n, m, w] => (*n, *m, *w),
        s => return Err(Error::shape("assemble_cam", format!("F_last must be [N,m,n], got {s:?}"))),
    };
    if weights.len() != n {
        return Err(Error::shape(
            "assemble_cam",
            format!("{} weights for {n} feature maps", weights.len()),
        ));
    }
    let mut tape = Tape::no_grad();
    let wv = tape.constant(Tensor::new(&[1, n], weights.to_vec())?);
    let f = tape.constant(f_last.clone().unsqueeze0());
    let (raw, normalized) = assemble_cam_var(&mut tape, wv, f)?;
    Ok(AttentionMap {
        raw: tape.value(raw).clone().reshape(&[1, m, w])?,
        normalized: tape.value(normalized).clone().reshape(&[1, m, w])?,
    })
}

/// `(1 + cam) ⊗ F_l[k]` for every channel.
pub fn apply_attention<T: Scalar>(cam_normalized: &Tensor<T>, f_l: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, m, w) = match f_l.shape() {
        [c, m, w] => (*c, *m, *w),
        s => return Err(Error::shape("apply_attention", format!("F_l must be [C,m,n], got {s:?}"))),
    };
    if cam_normalized.shape() != [1, m, w] {
        return Err(Error::shape(
            "apply_attention",
            format!("cam {:?} vs features {:?}", cam_normalized.shape(), f_l.shape()),
        ));
    }
    let mut tape = Tape::no_grad();
    let cam = tape.constant(cam_normalized.clone().unsqueeze0());
    let f = tape.constant(f_l.clone().unsqueeze0());
    let out = tape.attend(cam, f)?;
    tape.value(out).clone().reshape(&[c, m, w])
}

/// Feature Importance Network: `depth` x [conv 3x3 s1 p1, BN, ReLU], then
/// global average pooling and softmax over the channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Fin {
    channels: usize,
    layers: Vec<(Conv, BatchNorm)>,
}

impl Fin {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, channels: usize, depth: usize) -> Self {
        let layers = (0..depth)
            .map(|i| {
                let name = format!("fin.layer{i}");
                (
                    Conv::init(store, rng, &format!("{name}.conv"), channels, channels, 3, 1, 1, false),
                    BatchNorm::init(store, &format!("{name}.bn"), channels),
                )
            })
            .collect();
        Fin { channels, layers }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[(Conv, BatchNorm)] {
        &self.layers
    }

    /// `[B,N,m,n]` masks to `[B,N]` importance scores.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, masks: Var) -> Result<Var> {
        match ctx.tape.shape(masks) {
            [_, c, _, _] if *c == self.channels => {}
            s => {
                return Err(Error::shape(
                    "fin_forward",
                    format!("expected {} mask channels, got {s:?}", self.channels),
                ))
            }
        }
        let mut x = masks;
        for (conv, bn) in &self.layers {
            x = conv.forward(ctx, x)?;
            x = bn.forward(ctx, x)?;
            x = ctx.tape.relu(x)?;
        }
        let pooled = ctx.tape.global_avg_pool(x)?;
        ctx.tape.softmax(pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn gray_of_ones_is_ones() {
        let g = rgb_to_gray_downsample(&Tensor::<f64>::ones(&[3, 8, 8]), 2, 2).unwrap();
        assert!(g.data.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn gray_fixed_point_for_equal_channels() {
        let g = rgb_to_gray_downsample(&Tensor::<f64>::full(&[3, 4, 4], 0.37), 4, 4).unwrap();
        assert!(g.data.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn gray_left_half_bright() {
        let mut img = vec![0.0; 48];
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..2 {
                    img[c * 16 + y * 4 + x] = 1.0;
                }
            }
        }
        let g = rgb_to_gray_downsample(&t(&[3, 4, 4], &img), 2, 2).unwrap();
        let expected = [1.0, 0.0, 1.0, 0.0];
        for (a, b) in g.data.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gray_rejects_fractional_pooling() {
        assert!(rgb_to_gray_downsample(&Tensor::<f64>::ones(&[3, 6, 6]), 4, 4).is_err());
    }

    #[test]
    fn normalize_map_cases() {
        assert_eq!(normalize_map(&Tensor::<f64>::full(&[2, 2], 3.0)).data(), &[0.0; 4]);
        let already = t(&[2, 2], &[0.0, 0.3, 1.0, 0.5]);
        assert_eq!(normalize_map(&already), already);
        assert_eq!(
            normalize_map(&t(&[2, 2], &[1.0, 3.0, 5.0, 9.0])).data(),
            &[0.0, 0.25, 0.5, 1.0]
        );
    }

    #[test]
    fn masks_hand_example() {
        let gray = GrayImage {
            data: t(&[1, 2, 2], &[0.5, 1.0, 0.0, 1.0]),
        };
        // Normalizes to [[1,0],[1,1]].
        let f = t(&[1, 2, 2], &[4.0, 2.0, 4.0, 4.0]);
        let m = build_masks(&gray, &f).unwrap();
        assert_eq!(m.masks.data(), &[0.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn masks_unit_gray_and_constant_channel() {
        let gray = GrayImage {
            data: Tensor::<f64>::ones(&[1, 2, 2]),
        };
        let f = t(&[2, 2, 2], &[1.0, 3.0, 5.0, 9.0, 7.0, 7.0, 7.0, 7.0]);
        let m = build_masks(&gray, &f).unwrap();
        assert_eq!(m.masks.data(), &[0.0, 0.25, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cam_hand_example() {
        let w = ImportanceVector {
            scores: t(&[2], &[0.25, 0.75]),
        };
        let f = t(&[2, 1, 2], &[1.0, -1.0, -1.0, 1.0]);
        let cam = assemble_cam(&w, &f).unwrap();
        assert_eq!(cam.raw.data(), &[0.0, 0.5]);
        assert_eq!(cam.normalized.data(), &[0.0, 1.0]);
    }

    #[test]
    fn cam_single_channel_and_negative_maps() {
        let w = ImportanceVector {
            scores: t(&[1], &[1.0]),
        };
        let f = t(&[1, 2, 2], &[-2.0, 0.5, 3.0, -0.1]);
        assert_eq!(assemble_cam(&w, &f).unwrap().raw.data(), &[0.0, 0.5, 3.0, 0.0]);

        let w = ImportanceVector {
            scores: t(&[2], &[0.5, 0.5]),
        };
        let f = t(&[2, 1, 2], &[-1.0, 0.0, -3.0, -0.2]);
        let cam = assemble_cam(&w, &f).unwrap();
        assert!(cam.raw.data().iter().all(|&v| v == 0.0));
        assert!(cam.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_identity_doubling_and_hand_value() {
        let f = t(&[2, 1, 2], &[1.0, -2.0, 3.5, 0.0]);
        assert_eq!(apply_attention(&Tensor::zeros(&[1, 1, 2]), &f).unwrap(), f);
        let doubled = apply_attention(&Tensor::ones(&[1, 1, 2]), &f).unwrap();
        assert_eq!(doubled.data(), &[2.0, -4.0, 7.0, 0.0]);
        let out = apply_attention(&t(&[1, 1, 1], &[0.5]), &t(&[1, 1, 1], &[4.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert!(apply_attention(&Tensor::zeros(&[1, 2, 2]), &f).is_err());
    }

    #[test]
    fn permuted_importance() {
        let w = ImportanceVector {
            scores: t(&[3], &[0.2, 0.3, 0.5]),
        };
        assert_eq!(w.permuted(&[2, 0, 1]).unwrap().as_slice(), &[0.5, 0.2, 0.3]);
        assert!(w.permuted(&[0, 1]).is_err());
    }
}
