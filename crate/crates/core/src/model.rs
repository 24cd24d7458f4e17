//! The full classifier: backbone (perception branch) plus FIN (attention branch).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    assemble_cam_var, build_masks_var, gray_downsample_batch, AttentionMap, Fin, ImportanceVector, MaskStack,
};
use crate::backbone::{AttentionLayer, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{argmax, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of conv/BN/ReLU blocks in the FIN.
    pub fin_depth: usize,
    /// When false the attention map is identically zero and the FIN is unused.
    pub use_fin: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            fin_depth: 4,
            use_fin: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.fin_depth == 0 {
            return Err(Error::Config("fin_depth must be at least 1".into()));
        }
        Ok(())
    }
}

/// The two taps the attention branch needs from one backbone pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps<T = f32> {
    /// Output of the layer attention is applied to, `[C_l, m_l, n_l]`.
    pub f_l: Tensor<T>,
    /// Raw last convolutional output, `[N, m, n]`.
    pub f_last: Tensor<T>,
}

impl<T: Scalar> FeatureTaps<T> {
    pub fn channels(&self) -> usize {
        self.f_last.shape()[0]
    }
}

/// Tape handles produced by one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BatchForward {
    pub logits: Var,
    pub f_last: Var,
    pub importance: Option<Var>,
    pub cam_raw: Option<Var>,
    pub cam_normalized: Option<Var>,
}

/// Prediction and explanation for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LfiCamOutput<T = f32> {
    pub logits: Tensor<T>,
    pub cam: AttentionMap<T>,
    pub importance: ImportanceVector<T>,
    pub f_last: Tensor<T>,
}

impl<T: Scalar> LfiCamOutput<T> {
    pub fn predicted_class(&self) -> usize {
        argmax(self.logits.data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LfiCamModel<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbone: Backbone,
    fin: Fin,
}

impl<T: Scalar> LfiCamModel<T> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&config.backbone, &mut store, &mut rng)?;
        let fin = Fin::init(&mut store, &mut rng, config.backbone.last_channels(), config.fin_depth);
        Ok(LfiCamModel {
            config,
            store,
            backbone,
            fin,
        })
    }

    /// Rebuilds the architecture for `config` and installs `tensors` into it.
    pub fn from_store(config: ModelConfig, tensors: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.load_from(tensors)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn fin(&self) -> &Fin {
        &self.fin
    }

    pub fn num_classes(&self) -> usize {
        self.config.backbone.num_classes
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> LfiCamModel<U> {
        LfiCamModel {
            config: self.config.clone(),
            store: self.store.cast(),
            backbone: self.backbone.clone(),
            fin: self.fin.clone(),
        }
    }

    pub fn backbone_param_count(&self) -> usize {
        self.store.trainable_count("backbone.")
    }

    pub fn fin_param_count(&self) -> usize {
        self.store.trainable_count("fin.")
    }

    /// Batched forward on `[B,3,h,w]`.
    ///
    /// With `use_fin` the CAM is built from the last-layer features and applied
    /// at the configured layer; without it the attention map is identically
    /// zero, which leaves the plain backbone forward.
    pub fn forward_batch(&self, ctx: &mut Ctx<'_, T>, images: Var, use_fin: bool) -> Result<BatchForward> {
        let stages = self.backbone.forward_stages(ctx, images)?;
        let f_last = stages.last();
        if !use_fin {
            let logits = self.backbone.classify(ctx, f_last)?;
            return Ok(BatchForward {
                logits,
                f_last,
                importance: None,
                cam_raw: None,
                cam_normalized: None,
            });
        }
        let (importance, cam_raw, cam_normalized) = self.attention_branch(ctx, images, f_last)?;
        let logits = match self.config.backbone.attention_layer {
            AttentionLayer::Last => {
                let attended = ctx.tape.attend(cam_normalized, f_last)?;
                self.backbone.classify(ctx, attended)?
            }
            AttentionLayer::Stage(i) => {
                // Second pass: stages after `i` see the attended features. Its
                // running-stat updates are pushed last and so win over pass one.
                let f_l = stages.stages[i];
                let (ml, nl) = match ctx.tape.shape(f_l) {
                    [_, _, h, w] => (*h, *w),
                    _ => unreachable!("stage outputs are 4-d"),
                };
                let cam_l = ctx.tape.bilinear_resize(cam_normalized, ml, nl)?;
                let attended = ctx.tape.attend(cam_l, f_l)?;
                let out = self.backbone.resume(ctx, attended, i)?;
                self.backbone.classify(ctx, out)?
            }
        };
        Ok(BatchForward {
            logits,
            f_last,
            importance: Some(importance),
            cam_raw: Some(cam_raw),
            cam_normalized: Some(cam_normalized),
        })
    }

    fn attention_branch(&self, ctx: &mut Ctx<'_, T>, images: Var, f_last: Var) -> Result<(Var, Var, Var)> {
        let (m, n) = self.config.backbone.last_size();
        let gray = gray_downsample_batch(ctx.tape.value(images), m, n)?;
        let gray = ctx.tape.constant(gray);
        let masks = build_masks_var(ctx.tape, gray, f_last)?;
        let importance = self.fin.forward(ctx, masks)?;
        let (raw, normalized) = assemble_cam_var(ctx.tape, importance, f_last)?;
        Ok((importance, raw, normalized))
    }

    fn eval_tape(&self) -> Tape<T> {
        Tape::no_grad()
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let (h, w) = self.config.backbone.input_size;
        if image.shape() != [3, h, w] {
            return Err(Error::shape(
                "forward",
                format!("expected image [3,{h},{w}], got {:?}", image.shape()),
            ));
        }
        Ok(())
    }

    /// Eval-mode backbone pass returning both taps.
    pub fn forward_features(&self, image: &Tensor<T>) -> Result<FeatureTaps<T>> {
        self.check_image(image)?;
        let mut tape = self.eval_tape();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let x = ctx.tape.constant(image.clone().unsqueeze0());
        let stages = self.backbone.forward_stages(&mut ctx, x)?;
        let f_last = stages.last();
        let f_l = match self.config.backbone.attention_layer {
            AttentionLayer::Last => f_last,
            AttentionLayer::Stage(i) => stages.stages[i],
        };
        Ok(FeatureTaps {
            f_l: squeeze0(tape.value(f_l))?,
            f_last: squeeze0(tape.value(f_last))?,
        })
    }

    /// Eval-mode FIN on one mask stack.
    pub fn fin_forward(&self, masks: &MaskStack<T>) -> Result<ImportanceVector<T>> {
        let mut tape = self.eval_tape();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let m = ctx.tape.constant(masks.masks.clone().unsqueeze0());
        let s = self.fin.forward(&mut ctx, m)?;
        let n = tape.shape(s)[1];
        Ok(ImportanceVector {
            scores: tape.value(s).clone().reshape(&[n])?,
        })
    }

    /// Applies a normalized attention map to `taps.f_l`, finishes the remaining
    /// stages if any, and returns the `K` logits.
    pub fn classify_with_attention(&self, taps: &FeatureTaps<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
        let (ml, nl) = (taps.f_l.shape()[1], taps.f_l.shape()[2]);
        if attention.shape() != [1, ml, nl] {
            return Err(Error::shape(
                "classify_with_attention",
                format!("attention {:?} vs tap {:?}", attention.shape(), taps.f_l.shape()),
            ));
        }
        let mut tape = self.eval_tape();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let cam = ctx.tape.constant(attention.clone().unsqueeze0());
        let f_l = ctx.tape.constant(taps.f_l.clone().unsqueeze0());
        let attended = ctx.tape.attend(cam, f_l)?;
        let features = match self.config.backbone.attention_layer {
            AttentionLayer::Last => attended,
            AttentionLayer::Stage(i) => self.backbone.resume(&mut ctx, attended, i)?,
        };
        let logits = self.backbone.classify(&mut ctx, features)?;
        squeeze0(tape.value(logits))
    }

    /// Prediction and CAM for a batch `[B,3,h,w]` in eval mode.
    ///
    /// A model configured without the FIN explains itself with uniform channel
    /// importance, i.e. the channel-mean of `F_last`.
    pub fn lfi_cam_batch(&self, images: &Tensor<T>) -> Result<Vec<LfiCamOutput<T>>> {
        let mut tape = self.eval_tape();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let x = ctx.tape.constant(images.clone());
        let use_fin = self.config.use_fin;
        let out = self.forward_batch(&mut ctx, x, use_fin)?;
        let batch = images.shape()[0];
        let (m, n) = self.config.backbone.last_size();
        let channels = self.config.backbone.last_channels();
        (0..batch)
            .map(|b| {
                let f_last = tape.value(out.f_last).index0(b)?;
                let logits = tape.value(out.logits).index0(b)?;
                let (cam, importance) = match (out.importance, out.cam_raw, out.cam_normalized) {
                    (Some(s), Some(raw), Some(norm)) => (
                        AttentionMap {
                            raw: tape.value(raw).index0(b)?.reshape(&[1, m, n])?,
                            normalized: tape.value(norm).index0(b)?.reshape(&[1, m, n])?,
                        },
                        ImportanceVector {
                            scores: tape.value(s).index0(b)?,
                        },
                    ),
                    _ => {
                        let uniform = ImportanceVector {
                            scores: Tensor::full(&[channels], T::from_f64(1.0 / channels as f64)),
                        };
                        (crate::attention::assemble_cam(&uniform, &f_last)?, uniform)
                    }
                };
                Ok(LfiCamOutput {
                    logits,
                    cam,
                    importance,
                    f_last,
                })
            })
            .collect()
    }

    /// One call yields both the prediction and its explanation.
    pub fn lfi_cam_forward(&self, image: &Tensor<T>) -> Result<LfiCamOutput<T>> {
        self.check_image(image)?;
        let mut outs = self.lfi_cam_batch(&image.clone().unsqueeze0())?;
        Ok(outs.remove(0))
    }

    /// Eval-mode logits for `[B,3,h,w]` as configured.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_batch(images, self.config.use_fin)
    }

    /// Eval-mode logits for `[B,3,h,w]`, with or without the attention branch.
    pub fn logits_batch(&self, images: &Tensor<T>, use_fin: bool) -> Result<Tensor<T>> {
        let mut tape = self.eval_tape();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let x = ctx.tape.constant(images.clone());
        let out = self.forward_batch(&mut ctx, x, use_fin)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Logits of the plain backbone (attention map identically zero).
    pub fn plain_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        squeeze0(&self.logits_batch(&image.clone().unsqueeze0(), false)?)
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<usize> {
        self.check_image(image)?;
        let logits = self.logits(&image.clone().unsqueeze0())?;
        Ok(argmax(logits.data()))
    }
}

/// Parameters of an ABN-style attention branch of the same depth on the same
/// backbone: `depth` 3x3 conv+BN layers at width `N`, then 1x1 convolutions
/// `N -> K` (+BN), `K -> 1` (attention map) and `K -> K` (class scores).
pub fn abn_branch_param_count(config: &ModelConfig) -> usize {
    let n = config.backbone.last_channels();
    let k = config.backbone.num_classes;
    let trunk = config.fin_depth * (9 * n * n + 2 * n);
    trunk + (n * k + 2 * k) + k + k * k
}

fn squeeze0<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = t.shape();
    if shape.first() != Some(&1) || shape.len() < 2 {
        return Err(Error::shape("squeeze", format!("expected leading 1 in {shape:?}")));
    }
    t.clone().reshape(&shape[1..])
}
