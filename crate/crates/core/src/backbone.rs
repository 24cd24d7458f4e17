//! Perception-branch feature extractor and classification head.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear, ParamStore};
use crate::tensor::{Scalar, Var};

/// Where the attention map is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLayer {
    /// On the last convolutional output itself (single pass).
    Last,
    /// On the output of stage `i`, which must precede the last stage.
    Stage(usize),
}

impl fmt::Display for AttentionLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionLayer::Last => write!(f, "last"),
            AttentionLayer::Stage(i) => write!(f, "stage{i}"),
        }
    }
}

impl FromStr for AttentionLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "last" {
            return Ok(AttentionLayer::Last);
        }
        let idx = s
            .strip_prefix("stage")
            .map(|r| r.trim_start_matches(['(', ':']).trim_end_matches(')'))
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::Config(format!("attention_layer must be `last` or `stageN`, got `{s}`")))?;
        Ok(AttentionLayer::Stage(idx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: (usize, usize),
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Stride of the first block of each stage.
    pub stage_strides: Vec<usize>,
    pub residual: bool,
    pub num_classes: usize,
    pub attention_layer: AttentionLayer,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: (32, 32),
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            stage_strides: vec![1, 2, 2],
            residual: true,
            num_classes: 10,
            attention_layer: AttentionLayer::Last,
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }

    /// Spatial size of the last convolutional output.
    pub fn last_size(&self) -> (usize, usize) {
        let s = self.total_stride();
        (self.input_size.0 / s, self.input_size.1 / s)
    }

    pub fn last_channels(&self) -> usize {
        *self.widths.last().expect("validated config has stages")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_channels != 3 {
            return bad(format!("input_channels must be 3 (RGB), got {}", self.input_channels));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be a non-empty list of positive channel counts".into());
        }
        if self.stage_strides.len() != self.widths.len() {
            return bad(format!(
                "stage_strides has {} entries but widths has {}",
                self.stage_strides.len(),
                self.widths.len()
            ));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return bad("stage strides must be 1 or 2".into());
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        let s = self.total_stride();
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return bad(format!("input size {h}x{w} is not divisible by the total stride {s}"));
        }
        if let AttentionLayer::Stage(i) = self.attention_layer {
            if i + 1 >= self.widths.len() {
                return bad(format!(
                    "attention stage {i} must precede the last stage (use `last` instead)"
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<(Conv, BatchNorm)>,
}

impl Block {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, residual: bool) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.tape.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = if residual {
            let skip = match &self.shortcut {
                Some((conv, bn)) => {
                    let s = conv.forward(ctx, x)?;
                    bn.forward(ctx, s)?
                }
                None => x,
            };
            ctx.tape.add(h, skip)?
        } else {
            h
        };
        ctx.tape.relu(h)
    }
}

/// Per-stage outputs of one backbone pass.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub stages: Vec<Var>,
}

impl StageOutputs {
    pub fn last(&self) -> Var {
        *self.stages.last().expect("at least one stage")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Vec<Block>>,
    head: Linear,
}

impl Backbone {
    pub fn init<T: Scalar>(config: &BackboneConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let w0 = config.widths[0];
        let stem = Conv::init(store, rng, "backbone.stem.conv", config.input_channels, w0, 3, 1, 1, false);
        let stem_bn = BatchNorm::init(store, "backbone.stem.bn", w0);
        let mut cin = w0;
        let mut stages = Vec::with_capacity(config.widths.len());
        for (si, (&width, &stride)) in config.widths.iter().zip(&config.stage_strides).enumerate() {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for bi in 0..config.blocks_per_stage {
                let name = format!("backbone.stage{si}.block{bi}");
                let s = if bi == 0 { stride } else { 1 };
                let conv1 = Conv::init(store, rng, &format!("{name}.conv1"), cin, width, 3, s, 1, false);
                let bn1 = BatchNorm::init(store, &format!("{name}.bn1"), width);
                let conv2 = Conv::init(store, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, false);
                let bn2 = BatchNorm::init(store, &format!("{name}.bn2"), width);
                let shortcut = (config.residual && (s != 1 || cin != width)).then(|| {
                    (
                        Conv::init(store, rng, &format!("{name}.shortcut.conv"), cin, width, 1, s, 0, false),
                        BatchNorm::init(store, &format!("{name}.shortcut.bn"), width),
                    )
                });
                blocks.push(Block {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut,
                });
                cin = width;
            }
            stages.push(blocks);
        }
        let head = Linear::init(store, rng, "backbone.head", cin, config.num_classes);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stem_bn,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn check_input<T: Scalar>(&self, ctx: &Ctx<'_, T>, images: Var) -> Result<()> {
        let (h, w) = self.config.input_size;
        match ctx.tape.shape(images) {
            [_, c, ih, iw] if *c == self.config.input_channels && *ih == h && *iw == w => Ok(()),
            s => Err(Error::shape(
                "forward_features",
                format!("expected [B,{},{h},{w}], got {s:?}", self.config.input_channels),
            )),
        }
    }

    /// Runs stem and all stages on `[B,3,h,w]` input.
    pub fn forward_stages<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<StageOutputs> {
        self.check_input(ctx, images)?;
        let x = self.stem.forward(ctx, images)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let mut x = ctx.tape.relu(x)?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for blocks in &self.stages {
            for block in blocks {
                x = block.forward(ctx, x, self.config.residual)?;
            }
            stages.push(x);
        }
        Ok(StageOutputs { stages })
    }

    /// Continues from the output of stage `from` through the remaining stages.
    pub fn resume<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, mut x: Var, from: usize) -> Result<Var> {
        for blocks in &self.stages[from + 1..] {
            for block in blocks {
                x = block.forward(ctx, x, self.config.residual)?;
            }
        }
        Ok(x)
    }

    /// Global average pool followed by the linear head.
    pub fn classify<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, features: Var) -> Result<Var> {
        let pooled = ctx.tape.global_avg_pool(features)?;
        self.head.forward(ctx, pooled)
    }
}
