//! Linear operation tape for reverse-mode differentiation.
//!
//! Every differentiable op appends one node holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] walks the
//! nodes in reverse execution order exactly once and then marks the tape
//! consumed: a second call is rejected with [`Error::TapeConsumed`].

use super::kernels::{self, ConvGeom, MaxPoolGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean (row 0) and variance (row 1) of a batch-norm layer, shape `[2, C]`.
pub type RunningStats<T> = Tensor<T>;

#[derive(Debug, Clone, Copy)]
pub struct BatchNormOpts {
    pub train: bool,
    /// Only consulted in train mode.
    pub update_running: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormOpts {
    fn default() -> Self {
        BatchNormOpts {
            train: true,
            update_running: true,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bilinear {
        x: Var,
    },
    AvgPoolDown {
        x: Var,
        fh: usize,
        fw: usize,
    },
    Sum {
        x: Var,
    },
    MinMaxNormalize {
        x: Var,
        scale: Vec<T>,
    },
    MulPlane {
        x: Var,
        plane: Var,
    },
    WeightedChannelSum {
        w: Var,
        f: Var,
    },
    Attend {
        cam: Var,
        f: Var,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x }
            | Op::GlobalAvgPool { x }
            | Op::Softmax { x }
            | Op::MaxPool { x, .. }
            | Op::Bilinear { x }
            | Op::AvgPoolDown { x, .. }
            | Op::Sum { x }
            | Op::MinMaxNormalize { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MulPlane { x, plane } => vec![*x, *plane],
            Op::WeightedChannelSum { w, f } => vec![*w, *f],
            Op::Attend { cam, f } => vec![*cam, *f],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    norm_stats: Vec<(T, T)>,
    frozen_norm: Option<Vec<(T, T)>>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        _ => Err(Error::shape(op, format!("expected [B,C,H,W], got {shape:?}"))),
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            norm_stats: Vec::new(),
            frozen_norm: None,
        }
    }

    /// A tape that records values only; `backward` on it is rejected.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Replays previously recorded `(min, range)` pairs in `minmax_normalize`
    /// instead of measuring them. Used to check gradients against finite
    /// differences of the function they actually describe.
    pub fn with_frozen_normalization(mut self, stats: Vec<(T, T)>) -> Self {
        self.frozen_norm = Some(stats);
        self
    }

    /// Every `(min, range)` pair used by `minmax_normalize` so far, plane by plane.
    pub fn normalization_stats(&self) -> &[(T, T)] {
        &self.norm_stats
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records an input; it participates in gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled && tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.grad_enabled && op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    // ----- convolution and normalization -----

    /// Cross-correlation over `[B,C,H,W]` (or unbatched `[C,H,W]`) input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (batch, cin, h, wd, unbatched) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w, true),
            [b, c, h, w] => (*b, *c, *h, *w, false),
            _ => return Err(Error::shape("conv2d", format!("input must be rank 3 or 4, got {xs:?}"))),
        };
        let (cout, wcin, kh, kw) = dims4("conv2d", &ws)?;
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight {ws:?} expects {wcin}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{cout}]", self.shape(b)),
                ));
            }
        }
        let geom = ConvGeom {
            batch,
            in_channels: cin,
            height: h,
            width: wd,
            out_channels: cout,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (wd + 2 * padding - kw) / stride + 1,
        };
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = if unbatched {
            vec![cout, geom.out_h, geom.out_w]
        } else {
            vec![batch, cout, geom.out_h, geom.out_w]
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }))
    }

    /// Per-channel batch normalization of `[B,C,H,W]` or `[B,C]` input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats<T>,
        opts: BatchNormOpts,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let xs = self.shape(x).to_vec();
        let (batch, channels, plane) = match xs.as_slice() {
            [b, c] => (*b, *c, 1),
            [b, c, h, w] => (*b, *c, h * w),
            _ => return Err(Error::shape("batch_norm", format!("expected [B,C] or [B,C,H,W], got {xs:?}"))),
        };
        if batch == 0 {
            return Err(Error::invalid("batch_norm", "empty batch"));
        }
        if opts.eps <= 0.0 {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        same_shape("batch_norm", self.shape(gamma), &[channels])?;
        same_shape("batch_norm", self.shape(beta), &[channels])?;
        same_shape("batch_norm", running.shape(), &[2, channels])?;
        let eps = T::from_f64(opts.eps);
        let mut updated = None;
        let (mean, var) = if opts.train {
            let (mean, var) = kernels::channel_moments(self.value(x).data(), batch, channels, plane);
            if opts.update_running {
                // Running variance tracks the unbiased estimate.
                let m = T::from_f64(opts.momentum);
                let count = batch * plane;
                let unbias = if count > 1 {
                    T::from_f64(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let mut next = running.clone();
                let stats = next.data_mut();
                for c in 0..channels {
                    stats[c] = (T::one() - m) * stats[c] + m * mean[c];
                    stats[channels + c] = (T::one() - m) * stats[channels + c] + m * var[c] * unbias;
                }
                updated = Some(next);
            }
            (mean, var)
        } else {
            let stats = running.data();
            (stats[..channels].to_vec(), stats[channels..].to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    let n = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = n;
                    out[i] = g[c] * n + bt[c];
                }
            }
        }
        let value = Tensor::new(&xs, out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: opts.train,
            },
        );
        Ok((var, updated))
    }

    // ----- elementwise -----

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(v, Op::Relu { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p + q)
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&p, &q)| p * q)
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(v, Op::Sum { x }))
    }

    // ----- pooling and resampling -----

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("global_avg_pool", self.shape(x))?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let xv = self.value(x).data();
        let data = (0..b * c)
            .map(|i| xv[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[b, c], data)?;
        Ok(self.push(v, Op::GlobalAvgPool { x }))
    }

    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("max_pool", self.shape(x))?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(Error::invalid(
                "max_pool",
                format!("kernel {kernel} stride {stride} on {h}x{w}"),
            ));
        }
        let g = MaxPoolGeom {
            planes: b * c,
            height: h,
            width: w,
            kernel,
            stride,
            out_h: (h - kernel) / stride + 1,
            out_w: (w - kernel) / stride + 1,
        };
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &g);
        let v = Tensor::new(&[b, c, g.out_h, g.out_w], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    /// Half-pixel (align-corners off) bilinear resize of every plane.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("bilinear_resize", self.shape(x))?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "empty output size"));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), b * c, h, w, out_h, out_w);
        let v = Tensor::new(&[b, c, out_h, out_w], out)?;
        Ok(self.push(v, Op::Bilinear { x }))
    }

    /// Non-overlapping average pooling by integer factors.
    pub fn avg_pool_down(&mut self, x: Var, fh: usize, fw: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("avg_pool_down", self.shape(x))?;
        if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
            return Err(Error::invalid(
                "avg_pool_down",
                format!("{h}x{w} is not divisible by {fh}x{fw}"),
            ));
        }
        let out = kernels::avg_pool_down(self.value(x).data(), b * c, h, w, fh, fw);
        let v = Tensor::new(&[b, c, h / fh, w / fw], out)?;
        Ok(self.push(v, Op::AvgPoolDown { x, fh, fw }))
    }

    // ----- classification head -----

    /// `y = x W^T + b` with `x: [B,I]`, `W: [O,I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (batch, inp) = match self.shape(x) {
            [b, i] => (*b, *i),
            s => return Err(Error::shape("linear", format!("input must be [B,I], got {s:?}"))),
        };
        let (out, winp) = match self.shape(w) {
            [o, i] => (*o, *i),
            s => return Err(Error::shape("linear", format!("weight must be [O,I], got {s:?}"))),
        };
        if winp != inp {
            return Err(Error::shape("linear", format!("input width {inp}, weight expects {winp}")));
        }
        if let Some(b) = b {
            same_shape("linear", self.shape(b), &[out])?;
        }
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            1,
            inp as isize,
            T::one(),
            &mut y,
            out as isize,
            1,
        );
        let v = Tensor::new(&[batch, out], y)?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().expect("tensors have rank >= 1");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            softmax_in_place(row);
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Softmax { x }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (batch, k) = match self.shape(logits) {
            [b, k] => (*b, *k),
            s => return Err(Error::shape("cross_entropy", format!("logits must be [B,K], got {s:?}"))),
        };
        if labels.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: k,
            });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + (lse - row[label]);
            softmax_in_place(row);
        }
        let v = Tensor::scalar(loss / T::from_f64(batch as f64));
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ----- attention-branch primitives -----

    /// Min-max rescales every `[H,W]` plane to `[0,1]`; constant planes map to 0.
    /// The per-plane min and range are constants for differentiation.
    pub fn minmax_normalize(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("minmax_normalize", self.shape(x))?;
        let plane = h * w;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); xv.len()];
        let mut scale = Vec::with_capacity(b * c);
        for p in 0..b * c {
            let src = &xv[p * plane..(p + 1) * plane];
            let (lo, range) = match &self.frozen_norm {
                Some(frozen) => *frozen.get(self.norm_stats.len()).ok_or_else(|| {
                    Error::invalid("minmax_normalize", "ran out of frozen normalization stats")
                })?,
                None => kernels::plane_min_range(src),
            };
            self.norm_stats.push((lo, range));
            if range > T::zero() {
                for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(src) {
                    *o = (v - lo) / range;
                }
                scale.push(T::one() / range);
            } else {
                scale.push(T::zero());
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::MinMaxNormalize { x, scale }))
    }

    /// `x[b,c] * plane[b,0]`, broadcasting one plane over all channels.
    pub fn mul_plane(&mut self, x: Var, plane: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("mul_plane", self.shape(x))?;
        same_shape("mul_plane", self.shape(plane), &[b, 1, h, w])?;
        let n = h * w;
        let xv = self.value(x).data();
        let pv = self.value(plane).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let p = &pv[bi * n..(bi + 1) * n];
            for ci in 0..c {
                let off = (bi * c + ci) * n;
                for i in 0..n {
                    out[off + i] = xv[off + i] * p[i];
                }
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::MulPlane { x, plane }))
    }

    /// `sum_k weights[b,k] * features[b,k]` giving `[B,1,H,W]`.
    pub fn weighted_channel_sum(&mut self, weights: Var, features: Var) -> Result<Var> {
        let (b, n, h, w) = dims4("weighted_channel_sum", self.shape(features))?;
        same_shape("weighted_channel_sum", self.shape(weights), &[b, n])?;
        let plane = h * w;
        let wv = self.value(weights).data();
        let fv = self.value(features).data();
        let mut out = vec![T::zero(); b * plane];
        for bi in 0..b {
            let dst = &mut out[bi * plane..(bi + 1) * plane];
            for k in 0..n {
                let wk = wv[bi * n + k];
                let src = &fv[(bi * n + k) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + wk * s;
                }
            }
        }
        let v = Tensor::new(&[b, 1, h, w], out)?;
        Ok(self.push(v, Op::WeightedChannelSum { w: weights, f: features }))
    }

    /// `(1 + cam) * features`, broadcasting the single-channel map over channels.
    pub fn attend(&mut self, cam: Var, features: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("attend", self.shape(features))?;
        same_shape("attend", self.shape(cam), &[b, 1, h, w])?;
        let n = h * w;
        let cv = self.value(cam).data();
        let fv = self.value(features).data();
        let mut out = vec![T::zero(); fv.len()];
        for bi in 0..b {
            let m = &cv[bi * n..(bi + 1) * n];
            for ci in 0..c {
                let off = (bi * c + ci) * n;
                for i in 0..n {
                    out[off + i] = (T::one() + m[i]) * fv[off + i];
                }
            }
        }
        let v = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(v, Op::Attend { cam, f: features }))
    }

    // ----- reverse pass -----

    /// Reverse-mode gradients of a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::GradDisabled);
        }
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if let Op::Leaf = op {
                let shape = self.nodes[i].value.shape().to_vec();
                result[i] = Some(Tensor::new(&shape, dy)?);
                continue;
            }
            self.backward_op(i, op, dy, &mut grads);
        }
        Ok(Gradients { grads: result })
    }

    fn backward_op(&self, node: usize, op: Op<T>, dy: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let out = &self.nodes[node].value;
        match op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Conv2d { x, w, b, geom, cols } => {
                let r = kernels::conv2d_backward(&dy, self.value(w).data(), &cols, &geom, self.needs(x));
                if self.needs(x) {
                    accumulate(&mut grads[x.0], r.dx);
                }
                if self.needs(w) {
                    accumulate(&mut grads[w.0], r.dweight);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    accumulate(&mut grads[b.0], r.dbias);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let channels = inv_std.len();
                let batch = out.shape()[0];
                let plane = out.numel() / (batch * channels);
                let g = self.value(gamma).data();
                let mut dgamma = vec![T::zero(); channels];
                let mut dbeta = vec![T::zero(); channels];
                for bi in 0..batch {
                    for c in 0..channels {
                        let off = (bi * channels + c) * plane;
                        for i in off..off + plane {
                            dgamma[c] = dgamma[c] + dy[i] * xhat[i];
                            dbeta[c] = dbeta[c] + dy[i];
                        }
                    }
                }
                if self.needs(x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    let m = T::from_f64((batch * plane) as f64);
                    for c in 0..channels {
                        let k = g[c] * inv_std[c];
                        for bi in 0..batch {
                            let off = (bi * channels + c) * plane;
                            for i in off..off + plane {
                                dx[i] = if train {
                                    k / m * (m * dy[i] - dbeta[c] - xhat[i] * dgamma[c])
                                } else {
                                    k * dy[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if self.needs(beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
            Op::Relu { x } => {
                let dx = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(x);
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::from_f64(plane as f64);
                let mut dx = Vec::with_capacity(plane * dy.len());
                for &g in &dy {
                    dx.extend(std::iter::repeat_n(g * inv, plane));
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Softmax { x } => {
                let k = *out.shape().last().unwrap();
                let mut dx = vec![T::zero(); dy.len()];
                for ((d, y), g) in dx.chunks_mut(k).zip(out.data().chunks(k)).zip(dy.chunks(k)) {
                    let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        d[j] = y[j] * (g[j] - dot);
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let k = probs.len() / batch;
                let scale = dy[0] / T::from_f64(batch as f64);
                let mut dx = probs;
                for (row, &label) in dx.chunks_mut(k).zip(&labels) {
                    row[label] = row[label] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                accumulate(&mut grads[logits.0], dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (&i, &g) in argmax.iter().zip(&dy) {
                    dx[i] = dx[i] + g;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.needs(b) {
                    accumulate(&mut grads[b.0], dy);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da = dy.iter().zip(self.value(b).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(b) {
                    let db = dy.iter().zip(self.value(a).data()).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, inp) = (self.shape(x)[0], self.shape(x)[1]);
                let outn = self.shape(w)[0];
                if self.needs(x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(
                        batch,
                        outn,
                        inp,
                        T::one(),
                        &dy,
                        outn as isize,
                        1,
                        self.value(w).data(),
                        inp as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        inp as isize,
                        1,
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(w) {
                    let mut dw = vec![T::zero(); outn * inp];
                    T::gemm(
                        outn,
                        batch,
                        inp,
                        T::one(),
                        &dy,
                        1,
                        outn as isize,
                        self.value(x).data(),
                        inp as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        inp as isize,
                        1,
                    );
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); outn];
                    for row in dy.chunks(outn) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Bilinear { x } => {
                let (b, c, h, w) = dims4("bilinear", self.shape(x)).unwrap();
                let (oh, ow) = (out.shape()[2], out.shape()[3]);
                accumulate(&mut grads[x.0], kernels::bilinear_backward(&dy, b * c, h, w, oh, ow));
            }
            Op::AvgPoolDown { x, fh, fw } => {
                let (b, c, h, w) = dims4("avg_pool_down", self.shape(x)).unwrap();
                let (oh, ow) = (h / fh, w / fw);
                let inv = T::one() / T::from_f64((fh * fw) as f64);
                let mut dx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[p * h * w + y * w + xx] = dy[p * oh * ow + (y / fh) * ow + xx / fw] * inv;
                        }
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sum { x } => {
                accumulate(&mut grads[x.0], vec![dy[0]; self.value(x).numel()]);
            }
            Op::MinMaxNormalize { x, scale } => {
                let plane = dy.len() / scale.len();
                let dx = dy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * scale[i / plane])
                    .collect();
                accumulate(&mut grads[x.0], dx);
            }
            Op::MulPlane { x, plane } => {
                let (b, c, h, w) = dims4("mul_plane", self.shape(x)).unwrap();
                let n = h * w;
                let xv = self.value(x).data();
                let pv = self.value(plane).data();
                if self.needs(x) {
                    let mut dx = vec![T::zero(); dy.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * n;
                            for i in 0..n {
                                dx[off + i] = dy[off + i] * pv[bi * n + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                if self.needs(plane) {
                    let mut dp = vec![T::zero(); b * n];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * n;
                            for i in 0..n {
                                dp[bi * n + i] = dp[bi * n + i] + dy[off + i] * xv[off + i];
                            }
                        }
                    }
                    accumulate(&mut grads[plane.0], dp);
                }
            }
            Op::WeightedChannelSum { w, f } => {
                let (b, n, h, wd) = dims4("weighted_channel_sum", self.shape(f)).unwrap();
                let plane = h * wd;
                let wv = self.value(w).data();
                let fv = self.value(f).data();
                if self.needs(w) {
                    let mut dw = vec![T::zero(); b * n];
                    for bi in 0..b {
                        let g = &dy[bi * plane..(bi + 1) * plane];
                        for k in 0..n {
                            let src = &fv[(bi * n + k) * plane..][..plane];
                            dw[bi * n + k] = g.iter().zip(src).map(|(&a, &s)| a * s).sum();
                        }
                    }
                    accumulate(&mut grads[w.0], dw);
                }
                if self.needs(f) {
                    let mut df = vec![T::zero(); fv.len()];
                    for bi in 0..b {
                        let g = &dy[bi * plane..(bi + 1) * plane];
                        for k in 0..n {
                            let wk = wv[bi * n + k];
                            for (d, &gv) in df[(bi * n + k) * plane..][..plane].iter_mut().zip(g) {
                                *d = wk * gv;
                            }
                        }
                    }
                    accumulate(&mut grads[f.0], df);
                }
            }
            Op::Attend { cam, f } => {
                let (b, c, h, w) = dims4("attend", self.shape(f)).unwrap();
                let n = h * w;
                let cv = self.value(cam).data();
                let fv = self.value(f).data();
                if self.needs(f) {
                    let mut df = vec![T::zero(); dy.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * n;
                            for i in 0..n {
                                df[off + i] = (T::one() + cv[bi * n + i]) * dy[off + i];
                            }
                        }
                    }
                    accumulate(&mut grads[f.0], df);
                }
                if self.needs(cam) {
                    let mut dc = vec![T::zero(); b * n];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * n;
                            for i in 0..n {
                                dc[bi * n + i] = dc[bi * n + i] + dy[off + i] * fv[off + i];
                            }
                        }
                    }
                    accumulate(&mut grads[cam.0], dc);
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
