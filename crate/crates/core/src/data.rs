//! Labeled image datasets: the packed binary format and the synthetic blob generator.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PACKED_MAGIC: &[u8; 4] = b"LFID";
pub const PACKED_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 2;

/// Axis-aligned box in continuous pixel coordinates; a pixel belongs to it
/// when its center `(x + 0.5, y + 0.5)` does.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
        cx >= self.x0 && cx <= self.x1 && cy >= self.y0 && cy <= self.y1
    }

    pub fn within(&self, w: usize, h: usize) -> bool {
        self.x0 >= 0.0 && self.y0 >= 0.0 && self.x1 <= w as f64 && self.y1 <= h as f64 && self.x0 < self.x1 && self.y0 < self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `[3,h,w]`, values in `[0,1]`.
    pub pixels: Tensor<f32>,
    pub label: usize,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub items: Vec<LabeledImage>,
}

impl Dataset {
    pub fn empty(height: usize, width: usize, num_classes: usize) -> Self {
        Dataset {
            height,
            width,
            num_classes,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    /// Stacks the images at `indices` into `[B,3,h,w]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let plane = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let item = self.items.get(i).ok_or_else(|| {
                Error::invalid("batch", format!("index {i} out of range for {} images", self.len()))
            })?;
            data.extend_from_slice(item.pixels.data());
            labels.push(item.label);
        }
        let t = Tensor::new(&[indices.len(), 3, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Splits off the first `n` items as one dataset and the rest as another.
    pub fn split_at(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.items.split_off(n.min(self.items.len()));
        let tail = Dataset {
            items: rest,
            ..Dataset::empty(self.height, self.width, self.num_classes)
        };
        (self, tail)
    }
}

/// Byte quantization with round-half-up: `floor(x * 255 + 0.5)`, clamped.
pub fn quantize(x: f64) -> u8 {
    (x * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

pub fn encode_packed(data: &Dataset) -> Result<Vec<u8>> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::invalid("encode_packed", format!("{what} {v} exceeds u16")))
    };
    let count = u32::try_from(data.len()).map_err(|_| Error::invalid("encode_packed", "too many records"))?;
    let (h, w) = (dim(data.height, "height")?, dim(data.width, "width")?);
    let k = dim(data.num_classes, "class count")?;
    let plane = 3 * data.height * data.width;
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * (1 + plane));
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&PACKED_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for (i, item) in data.items.iter().enumerate() {
        if item.label >= data.num_classes || item.label > 255 {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: item.label,
                classes: data.num_classes,
            });
        }
        if item.pixels.shape() != [3, data.height, data.width] {
            return Err(Error::shape(
                "encode_packed",
                format!("record {i} has shape {:?}", item.pixels.shape()),
            ));
        }
        out.push(item.label as u8);
        out.extend(item.pixels.data().iter().map(|&v| quantize(v as f64)));
    }
    Ok(out)
}

pub fn decode_packed(bytes: &[u8]) -> Result<Dataset> {
    let fmt = |offset: usize, detail: String| Error::Format {
        what: "packed dataset",
        offset,
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != PACKED_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != PACKED_VERSION {
        return Err(Error::Version {
            what: "packed dataset",
            found: version as u32,
            expected: PACKED_VERSION as u32,
        });
    }
    let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let (h, w, k) = (u16_at(10) as usize, u16_at(12) as usize, u16_at(14) as usize);
    if h == 0 || w == 0 {
        return Err(fmt(10, format!("image dims {h}x{w} must be positive")));
    }
    let plane = 3 * h * w;
    let record = 1 + plane;
    let needed = HEADER_LEN + count * record;
    if bytes.len() != needed {
        let offset = bytes.len().min(needed);
        return Err(fmt(
            offset,
            format!("{count} records of {record} bytes need {needed} bytes, file has {}", bytes.len()),
        ));
    }
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_LEN + i * record;
        let label = bytes[off] as usize;
        if label >= k {
            return Err(fmt(off, format!("record {i} label {label} is not below class count {k}")));
        }
        let pixels = bytes[off + 1..off + record].iter().map(|&b| dequantize(b)).collect();
        items.push(LabeledImage {
            pixels: Tensor::new(&[3, h, w], pixels)?,
            label,
            bbox: None,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        num_classes: k,
        items,
    })
}

pub fn save_packed(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_packed(data)?).map_err(|e| Error::io(path, e))
}

pub fn load_packed(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_packed(&bytes)
}

/// Ground-truth boxes as `index,x0,y0,x1,y1` lines, one per boxed record.
pub fn encode_boxes(data: &Dataset) -> String {
    let mut s = String::new();
    for (i, item) in data.items.iter().enumerate() {
        if let Some(b) = item.bbox {
            s.push_str(&format!("{i},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
        }
    }
    s
}

/// Attaches boxes parsed from `encode_boxes` output to `data`.
pub fn apply_boxes(data: &mut Dataset, text: &str) -> Result<()> {
    let bad = |line: usize, detail: String| Error::Format {
        what: "box list",
        offset: line,
        detail,
    };
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(bad(ln + 1, format!("expected 5 fields, got {}", fields.len())));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| bad(ln + 1, format!("bad index `{}`", fields[0])))?;
        let mut c = [0.0; 4];
        for (v, f) in c.iter_mut().zip(&fields[1..]) {
            *v = f.parse().map_err(|_| bad(ln + 1, format!("bad coordinate `{f}`")))?;
        }
        let b = BBox {
            x0: c[0],
            y0: c[1],
            x1: c[2],
            y1: c[3],
        };
        if !b.within(data.width, data.height) {
            return Err(bad(ln + 1, format!("box {b:?} leaves the image")));
        }
        let item = data
            .items
            .get_mut(index)
            .ok_or_else(|| bad(ln + 1, format!("index {index} out of range")))?;
        item.bbox = Some(b);
    }
    Ok(())
}

/// Parameters of the synthetic blob task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobParams {
    /// Background noise is uniform in `[0, noise]`.
    pub noise: f64,
    /// Blob standard deviation as a fraction of `min(h, w)`.
    pub sigma: (f64, f64),
    /// Per-channel peak brightness range.
    pub peak: (f64, f64),
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            noise: 0.15,
            sigma: (0.06, 0.09),
            peak: (0.6, 1.0),
        }
    }
}

/// Two-class blob dataset: class 0 has its blob in the left half, class 1 in
/// the right half. Each box is the blob's 2-sigma square, strictly inside its half.
pub fn generate_synthetic_blobs(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    generate_blobs_with(n, h, w, seed, BlobParams::default())
}

pub fn generate_blobs_with(n: usize, h: usize, w: usize, seed: u64, params: BlobParams) -> Result<Dataset> {
    if h < 16 || w < 16 {
        return Err(Error::invalid(
            "generate_synthetic_blobs",
            format!("images must be at least 16x16, got {h}x{w}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = w as f64 / 2.0;
    let short = h.min(w) as f64;
    let margin = 0.5;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sigma = rng.random_range(params.sigma.0..=params.sigma.1) * short;
        let reach = 2.0 * sigma;
        let (lo, hi) = if label == 0 { (0.0, half) } else { (half, w as f64) };
        let cx = rng.random_range(lo + reach + margin..hi - reach - margin);
        let cy = rng.random_range(reach + margin..h as f64 - reach - margin);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(params.peak.0..=params.peak.1));
        let mut pixels = vec![0.0f32; 3 * h * w];
        for (c, &peak) in color.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let blob = peak * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let v = rng.random_range(0.0..=params.noise) + blob;
                    pixels[(c * h + y) * w + x] = dequantize(quantize(v));
                }
            }
        }
        items.push(LabeledImage {
            pixels: Tensor::new(&[3, h, w], pixels)?,
            label,
            bbox: Some(BBox {
                x0: cx - reach,
                y0: cy - reach,
                x1: cx + reach,
                y1: cy + reach,
            }),
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        num_classes: 2,
        items,
    })
}
