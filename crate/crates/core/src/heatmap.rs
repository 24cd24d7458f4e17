//! Heatmap export as binary PGM (grayscale) and PPM (jet overlay), plus readers.

use std::fs;
use std::path::Path;

use crate::attention::AttentionMap;
use crate::data::quantize;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Scalar, Tensor};

/// A decoded `P5` or `P6` image: `channels` is 1 or 3, `pixels` interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pnm> {
        let mut pos = 0;
        let fail = |offset: usize, detail: &str| Error::Format {
            what: "pnm image",
            offset,
            detail: detail.to_string(),
        };
        let token = |pos: &mut usize| -> Result<(usize, String)> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if start == *pos {
                return Err(fail(start, "unexpected end of header"));
            }
            Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
        };
        let (_, magic) = token(&mut pos)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            _ => return Err(fail(0, "expected P5 or P6")),
        };
        let num = |pos: &mut usize| -> Result<usize> {
            let (at, t) = token(pos)?;
            t.parse().map_err(|_| fail(at, "expected a decimal number"))
        };
        let width = num(&mut pos)?;
        let height = num(&mut pos)?;
        let maxval_at = pos;
        let maxval = num(&mut pos)?;
        if maxval != 255 {
            return Err(fail(maxval_at, "only 8-bit images are supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let need = width * height * channels;
        if bytes.len() < pos || bytes.len() - pos != need {
            return Err(fail(pos.min(bytes.len()), "raster size does not match the header"));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            pixels: bytes[pos..].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Pnm> {
        let path = path.as_ref();
        Pnm::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// RGB image as a `[3,h,w]` tensor in `[0,1]`.
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        if self.channels != 3 {
            return Err(Error::invalid("pnm", "expected an RGB (P6) image"));
        }
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new(&[3, self.height, self.width], data)
    }

    pub fn from_tensor(image: &Tensor<f32>) -> Result<Pnm> {
        let (h, w) = match image.shape() {
            [3, h, w] => (*h, *w),
            s => return Err(Error::shape("pnm", format!("expected [3,h,w], got {s:?}"))),
        };
        let plane = h * w;
        let d = image.data();
        let pixels = (0..plane)
            .flat_map(|i| (0..3).map(move |c| quantize(d[c * plane + i] as f64)))
            .collect();
        Ok(Pnm {
            width: w,
            height: h,
            channels: 3,
            pixels,
        })
    }
}

/// Normalized map upsampled bilinearly to `h x w` and quantized to bytes.
pub fn cam_bytes<T: Scalar>(cam: &AttentionMap<T>, h: usize, w: usize) -> Vec<u8> {
    let up = kernels::bilinear_forward(cam.normalized.data(), 1, cam.height(), cam.width(), h, w);
    up.iter().map(|v| quantize(v.as_f64())).collect()
}

/// Jet-style colormap of a byte intensity.
pub fn jet(v: u8) -> [u8; 3] {
    let t = v as f64 / 255.0;
    let ch = |centre: f64| quantize((1.5 - (4.0 * t - centre).abs()).clamp(0.0, 1.0));
    [ch(3.0), ch(2.0), ch(1.0)]
}

pub fn heatmap_gray<T: Scalar>(cam: &AttentionMap<T>, h: usize, w: usize) -> Pnm {
    Pnm {
        width: w,
        height: h,
        channels: 1,
        pixels: cam_bytes(cam, h, w),
    }
}

/// Half-and-half blend of the image with the jet-colored map.
pub fn heatmap_overlay<T: Scalar>(cam: &AttentionMap<T>, base: &Tensor<f32>) -> Result<Pnm> {
    let mut img = Pnm::from_tensor(base)?;
    let heat = cam_bytes(cam, img.height, img.width);
    for (px, &v) in img.pixels.chunks_exact_mut(3).zip(&heat) {
        for (p, c) in px.iter_mut().zip(jet(v)) {
            *p = (*p as u16 + c as u16).div_ceil(2) as u8;
        }
    }
    Ok(img)
}

/// Writes a grayscale heatmap, or an overlay when `base` is given.
pub fn export_heatmap<T: Scalar>(
    cam: &AttentionMap<T>,
    base: Option<&Tensor<f32>>,
    size: (usize, usize),
    path: impl AsRef<Path>,
) -> Result<Pnm> {
    let img = match base {
        Some(b) => heatmap_overlay(cam, b)?,
        None => heatmap_gray(cam, size.0, size.1),
    };
    img.write(path)?;
    Ok(img)
}
