//! Signal-to-image preprocessing shared by the reconstructor and localizer:
//! complex vectors become two-channel (re, im) planes, which are normalized,
//! bilinearly upsampled, and expanded to three channels by a learned 1×1 conv.

use num_complex::Complex32;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, NodeId, ParamStore, Tensor};

/// A channels × height × width image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl TensorImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(TensorImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Splits `v` into a (2, rows, cols) image: channel 0 holds the real parts
/// and channel 1 the imaginary parts, each reshaped row-major.
pub fn complex_to_image(v: &[Complex32], rows: usize, cols: usize) -> Result<TensorImage> {
    if rows * cols != v.len() || rows == 0 {
        return Err(Error::Shape(format!(
            "cannot reshape {} values to {rows}x{cols}",
            v.len()
        )));
    }
    let mut data = Vec::with_capacity(2 * v.len());
    data.extend(v.iter().map(|c| c.re));
    data.extend(v.iter().map(|c| c.im));
    TensorImage::new(2, rows, cols, data)
}

/// Inverse of [`complex_to_image`].
pub fn image_to_complex(t: &TensorImage) -> Result<Vec<Complex32>> {
    if t.channels != 2 {
        return Err(Error::Shape(format!("expected 2 channels, got {}", t.channels)));
    }
    Ok(t.plane(0).iter().zip(t.plane(1)).map(|(&re, &im)| Complex32::new(re, im)).collect())
}

/// BS signal as a (2, m1, m2) image, before normalization.
pub fn preprocess_bs(y: &[Complex32], m1: usize, m2: usize) -> Result<TensorImage> {
    complex_to_image(y, m1, m2)
}

/// RIS signal as a (2, n1, n2) image, before normalization.
pub fn preprocess_ris(y_r: &[Complex32], n1: usize, n2: usize) -> Result<TensorImage> {
    complex_to_image(y_r, n1, n2)
}

/// Bilinear interpolation with aligned corners: output pixel `i` samples the
/// input at `i · (h − 1) / (H − 1)`, so the four corners are copied exactly.
pub fn upsample(t: &TensorImage, out_h: usize, out_w: usize) -> Result<TensorImage> {
    let (c, h, w) = t.shape();
    if out_h < h || out_w < w {
        return Err(Error::Shape(format!(
            "upsample target {out_h}x{out_w} is smaller than input {h}x{w}"
        )));
    }
    let ys = axis_weights(h, out_h);
    let xs = axis_weights(w, out_w);
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let src = t.plane(ch);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = src[y0 * w + x0] as f64 * (1.0 - fx) + src[y0 * w + x1] as f64 * fx;
                let bottom = src[y1 * w + x0] as f64 * (1.0 - fx) + src[y1 * w + x1] as f64 * fx;
                data.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    TensorImage::new(c, out_h, out_w, data)
}

fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let pos = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Stacks same-shaped images into a (B, C, H, W) tensor.
pub fn stack(images: &[TensorImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for im in images {
        if im.shape() != (c, h, w) {
            return Err(Error::Shape(format!("image shape {:?} differs from {:?}", im.shape(), (c, h, w))));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics of each channel over all pixels of all images.
    pub fn fit(images: &[TensorImage]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptySplit("no images to fit statistics".into()))?;
        let c = first.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for im in images {
            if im.channels != c {
                return Err(Error::Shape("channel count varies across images".into()));
            }
            for (ch, (s, q)) in sum.iter_mut().zip(&mut sq).enumerate() {
                for &v in im.plane(ch) {
                    *s += v as f64;
                    *q += (v as f64) * (v as f64);
                }
            }
            count += im.height * im.width;
        }
        Ok(Self::from_moments(&sum, &sq, count))
    }

    /// Statistics of each column of row vectors.
    pub fn fit_columns(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptySplit("no rows to fit statistics".into()))?;
        let d = first.len();
        let mut sum = vec![0.0f64; d];
        let mut sq = vec![0.0f64; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape("row length varies".into()));
            }
            for (k, &v) in r.iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        Ok(Self::from_moments(&sum, &sq, rows.len()))
    }

    fn from_moments(sum: &[f64], sq: &[f64], count: usize) -> Self {
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                let s = var.sqrt();
                if s > 1e-12 * m.abs() && s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn normalize_image(&self, t: &TensorImage) -> Result<TensorImage> {
        self.check(t.channels)?;
        let n = t.height * t.width;
        let data = t
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / n;
                ((v as f64 - self.mean[c]) / self.std[c]) as f32
            })
            .collect();
        TensorImage::new(t.channels, t.height, t.width, data)
    }

    pub fn normalize(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len())?;
        Ok(v.iter().enumerate().map(|(k, x)| (x - self.mean[k]) / self.std[k]).collect())
    }

    pub fn denormalize(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v.len())?;
        Ok(v.iter().enumerate().map(|(k, x)| x * self.std[k] + self.mean[k]).collect())
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::Shape(format!("statistics cover {} channels, input has {n}", self.len())));
        }
        Ok(())
    }
}

/// Interleaves a complex vector as (re₀, im₀, re₁, im₁, …).
pub fn interleave(v: &[Complex32]) -> Vec<f64> {
    v.iter().flat_map(|c| [c.re as f64, c.im as f64]).collect()
}

/// Inverse of [`interleave`].
pub fn deinterleave(v: &[f64]) -> Vec<Complex32> {
    v.chunks_exact(2).map(|p| Complex32::new(p[0] as f32, p[1] as f32)).collect()
}

/// The learned 2 → 3 channel 1×1 convolution in front of every backbone.
#[derive(Debug, Clone)]
pub struct ChannelExpansion {
    pub conv: Conv2d,
}

impl ChannelExpansion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        ChannelExpansion {
            conv: Conv2d::new(store, name, 2, 3, 1, 1, 0, true, None, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let c = g.value(x).shape().get(1).copied().unwrap_or(0);
        if g.value(x).shape().len() != 4 || c != 2 {
            return Err(Error::Shape(format!("channel expansion needs 2 input channels, got shape {:?}", g.value(x).shape())));
        }
        Ok(self.conv.forward(g, x))
    }

    /// Applies the expansion to a single image outside of training.
    pub fn apply(&self, store: &ParamStore, t: &TensorImage) -> Result<TensorImage> {
        let mut g = Graph::inference(store);
        let x = g.input(stack(std::slice::from_ref(t))?);
        let y = self.forward(&mut g, x)?;
        let out = g.value(y);
        let (_, c, h, w) = out.dims4();
        TensorImage::new(c, h, w, out.data().to_vec())
    }
}
