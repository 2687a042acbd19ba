//! Reading motion out of offset fields: per-joint features, a linear
//! displacement regressor, dense motion fields, salient-motion maps and
//! image export.

use std::f32::consts::PI;
use std::io::Write;
use std::path::Path;

use crate::dimofs::OffsetPyramid;
use crate::error::{shape_err, Error, Result};
use crate::kernels::BilinearTap;
use crate::linalg::{cholesky_solve, Mat};
use crate::tensor::Tensor;

/// Stride of pyramid level `l` (0-based).
fn stride(level: usize) -> f32 {
    (1u32 << (level + 1)) as f32
}

/// Bilinear tap at image point `(y, x)` on a level of size `h x w`, with the
/// coordinate clamped to the level's pixel-centre range (edge replication).
fn level_tap(y: f32, x: f32, level: usize, h: usize, w: usize) -> BilinearTap {
    let s = stride(level);
    let ly = ((y + 0.5) / s - 0.5).clamp(0.0, (h - 1) as f32);
    let lx = ((x + 0.5) / s - 0.5).clamp(0.0, (w - 1) as f32);
    BilinearTap::new(ly, lx, h, w)
}

fn image_size(offsets: &OffsetPyramid) -> Result<(usize, usize)> {
    let first = offsets.levels.first().ok_or_else(|| shape_err!("empty offset pyramid"))?;
    let (_, h, w) = first.dims3()?;
    Ok((2 * h, 2 * w))
}

/// `[N, D]` features: every level's offsets sampled at each point, scaled to
/// image pixels, concatenated finest level first.
pub fn extract_joint_features(offsets: &OffsetPyramid, points: &[(f32, f32)]) -> Result<Tensor> {
    let (ih, iw) = image_size(offsets)?;
    let d = offsets.feature_dim();
    let mut out = vec![0.0; points.len() * d];
    for (i, &(y, x)) in points.iter().enumerate() {
        if !(y >= 0.0 && x >= 0.0 && y <= (ih - 1) as f32 && x <= (iw - 1) as f32) {
            return Err(Error::Point(format!("({y}, {x}) outside {ih}x{iw} frame")));
        }
        let mut col = 0;
        for (l, t) in offsets.levels.iter().enumerate() {
            let (c, h, w) = t.dims3()?;
            let tap = level_tap(y, x, l, h, w);
            for ch in 0..c {
                out[i * d + col + ch] = stride(l) * tap.sample(t.plane(ch));
            }
            col += c;
        }
    }
    Tensor::new(&[points.len().max(1), d], if points.is_empty() { vec![0.0; d] } else { out })
}

/// Linear map from offset features to `(dy, dx)` displacement.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionRegressor {
    /// `[2, D]`
    pub weights: Tensor,
    /// `[2]`
    pub bias: Tensor,
}

fn to_mat(t: &Tensor) -> Result<Mat> {
    let (r, c) = t.dims2()?;
    Ok(Mat::from_rows(r, c, t.data().iter().map(|&v| v as f64).collect()))
}

/// Closed-form ridge regression on mean-centred data; the bias restores the
/// means.
pub fn fit_motion_regressor(features: &Tensor, displacements: &Tensor, lambda: f64) -> Result<MotionRegressor> {
    let mut x = to_mat(features)?;
    let mut y = to_mat(displacements)?;
    if x.rows != y.rows || y.cols != 2 {
        return Err(shape_err!("features {:?} vs displacements {:?}", features.shape(), displacements.shape()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config_key("motion.ridge", "must be non-negative"));
    }
    let xm = x.column_means();
    let ym = y.column_means();
    x.subtract_row(&xm);
    y.subtract_row(&ym);
    let mut a = x.gram();
    for i in 0..a.rows {
        a.data[i * a.cols + i] += lambda;
    }
    let b = x.transpose().matmul(&y);
    let w = cholesky_solve(&a, &b)?;
    let d = x.cols;
    let mut weights = vec![0.0f32; 2 * d];
    let mut bias = [0.0f32; 2];
    for k in 0..2 {
        let mut bk = ym[k];
        for i in 0..d {
            weights[k * d + i] = w.at(i, k) as f32;
            bk -= xm[i] * w.at(i, k);
        }
        bias[k] = bk as f32;
    }
    Ok(MotionRegressor {
        weights: Tensor::new(&[2, d], weights)?,
        bias: Tensor::new(&[2], bias.to_vec())?,
    })
}

impl MotionRegressor {
    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[N, 2]` predictions for `[N, D]` features.
    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = features.dims2()?;
        if d != self.dim() {
            return Err(shape_err!("regressor expects {} features, got {d}", self.dim()));
        }
        let w = self.weights.data();
        let mut out = vec![0.0; n * 2];
        for r in 0..n {
            let row = &features.data()[r * d..(r + 1) * d];
            for k in 0..2 {
                let dot: f64 = row.iter().zip(&w[k * d..(k + 1) * d]).map(|(&a, &b)| a as f64 * b as f64).sum();
                out[r * 2 + k] = (dot + self.bias.data()[k] as f64) as f32;
            }
        }
        Tensor::new(&[n, 2], out)
    }
}

/// Per-pixel `(dy, dx)` in image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    /// `[2, H, W]`
    pub field: Tensor,
}

/// Applies the regressor at every image pixel. The linear map is applied to
/// each level first and the two-channel result upsampled, which equals
/// upsampling all channels and then applying a 1x1 convolution.
pub fn predict_motion_field(offsets: &OffsetPyramid, reg: &MotionRegressor) -> Result<MotionField> {
    let (ih, iw) = image_size(offsets)?;
    if reg.dim() != offsets.feature_dim() {
        return Err(shape_err!("regressor expects {} features, pyramid has {}", reg.dim(), offsets.feature_dim()));
    }
    let d = reg.dim();
    let w = reg.weights.data();
    let mut field = vec![0.0f32; 2 * ih * iw];
    for k in 0..2 {
        field[k * ih * iw..(k + 1) * ih * iw].fill(reg.bias.data()[k]);
    }
    let mut col = 0;
    for (l, t) in offsets.levels.iter().enumerate() {
        let (c, h, wd) = t.dims3()?;
        let mut proj = vec![0.0f32; 2 * h * wd];
        for k in 0..2 {
            for ch in 0..c {
                let coef = w[k * d + col + ch] * stride(l);
                if coef == 0.0 {
                    continue;
                }
                for (p, &v) in proj[k * h * wd..(k + 1) * h * wd].iter_mut().zip(t.plane(ch)) {
                    *p += coef * v;
                }
            }
        }
        for y in 0..ih {
            for x in 0..iw {
                let tap = level_tap(y as f32, x as f32, l, h, wd);
                for k in 0..2 {
                    field[(k * ih + y) * iw + x] += tap.sample(&proj[k * h * wd..(k + 1) * h * wd]);
                }
            }
        }
        col += c;
    }
    Ok(MotionField {
        field: Tensor::new(&[2, ih, iw], field)?,
    })
}

/// One `(dy, dx)` offset pair of one level, upsampled to image size and
/// scaled to image pixels.
pub fn offset_channel_field(offsets: &OffsetPyramid, level: usize, pair: usize) -> Result<MotionField> {
    let (ih, iw) = image_size(offsets)?;
    let t = offsets
        .levels
        .get(level)
        .ok_or_else(|| shape_err!("level {level} of {}", offsets.levels.len()))?;
    let (c, h, w) = t.dims3()?;
    if 2 * pair + 1 >= c {
        return Err(shape_err!("offset pair {pair} of {}", c / 2));
    }
    let mut field = vec![0.0f32; 2 * ih * iw];
    for y in 0..ih {
        for x in 0..iw {
            let tap = level_tap(y as f32, x as f32, level, h, w);
            for k in 0..2 {
                field[(k * ih + y) * iw + x] = stride(level) * tap.sample(t.plane(2 * pair + k));
            }
        }
    }
    Ok(MotionField {
        field: Tensor::new(&[2, ih, iw], field)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencyReduction {
    /// Norm of the mean `(dy, dx)` vector over all offset pairs.
    MeanVectorNorm,
    /// Mean of the per-pair norms.
    MeanOfNorms,
}

impl SaliencyReduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean-vector-norm" => Some(SaliencyReduction::MeanVectorNorm),
            "mean-of-norms" => Some(SaliencyReduction::MeanOfNorms),
            _ => None,
        }
    }
}

/// `[H, W]` map of offset magnitude (image pixels), averaged over levels.
pub fn salient_motion_map(offsets: &OffsetPyramid, reduction: SaliencyReduction) -> Result<Tensor> {
    let (ih, iw) = image_size(offsets)?;
    let mut map = vec![0.0f32; ih * iw];
    let n_levels = offsets.levels.len() as f32;
    for (l, t) in offsets.levels.iter().enumerate() {
        let (c, h, w) = t.dims3()?;
        let pairs = c / 2;
        let mut mag = vec![0.0f32; h * w];
        for (p, m) in mag.iter_mut().enumerate() {
            let (mut sy, mut sx, mut sn) = (0.0f32, 0.0f32, 0.0f32);
            for q in 0..pairs {
                let dy = t.data()[(2 * q) * h * w + p];
                let dx = t.data()[(2 * q + 1) * h * w + p];
                sy += dy;
                sx += dx;
                sn += dy.hypot(dx);
            }
            let np = pairs as f32;
            *m = stride(l)
                * match reduction {
                    SaliencyReduction::MeanVectorNorm => (sy / np).hypot(sx / np),
                    SaliencyReduction::MeanOfNorms => sn / np,
                };
        }
        for y in 0..ih {
            for x in 0..iw {
                map[y * iw + x] += level_tap(y as f32, x as f32, l, h, w).sample(&mag) / n_levels;
            }
        }
    }
    Tensor::new(&[ih, iw], map)
}

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm())?;
        Ok(())
    }

    /// A `[3, H, W]` frame with values in `[0, 1]`.
    pub fn from_frame(frame: &Tensor) -> Result<Self> {
        let (c, h, w) = frame.dims3()?;
        if c != 3 {
            return Err(shape_err!("frame must have 3 channels, got {c}"));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    data.push(to_byte(frame.at3(ch, y, x)));
                }
            }
        }
        Ok(RgbImage { height: h, width: w, data })
    }

    /// A non-negative `[H, W]` map scaled so `max_value` is white.
    pub fn from_map(map: &Tensor, max_value: f32) -> Result<Self> {
        let (h, w) = map.dims2()?;
        let scale = if max_value > 0.0 { 1.0 / max_value } else { 0.0 };
        let data = map.data().iter().flat_map(|&v| [to_byte(v * scale); 3]).collect();
        Ok(RgbImage { height: h, width: w, data })
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Flow colour coding: hue from direction, saturation from magnitude
/// relative to `max_magnitude`, full value, so zero motion is white.
pub fn render_motion_field(field: &MotionField, max_magnitude: f32) -> Result<RgbImage> {
    if !(max_magnitude > 0.0) {
        return Err(Error::config_key("vis.max_magnitude", "must be positive"));
    }
    let (c, h, w) = field.field.dims3()?;
    if c != 2 {
        return Err(shape_err!("motion field must have 2 channels, got {c}"));
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let dy = field.field.at3(0, y, x);
            let dx = field.field.at3(1, y, x);
            let sat = (dy.hypot(dx) / max_magnitude).min(1.0);
            let hue = (dy.atan2(dx) + PI) / (2.0 * PI) * 6.0;
            data.extend(hsv_to_rgb(hue, sat).map(to_byte));
        }
    }
    Ok(RgbImage { height: h, width: w, data })
}

/// HSV with value 1; `hue` in `[0, 6]`.
fn hsv_to_rgb(hue: f32, sat: f32) -> [f32; 3] {
    let sector = hue.floor().rem_euclid(6.0);
    let f = hue - hue.floor();
    let (p, q, t) = (1.0 - sat, 1.0 - sat * f, 1.0 - sat * (1.0 - f));
    match sector as u32 {
        0 => [1.0, t, p],
        1 => [q, 1.0, p],
        2 => [p, 1.0, t],
        3 => [p, q, 1.0],
        4 => [t, p, 1.0],
        _ => [1.0, p, q],
    }
}
