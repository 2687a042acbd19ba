//! Differentiable sampling: bilinear point sampling, deformable convolution
//! and RoI-align.
//!
//! Sample coordinates are in index space: integer values land on pixel
//! centers. Corners outside the map contribute zero.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, BilinearTap, Layout};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Number of offset channels for a `k x k` kernel with `groups` offset groups.
pub fn offset_channels(k: usize, groups: usize) -> usize {
    2 * k * k * groups
}

/// Channel holding the `dy` (`component == 0`) or `dx` (`component == 1`)
/// offset of tap `(i, j)` in offset group `g`.
pub fn offset_channel(k: usize, g: usize, i: usize, j: usize, component: usize) -> usize {
    ((g * k * k) + i * k + j) * 2 + component
}

/// Axis-aligned box in continuous pixel coordinates, where pixel `(r, c)`
/// covers `[r, r+1) x [c, c+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
    pub score: f32,
}

impl RoiBox {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Self {
        RoiBox {
            x0,
            y0,
            x1,
            y1,
            score: 1.0,
        }
    }

    pub fn width(&self) -> f32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.y0 + self.y1), 0.5 * (self.x0 + self.x1))
    }

    pub fn is_valid(&self) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.area() >= 1e-6
    }

    pub fn scaled(&self, factor: f32) -> Self {
        RoiBox {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            score: self.score,
        }
    }

    pub fn iou(&self, other: &RoiBox) -> f32 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

pub(crate) struct BilinearState {
    feature: Var,
    points: Var,
    taps: Vec<BilinearTap>,
}

pub(crate) struct DeformState {
    input: Var,
    offsets: Var,
    weight: Var,
    bias: Var,
    k: usize,
    groups: usize,
    taps: Vec<BilinearTap>,
    cols: Vec<f32>,
}

pub(crate) struct RoiAlignState {
    feature: Var,
    /// `(output bin, tap)` pairs; every tap carries weight `1 / samples^2`.
    plan: Vec<(usize, BilinearTap)>,
    weight: f32,
    bins: usize,
}

impl Tape {
    /// Samples `feature [C,H,W]` at `points [N,2]` (`(y, x)` rows), giving
    /// `[N, C]`. Differentiable w.r.t. both the feature and the points.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let (c, h, w) = self.value(feature).dims3()?;
        let (n, two) = self.value(points).dims2()?;
        if two != 2 {
            return Err(shape_err!("bilinear_sample: points must be [N,2], got [{n},{two}]"));
        }
        let p = self.value(points).data();
        let taps: Vec<BilinearTap> = (0..n)
            .map(|i| BilinearTap::new(p[2 * i], p[2 * i + 1], h, w))
            .collect();
        let f = self.value(feature).data();
        let mut out = vec![0.0; n * c];
        for (i, tap) in taps.iter().enumerate() {
            for ch in 0..c {
                out[i * c + ch] = tap.sample(&f[ch * h * w..(ch + 1) * h * w]);
            }
        }
        let v = Tensor::new(&[n, c], out)?;
        let state = BilinearState {
            feature,
            points,
            taps,
        };
        self.push(v, Op::Bilinear(Box::new(state)), &[feature, points], "bilinear_sample")
    }

    /// Deformable convolution with stride 1 and "same" padding.
    ///
    /// `offsets` is `[2*k*k*G, H, W]`; input channel `c` of `C` uses offset
    /// group `floor(c * G / C)`. Tap `(i, j)` at output `(y, x)` samples the
    /// input at `(y - pad + i + dy, x - pad + j + dx)`.
    pub fn deformable_conv2d(
        &mut self,
        input: Var,
        offsets: Var,
        weight: Var,
        bias: Var,
        groups: usize,
    ) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        let ws = self.shape(weight).to_vec();
        let [o, wc, k, k2] = ws[..] else {
            return Err(shape_err!("deformable_conv2d: weight must be rank 4, got {ws:?}"));
        };
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(shape_err!(
                "deformable_conv2d: weight {ws:?} incompatible with {c} input channels"
            ));
        }
        if self.shape(bias) != [o] {
            return Err(shape_err!("deformable_conv2d: bias {:?} != [{o}]", self.shape(bias)));
        }
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("deformable_conv2d: {c} channels not divisible by {groups} groups"));
        }
        let (oc, oh, ow) = self.value(offsets).dims3()?;
        if oc != offset_channels(k, groups) || oh != h || ow != w {
            return Err(shape_err!(
                "deformable_conv2d: offsets {:?} but expected [{}, {h}, {w}]",
                self.shape(offsets),
                offset_channels(k, groups)
            ));
        }
        let kk = k * k;
        let hw = h * w;
        let pad = (k - 1) / 2;
        let off = self.value(offsets).data();
        let mut taps = Vec::with_capacity(groups * kk * hw);
        for g in 0..groups {
            for i in 0..k {
                for j in 0..k {
                    let cy = &off[offset_channel(k, g, i, j, 0) * hw..][..hw];
                    let cx = &off[offset_channel(k, g, i, j, 1) * hw..][..hw];
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let sy = (y + i) as f32 - pad as f32 + cy[p];
                            let sx = (x + j) as f32 - pad as f32 + cx[p];
                            taps.push(BilinearTap::new(sy, sx, h, w));
                        }
                    }
                }
            }
        }
        let inp = self.value(input).data();
        let mut cols = vec![0.0; c * kk * hw];
        for ch in 0..c {
            let g = ch * groups / c;
            let plane = &inp[ch * hw..(ch + 1) * hw];
            for t in 0..kk {
                let row = &mut cols[(ch * kk + t) * hw..(ch * kk + t + 1) * hw];
                let gt = &taps[(g * kk + t) * hw..(g * kk + t + 1) * hw];
                for (dst, tap) in row.iter_mut().zip(gt) {
                    *dst = tap.sample(plane);
                }
            }
        }
        let mut out = vec![0.0; o * hw];
        kernels::gemm(o, c * kk, hw, self.value(weight).data(), Layout::Normal, &cols, Layout::Normal, 0.0, &mut out);
        let bd = self.value(bias).data();
        for (oc, row) in out.chunks_mut(hw).enumerate() {
            let b = bd[oc];
            row.iter_mut().for_each(|v| *v += b);
        }
        let v = Tensor::new(&[o, h, w], out)?;
        let state = DeformState {
            input,
            offsets,
            weight,
            bias,
            k,
            groups,
            taps,
            cols,
        };
        self.push(
            v,
            Op::Deform(Box::new(state)),
            &[input, offsets, weight, bias],
            "deformable_conv2d",
        )
    }

    /// RoI-align of `feature [C,H,W]` over `roi` (feature-map coordinates)
    /// into `[C, out_h, out_w]`, averaging `samples^2` bilinear samples per bin.
    pub fn roi_align(&mut self, feature: Var, roi: &RoiBox, out_h: usize, out_w: usize, samples: usize) -> Result<Var> {
        if !roi.is_valid() {
            return Err(Error::Box(format!("degenerate RoI {roi:?}")));
        }
        if out_h == 0 || out_w == 0 || samples == 0 {
            return Err(shape_err!("roi_align: output {out_h}x{out_w} with {samples} samples"));
        }
        let (c, h, w) = self.value(feature).dims3()?;
        let plan = roi_plan(roi, h, w, out_h, out_w, samples);
        let weight = 1.0 / (samples * samples) as f32;
        let bins = out_h * out_w;
        let f = self.value(feature).data();
        let mut out = vec![0.0; c * bins];
        for ch in 0..c {
            let plane = &f[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * bins..(ch + 1) * bins];
            for (bin, tap) in &plan {
                dst[*bin] += weight * tap.sample(plane);
            }
        }
        let v = Tensor::new(&[c, out_h, out_w], out)?;
        let state = RoiAlignState {
            feature,
            plan,
            weight,
            bins,
        };
        self.push(v, Op::RoiAlign(Box::new(state)), &[feature], "roi_align")
    }
}

fn roi_plan(roi: &RoiBox, h: usize, w: usize, out_h: usize, out_w: usize, samples: usize) -> Vec<(usize, BilinearTap)> {
    let bh = roi.height() / out_h as f32;
    let bw = roi.width() / out_w as f32;
    let mut plan = Vec::with_capacity(out_h * out_w * samples * samples);
    for by in 0..out_h {
        for bx in 0..out_w {
            for sy in 0..samples {
                let y = roi.y0 + bh * (by as f32 + (sy as f32 + 0.5) / samples as f32);
                for sx in 0..samples {
                    let x = roi.x0 + bw * (bx as f32 + (sx as f32 + 0.5) / samples as f32);
                    plan.push((by * out_w + bx, BilinearTap::new(y - 0.5, x - 0.5, h, w)));
                }
            }
        }
    }
    plan
}

pub(crate) fn bilinear_backward(tape: &Tape, s: &BilinearState, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let fv = tape.value(s.feature);
    let (c, h, w) = fv.dims3().expect("checked in forward");
    let hw = h * w;
    let gd = g.data();
    tape.accum(grads, s.feature, || {
        let mut df = vec![0.0; c * hw];
        for (i, tap) in s.taps.iter().enumerate() {
            for ch in 0..c {
                tap.scatter(&mut df[ch * hw..(ch + 1) * hw], gd[i * c + ch]);
            }
        }
        Tensor::new(fv.shape(), df).expect("shape")
    });
    tape.accum(grads, s.points, || {
        let mut dp = vec![0.0; s.taps.len() * 2];
        for (i, tap) in s.taps.iter().enumerate() {
            for ch in 0..c {
                let (dy, dx) = tap.coord_grad(fv.plane(ch));
                dp[2 * i] += gd[i * c + ch] * dy;
                dp[2 * i + 1] += gd[i * c + ch] * dx;
            }
        }
        Tensor::new(&[s.taps.len(), 2], dp).expect("shape")
    });
}

pub(crate) fn deform_backward(tape: &Tape, s: &DeformState, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let iv = tape.value(s.input);
    let (c, h, w) = iv.dims3().expect("checked in forward");
    let hw = h * w;
    let kk = s.k * s.k;
    let o = tape.shape(s.weight)[0];
    let gd = g.data();
    tape.accum(grads, s.bias, || {
        Tensor::new(&[o], gd.chunks(hw).map(|r| r.iter().sum()).collect()).expect("shape")
    });
    tape.accum(grads, s.weight, || {
        let mut dw = vec![0.0; o * c * kk];
        kernels::gemm(o, hw, c * kk, gd, Layout::Normal, &s.cols, Layout::Transposed, 0.0, &mut dw);
        Tensor::new(tape.shape(s.weight), dw).expect("shape")
    });
    let need_input = tape.requires_grad(s.input);
    let need_offsets = tape.requires_grad(s.offsets);
    if !need_input && !need_offsets {
        return;
    }
    let mut dcols = vec![0.0; c * kk * hw];
    kernels::gemm(c * kk, o, hw, tape.value(s.weight).data(), Layout::Transposed, gd, Layout::Normal, 0.0, &mut dcols);
    let mut din = vec![0.0; if need_input { c * hw } else { 0 }];
    let mut doff = vec![0.0; if need_offsets { 2 * kk * s.groups * hw } else { 0 }];
    for ch in 0..c {
        let grp = ch * s.groups / c;
        let plane = iv.plane(ch);
        for t in 0..kk {
            let drow = &dcols[(ch * kk + t) * hw..(ch * kk + t + 1) * hw];
            let gt = &s.taps[(grp * kk + t) * hw..(grp * kk + t + 1) * hw];
            if need_input {
                let dplane = &mut din[ch * hw..(ch + 1) * hw];
                for (tap, &dc) in gt.iter().zip(drow) {
                    tap.scatter(dplane, dc);
                }
            }
            if need_offsets {
                let base = (grp * kk + t) * 2;
                for (p, (tap, &dc)) in gt.iter().zip(drow).enumerate() {
                    let (dy, dx) = tap.coord_grad(plane);
                    doff[base * hw + p] += dc * dy;
                    doff[(base + 1) * hw + p] += dc * dx;
                }
            }
        }
    }
    if need_input {
        tape.accum(grads, s.input, || Tensor::new(iv.shape(), din).expect("shape"));
    }
    if need_offsets {
        tape.accum(grads, s.offsets, || Tensor::new(tape.shape(s.offsets), doff).expect("shape"));
    }
}

pub(crate) fn roi_align_backward(tape: &Tape, s: &RoiAlignState, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let fv = tape.value(s.feature);
    let (c, h, w) = fv.dims3().expect("checked in forward");
    let gd = g.data();
    tape.accum(grads, s.feature, || {
        let mut df = vec![0.0; c * h * w];
        for ch in 0..c {
            let dplane = &mut df[ch * h * w..(ch + 1) * h * w];
            let grow = &gd[ch * s.bins..(ch + 1) * s.bins];
            for (bin, tap) in &s.plan {
                tap.scatter(dplane, s.weight * grow[*bin]);
            }
        }
        Tensor::new(fv.shape(), df).expect("shape")
    });
}

/// Plain-tensor bilinear sampling, `[N, C]` for `N` points.
pub fn sample_points(feature: &Tensor, points: &[(f32, f32)]) -> Result<Tensor> {
    let (c, h, w) = feature.dims3()?;
    let mut out = vec![0.0; points.len().max(1) * c];
    for (i, &(y, x)) in points.iter().enumerate() {
        let tap = BilinearTap::new(y, x, h, w);
        for ch in 0..c {
            out[i * c + ch] = tap.sample(feature.plane(ch));
        }
    }
    Tensor::new(&[points.len().max(1), c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| ((i * 7919) % 23) as f32 * 0.25 - 2.0)
    }

    #[test]
    fn integer_point_returns_pixel() {
        let f = feature(3, 4, 5);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let p = tape.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap());
        let s = tape.bilinear_sample(fv, p).unwrap();
        for c in 0..3 {
            assert_eq!(tape.value(s).data()[c], f.at3(c, 2, 3));
        }
    }

    #[test]
    fn midpoint_averages_four_pixels() {
        let f = Tensor::new(&[1, 2, 2], vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        let v = sample_points(&f, &[(0.5, 0.5)]).unwrap();
        assert_eq!(v.data(), &[2.0]);
    }

    #[test]
    fn zero_offsets_match_conv2d() {
        let (c, h, w, o, k, groups) = (4, 6, 5, 3, 3, 2);
        let x = feature(c, h, w);
        let wt = Tensor::from_fn(&[o, c, k, k], |i| ((i * 31) % 17) as f32 * 0.1 - 0.8);
        let b = Tensor::from_fn(&[o], |i| i as f32 * 0.3);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(wt);
        let bv = tape.constant(b);
        let off = tape.constant(Tensor::zeros(&[offset_channels(k, groups), h, w]));
        let d = tape.deformable_conv2d(xv, off, wv, bv, groups).unwrap();
        let r = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
        assert!(tape.value(d).max_abs_diff(tape.value(r)) < 1e-5);
    }

    #[test]
    fn unit_x_offset_shifts_left() {
        let (h, w) = (3, 4);
        let x = feature(1, h, w);
        let mut off = Tensor::zeros(&[2, h, w]);
        off.data_mut()[h * w..].fill(1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let ov = tape.constant(off);
        let wv = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let bv = tape.constant(Tensor::zeros(&[1]));
        let y = tape.deformable_conv2d(xv, ov, wv, bv, 1).unwrap();
        let yv = tape.value(y);
        for r in 0..h {
            for col in 0..w {
                let expect = if col + 1 < w { x.at3(0, r, col + 1) } else { 0.0 };
                assert_eq!(yv.at3(0, r, col), expect);
            }
        }
    }

    #[test]
    fn wrong_offset_channels_is_shape_error() {
        let mut tape = Tape::new();
        let xv = tape.constant(feature(4, 4, 4));
        let ov = tape.constant(Tensor::zeros(&[18, 4, 4]));
        let wv = tape.constant(Tensor::zeros(&[2, 4, 3, 3]));
        let bv = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.deformable_conv2d(xv, ov, wv, bv, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn offset_layout_is_group_tap_then_yx() {
        assert_eq!(offset_channel(3, 0, 0, 0, 0), 0);
        assert_eq!(offset_channel(3, 0, 0, 0, 1), 1);
        assert_eq!(offset_channel(3, 0, 0, 1, 0), 2);
        assert_eq!(offset_channel(3, 1, 0, 0, 0), 18);
        assert_eq!(offset_channels(3, 4), 72);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(&[2, 8, 8], 3.5));
        let r = tape.roi_align(f, &RoiBox::new(1.3, 0.7, 6.1, 5.9), 4, 3, 2).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn roi_align_whole_map_single_sample_hits_center() {
        let f = feature(2, 5, 5);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let r = tape.roi_align(fv, &RoiBox::new(0.0, 0.0, 5.0, 5.0), 1, 1, 1).unwrap();
        assert_eq!(tape.value(r).data(), &[f.at3(0, 2, 2), f.at3(1, 2, 2)]);
    }

    #[test]
    fn degenerate_roi_rejected() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let bad = RoiBox::new(1.0, 1.0, 1.0, 3.0);
        assert!(matches!(tape.roi_align(f, &bad, 2, 2, 2), Err(Error::Box(_))));
    }
}
