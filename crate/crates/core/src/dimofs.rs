//! Motion offsets from the feature difference of two frames, and the
//! deformable warp that resamples frame-B features into frame A's geometry.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{conv_weight, Binder, ParamStore};
use crate::sampling::offset_channels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OffsetConfig {
    /// Kernel size of the deformable warp.
    pub kernel: usize,
    pub groups: usize,
}

impl Default for OffsetConfig {
    fn default() -> Self {
        OffsetConfig { kernel: 3, groups: 4 }
    }
}

impl OffsetConfig {
    pub fn channels(&self) -> usize {
        offset_channels(self.kernel, self.groups)
    }
}

pub fn offset_param(level: usize, part: &str) -> String {
    format!("offsets.level{level}.{part}")
}

pub fn warp_param(level: usize, part: &str) -> String {
    format!("warp.level{level}.{part}")
}

/// Zero-initialized offset predictors (3x3 conv per level) and He-initialized
/// deformable warp layers.
pub fn init_dimofs(cfg: &OffsetConfig, scales: usize, channels: usize, rng: &mut impl Rng, store: &mut ParamStore) {
    let oc = cfg.channels();
    for l in 0..scales {
        store.insert(offset_param(l, "w"), Tensor::zeros(&[oc, channels, 3, 3]));
        store.insert(offset_param(l, "b"), Tensor::zeros(&[oc]));
        store.insert(warp_param(l, "w"), conv_weight(channels, channels, cfg.kernel, rng));
        store.insert(warp_param(l, "b"), Tensor::zeros(&[channels]));
    }
}

/// `f_A - f_B` per level. At `delta == 0` the result is zeros and no
/// subtraction is recorded.
pub fn compute_difference(tape: &mut Tape, pyr_a: &[Var], pyr_b: &[Var], delta: i32) -> Result<Vec<Var>> {
    if pyr_a.len() != pyr_b.len() {
        return Err(shape_err!("pyramids have {} and {} levels", pyr_a.len(), pyr_b.len()));
    }
    pyr_a
        .iter()
        .zip(pyr_b)
        .map(|(&a, &b)| {
            if tape.shape(a) != tape.shape(b) {
                return Err(shape_err!("level shapes {:?} vs {:?}", tape.shape(a), tape.shape(b)));
            }
            if delta == 0 {
                let z = Tensor::zeros(tape.shape(a));
                Ok(tape.constant(z))
            } else {
                tape.sub(a, b)
            }
        })
        .collect()
}

pub fn predict_offset_level(tape: &mut Tape, binder: &mut Binder, diff: Var, level: usize) -> Result<Var> {
    let w = binder.var(tape, &offset_param(level, "w"))?;
    let b = binder.var(tape, &offset_param(level, "b"))?;
    tape.conv2d(diff, w, b, 1, 1)
}

pub fn warp_level(tape: &mut Tape, binder: &mut Binder, cfg: &OffsetConfig, feature_b: Var, offsets: Var, level: usize) -> Result<Var> {
    let w = binder.var(tape, &warp_param(level, "w"))?;
    let b = binder.var(tape, &warp_param(level, "b"))?;
    tape.deformable_conv2d(feature_b, offsets, w, b, cfg.groups)
}

pub fn predict_offsets(tape: &mut Tape, binder: &mut Binder, diffs: &[Var]) -> Result<Vec<Var>> {
    diffs
        .iter()
        .enumerate()
        .map(|(l, &d)| predict_offset_level(tape, binder, d, l))
        .collect()
}

pub fn warp_features(tape: &mut Tape, binder: &mut Binder, cfg: &OffsetConfig, pyr_b: &[Var], offsets: &[Var]) -> Result<Vec<Var>> {
    if pyr_b.len() != offsets.len() {
        return Err(shape_err!("{} feature levels but {} offset levels", pyr_b.len(), offsets.len()));
    }
    pyr_b
        .iter()
        .zip(offsets)
        .enumerate()
        .map(|(l, (&f, &o))| warp_level(tape, binder, cfg, f, o, l))
        .collect()
}

/// Offset fields of every level, finest first, in pixels of their level.
#[derive(Clone, Debug, PartialEq)]
pub struct OffsetPyramid {
    pub levels: Vec<Tensor>,
    pub delta: i32,
}

impl OffsetPyramid {
    /// Number of `(dy, dx)` pairs per pixel.
    pub fn pairs(&self) -> usize {
        self.levels.first().map_or(0, |t| t.shape()[0] / 2)
    }

    /// Total channel count over all levels.
    pub fn feature_dim(&self) -> usize {
        self.levels.iter().map(|t| t.shape()[0]).sum()
    }
}
