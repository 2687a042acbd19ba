//! Shared-weight convolutional feature pyramid.
//!
//! Stage `l` is conv 3x3 -> relu -> 2x2 average pool, so level `l` (0-based)
//! has stride `2^(l+1)`. A 1x1 lateral brings every stage to `channels`
//! and coarser levels are added top-down after nearest upsampling.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::params::{conv_weight, Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub scales: usize,
    pub channels: usize,
    pub stem_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            scales: 3,
            channels: 32,
            stem_width: 16,
        }
    }
}

impl BackboneConfig {
    /// Output width of stage `l`: the stem width doubled per stage, capped
    /// at the pyramid channel count.
    pub fn stage_width(&self, l: usize) -> usize {
        (self.stem_width << l.min(16)).min(self.channels.max(self.stem_width))
    }

    pub fn stride(level: usize) -> usize {
        1 << (level + 1)
    }

    pub fn level_size(&self, h: usize, w: usize, level: usize) -> (usize, usize) {
        (h >> (level + 1), w >> (level + 1))
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.scales {
            for part in ["stage", "lateral"] {
                names.push(format!("backbone.{part}{l}.w"));
                names.push(format!("backbone.{part}{l}.b"));
            }
        }
        names
    }
}

pub fn init_backbone(cfg: &BackboneConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let mut inp = 3;
    for l in 0..cfg.scales {
        let width = cfg.stage_width(l);
        store.insert(format!("backbone.stage{l}.w"), conv_weight(width, inp, 3, rng));
        store.insert(format!("backbone.stage{l}.b"), Tensor::zeros(&[width]));
        store.insert(format!("backbone.lateral{l}.w"), conv_weight(cfg.channels, width, 1, rng));
        store.insert(format!("backbone.lateral{l}.b"), Tensor::zeros(&[cfg.channels]));
        inp = width;
    }
}

/// Pyramid levels, finest first, each `[channels, H / 2^(l+1), W / 2^(l+1)]`.
pub fn backbone_forward(tape: &mut Tape, binder: &mut Binder, cfg: &BackboneConfig, frame: Var) -> Result<Vec<Var>> {
    let (_, h, w) = tape.value(frame).dims3()?;
    let div = 1usize << cfg.scales;
    if cfg.scales == 0 || h % div != 0 || w % div != 0 {
        return Err(shape_err!("frame {h}x{w} is not divisible by 2^{}", cfg.scales));
    }
    let mut x = frame;
    let mut laterals = Vec::with_capacity(cfg.scales);
    for l in 0..cfg.scales {
        let wt = binder.var(tape, &format!("backbone.stage{l}.w"))?;
        let b = binder.var(tape, &format!("backbone.stage{l}.b"))?;
        let z = tape.conv2d(x, wt, b, 1, 1)?;
        let a = tape.relu(z)?;
        x = tape.avg_pool2(a)?;
        let lw = binder.var(tape, &format!("backbone.lateral{l}.w"))?;
        let lb = binder.var(tape, &format!("backbone.lateral{l}.b"))?;
        laterals.push(tape.conv2d(x, lw, lb, 1, 0)?);
    }
    let mut levels = vec![laterals[cfg.scales - 1]];
    for l in (0..cfg.scales - 1).rev() {
        let up = tape.upsample2(levels[0])?;
        levels.insert(0, tape.add(laterals[l], up)?);
    }
    Ok(levels)
}

/// Plain-tensor pyramid, as produced outside any training graph.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn from_tape(tape: &Tape, levels: &[Var]) -> Self {
        FeaturePyramid {
            levels: levels.iter().map(|v| tape.value(*v).clone()).collect(),
        }
    }

    /// Runs the backbone without recording gradients.
    pub fn compute(params: &ParamStore, cfg: &BackboneConfig, frame: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(params).freeze(&[""]);
        let f = tape.constant(frame.clone());
        let levels = backbone_forward(&mut tape, &mut binder, cfg, f)?;
        Ok(Self::from_tape(&tape, &levels))
    }
}
