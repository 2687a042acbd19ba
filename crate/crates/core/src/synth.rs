//! Synthetic articulated-figure videos with exact ground truth.
//!
//! Each figure is a star-shaped kinematic chain: a root joint with limbs to
//! the head, both hands, the foot and optionally two extra limbs. Frames are
//! rendered on demand from the kinematics, so a video costs one background
//! texture of memory no matter how long it is.

use std::f32::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampling::RoiBox;
use crate::tensor::Tensor;

/// Limb directions (degrees, clockwise from up) and lengths relative to the
/// arm length, in joint order after the root.
const LIMBS: [(f32, f32); 6] = [
    (0.0, 0.8125),
    (-100.0, 1.0),
    (100.0, 1.0),
    (180.0, 1.0),
    (-145.0, 0.875),
    (145.0, 0.875),
];

/// Index of the joint driven by the wave-arm class (right hand).
pub const WAVING_JOINT: usize = 3;

const JOINT_COLORS: [[f32; 3]; 7] = [
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.2, 1.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.55, 0.0],
];
const LIMB_COLOR: [f32; 3] = [0.92, 0.92, 0.92];

const SCALE_PERIOD: f32 = 20.0;
const WAVE_PERIOD: f32 = 24.0;
const BASE_SCALE: (f32, f32) = (0.9, 1.1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionClass {
    TranslateLeft,
    TranslateRight,
    RotateCw,
    RotateCcw,
    ScaleOscillate,
    WaveArm,
}

impl MotionClass {
    pub const ALL: [MotionClass; 6] = [
        MotionClass::TranslateLeft,
        MotionClass::TranslateRight,
        MotionClass::RotateCw,
        MotionClass::RotateCcw,
        MotionClass::ScaleOscillate,
        MotionClass::WaveArm,
    ];

    pub fn index(self) -> usize {
        MotionClass::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        MotionClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionClass::TranslateLeft => "translate-left",
            MotionClass::TranslateRight => "translate-right",
            MotionClass::RotateCw => "rotate-cw",
            MotionClass::RotateCcw => "rotate-ccw",
            MotionClass::ScaleOscillate => "scale-oscillate",
            MotionClass::WaveArm => "wave-arm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Joints per figure including the root, 4..=7.
    pub joints: usize,
    /// Figures per scene, 1..=3, each confined to its own horizontal slot.
    pub figures: usize,
    pub length: usize,
    /// `None` draws the class from the video seed.
    pub class: Option<MotionClass>,
    /// Speed of the fastest moving limb tip in pixels per frame. Oscillating
    /// classes reach this as their mean tip speed over a cycle.
    pub amplitude: f32,
    /// Arm length in pixels at unit scale.
    pub arm_length: f32,
    pub blob_radius: f32,
    pub limb_width: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            joints: 5,
            figures: 1,
            length: 32,
            class: None,
            amplitude: 0.5,
            arm_length: 16.0,
            blob_radius: 3.0,
            limb_width: 2.0,
        }
    }
}

impl SceneConfig {
    /// Relative amplitude of the scale oscillation.
    fn scale_swing(&self) -> f32 {
        self.amplitude * SCALE_PERIOD / (4.0 * self.arm_length)
    }

    /// Angular amplitude (radians) of the waving arm.
    fn wave_swing(&self) -> f32 {
        self.amplitude * WAVE_PERIOD / (4.0 * self.arm_length)
    }

    /// Largest distance from the root to any joint centre.
    fn reach(&self) -> f32 {
        let longest = LIMBS[..self.joints - 1].iter().map(|l| l.1).fold(0.0, f32::max);
        self.arm_length * longest * BASE_SCALE.1 * (1.0 + self.scale_swing())
    }

    /// Closed interval of root positions along one axis of `extent` pixels
    /// that keeps every joint at least one blob radius inside the frame.
    fn root_range(&self, lo: f32, hi: f32) -> (f32, f32) {
        let margin = self.reach() + self.blob_radius;
        (lo + margin, hi - 1.0 - margin)
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=7).contains(&self.joints) {
            return Err(Error::config_key("data.joints", "must be in 4..=7"));
        }
        if !(1..=3).contains(&self.figures) {
            return Err(Error::config_key("data.figures", "must be in 1..=3"));
        }
        if self.length < 2 {
            return Err(Error::config_key("data.length", "must be at least 2"));
        }
        if !(self.amplitude >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::config_key("data.amplitude", "must be a finite non-negative number"));
        }
        if !(self.blob_radius > 0.0 && self.arm_length > 0.0 && self.limb_width > 0.0) {
            return Err(Error::config_key("data.blob_radius", "figure dimensions must be positive"));
        }
        let (ylo, yhi) = self.root_range(0.0, self.height as f32);
        let slot = self.width as f32 / self.figures as f32;
        let (xlo, xhi) = self.root_range(0.0, slot);
        let travel = self.amplitude * (self.length - 1) as f32;
        if ylo > yhi || xhi - xlo < travel {
            return Err(Error::config_key(
                "data.amplitude",
                format!(
                    "figures of reach {:.1}px moving {travel:.1}px do not stay inside a {}x{} frame",
                    self.reach(),
                    self.height,
                    self.width
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub bbox: RoiBox,
    /// `(y, x, visible)` per joint in image index coordinates.
    pub keypoints: Vec<(f32, f32, bool)>,
    pub identity: usize,
}

impl GroundTruthInstance {
    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.2).count()
    }
}

/// Kinematic state of one figure; every per-frame quantity is derived from
/// these constants and the frame index.
#[derive(Clone, Debug, PartialEq)]
struct Figure {
    root: (f32, f32),
    theta: f32,
    scale: f32,
    scale_phase: f32,
    wave_phase: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub config: SceneConfig,
    pub class: MotionClass,
    pub seed: u64,
    figures: Vec<Figure>,
    background: Tensor,
}

/// Derives the seed of item `index` from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let base = rng.random_range(0.3..0.5f32);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let freq = rng.random_range(0.05..0.35f32);
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.02..0.06f32))
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let v: f32 = waves
                    .iter()
                    .map(|&(ky, kx, ph, amp)| amp * (ky * y as f32 + kx * x as f32 + ph).sin())
                    .sum();
                data[(c * h + y) * w + x] = base + v;
            }
        }
    }
    Tensor::new(&[3, h, w], data).expect("background shape")
}

/// Generates a video. Deterministic in `(config, seed)`.
pub fn generate_video(config: &SceneConfig, seed: u64) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = match config.class {
        Some(c) => c,
        None => MotionClass::ALL[rng.random_range(0..MotionClass::ALL.len())],
    };
    let background = background(config.height, config.width, &mut rng);
    let (ylo, yhi) = config.root_range(0.0, config.height as f32);
    let slot = config.width as f32 / config.figures as f32;
    let travel = config.amplitude * (config.length - 1) as f32;
    let figures = (0..config.figures)
        .map(|f| {
            let (xlo, xhi) = config.root_range(slot * f as f32, slot * (f + 1) as f32);
            let x = match class {
                MotionClass::TranslateLeft => rng.random_range(xlo + travel..=xhi),
                MotionClass::TranslateRight => rng.random_range(xlo..=xhi - travel),
                _ => rng.random_range(xlo..=xhi),
            };
            Figure {
                root: (rng.random_range(ylo..=yhi), x),
                theta: rng.random_range(0.0..2.0 * PI),
                scale: rng.random_range(BASE_SCALE.0..=BASE_SCALE.1),
                scale_phase: rng.random_range(0.0..2.0 * PI),
                wave_phase: rng.random_range(0.0..2.0 * PI),
            }
        })
        .collect();
    Ok(VideoSample {
        config: config.clone(),
        class,
        seed,
        figures,
        background,
    })
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.config.length
    }

    pub fn is_empty(&self) -> bool {
        self.config.length == 0
    }

    pub fn figure_count(&self) -> usize {
        self.figures.len()
    }

    /// Joint positions `(y, x)` of figure `f` at (possibly fractional) time `t`.
    pub fn joints_at(&self, f: usize, t: f32) -> Vec<(f32, f32)> {
        let cfg = &self.config;
        let fig = &self.figures[f];
        let tip = cfg.amplitude;
        let (mut root, mut theta, mut scale_arg, mut wave_arg) =
            (fig.root, fig.theta, fig.scale_phase, fig.wave_phase);
        match self.class {
            MotionClass::TranslateLeft => root.1 -= tip * t,
            MotionClass::TranslateRight => root.1 += tip * t,
            MotionClass::RotateCw => theta += tip / cfg.arm_length * t,
            MotionClass::RotateCcw => theta -= tip / cfg.arm_length * t,
            MotionClass::ScaleOscillate => scale_arg += 2.0 * PI * t / SCALE_PERIOD,
            MotionClass::WaveArm => wave_arg += 2.0 * PI * t / WAVE_PERIOD,
        }
        let scale = fig.scale * (1.0 + cfg.scale_swing() * scale_arg.sin());
        let wave = cfg.wave_swing() * wave_arg.sin();
        let mut out = Vec::with_capacity(cfg.joints);
        out.push(root);
        for (j, &(deg, rel)) in LIMBS[..cfg.joints - 1].iter().enumerate() {
            let mut phi = theta + deg.to_radians();
            if j + 1 == WAVING_JOINT {
                phi += wave;
            }
            let len = cfg.arm_length * rel * scale;
            out.push((root.0 - len * phi.cos(), root.1 + len * phi.sin()));
        }
        out
    }

    pub fn annotations(&self, t: usize) -> Vec<GroundTruthInstance> {
        let r = self.config.blob_radius;
        (0..self.figures.len())
            .map(|f| {
                let joints = self.joints_at(f, t as f32);
                let (mut y0, mut x0, mut y1, mut x1) = (f32::MAX, f32::MAX, f32::MIN, f32::MIN);
                for &(y, x) in &joints {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
                GroundTruthInstance {
                    bbox: RoiBox::new(x0 + 0.5 - r, y0 + 0.5 - r, x1 + 0.5 + r, y1 + 0.5 + r),
                    keypoints: joints.into_iter().map(|(y, x)| (y, x, true)).collect(),
                    identity: f,
                }
            })
            .collect()
    }

    /// Renders frame `t` as `[3, H, W]` in `[0, 1]`.
    pub fn frame(&self, t: usize) -> Tensor {
        let cfg = &self.config;
        let (h, w) = (cfg.height, cfg.width);
        let mut img = self.background.clone();
        let data = img.data_mut();
        let mut paint = |y: usize, x: usize, color: &[f32; 3], alpha: f32| {
            for c in 0..3 {
                let px = &mut data[(c * h + y) * w + x];
                *px = *px * (1.0 - alpha) + color[c] * alpha;
            }
        };
        let half = cfg.limb_width / 2.0;
        let r = cfg.blob_radius;
        for f in 0..self.figures.len() {
            let joints = self.joints_at(f, t as f32);
            let root = joints[0];
            for &end in &joints[1..] {
                for_each_near(root, end, half + 1.0, h, w, |y, x| {
                    let d = segment_distance((y as f32, x as f32), root, end);
                    let a = (half + 0.5 - d).clamp(0.0, 1.0);
                    if a > 0.0 {
                        paint(y, x, &LIMB_COLOR, a);
                    }
                });
            }
            for (j, &p) in joints.iter().enumerate() {
                for_each_near(p, p, r + 1.0, h, w, |y, x| {
                    let d = ((y as f32 - p.0).powi(2) + (x as f32 - p.1).powi(2)).sqrt();
                    let a = (r + 0.5 - d).clamp(0.0, 1.0);
                    if a > 0.0 {
                        paint(y, x, &JOINT_COLORS[j], a);
                    }
                });
            }
        }
        img
    }

    /// All frames; prefer [`VideoSample::frame`] for long datasets.
    pub fn frames(&self) -> Vec<Tensor> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }
}

/// Colour used for joint `j` when rendering.
pub fn joint_color(j: usize) -> [f32; 3] {
    JOINT_COLORS[j]
}

fn for_each_near(a: (f32, f32), b: (f32, f32), pad: f32, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    let y0 = (a.0.min(b.0) - pad).floor().max(0.0) as usize;
    let x0 = (a.1.min(b.1) - pad).floor().max(0.0) as usize;
    let y1 = ((a.0.max(b.0) + pad).ceil().max(0.0) as usize).min(h - 1);
    let x1 = ((a.1.max(b.1) + pad).ceil().max(0.0) as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            f(y, x);
        }
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let s = if len2 > 0.0 {
        (((p.0 - a.0) * dy + (p.1 - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - s * dy).powi(2) + (p.1 - a.1 - s * dx).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaPolicy {
    Fixed(i32),
    /// Uniform over `-m..=m`.
    Uniform(u32),
    /// Uniform over `lo..=hi`.
    Range(i32, i32),
}

#[derive(Clone, Debug)]
pub struct FramePair {
    pub frame_a: Tensor,
    pub frame_b: Tensor,
    pub delta: i32,
    /// Index of frame A in its video.
    pub t: usize,
    pub gt_a: Vec<GroundTruthInstance>,
    pub gt_b: Vec<GroundTruthInstance>,
    /// Per figure, per joint: `joint(t) - joint(t + delta)` as `(dy, dx)`.
    pub displacements: Vec<Vec<(f32, f32)>>,
}

/// Draws `(t, delta)` for a pair without rendering anything.
pub fn draw_pair_index(len: usize, policy: DeltaPolicy, rng: &mut impl Rng) -> Result<(usize, i32)> {
    let delta = match policy {
        DeltaPolicy::Fixed(d) => {
            if d.unsigned_abs() as usize >= len {
                return Err(Error::config_key("data.length", format!("video of {len} frames has no pair at delta {d}")));
            }
            d
        }
        DeltaPolicy::Uniform(m) => {
            if len <= 2 * m as usize {
                return Err(Error::config_key(
                    "data.length",
                    format!("video of {len} frames must be longer than twice delta.max = {m}"),
                ));
            }
            rng.random_range(-(m as i32)..=m as i32)
        }
        DeltaPolicy::Range(lo, hi) => {
            let reach = lo.unsigned_abs().max(hi.unsigned_abs()) as usize;
            if lo > hi || reach >= len {
                return Err(Error::config_key("data.length", format!("video of {len} frames has no pair for delta range {lo}..={hi}")));
            }
            rng.random_range(lo..=hi)
        }
    };
    let lo = (-delta).max(0) as usize;
    let hi = len - delta.max(0) as usize;
    Ok((rng.random_range(lo..hi), delta))
}

impl VideoSample {
    /// Frame pair `(t, t + delta)` with frame A labels and displacements.
    pub fn pair(&self, t: usize, delta: i32) -> Result<FramePair> {
        let tb = t as i64 + delta as i64;
        if t >= self.len() || tb < 0 || tb >= self.len() as i64 {
            return Err(Error::config_key("data.length", format!("pair ({t}, {tb}) outside video of {} frames", self.len())));
        }
        let tb = tb as usize;
        let gt_a = self.annotations(t);
        let gt_b = self.annotations(tb);
        let displacements = gt_a
            .iter()
            .zip(&gt_b)
            .map(|(a, b)| a.keypoints.iter().zip(&b.keypoints).map(|(p, q)| (p.0 - q.0, p.1 - q.1)).collect())
            .collect();
        Ok(FramePair {
            frame_a: self.frame(t),
            frame_b: if delta == 0 { self.frame(t) } else { self.frame(tb) },
            delta,
            t,
            gt_a,
            gt_b,
            displacements,
        })
    }

    pub fn sample_pair(&self, policy: DeltaPolicy, rng: &mut impl Rng) -> Result<FramePair> {
        let (t, delta) = draw_pair_index(self.len(), policy, rng)?;
        self.pair(t, delta)
    }
}

/// A class-balanced set of videos; video `i` has class `i mod 6`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
}

impl Dataset {
    pub fn generate(config: &SceneConfig, count: usize, master_seed: u64) -> Result<Self> {
        let videos = (0..count)
            .map(|i| {
                let mut cfg = config.clone();
                if cfg.class.is_none() {
                    cfg.class = Some(MotionClass::ALL[i % MotionClass::ALL.len()]);
                }
                generate_video(&cfg, derive_seed(master_seed, i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// One line per video: `seed class config_hash`.
    pub fn manifest(&self, config_hash: &str) -> String {
        let mut s = String::new();
        for v in &self.videos {
            let _ = writeln!(s, "{} {} {}", v.seed, v.class.name(), config_hash);
        }
        s
    }
}
