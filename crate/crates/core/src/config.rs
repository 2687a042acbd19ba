//! Line-oriented `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::action::{ActionConfig, ActionTrainSettings};
use crate::backbone::BackboneConfig;
use crate::cluster::FeatureRecipe;
use crate::detection::{HeadConfig, LossWeights};
use crate::dimofs::OffsetConfig;
use crate::error::{Error, Result};
use crate::experiment::{PoseEvalSettings, PoseTrainSettings};
use crate::finegrained::FineGrainedSettings;
use crate::model::ModelConfig;
use crate::motion::SaliencyReduction;
use crate::synth::{DeltaPolicy, SceneConfig};

fn parse_value<T: FromStr>(key: &str, line: Option<usize>, raw: &str, expected: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Config {
        key: Some(key.to_string()),
        line,
        message: format!("expected {expected}, got `{raw}`"),
    })
}

trait ConfigType: Sized + Display {
    const EXPECTED: &'static str;
    fn parse_config(key: &str, line: Option<usize>, raw: &str) -> Result<Self>;
}

macro_rules! config_type {
    ($($t:ty => $name:literal),* $(,)?) => {
        $(impl ConfigType for $t {
            const EXPECTED: &'static str = $name;
            fn parse_config(key: &str, line: Option<usize>, raw: &str) -> Result<Self> {
                parse_value(key, line, raw, $name)
            }
        })*
    };
}

config_type!(
    u64 => "an unsigned integer",
    usize => "an unsigned integer",
    i32 => "an integer",
    f32 => "a number",
    f64 => "a number",
    bool => "true or false",
    String => "a string",
);

macro_rules! experiment_config {
    ($($field:ident : $t:ty = $default:expr, $key:literal;)*) => {
        /// Every tunable of every subcommand. Unknown keys are rejected.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $(pub $field: $t,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($field: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            fn set(&mut self, key: &str, raw: &str, line: Option<usize>) -> Result<()> {
                match key {
                    $($key => self.$field = <$t as ConfigType>::parse_config(key, line, raw)?,)*
                    _ => {
                        return Err(Error::Config {
                            key: Some(key.to_string()),
                            line,
                            message: "unknown key".into(),
                        })
                    }
                }
                Ok(())
            }

            /// Every key with its value, sorted by key.
            pub fn entries(&self) -> BTreeMap<&'static str, String> {
                let mut m = BTreeMap::new();
                $(m.insert($key, self.$field.to_string());)*
                m
            }

            pub fn expected_type(key: &str) -> Option<&'static str> {
                match key {
                    $($key => Some(<$t as ConfigType>::EXPECTED),)*
                    _ => None,
                }
            }
        }
    };
}

experiment_config! {
    seed: u64 = 0, "seed";
    output: String = "runs/default".into(), "output";

    data_seed: u64 = 1, "data.seed";
    height: usize = 64, "data.height";
    width: usize = 64, "data.width";
    joints: usize = 5, "data.joints";
    figures: usize = 1, "data.figures";
    length: usize = 32, "data.length";
    amplitude: f32 = 0.5, "data.amplitude";
    arm_length: f32 = 16.0, "data.arm_length";
    blob_radius: f32 = 3.0, "data.blob_radius";
    limb_width: f32 = 2.0, "data.limb_width";
    train_videos: usize = 500, "data.train_videos";
    eval_videos: usize = 60, "data.eval_videos";

    scales: usize = 3, "backbone.scales";
    channels: usize = 32, "backbone.channels";
    stem_width: usize = 16, "backbone.stem_width";
    kernel: usize = 3, "offsets.kernel";
    groups: usize = 4, "offsets.groups";
    head_hidden: usize = 128, "head.hidden";
    box_roi: usize = 7, "head.box_roi";
    heat_roi: usize = 14, "head.heat_roi";
    roi_samples: usize = 2, "head.samples";
    canonical_size: f32 = 8.0, "head.canonical_size";

    delta_max: usize = 10, "delta.max";
    train_mode: String = "dimofs".into(), "train.mode";
    steps: u64 = 1000, "train.steps";
    batch: usize = 4, "train.batch";
    lr: f32 = 1e-3, "train.lr";
    checkpoint_every: u64 = 250, "train.checkpoint_every";
    jitter: f32 = 0.1, "train.jitter";
    negatives: usize = 1, "train.negatives";
    loss_person: f32 = 1.0, "loss.person";
    loss_box: f32 = 1.0, "loss.box";
    loss_heatmap: f32 = 1.0, "loss.heatmap";

    eval_radius: f32 = 0.1, "eval.radius";
    score_threshold: f32 = 0.5, "eval.score_threshold";
    frames_per_video: usize = 2, "eval.frames_per_video";
    eval_seed: u64 = 3, "eval.seed";

    ridge_lambda: f64 = 0.1, "motion.lambda";
    saliency_reduction: String = "mean-vector-norm".into(), "motion.reduction";
    saliency_videos: usize = 50, "motion.saliency_videos";

    action_init: String = "pretrained".into(), "action.init";
    action_steps: u64 = 400, "action.steps";
    action_batch: usize = 8, "action.batch";
    action_lr: f32 = 1e-3, "action.lr";
    action_width: usize = 128, "action.width";
    action_train_trunk: bool = false, "action.train_trunk";
    action_frames_per_video: usize = 3, "action.frames_per_video";
    action_checkpoint_every: u64 = 100, "action.checkpoint_every";

    cluster_k: usize = 16, "cluster.k";
    pca_dim: usize = 15, "cluster.pca_dim";
    recipe: String = "pose+dimofs".into(), "cluster.recipe";
    cluster_gap: usize = 5, "cluster.gap";
    cluster_stride: usize = 2, "cluster.stride";
    kmeans_iters: usize = 100, "cluster.iters";
    cluster_train_videos: usize = 96, "cluster.train_videos";
    cluster_eval_videos: usize = 48, "cluster.eval_videos";
    hard_counts: bool = false, "cluster.hard_counts";
    pseudo_steps: u64 = 400, "pseudo.steps";
    pseudo_batch: usize = 8, "pseudo.batch";
    pseudo_lr: f32 = 1e-3, "pseudo.lr";
    pseudo_checkpoint_every: u64 = 100, "pseudo.checkpoint_every";
    mlp_hidden: usize = 64, "mlp.hidden";
    mlp_epochs: usize = 400, "mlp.epochs";
    mlp_lr: f32 = 1e-2, "mlp.lr";

    track_videos: usize = 10, "track.videos";
    track_width: usize = 128, "track.width";
    track_figures: usize = 2, "track.figures";
    track_delta: i32 = 0, "track.delta";
    track_gate: f64 = 0.7, "track.gate";
    track_iou: f32 = 0.5, "track.iou";

    gradcheck_instances: usize = 20, "gradcheck.instances";
    gradcheck_eps: f32 = 1e-3, "gradcheck.eps";
    gradcheck_tolerance: f64 = 1e-2, "gradcheck.tolerance";

    vis_videos: usize = 2, "vis.videos";
    vis_delta: i32 = 5, "vis.delta";
    vis_max_motion: f32 = 4.0, "vis.max_motion";
    vis_channels: bool = false, "vis.channels";
}

/// Splits `key = value`, ignoring `#` comments and blank lines.
fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), ()>> {
    let text = line.split('#').next().unwrap_or("").trim();
    if text.is_empty() {
        return None;
    }
    Some(match text.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(()),
    })
}

impl ExperimentConfig {
    /// Parses config text, then applies `overrides` (`key=value`) on top.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, line) in text.lines().enumerate() {
            match split_line(line) {
                None => {}
                Some(Ok((k, v))) => cfg.set(k, v, Some(i + 1))?,
                Some(Err(())) => {
                    return Err(Error::Config {
                        key: None,
                        line: Some(i + 1),
                        message: format!("expected `key = value`, got `{}`", line.trim()),
                    })
                }
            }
        }
        for o in overrides {
            match split_line(o) {
                Some(Ok((k, v))) => cfg.set(k, v, None)?,
                _ => return Err(Error::config(format!("override `{o}` is not `key=value`"))),
            }
        }
        cfg.validate_with_lines(text)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        ExperimentConfig::parse(&text, overrides)
    }

    fn validate_with_lines(&self, text: &str) -> Result<()> {
        self.validate().map_err(|e| match e {
            Error::Config { key: Some(k), line: None, message } => {
                let line = text
                    .lines()
                    .enumerate()
                    .filter(|(_, l)| matches!(split_line(l), Some(Ok((lk, _))) if lk == k))
                    .map(|(i, _)| i + 1)
                    .last();
                Error::Config { key: Some(k), line, message }
            }
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 16] = [
            ("backbone.scales", self.scales),
            ("backbone.channels", self.channels),
            ("backbone.stem_width", self.stem_width),
            ("offsets.groups", self.groups),
            ("head.hidden", self.head_hidden),
            ("head.box_roi", self.box_roi),
            ("head.heat_roi", self.heat_roi),
            ("head.samples", self.roi_samples),
            ("train.batch", self.batch),
            ("data.train_videos", self.train_videos),
            ("data.eval_videos", self.eval_videos),
            ("action.batch", self.action_batch),
            ("action.width", self.action_width),
            ("cluster.k", self.cluster_k),
            ("pseudo.batch", self.pseudo_batch),
            ("mlp.hidden", self.mlp_hidden),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config_key(k, "must be positive"));
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config_key("offsets.kernel", "must be odd"));
        }
        if !self.channels.is_multiple_of(self.groups) {
            return Err(Error::config_key("offsets.groups", "must divide backbone.channels"));
        }
        let stride = 1usize << self.scales;
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::config_key("backbone.scales", format!("frame size must be divisible by {stride}")));
        }
        if self.length <= 2 * self.delta_max {
            return Err(Error::config_key("delta.max", "videos must be longer than 2 * delta.max"));
        }
        for (k, v) in [("train.lr", self.lr), ("action.lr", self.action_lr), ("pseudo.lr", self.pseudo_lr), ("mlp.lr", self.mlp_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config_key(k, "must be a positive number"));
            }
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config_key("train.jitter", "must be in [0, 1)"));
        }
        if !matches!(self.train_mode.as_str(), "dimofs" | "single-frame-baseline") {
            return Err(Error::config_key("train.mode", "must be `dimofs` or `single-frame-baseline`"));
        }
        if !matches!(self.action_init.as_str(), "pretrained" | "scratch") {
            return Err(Error::config_key("action.init", "must be `pretrained` or `scratch`"));
        }
        if SaliencyReduction::parse(&self.saliency_reduction).is_none() {
            return Err(Error::config_key("motion.reduction", "must be `mean-vector-norm` or `mean-of-norms`"));
        }
        if FeatureRecipe::parse(&self.recipe).is_none() {
            return Err(Error::config_key("cluster.recipe", "must be `pose-only` or `pose+dimofs`"));
        }
        if self.cluster_gap == 0 || self.cluster_gap >= self.length {
            return Err(Error::config_key("cluster.gap", "must be in 1..data.length"));
        }
        if !(0.0..=1.0).contains(&self.track_gate) {
            return Err(Error::config_key("track.gate", "must be in [0, 1]"));
        }
        for (k, v) in [
            ("train.checkpoint_every", self.checkpoint_every),
            ("action.checkpoint_every", self.action_checkpoint_every),
            ("pseudo.checkpoint_every", self.pseudo_checkpoint_every),
        ] {
            if v == 0 {
                return Err(Error::config_key(k, "must be positive"));
            }
        }
        self.scene().validate()?;
        self.track_scene().validate()
    }

    /// First 16 hex digits of the SHA-256 of every `key = value` line,
    /// sorted by key. The output directory is excluded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Canonical text that parses back to the same config.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output)
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            joints: self.joints,
            figures: self.figures,
            length: self.length,
            class: None,
            amplitude: self.amplitude,
            arm_length: self.arm_length,
            blob_radius: self.blob_radius,
            limb_width: self.limb_width,
        }
    }

    pub fn track_scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.track_width,
            figures: self.track_figures,
            ..self.scene()
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                scales: self.scales,
                channels: self.channels,
                stem_width: self.stem_width,
            },
            offsets: OffsetConfig {
                kernel: self.kernel,
                groups: self.groups,
            },
            head: HeadConfig {
                joints: self.joints,
                channels: self.channels,
                hidden: self.head_hidden,
                box_roi: self.box_roi,
                heat_roi: self.heat_roi,
                samples: self.roi_samples,
                canonical_size: self.canonical_size,
            },
        }
    }

    pub fn pose_train(&self) -> PoseTrainSettings {
        PoseTrainSettings {
            batch: self.batch,
            policy: if self.train_mode == "single-frame-baseline" {
                DeltaPolicy::Fixed(0)
            } else {
                DeltaPolicy::Uniform(self.delta_max as u32)
            },
            weights: LossWeights {
                person: self.loss_person,
                bbox: self.loss_box,
                heatmap: self.loss_heatmap,
            },
            jitter: self.jitter,
            negatives: self.negatives,
        }
    }

    pub fn pose_eval(&self) -> PoseEvalSettings {
        PoseEvalSettings {
            radius: self.eval_radius,
            score_threshold: self.score_threshold,
            frames_per_video: self.frames_per_video,
            max_delta: self.delta_max as u32,
            jitter: self.jitter,
            negatives: self.negatives,
        }
    }

    pub fn saliency(&self) -> SaliencyReduction {
        SaliencyReduction::parse(&self.saliency_reduction).expect("validated")
    }

    pub fn action(&self) -> ActionConfig {
        ActionConfig {
            classes: crate::synth::MotionClass::ALL.len(),
            width: self.action_width,
            train_trunk: self.action_train_trunk,
            ..ActionConfig::default()
        }
    }

    pub fn action_train(&self) -> ActionTrainSettings {
        ActionTrainSettings {
            batch: self.action_batch,
            policy: DeltaPolicy::Range(0, self.delta_max as i32),
            jitter: self.jitter,
            box_weight: self.loss_box,
        }
    }

    pub fn recipe(&self) -> FeatureRecipe {
        FeatureRecipe::parse(&self.recipe).expect("validated")
    }

    pub fn fine_grained(&self) -> FineGrainedSettings {
        FineGrainedSettings {
            k: self.cluster_k,
            pca_dim: self.pca_dim,
            gap: self.cluster_gap,
            stride: self.cluster_stride,
            kmeans_iters: self.kmeans_iters,
            pseudo_steps: self.pseudo_steps,
            pseudo_batch: self.pseudo_batch,
            pseudo_lr: self.pseudo_lr,
            jitter: self.jitter,
            mlp_hidden: self.mlp_hidden,
            mlp_epochs: self.mlp_epochs,
            mlp_lr: self.mlp_lr,
            hard_counts: self.hard_counts,
        }
    }
}
