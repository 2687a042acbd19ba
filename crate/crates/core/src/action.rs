//! Action localization head that reads appearance features of frame A and
//! the raw motion offsets side by side, plus its training and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::backbone_forward;
use crate::detection::{decode_box, encode_deltas};
use crate::dimofs::{compute_difference, offset_param, predict_offset_level};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoseModel};
use crate::optim::Optimizer;
use crate::params::{accumulate, conv_weight, dense_weight, scale_grads, Binder, GradMap, ParamStore};
use crate::sampling::RoiBox;
use crate::synth::{derive_seed, Dataset, DeltaPolicy, FramePair};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionConfig {
    /// Output classes: motion classes, or clusters for pseudo-label training.
    pub classes: usize,
    /// Width of each of the appearance and motion vectors.
    pub width: usize,
    pub roi: usize,
    pub samples: usize,
    /// Also train the backbone and offset predictor.
    pub train_trunk: bool,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig {
            classes: 6,
            width: 128,
            roi: 7,
            samples: 2,
            train_trunk: false,
        }
    }
}

pub const TRUNK_PREFIXES: [&str; 2] = ["backbone.", "offsets."];

pub fn init_action_head(cfg: &ActionConfig, trunk: &ModelConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let area = cfg.roi * cfg.roi;
    let layers = [
        ("app", trunk.backbone.channels * area, cfg.width),
        ("mot", trunk.offsets.channels() * area, cfg.width),
        ("cls", 2 * cfg.width, cfg.classes),
        ("box", 2 * cfg.width, 4),
    ];
    for (name, i, o) in layers {
        store.insert(format!("action.{name}.w"), dense_weight(i, o, rng));
        store.insert(format!("action.{name}.b"), Tensor::zeros(&[o]));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ActionVars {
    /// `[1, width]`
    pub motion: Var,
    /// `[1, classes]`
    pub logits: Var,
    /// `[1, 4]`
    pub deltas: Var,
}

fn dense_relu(tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Result<Var> {
    let w = binder.var(tape, &format!("action.{name}.w"))?;
    let b = binder.var(tape, &format!("action.{name}.b"))?;
    let z = tape.linear(x, w, b)?;
    tape.relu(z)
}

/// Head for one proposal given in image coordinates. `appearance` and
/// `offsets` are the frame-A features and offset field of `level`.
pub fn action_head_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ActionConfig,
    appearance: Var,
    offsets: Var,
    level: usize,
    proposal: &RoiBox,
) -> Result<ActionVars> {
    let roi = proposal.scaled(1.0 / (1u32 << (level + 1)) as f32);
    let mut vecs = Vec::with_capacity(2);
    for (name, feature) in [("app", appearance), ("mot", offsets)] {
        let pooled = tape.roi_align(feature, &roi, cfg.roi, cfg.roi, cfg.samples)?;
        let n = tape.shape(pooled).iter().product();
        let flat = tape.reshape(pooled, &[1, n])?;
        vecs.push(dense_relu(tape, binder, name, flat)?);
    }
    let joint = tape.concat_cols(vecs[0], vecs[1])?;
    let (cw, cb) = (binder.var(tape, "action.cls.w")?, binder.var(tape, "action.cls.b")?);
    let logits = tape.linear(joint, cw, cb)?;
    let (bw, bb) = (binder.var(tape, "action.box.w")?, binder.var(tape, "action.box.b")?);
    let deltas = tape.linear(joint, bw, bb)?;
    Ok(ActionVars {
        motion: vecs[1],
        logits,
        deltas,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionDetection {
    pub bbox: RoiBox,
    pub logits: Vec<f32>,
}

impl ActionDetection {
    /// Predicted class; ties go to the lower index.
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn probabilities(&self) -> Vec<f32> {
        softmax(&self.logits)
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f32]) -> Vec<f32> {
    let m = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = v.iter().map(|&x| ((x - m) as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| (x / z) as f32).collect()
}

/// Backbone, offset predictor and action head; the deformable warp and the
/// pose head of the trunk are not used.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionModel {
    pub trunk: ModelConfig,
    pub config: ActionConfig,
    pub params: ParamStore,
}

impl ActionModel {
    /// Trunk weights taken from a trained pose model.
    pub fn from_pose(pose: &PoseModel, config: ActionConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        for prefix in TRUNK_PREFIXES {
            params.merge(&pose.params.subset(prefix));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_action_head(&config, &pose.config, &mut rng, &mut params);
        ActionModel {
            trunk: pose.config,
            config,
            params,
        }
    }

    /// Randomly initialized trunk. The offset predictor gets He weights
    /// rather than the zeros used before motion training, so its output
    /// still depends on the frame difference.
    pub fn scratch(trunk: ModelConfig, config: ActionConfig, seed: u64) -> Self {
        let mut pose = PoseModel::new(trunk, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let (oc, c) = (trunk.offsets.channels(), trunk.backbone.channels);
        for l in 0..trunk.backbone.scales {
            pose.params.insert(offset_param(l, "w"), conv_weight(oc, c, 3, &mut rng));
        }
        ActionModel::from_pose(&pose, config, derive_seed(seed, 2))
    }

    pub fn parameter_names(trunk: &ModelConfig, config: &ActionConfig) -> Vec<String> {
        let store = ActionModel::scratch(*trunk, *config, 0).params;
        store.names().cloned().collect()
    }

    pub fn from_params(trunk: ModelConfig, config: ActionConfig, params: ParamStore) -> Result<Self> {
        let reference = ActionModel::scratch(trunk, config, 0).params;
        let missing: Vec<&String> = reference.names().filter(|n| !params.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("checkpoint is missing sections: {missing:?}")));
        }
        let mut kept = ParamStore::new();
        for (name, t) in reference.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::config(format!("section {name} has shape {:?}, config expects {:?}", got.shape(), t.shape())));
            }
            kept.insert(name.clone(), got.clone());
        }
        Ok(ActionModel { trunk, config, params: kept })
    }

    pub fn binder(&self) -> Binder<'_> {
        let b = Binder::new(&self.params);
        if self.config.train_trunk {
            b
        } else {
            b.freeze(&TRUNK_PREFIXES)
        }
    }

    pub fn level_of(&self, proposal: &RoiBox) -> usize {
        crate::detection::assign_level(proposal, self.trunk.backbone.scales, self.trunk.head.canonical_size)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        frame_a: &Tensor,
        frame_b: &Tensor,
        delta: i32,
        proposals: &[RoiBox],
    ) -> Result<Vec<ActionVars>> {
        let fa = tape.constant(frame_a.clone());
        let pyr_a = backbone_forward(tape, binder, &self.trunk.backbone, fa)?;
        let pyr_b = if delta == 0 {
            pyr_a.clone()
        } else {
            let fb = tape.constant(frame_b.clone());
            backbone_forward(tape, binder, &self.trunk.backbone, fb)?
        };
        let diffs = compute_difference(tape, &pyr_a, &pyr_b, delta)?;
        let mut offsets: Vec<Option<Var>> = vec![None; diffs.len()];
        proposals
            .iter()
            .map(|p| {
                let level = self.level_of(p);
                let off = match offsets[level] {
                    Some(v) => v,
                    None => {
                        let v = predict_offset_level(tape, binder, diffs[level], level)?;
                        offsets[level] = Some(v);
                        v
                    }
                };
                action_head_forward(tape, binder, &self.config, pyr_a[level], off, level, p)
            })
            .collect()
    }

    pub fn detect(&self, frame_a: &Tensor, frame_b: &Tensor, delta: i32, proposals: &[RoiBox]) -> Result<Vec<ActionDetection>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params).freeze(&[""]);
        let vars = self.forward(&mut tape, &mut binder, frame_a, frame_b, delta, proposals)?;
        Ok(proposals
            .iter()
            .zip(vars)
            .map(|(p, v)| {
                let d = tape.value(v.deltas).data();
                ActionDetection {
                    bbox: decode_box(p, [d[0], d[1], d[2], d[3]]),
                    logits: tape.value(v.logits).data().to_vec(),
                }
            })
            .collect())
    }
}

/// One proposal with its regression target and class label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionTarget {
    pub proposal: RoiBox,
    pub gt: RoiBox,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct ActionExample {
    pub pair: FramePair,
    pub targets: Vec<ActionTarget>,
}

/// Mean over targets of class cross-entropy plus `box_weight` times the box
/// smooth-L1.
pub fn action_gradients(model: &ActionModel, example: &ActionExample, box_weight: f32) -> Result<(f32, GradMap)> {
    if example.targets.is_empty() {
        return Err(Error::DegenerateLoss("action example without targets".into()));
    }
    if let Some(t) = example.targets.iter().find(|t| t.label >= model.config.classes) {
        return Err(Error::config_key(
            "action.classes",
            format!("label {} outside {} classes", t.label, model.config.classes),
        ));
    }
    let proposals: Vec<RoiBox> = example.targets.iter().map(|t| t.proposal).collect();
    let mut tape = Tape::new();
    let mut binder = model.binder();
    let pair = &example.pair;
    let vars = model.forward(&mut tape, &mut binder, &pair.frame_a, &pair.frame_b, pair.delta, &proposals)?;
    let n = example.targets.len() as f32;
    let mut total: Option<Var> = None;
    for (v, t) in vars.iter().zip(&example.targets) {
        let ce = tape.softmax_ce(v.logits, &[t.label])?;
        let target = Tensor::new(&[1, 4], encode_deltas(&t.proposal, &t.gt).to_vec())?;
        let sl1 = tape.smooth_l1(v.deltas, &target, 1.0)?;
        let sl1 = tape.scale(sl1, box_weight)?;
        let term = tape.add(ce, sl1)?;
        let term = tape.scale(term, 1.0 / n)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let loss = total.expect("at least one target");
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, binder.gradients(&mut grads)))
}

/// One optimizer step over `examples`; returns the mean loss.
pub fn train_action_batch(model: &mut ActionModel, optimizer: &mut Optimizer, examples: &[ActionExample], box_weight: f32) -> Result<f32> {
    if examples.is_empty() {
        return Err(Error::config_key("train.batch", "must be positive"));
    }
    let mut acc = GradMap::new();
    let mut total = 0.0;
    for ex in examples {
        let (loss, grads) = action_gradients(model, ex, box_weight)?;
        total += loss;
        accumulate(&mut acc, grads);
    }
    scale_grads(&mut acc, 1.0 / examples.len() as f32);
    optimizer.step(&mut model.params, &acc)?;
    Ok(total / examples.len() as f32)
}

/// GT box of `gt` jittered by up to `jitter` of its size, kept inside the frame.
pub fn jitter_box(gt: &RoiBox, height: usize, width: usize, jitter: f32, rng: &mut impl Rng) -> RoiBox {
    let (h, w) = (gt.height(), gt.width());
    let mut j = || if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
    let (cy, cx) = gt.center();
    let (cy, cx) = (cy + j() * h, cx + j() * w);
    let (h, w) = (h * (1.0 + j()), w * (1.0 + j()));
    RoiBox::new(
        (cx - 0.5 * w).max(0.0),
        (cy - 0.5 * h).max(0.0),
        (cx + 0.5 * w).min(width as f32),
        (cy + 0.5 * h).min(height as f32),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionTrainSettings {
    pub batch: usize,
    pub policy: DeltaPolicy,
    pub jitter: f32,
    pub box_weight: f32,
}

impl Default for ActionTrainSettings {
    fn default() -> Self {
        ActionTrainSettings {
            batch: 8,
            policy: DeltaPolicy::Range(0, 10),
            jitter: 0.1,
            box_weight: 1.0,
        }
    }
}

/// Supervised step on true motion-class labels, batch drawn from `(seed, step)`.
pub fn train_action_step(
    model: &mut ActionModel,
    optimizer: &mut Optimizer,
    data: &Dataset,
    settings: &ActionTrainSettings,
    seed: u64,
    step: u64,
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::config_key("data.train_videos", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
    let mut batch = Vec::with_capacity(settings.batch);
    for _ in 0..settings.batch {
        let video = &data.videos[rng.random_range(0..data.len())];
        let pair = video.sample_pair(settings.policy, &mut rng)?;
        let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
        let targets = pair
            .gt_a
            .iter()
            .map(|g| ActionTarget {
                proposal: jitter_box(&g.bbox, h, w, settings.jitter, &mut rng),
                gt: g.bbox,
                label: video.class.index(),
            })
            .collect();
        batch.push(ActionExample { pair, targets });
    }
    train_action_batch(model, optimizer, &batch, settings.box_weight)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionEvalResult {
    /// Fraction of figures with the right class and a box of IoU >= 0.5.
    pub accuracy: f32,
    /// Fraction of figures with the right class, ignoring the box.
    pub class_accuracy: f32,
    pub figures: usize,
}

/// Localization accuracy on pairs `(t, t + delta)`, `frames_per_video` frame
/// A indices per video drawn from `seed` alone so every delta sees the
/// same frames.
pub fn evaluate_action(model: &ActionModel, data: &Dataset, delta: i32, frames_per_video: usize, max_delta: u32, seed: u64) -> Result<ActionEvalResult> {
    let (mut correct, mut class_correct, mut total) = (0usize, 0usize, 0usize);
    let m = max_delta as usize;
    for (vi, video) in data.videos.iter().enumerate() {
        if video.len() <= m || delta.unsigned_abs() as usize > m {
            return Err(Error::config_key("eval.delta", format!("|delta| must be <= {m} and videos longer than {m}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, vi as u64));
        for _ in 0..frames_per_video {
            let t = rng.random_range(0..video.len() - m);
            let pair = if delta >= 0 { video.pair(t, delta)? } else { video.pair(t + m, delta)? };
            let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
            let proposals: Vec<RoiBox> = pair.gt_a.iter().map(|g| jitter_box(&g.bbox, h, w, 0.1, &mut rng)).collect();
            let dets = model.detect(&pair.frame_a, &pair.frame_b, pair.delta, &proposals)?;
            for (d, g) in dets.iter().zip(&pair.gt_a) {
                let right = d.class() == video.class.index();
                class_correct += right as usize;
                correct += (right && d.bbox.iou(&g.bbox) >= 0.5) as usize;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Metric("no figures to classify".into()));
    }
    Ok(ActionEvalResult {
        accuracy: correct as f32 / total as f32,
        class_accuracy: class_correct as f32 / total as f32,
        figures: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::synth::SceneConfig;

    fn small_trunk() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.channels = 8;
        c.backbone.stem_width = 8;
        c.head.channels = 8;
        c
    }

    fn small_action(classes: usize) -> ActionConfig {
        ActionConfig {
            classes,
            width: 16,
            ..ActionConfig::default()
        }
    }

    #[test]
    fn logit_count_and_zero_offsets() {
        let trunk = small_trunk();
        let pose = PoseModel::new(trunk, 1);
        let model = ActionModel::from_pose(&pose, small_action(5), 2);
        let data = Dataset::generate(&SceneConfig::default(), 1, 3).unwrap();
        let f = data.videos[0].frame(0);
        let boxes = [RoiBox::new(20.0, 20.0, 40.0, 40.0), RoiBox::new(10.0, 5.0, 30.0, 35.0)];
        assert_eq!(model.level_of(&boxes[0]), model.level_of(&boxes[1]));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.params);
        let vars = model.forward(&mut tape, &mut binder, &f, &f, 0, &boxes).unwrap();
        assert_eq!(tape.shape(vars[0].logits), &[1, 5]);
        // The pose model starts with a zero offset predictor, so the motion
        // vector is relu(bias) = 0 for every proposal.
        for v in &vars {
            assert!(tape.value(v.motion).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn from_pose_copies_trunk() {
        let trunk = small_trunk();
        let mut pose = PoseModel::new(trunk, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        pose.params.insert(offset_param(0, "w"), conv_weight(trunk.offsets.channels(), 8, 3, &mut rng));
        let model = ActionModel::from_pose(&pose, small_action(3), 5);
        for prefix in TRUNK_PREFIXES {
            assert_eq!(model.params.subset(prefix), pose.params.subset(prefix));
        }
        assert!(!model.params.contains("head.fc1.w"));
    }

    #[test]
    fn frozen_trunk_gets_no_gradient() {
        let trunk = small_trunk();
        let model = ActionModel::scratch(trunk, small_action(6), 1);
        let data = Dataset::generate(&SceneConfig::default(), 1, 2).unwrap();
        let pair = data.videos[0].pair(2, 4).unwrap();
        let targets = vec![ActionTarget {
            proposal: pair.gt_a[0].bbox,
            gt: pair.gt_a[0].bbox,
            label: 2,
        }];
        let (_, grads) = action_gradients(&model, &ActionExample { pair: pair.clone(), targets: targets.clone() }, 1.0).unwrap();
        assert!(grads.keys().all(|k| k.starts_with("action.")));
        let bad = vec![ActionTarget { label: 6, ..targets[0] }];
        assert!(matches!(action_gradients(&model, &ActionExample { pair, targets: bad }, 1.0), Err(Error::Config { .. })));
    }

    #[test]
    fn single_class_loss_vanishes() {
        let trunk = small_trunk();
        let mut model = ActionModel::scratch(trunk, small_action(1), 3);
        let data = Dataset::generate(&SceneConfig::default(), 1, 4).unwrap();
        let pair = data.videos[0].pair(0, 3).unwrap();
        let ex = ActionExample {
            targets: vec![ActionTarget {
                proposal: pair.gt_a[0].bbox,
                gt: pair.gt_a[0].bbox,
                label: 0,
            }],
            pair,
        };
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
        for _ in 0..50 {
            train_action_batch(&mut model, &mut opt, std::slice::from_ref(&ex), 1.0).unwrap();
        }
        let (loss, _) = action_gradients(&model, &ex, 1.0).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let trunk = small_trunk();
        let mut model = ActionModel::scratch(trunk, small_action(4), 5);
        let data = Dataset::generate(&SceneConfig::default(), 4, 8).unwrap();
        let batch: Vec<ActionExample> = data
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let pair = v.pair(1, 6).unwrap();
                ActionExample {
                    targets: vec![ActionTarget {
                        proposal: pair.gt_a[0].bbox,
                        gt: pair.gt_a[0].bbox,
                        label: i,
                    }],
                    pair,
                }
            })
            .collect();
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
        let first = train_action_batch(&mut model, &mut opt, &batch, 1.0).unwrap();
        let mut last = first;
        for _ in 0..200 {
            last = train_action_batch(&mut model, &mut opt, &batch, 1.0).unwrap();
        }
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn from_params_checks_sections() {
        let trunk = small_trunk();
        let cfg = small_action(6);
        let model = ActionModel::scratch(trunk, cfg, 1);
        let back = ActionModel::from_params(trunk, cfg, model.params.clone()).unwrap();
        assert_eq!(back, model);
        let mut p = model.params.clone();
        p.remove("action.cls.w");
        assert!(matches!(ActionModel::from_params(trunk, cfg, p), Err(Error::Config { .. })));
    }

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[1.0, 1.0, 3.0]);
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(argmax(&[2.0, 5.0, 5.0]), 1);
    }
}
