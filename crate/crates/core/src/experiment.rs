//! Training and evaluation procedures shared by the command-line driver and
//! the integration tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{decode, keypoint_ap, label_proposals, total_loss, LossWeights, PckAccumulator, PoseDetection, ProposalLabel};
use crate::error::{Error, Result};
use crate::model::{sample_proposals, PoseModel};
use crate::motion::{extract_joint_features, fit_motion_regressor, salient_motion_map, MotionRegressor, SaliencyReduction};
use crate::optim::Optimizer;
use crate::params::{accumulate, scale_grads, Binder, GradMap};
use crate::synth::{derive_seed, draw_pair_index, Dataset, DeltaPolicy, FramePair, GroundTruthInstance};
use crate::tape::Tape;
use crate::tracking::{track_sequence, MotaAccumulator, MotaReport};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTrainSettings {
    pub batch: usize,
    pub policy: DeltaPolicy,
    pub weights: LossWeights,
    /// Maximum positive-proposal jitter as a fraction of the box size.
    pub jitter: f32,
    /// Random negative proposals per ground-truth figure.
    pub negatives: usize,
}

impl Default for PoseTrainSettings {
    fn default() -> Self {
        PoseTrainSettings {
            batch: 4,
            policy: DeltaPolicy::Uniform(10),
            weights: LossWeights::default(),
            jitter: 0.1,
            negatives: 1,
        }
    }
}

/// Loss and parameter gradients of one frame pair.
pub fn pair_gradients(model: &PoseModel, pair: &FramePair, settings: &PoseTrainSettings, rng: &mut impl Rng) -> Result<(f32, GradMap)> {
    let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
    let proposals = sample_proposals(&pair.gt_a, h, w, settings.jitter, settings.negatives, rng);
    let labels = label_proposals(&proposals, &pair.gt_a);
    let with_heatmap: Vec<bool> = labels.iter().map(|l| matches!(l, ProposalLabel::Positive(_))).collect();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params);
    let mut graph = model.build_pair(&mut tape, &mut binder, &pair.frame_a, &pair.frame_b, pair.delta)?;
    let heads = model.heads(&mut tape, &mut binder, &mut graph, &proposals, &with_heatmap)?;
    let loss = total_loss(
        &mut tape,
        &heads,
        &proposals,
        &labels,
        &pair.gt_a,
        model.config.head.heat_roi,
        &settings.weights,
    )?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((value, binder.gradients(&mut grads)))
}

/// One optimizer step on a batch drawn deterministically from `(seed, step)`.
/// Returns the mean loss of the batch.
pub fn train_pose_step(
    model: &mut PoseModel,
    optimizer: &mut Optimizer,
    data: &Dataset,
    settings: &PoseTrainSettings,
    seed: u64,
    step: u64,
) -> Result<f32> {
    if data.is_empty() || settings.batch == 0 {
        return Err(Error::config_key("train.batch", "needs a non-empty dataset and batch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
    let mut acc = GradMap::new();
    let mut total = 0.0;
    for _ in 0..settings.batch {
        let video = &data.videos[rng.random_range(0..data.len())];
        let pair = video.sample_pair(settings.policy, &mut rng)?;
        let (loss, grads) = pair_gradients(model, &pair, settings, &mut rng)?;
        total += loss;
        accumulate(&mut acc, grads);
    }
    scale_grads(&mut acc, 1.0 / settings.batch as f32);
    optimizer.step(&mut model.params, &acc)?;
    Ok(total / settings.batch as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Predict frame A from the warped features of frame B.
    Model,
    /// Detect on frame B alone and score against frame A.
    CopyBaseline,
    /// Detect on frame A alone through the zero-difference path.
    SingleFrame,
}

impl EvalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "model" => Some(EvalMode::Model),
            "copy-baseline" => Some(EvalMode::CopyBaseline),
            "single-frame-baseline" => Some(EvalMode::SingleFrame),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Model => "model",
            EvalMode::CopyBaseline => "copy-baseline",
            EvalMode::SingleFrame => "single-frame-baseline",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEvalSettings {
    pub radius: f32,
    pub score_threshold: f32,
    /// Frame-A indices evaluated per video.
    pub frames_per_video: usize,
    /// Largest |delta| of the sweep; frame A indices leave room for it.
    pub max_delta: u32,
    pub jitter: f32,
    pub negatives: usize,
}

impl Default for PoseEvalSettings {
    fn default() -> Self {
        PoseEvalSettings {
            radius: 0.1,
            score_threshold: 0.5,
            frames_per_video: 2,
            max_delta: 10,
            jitter: 0.1,
            negatives: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseEvalResult {
    pub pck: f32,
    pub ap: f32,
    pub pairs: usize,
}

/// Detections for one pair under `mode`. Proposals come from the ground
/// truth of the frame whose features the mode reads.
pub fn detect_pair(model: &PoseModel, pair: &FramePair, mode: EvalMode, settings: &PoseEvalSettings, rng: &mut impl Rng) -> Result<Vec<PoseDetection>> {
    let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
    let (gts, a, b, delta) = match mode {
        EvalMode::Model => (&pair.gt_a, &pair.frame_a, &pair.frame_b, pair.delta),
        EvalMode::CopyBaseline => (&pair.gt_b, &pair.frame_b, &pair.frame_b, 0),
        EvalMode::SingleFrame => (&pair.gt_a, &pair.frame_a, &pair.frame_a, 0),
    };
    let proposals = sample_proposals(gts, h, w, settings.jitter, settings.negatives, rng);
    let raw = model.infer(a, b, delta, &proposals)?;
    Ok(decode(&raw, settings.score_threshold))
}

/// PCK and keypoint AP against frame-A ground truth over pairs at `+delta`
/// and `-delta`. Frame A indices and proposals depend only on `seed`, so
/// every delta and mode sees the same frames A.
pub fn evaluate_pose(model: &PoseModel, data: &Dataset, delta: i32, mode: EvalMode, settings: &PoseEvalSettings, seed: u64) -> Result<PoseEvalResult> {
    let mut acc = PckAccumulator::default();
    let mut frames: Vec<(Vec<PoseDetection>, Vec<GroundTruthInstance>)> = Vec::new();
    let m = settings.max_delta as usize;
    let signs: &[i32] = if delta == 0 { &[1] } else { &[1, -1] };
    for (vi, video) in data.videos.iter().enumerate() {
        if video.len() <= 2 * m || delta.unsigned_abs() as usize > m {
            return Err(Error::config_key("eval.delta", format!("|delta| must be <= {m} and videos longer than {}", 2 * m)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, vi as u64));
        for _ in 0..settings.frames_per_video {
            let t = rng.random_range(m..video.len() - m);
            let proposal_seed: u64 = rng.random();
            for &s in signs {
                let pair = video.pair(t, s * delta)?;
                let mut prng = ChaCha8Rng::seed_from_u64(proposal_seed);
                let dets = detect_pair(model, &pair, mode, settings, &mut prng)?;
                acc.add(&dets, &pair.gt_a, settings.radius);
                frames.push((dets, pair.gt_a));
            }
        }
    }
    Ok(PoseEvalResult {
        pck: acc.value()?,
        ap: keypoint_ap(&frames, settings.radius)?,
        pairs: frames.len(),
    })
}

/// Rows of `(joint features, displacement)` for `pairs_per_video` random
/// pairs per video with `|delta| <= max_delta`.
pub fn motion_rows(model: &PoseModel, data: &Dataset, max_delta: u32, pairs_per_video: usize, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut feats: Vec<f32> = Vec::new();
    let mut disp: Vec<f32> = Vec::new();
    let mut n = 0;
    let mut dim = 0;
    for (vi, video) in data.videos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, vi as u64));
        for _ in 0..pairs_per_video {
            let pair = video.sample_pair(DeltaPolicy::Uniform(max_delta), &mut rng)?;
            let offsets = model.offsets(&pair.frame_a, &pair.frame_b, pair.delta)?;
            for (gt, d) in pair.gt_a.iter().zip(&pair.displacements) {
                let points: Vec<(f32, f32)> = gt.keypoints.iter().map(|k| (k.0, k.1)).collect();
                let f = extract_joint_features(&offsets, &points)?;
                dim = f.shape()[1];
                feats.extend_from_slice(f.data());
                for &(dy, dx) in d {
                    disp.push(dy);
                    disp.push(dx);
                }
                n += points.len();
            }
        }
    }
    if n == 0 {
        return Err(Error::Metric("no joints to regress".into()));
    }
    Ok((Tensor::new(&[n, dim], feats)?, Tensor::new(&[n, 2], disp)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionReadout {
    /// Mean endpoint error of the regressor on held-out joints (pixels).
    pub epe: f32,
    /// Mean endpoint error of predicting zero motion.
    pub zero_epe: f32,
    pub train_rows: usize,
    pub eval_rows: usize,
}

pub fn endpoint_error(pred: &Tensor, truth: &Tensor) -> f32 {
    let p = pred.data();
    let t = truth.data();
    let n = t.len() / 2;
    (0..n)
        .map(|i| ((p[2 * i] - t[2 * i]) as f64).hypot((p[2 * i + 1] - t[2 * i + 1]) as f64))
        .sum::<f64>() as f32
        / n as f32
}

/// Fits the ridge readout on `train` and scores it on `eval`.
pub fn motion_readout(model: &PoseModel, train: &Dataset, eval: &Dataset, max_delta: u32, lambda: f64, seed: u64) -> Result<(MotionRegressor, MotionReadout)> {
    let (xt, yt) = motion_rows(model, train, max_delta, 2, seed)?;
    let reg = fit_motion_regressor(&xt, &yt, lambda)?;
    let (xe, ye) = motion_rows(model, eval, max_delta, 2, seed ^ 0x5eed)?;
    let pred = reg.predict(&xe)?;
    let zero = Tensor::zeros(ye.shape());
    Ok((
        reg,
        MotionReadout {
            epe: endpoint_error(&pred, &ye),
            zero_epe: endpoint_error(&zero, &ye),
            train_rows: xt.shape()[0],
            eval_rows: xe.shape()[0],
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyStats {
    pub inside: f32,
    pub outside: f32,
}

impl SaliencyStats {
    pub fn ratio(&self) -> f32 {
        self.inside / self.outside
    }
}

/// Mean salient-motion value inside and outside frame-A person boxes, one
/// pair per video with a non-zero `|delta| <= max_delta`.
pub fn saliency_stats(model: &PoseModel, data: &Dataset, max_delta: u32, reduction: SaliencyReduction, seed: u64) -> Result<SaliencyStats> {
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for (vi, video) in data.videos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, vi as u64));
        let pair = loop {
            let p = draw_pair_index(video.len(), DeltaPolicy::Uniform(max_delta), &mut rng)?;
            if p.1 != 0 {
                break video.pair(p.0, p.1)?;
            }
        };
        let offsets = model.offsets(&pair.frame_a, &pair.frame_b, pair.delta)?;
        let map = salient_motion_map(&offsets, reduction)?;
        let (h, w) = map.dims2()?;
        let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
        for y in 0..h {
            for x in 0..w {
                let v = map.data()[y * w + x] as f64;
                let (cy, cx) = (y as f32 + 0.5, x as f32 + 0.5);
                let hit = pair.gt_a.iter().any(|g| cy >= g.bbox.y0 && cy < g.bbox.y1 && cx >= g.bbox.x0 && cx < g.bbox.x1);
                if hit {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
        inside += si / ni.max(1) as f64;
        outside += so / no.max(1) as f64;
    }
    let n = data.len().max(1) as f64;
    Ok(SaliencyStats {
        inside: (inside / n) as f32,
        outside: (outside / n) as f32,
    })
}

/// Per-frame detections of every video linked into tracks and scored with
/// MOTA. Frame `t` pairs with `t + delta`, or `t - delta` near the end.
pub fn track_videos(model: &PoseModel, data: &Dataset, delta: i32, settings: &PoseEvalSettings, gate: f64, iou_threshold: f32, seed: u64) -> Result<MotaReport> {
    let mut acc = MotaAccumulator::default();
    for (vi, video) in data.videos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, vi as u64));
        let mut frames = Vec::with_capacity(video.len());
        let mut gts = Vec::with_capacity(video.len());
        for t in 0..video.len() {
            let fits = |d: i32| (0..video.len() as i64).contains(&(t as i64 + d as i64));
            let d = if fits(delta) { delta } else { -delta };
            let pair = video.pair(t, d)?;
            frames.push(detect_pair(model, &pair, EvalMode::Model, settings, &mut rng)?);
            gts.push(pair.gt_a);
        }
        let tracks = track_sequence(frames, gate)?;
        acc.add_video(&tracks, &gts, iou_threshold)?;
    }
    acc.report()
}
