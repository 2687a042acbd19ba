//! Multi-scale RoI head (person score, box refinement, joint heatmaps),
//! its training loss, pose decoding and keypoint metrics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{conv_weight, dense_weight, Binder, ParamStore};
use crate::sampling::RoiBox;
use crate::synth::GroundTruthInstance;
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Scale applied to box deltas so that typical targets are of order one.
pub const BOX_DELTA_WEIGHTS: [f32; 4] = [10.0, 10.0, 5.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub joints: usize,
    pub channels: usize,
    pub hidden: usize,
    pub box_roi: usize,
    pub heat_roi: usize,
    pub samples: usize,
    /// Box side, in finest-level feature pixels, that maps to the finest level.
    pub canonical_size: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            joints: 5,
            channels: 32,
            hidden: 128,
            box_roi: 7,
            heat_roi: 14,
            samples: 2,
            canonical_size: 8.0,
        }
    }
}

pub fn init_head(cfg: &HeadConfig, rng: &mut impl Rng, store: &mut ParamStore) {
    let flat = cfg.channels * cfg.box_roi * cfg.box_roi;
    let dense = [("fc1", flat, cfg.hidden), ("fc2", cfg.hidden, cfg.hidden), ("cls", cfg.hidden, 1), ("box", cfg.hidden, 4)];
    for (name, i, o) in dense {
        store.insert(format!("head.{name}.w"), dense_weight(i, o, rng));
        store.insert(format!("head.{name}.b"), Tensor::zeros(&[o]));
    }
    store.insert("head.kp1.w", conv_weight(cfg.channels, cfg.channels, 3, rng));
    store.insert("head.kp1.b", Tensor::zeros(&[cfg.channels]));
    store.insert("head.kp2.w", conv_weight(cfg.joints, cfg.channels, 3, rng));
    store.insert("head.kp2.b", Tensor::zeros(&[cfg.joints]));
}

/// Pyramid level (0-based, stride `2^(level+1)`) for a box in image pixels.
pub fn assign_level(proposal: &RoiBox, scales: usize, canonical_size: f32) -> usize {
    let side = proposal.area().sqrt() / (2.0 * canonical_size);
    let level = side.log2().floor();
    if level.is_nan() || level < 0.0 {
        0
    } else {
        (level as usize).min(scales - 1)
    }
}

/// Graph handles for one proposal.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[1, 1]`
    pub person: Var,
    /// `[1, 4]`
    pub deltas: Var,
    /// `[J, heat_roi, heat_roi]`, only built when requested.
    pub heatmap: Option<Var>,
}

/// Runs the head on one proposal given in image coordinates.
pub fn head_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &HeadConfig,
    feature: Var,
    level: usize,
    proposal: &RoiBox,
    with_heatmap: bool,
) -> Result<HeadVars> {
    let roi = proposal.scaled(1.0 / (1u32 << (level + 1)) as f32);
    let pooled = tape.roi_align(feature, &roi, cfg.box_roi, cfg.box_roi, cfg.samples)?;
    let flat = tape.reshape(pooled, &[1, cfg.channels * cfg.box_roi * cfg.box_roi])?;
    let mut h = flat;
    for name in ["fc1", "fc2"] {
        let w = binder.var(tape, &format!("head.{name}.w"))?;
        let b = binder.var(tape, &format!("head.{name}.b"))?;
        let z = tape.linear(h, w, b)?;
        h = tape.relu(z)?;
    }
    let (cw, cb) = (binder.var(tape, "head.cls.w")?, binder.var(tape, "head.cls.b")?);
    let person = tape.linear(h, cw, cb)?;
    let (bw, bb) = (binder.var(tape, "head.box.w")?, binder.var(tape, "head.box.b")?);
    let deltas = tape.linear(h, bw, bb)?;
    let heatmap = if with_heatmap {
        let pooled = tape.roi_align(feature, &roi, cfg.heat_roi, cfg.heat_roi, cfg.samples)?;
        let (w1, b1) = (binder.var(tape, "head.kp1.w")?, binder.var(tape, "head.kp1.b")?);
        let z = tape.conv2d(pooled, w1, b1, 1, 1)?;
        let a = tape.relu(z)?;
        let (w2, b2) = (binder.var(tape, "head.kp2.w")?, binder.var(tape, "head.kp2.b")?);
        Some(tape.conv2d(a, w2, b2, 1, 1)?)
    } else {
        None
    };
    Ok(HeadVars { person, deltas, heatmap })
}

/// Regression target taking `proposal` to `gt`.
pub fn encode_deltas(proposal: &RoiBox, gt: &RoiBox) -> [f32; 4] {
    let (py, px) = proposal.center();
    let (gy, gx) = gt.center();
    let (ph, pw) = (proposal.height(), proposal.width());
    let w = BOX_DELTA_WEIGHTS;
    [
        w[0] * (gy - py) / ph,
        w[1] * (gx - px) / pw,
        w[2] * (gt.height() / ph).ln(),
        w[3] * (gt.width() / pw).ln(),
    ]
}

pub fn decode_box(proposal: &RoiBox, deltas: [f32; 4]) -> RoiBox {
    let (py, px) = proposal.center();
    let w = BOX_DELTA_WEIGHTS;
    // Clamp size deltas so an untrained head cannot overflow `exp`.
    let h = proposal.height() * (deltas[2] / w[2]).clamp(-4.0, 4.0).exp();
    let wd = proposal.width() * (deltas[3] / w[3]).clamp(-4.0, 4.0).exp();
    let cy = py + deltas[0] / w[0] * proposal.height();
    let cx = px + deltas[1] / w[1] * proposal.width();
    RoiBox::new(cx - 0.5 * wd, cy - 0.5 * h, cx + 0.5 * wd, cy + 0.5 * h)
}

/// Heatmap bin of a keypoint (image index coordinates) inside a proposal,
/// or `None` when it falls outside.
pub fn heatmap_target(proposal: &RoiBox, y: f32, x: f32, size: usize) -> Option<(usize, usize)> {
    let by = ((y + 0.5 - proposal.y0) / proposal.height() * size as f32).floor();
    let bx = ((x + 0.5 - proposal.x0) / proposal.width() * size as f32).floor();
    if by >= 0.0 && bx >= 0.0 && (by as usize) < size && (bx as usize) < size {
        Some((by as usize, bx as usize))
    } else {
        None
    }
}

/// Centre of heatmap bin `(by, bx)` in image index coordinates.
pub fn heatmap_bin_center(proposal: &RoiBox, by: usize, bx: usize, size: usize) -> (f32, f32) {
    (
        proposal.y0 + (by as f32 + 0.5) * proposal.height() / size as f32 - 0.5,
        proposal.x0 + (bx as f32 + 0.5) * proposal.width() / size as f32 - 0.5,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU >= 0.5 with some GT is positive (best GT wins), < 0.3 with all GT is
/// negative, anything between is ignored.
pub fn label_proposals(proposals: &[RoiBox], gts: &[GroundTruthInstance]) -> Vec<ProposalLabel> {
    proposals
        .iter()
        .map(|p| {
            let mut best = (0.0f32, usize::MAX);
            for (i, g) in gts.iter().enumerate() {
                let iou = p.iou(&g.bbox);
                if iou > best.0 {
                    best = (iou, i);
                }
            }
            if best.0 >= 0.5 {
                ProposalLabel::Positive(best.1)
            } else if best.0 < 0.3 {
                ProposalLabel::Negative
            } else {
                ProposalLabel::Ignore
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub person: f32,
    pub bbox: f32,
    pub heatmap: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            person: 1.0,
            bbox: 1.0,
            heatmap: 1.0,
        }
    }
}

/// Heatmap targets of `gt` inside `proposal`.
pub fn heatmap_targets(proposal: &RoiBox, gt: &GroundTruthInstance, size: usize) -> Vec<Option<(usize, usize)>> {
    gt.keypoints
        .iter()
        .map(|&(y, x, vis)| if vis { heatmap_target(proposal, y, x, size) } else { None })
        .collect()
}

/// Weighted sum of the mean person BCE over labelled proposals, the box
/// smooth-L1 over positives and the heatmap cross-entropy over positives.
/// `outputs[i]` must carry a heatmap for every positive proposal.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &[HeadVars],
    proposals: &[RoiBox],
    labels: &[ProposalLabel],
    gts: &[GroundTruthInstance],
    heat_size: usize,
    weights: &LossWeights,
) -> Result<Var> {
    let counted = labels.iter().filter(|l| **l != ProposalLabel::Ignore).count();
    if counted == 0 {
        return Err(Error::DegenerateLoss("no positive or negative proposals".into()));
    }
    let positives = labels.iter().filter(|l| matches!(l, ProposalLabel::Positive(_))).count();
    let mut terms = Vec::new();
    let mut heat_terms = Vec::new();
    for ((out, proposal), label) in outputs.iter().zip(proposals).zip(labels) {
        let target = match label {
            ProposalLabel::Ignore => continue,
            ProposalLabel::Negative => 0.0,
            ProposalLabel::Positive(_) => 1.0,
        };
        let bce = tape.bce_with_logits(out.person, &[target])?;
        terms.push(tape.scale(bce, weights.person / counted as f32)?);
        if let ProposalLabel::Positive(g) = *label {
            let gt = &gts[g];
            let d = Tensor::new(&[1, 4], encode_deltas(proposal, &gt.bbox).to_vec())?;
            let sl1 = tape.smooth_l1(out.deltas, &d, positives as f32)?;
            terms.push(tape.scale(sl1, weights.bbox)?);
            let targets = heatmap_targets(proposal, gt, heat_size);
            if targets.iter().any(|t| t.is_some()) {
                let hm = out
                    .heatmap
                    .ok_or_else(|| Error::DegenerateLoss("positive proposal without heatmap".into()))?;
                heat_terms.push(tape.spatial_softmax_ce(hm, &targets)?);
            }
        }
    }
    let n_heat = heat_terms.len() as f32;
    for h in heat_terms {
        terms.push(tape.scale(h, weights.heatmap / n_heat)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Head outputs for one proposal, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutput {
    pub proposal: RoiBox,
    pub level: usize,
    pub person_logit: f32,
    pub deltas: [f32; 4],
    /// `[J, S, S]` logits.
    pub heatmap: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseDetection {
    pub bbox: RoiBox,
    pub person_score: f32,
    /// `(y, x, score)` per joint in image index coordinates.
    pub keypoints: Vec<(f32, f32, f32)>,
}

/// Argmax keypoints of one heatmap stack mapped back through the proposal.
pub fn decode_keypoints(proposal: &RoiBox, heatmap: &Tensor) -> Vec<(f32, f32, f32)> {
    let (j, s, s2) = heatmap.dims3().expect("heatmap rank 3");
    debug_assert_eq!(s, s2);
    (0..j)
        .map(|jj| {
            let plane = heatmap.plane(jj);
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            let m = plane[best];
            let z: f64 = plane.iter().map(|&v| ((v - m) as f64).exp()).sum();
            let (y, x) = heatmap_bin_center(proposal, best / s, best % s, s);
            (y, x, (1.0 / z) as f32)
        })
        .collect()
}

/// Greedy non-maximum suppression; returns kept indices by descending score.
pub fn nms(boxes: &[RoiBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

pub fn decode(outputs: &[RawOutput], score_threshold: f32) -> Vec<PoseDetection> {
    let dets: Vec<PoseDetection> = outputs
        .iter()
        .map(|o| {
            let mut bbox = decode_box(&o.proposal, o.deltas);
            let score = sigmoid(o.person_logit);
            bbox.score = score;
            PoseDetection {
                bbox,
                person_score: score,
                keypoints: decode_keypoints(&o.proposal, &o.heatmap),
            }
        })
        .filter(|d| d.person_score >= score_threshold)
        .collect();
    let boxes: Vec<RoiBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f32> = dets.iter().map(|d| d.person_score).collect();
    nms(&boxes, &scores, 0.5).into_iter().map(|i| dets[i].clone()).collect()
}

/// Greedy one-to-one matching of predictions to GT by descending box IoU;
/// returns `(pred, gt)` pairs with positive overlap.
pub fn match_by_iou(preds: &[PoseDetection], gts: &[GroundTruthInstance]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (p, pd) in preds.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let iou = pd.bbox.iou(&gt.bbox);
            if iou > 0.0 {
                pairs.push((iou, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; preds.len()], vec![false; gts.len()]);
    let mut out = Vec::new();
    for (_, p, g) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            out.push((p, g));
        }
    }
    out
}

fn joint_hits(pred: &PoseDetection, gt: &GroundTruthInstance, radius_fraction: f32) -> usize {
    let radius = radius_fraction * gt.bbox.area().sqrt();
    gt.keypoints
        .iter()
        .zip(&pred.keypoints)
        .filter(|((gy, gx, vis), (py, px, _))| *vis && (gy - py).hypot(gx - px) <= radius)
        .count()
}

/// `(hits, visible)` keypoint counts for one frame.
pub fn pck_counts(preds: &[PoseDetection], gts: &[GroundTruthInstance], radius_fraction: f32) -> (usize, usize) {
    let visible = gts.iter().map(|g| g.visible_count()).sum();
    let hits = match_by_iou(preds, gts)
        .into_iter()
        .map(|(p, g)| joint_hits(&preds[p], &gts[g], radius_fraction))
        .sum();
    (hits, visible)
}

/// Fraction of visible GT keypoints within `radius_fraction * sqrt(box area)`
/// of the matched prediction.
pub fn pck(preds: &[PoseDetection], gts: &[GroundTruthInstance], radius_fraction: f32) -> Result<f32> {
    let (hits, visible) = pck_counts(preds, gts, radius_fraction);
    if visible == 0 {
        return Err(Error::Metric("no visible ground-truth keypoints".into()));
    }
    Ok(hits as f32 / visible as f32)
}

/// Running PCK over many frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct PckAccumulator {
    pub hits: usize,
    pub visible: usize,
}

impl PckAccumulator {
    pub fn add(&mut self, preds: &[PoseDetection], gts: &[GroundTruthInstance], radius_fraction: f32) {
        let (h, v) = pck_counts(preds, gts, radius_fraction);
        self.hits += h;
        self.visible += v;
    }

    pub fn value(&self) -> Result<f32> {
        if self.visible == 0 {
            return Err(Error::Metric("no visible ground-truth keypoints".into()));
        }
        Ok(self.hits as f32 / self.visible as f32)
    }
}

/// Average precision of pooled detections over frames. A detection is a true
/// positive when at least half the visible joints of a not yet matched GT in
/// its frame lie within the PCK radius.
pub fn keypoint_ap(frames: &[(Vec<PoseDetection>, Vec<GroundTruthInstance>)], radius_fraction: f32) -> Result<f32> {
    let total_gt: usize = frames
        .iter()
        .map(|(_, g)| g.iter().filter(|g| g.visible_count() > 0).count())
        .sum();
    if total_gt == 0 {
        return Err(Error::Metric("no visible ground-truth keypoints".into()));
    }
    let mut pooled: Vec<(f32, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, (d, _))| d.iter().enumerate().map(move |(i, det)| (det.person_score, f, i)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = frames.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(pooled.len());
    for &(_, f, i) in &pooled {
        let (dets, gts) = &frames[f];
        let mut best: Option<(usize, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let vis = gt.visible_count();
            if used[f][g] || vis == 0 {
                continue;
            }
            let hits = joint_hits(&dets[i], gt, radius_fraction);
            if 2 * hits >= vis && best.is_none_or(|(_, h)| hits > h) {
                best = Some((g, hits));
            }
        }
        if let Some((g, _)) = best {
            used[f][g] = true;
            tp_flags.push(true);
        } else {
            tp_flags.push(false);
        }
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (n, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        precision.push(tp as f32 / (n + 1) as f32);
        recall.push(tp as f32 / total_gt as f32);
    }
    // Interpolated precision: running maximum from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}
