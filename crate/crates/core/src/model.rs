//! The full pose model: shared backbone on both frames, motion offsets from
//! their feature difference, deformable warp of frame B, and the RoI head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{backbone_forward, init_backbone, BackboneConfig};
use crate::detection::{assign_level, head_forward, init_head, HeadConfig, HeadVars, RawOutput};
use crate::dimofs::{compute_difference, init_dimofs, predict_offset_level, warp_level, OffsetConfig, OffsetPyramid};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::sampling::RoiBox;
use crate::synth::GroundTruthInstance;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub offsets: OffsetConfig,
    pub head: HeadConfig,
}


impl ModelConfig {
    /// Every parameter a checkpoint of this configuration must contain.
    pub fn parameter_names(&self) -> Vec<String> {
        let store = PoseModel::new(*self, 0).params;
        store.names().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Per-pair graph state. Offsets and warped features are built per level on
/// first use so training only pays for levels its proposals touch.
pub struct PairGraph {
    pub pyr_a: Vec<Var>,
    pub pyr_b: Vec<Var>,
    pub diffs: Vec<Var>,
    pub offsets: Vec<Option<Var>>,
    pub warped: Vec<Option<Var>>,
    pub delta: i32,
}

impl PoseModel {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_backbone(&config.backbone, &mut rng, &mut params);
        init_dimofs(&config.offsets, config.backbone.scales, config.backbone.channels, &mut rng, &mut params);
        init_head(&config.head, &mut rng, &mut params);
        PoseModel { config, params }
    }

    /// Checks that `params` holds exactly the tensors this config expects.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = PoseModel::new(config, 0).params;
        let missing: Vec<&String> = reference.names().filter(|n| !params.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("checkpoint is missing sections: {missing:?}")));
        }
        for (name, t) in reference.iter() {
            let got = params.get(name)?.shape();
            if got != t.shape() {
                return Err(Error::config(format!("section {name} has shape {got:?}, config expects {:?}", t.shape())));
            }
        }
        Ok(PoseModel {
            config,
            params: params.subset(""),
        })
    }

    /// Runs the backbone on both frames and forms the differences. At
    /// `delta == 0` frame B is never processed: A stands in for it.
    pub fn build_pair(&self, tape: &mut Tape, binder: &mut Binder, frame_a: &Tensor, frame_b: &Tensor, delta: i32) -> Result<PairGraph> {
        let fa = tape.constant(frame_a.clone());
        let pyr_a = backbone_forward(tape, binder, &self.config.backbone, fa)?;
        let pyr_b = if delta == 0 {
            pyr_a.clone()
        } else {
            let fb = tape.constant(frame_b.clone());
            backbone_forward(tape, binder, &self.config.backbone, fb)?
        };
        let diffs = compute_difference(tape, &pyr_a, &pyr_b, delta)?;
        let n = pyr_a.len();
        Ok(PairGraph {
            pyr_a,
            pyr_b,
            diffs,
            offsets: vec![None; n],
            warped: vec![None; n],
            delta,
        })
    }

    pub fn offset_level(&self, tape: &mut Tape, binder: &mut Binder, graph: &mut PairGraph, level: usize) -> Result<Var> {
        if let Some(v) = graph.offsets[level] {
            return Ok(v);
        }
        let v = predict_offset_level(tape, binder, graph.diffs[level], level)?;
        graph.offsets[level] = Some(v);
        Ok(v)
    }

    pub fn warped_level(&self, tape: &mut Tape, binder: &mut Binder, graph: &mut PairGraph, level: usize) -> Result<Var> {
        if let Some(v) = graph.warped[level] {
            return Ok(v);
        }
        let offsets = self.offset_level(tape, binder, graph, level)?;
        let v = warp_level(tape, binder, &self.config.offsets, graph.pyr_b[level], offsets, level)?;
        graph.warped[level] = Some(v);
        Ok(v)
    }

    pub fn level_of(&self, proposal: &RoiBox) -> usize {
        assign_level(proposal, self.config.backbone.scales, self.config.head.canonical_size)
    }

    /// Head outputs for each proposal; heatmaps only where `with_heatmap`.
    pub fn heads(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        graph: &mut PairGraph,
        proposals: &[RoiBox],
        with_heatmap: &[bool],
    ) -> Result<Vec<HeadVars>> {
        proposals
            .iter()
            .zip(with_heatmap)
            .map(|(p, &hm)| {
                let level = self.level_of(p);
                let feature = self.warped_level(tape, binder, graph, level)?;
                head_forward(tape, binder, &self.config.head, feature, level, p, hm)
            })
            .collect()
    }

    /// Inference without gradients.
    pub fn infer(&self, frame_a: &Tensor, frame_b: &Tensor, delta: i32, proposals: &[RoiBox]) -> Result<Vec<RawOutput>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params).freeze(&[""]);
        let mut graph = self.build_pair(&mut tape, &mut binder, frame_a, frame_b, delta)?;
        let heads = self.heads(&mut tape, &mut binder, &mut graph, proposals, &vec![true; proposals.len()])?;
        Ok(self.detach(&tape, proposals, heads))
    }

    /// Offset fields of every level for a frame pair.
    pub fn offsets(&self, frame_a: &Tensor, frame_b: &Tensor, delta: i32) -> Result<OffsetPyramid> {
        Ok(self.analyze(frame_a, frame_b, delta, &[])?.1)
    }

    /// Head outputs for `proposals` and the full offset pyramid from a
    /// single pass over both frames.
    pub fn analyze(&self, frame_a: &Tensor, frame_b: &Tensor, delta: i32, proposals: &[RoiBox]) -> Result<(Vec<RawOutput>, OffsetPyramid)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params).freeze(&[""]);
        let mut graph = self.build_pair(&mut tape, &mut binder, frame_a, frame_b, delta)?;
        let levels = (0..self.config.backbone.scales)
            .map(|l| {
                let v = self.offset_level(&mut tape, &mut binder, &mut graph, l)?;
                Ok(tape.value(v).clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = self.heads(&mut tape, &mut binder, &mut graph, proposals, &vec![true; proposals.len()])?;
        let raw = self.detach(&tape, proposals, heads);
        Ok((raw, OffsetPyramid { levels, delta }))
    }

    fn detach(&self, tape: &Tape, proposals: &[RoiBox], heads: Vec<HeadVars>) -> Vec<RawOutput> {
        proposals
            .iter()
            .zip(heads)
            .map(|(p, h)| {
                let d = tape.value(h.deltas).data();
                RawOutput {
                    proposal: *p,
                    level: self.level_of(p),
                    person_logit: tape.value(h.person).item(),
                    deltas: [d[0], d[1], d[2], d[3]],
                    heatmap: tape.value(h.heatmap.expect("heatmap requested")).clone(),
                }
            })
            .collect()
    }
}

/// Training/evaluation proposals: each GT box jittered by up to `jitter` of
/// its size, plus `negatives` random boxes per GT overlapping every GT by
/// IoU < 0.3.
pub fn sample_proposals(gts: &[GroundTruthInstance], height: usize, width: usize, jitter: f32, negatives: usize, rng: &mut impl Rng) -> Vec<RoiBox> {
    let mut out = Vec::new();
    for g in gts {
        let b = g.bbox;
        let (h, w) = (b.height(), b.width());
        let mut j = || rng.random_range(-jitter..=jitter);
        let (cy, cx) = b.center();
        let (cy, cx) = (cy + j() * h, cx + j() * w);
        let (nh, nw) = (h * (1.0 + j()), w * (1.0 + j()));
        out.push(RoiBox::new(cx - nw / 2.0, cy - nh / 2.0, cx + nw / 2.0, cy + nh / 2.0));
    }
    for g in gts {
        let (h, w) = (g.bbox.height(), g.bbox.width());
        let mut found = 0;
        for _ in 0..100 {
            if found == negatives {
                break;
            }
            let nh = h * rng.random_range(0.3..1.0f32);
            let nw = w * rng.random_range(0.3..1.0f32);
            let y0 = rng.random_range(-0.25 * nh..height as f32 - 0.75 * nh);
            let x0 = rng.random_range(-0.25 * nw..width as f32 - 0.75 * nw);
            let cand = RoiBox::new(x0, y0, x0 + nw, y0 + nh);
            if gts.iter().all(|o| cand.iou(&o.bbox) < 0.3) {
                out.push(cand);
                found += 1;
            }
        }
    }
    out
}
