//! Linking per-frame detections into identity tracks and scoring them with
//! CLEAR-MOT accuracy.

use std::collections::{BTreeMap, HashMap};

use crate::detection::PoseDetection;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::synth::GroundTruthInstance;

/// Cost above which a track/detection pair is never linked.
pub const DEFAULT_GATE: f64 = 0.7;

/// Minimum-cost assignment of rows to columns. Rectangular inputs are padded
/// to a square matrix with zero cost; padded pairs are dropped, so the result
/// has `min(rows, cols)` pairs sorted by row.
pub fn hungarian(cost: &Mat) -> Result<Vec<(usize, usize)>> {
    if let Some(i) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Cost(format!("entry ({}, {}) is {}", i / cost.cols.max(1), i % cost.cols.max(1), cost.data[i])));
    }
    let n = cost.rows.max(cost.cols);
    if n == 0 {
        return Ok(Vec::new());
    }
    let at = |r: usize, c: usize| if r < cost.rows && c < cost.cols { cost.at(r, c) } else { 0.0 };
    // Shortest augmenting paths with row/column potentials; index 0 is a
    // sentinel and real rows/columns are 1-based.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] - 1 < cost.rows && j - 1 < cost.cols)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

pub fn assignment_cost(cost: &Mat, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.at(r, c)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: usize,
    pub entries: BTreeMap<usize, PoseDetection>,
}

impl Track {
    pub fn last(&self) -> Option<(usize, &PoseDetection)> {
        self.entries.iter().next_back().map(|(&t, d)| (t, d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn iou_cost(a: &PoseDetection, b: &PoseDetection) -> f64 {
    1.0 - a.bbox.iou(&b.bbox) as f64
}

/// Extends `tracks` with the detections of `frame`. Only tracks that have an
/// entry at `frame - 1` compete for detections; assignments costing more than
/// `gate` are rejected and their detections start new tracks.
pub fn link_tracks(
    tracks: &mut Vec<Track>,
    frame: usize,
    detections: Vec<PoseDetection>,
    cost_fn: impl Fn(&PoseDetection, &PoseDetection) -> f64,
    gate: f64,
) -> Result<()> {
    let live: Vec<usize> = match frame.checked_sub(1) {
        Some(prev) => (0..tracks.len()).filter(|&i| tracks[i].last().map(|(t, _)| t) == Some(prev)).collect(),
        None => Vec::new(),
    };
    let mut cost = Mat::zeros(live.len(), detections.len());
    for (r, &ti) in live.iter().enumerate() {
        let last = tracks[ti].last().map(|(_, d)| d).expect("live track has an entry");
        for (c, det) in detections.iter().enumerate() {
            cost.set(r, c, cost_fn(last, det));
        }
    }
    let mut owner: Vec<Option<usize>> = vec![None; detections.len()];
    for (r, c) in hungarian(&cost)? {
        if cost.at(r, c) <= gate {
            owner[c] = Some(live[r]);
        }
    }
    for (det, owner) in detections.into_iter().zip(owner) {
        match owner {
            Some(ti) => {
                tracks[ti].entries.insert(frame, det);
            }
            None => {
                let id = tracks.iter().map(|t| t.id + 1).max().unwrap_or(0);
                tracks.push(Track {
                    id,
                    entries: BTreeMap::from([(frame, det)]),
                });
            }
        }
    }
    Ok(())
}

/// Links a whole sequence of per-frame detections with the IoU cost.
pub fn track_sequence(frames: Vec<Vec<PoseDetection>>, gate: f64) -> Result<Vec<Track>> {
    let mut tracks = Vec::new();
    for (t, dets) in frames.into_iter().enumerate() {
        link_tracks(&mut tracks, t, dets, iou_cost, gate)?;
    }
    Ok(tracks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct MotaReport {
    pub misses: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub gt_count: usize,
    pub mota: f64,
}

/// Counts accumulated over any number of videos.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MotaAccumulator {
    pub misses: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub gt_count: usize,
}

impl MotaAccumulator {
    /// Scores one video. `gt[t]` holds the annotations of frame `t`.
    pub fn add_video(&mut self, tracks: &[Track], gt: &[Vec<GroundTruthInstance>], iou_threshold: f32) -> Result<()> {
        // gt identity -> hypothesis id, last matched ever and matched in the
        // previous frame.
        let mut last: HashMap<usize, usize> = HashMap::new();
        let mut prev: HashMap<usize, usize> = HashMap::new();
        for (t, gts) in gt.iter().enumerate() {
            let hyps: Vec<(usize, &PoseDetection)> = tracks.iter().filter_map(|tr| tr.entries.get(&t).map(|d| (tr.id, d))).collect();
            let iou = |g: usize, h: usize| gts[g].bbox.iou(&hyps[h].1.bbox);
            let mut gt_taken = vec![false; gts.len()];
            let mut hyp_taken = vec![false; hyps.len()];
            let mut matches: Vec<(usize, usize)> = Vec::new();
            for (g, inst) in gts.iter().enumerate() {
                if let Some(&hid) = prev.get(&inst.identity) {
                    if let Some(h) = hyps.iter().position(|(id, _)| *id == hid) {
                        if !hyp_taken[h] && iou(g, h) >= iou_threshold {
                            gt_taken[g] = true;
                            hyp_taken[h] = true;
                            matches.push((g, h));
                        }
                    }
                }
            }
            let free_g: Vec<usize> = (0..gts.len()).filter(|&g| !gt_taken[g]).collect();
            let free_h: Vec<usize> = (0..hyps.len()).filter(|&h| !hyp_taken[h]).collect();
            // Invalid pairs get a cost larger than any number of valid ones
            // so the matching maximizes the count of valid pairs first.
            let invalid = 1.0 + (free_g.len().max(free_h.len()) as f64);
            let mut cost = Mat::zeros(free_g.len(), free_h.len());
            for (r, &g) in free_g.iter().enumerate() {
                for (c, &h) in free_h.iter().enumerate() {
                    let o = iou(g, h);
                    cost.set(r, c, if o >= iou_threshold { 1.0 - o as f64 } else { invalid });
                }
            }
            for (r, c) in hungarian(&cost)? {
                let (g, h) = (free_g[r], free_h[c]);
                if iou(g, h) >= iou_threshold {
                    hyp_taken[h] = true;
                    gt_taken[g] = true;
                    matches.push((g, h));
                }
            }
            prev.clear();
            for &(g, h) in &matches {
                let gid = gts[g].identity;
                let hid = hyps[h].0;
                if last.get(&gid).is_some_and(|&old| old != hid) {
                    self.id_switches += 1;
                }
                last.insert(gid, hid);
                prev.insert(gid, hid);
            }
            self.misses += gt_taken.iter().filter(|&&m| !m).count();
            self.false_positives += hyp_taken.iter().filter(|&&m| !m).count();
            self.gt_count += gts.len();
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MotaReport> {
        if self.gt_count == 0 {
            return Err(Error::Metric("MOTA needs at least one ground-truth instance".into()));
        }
        let errors = self.misses + self.false_positives + self.id_switches;
        Ok(MotaReport {
            misses: self.misses,
            false_positives: self.false_positives,
            id_switches: self.id_switches,
            gt_count: self.gt_count,
            mota: 1.0 - errors as f64 / self.gt_count as f64,
        })
    }
}

pub fn mota(tracks: &[Track], gt: &[Vec<GroundTruthInstance>], iou_threshold: f32) -> Result<MotaReport> {
    let mut acc = MotaAccumulator::default();
    acc.add_video(tracks, gt, iou_threshold)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::RoiBox;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(cost: &Mat) -> f64 {
        fn go(cost: &Mat, r: usize, used: &mut Vec<bool>) -> f64 {
            if r == cost.rows {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for c in 0..cost.cols {
                if !used[c] {
                    used[c] = true;
                    best = best.min(cost.at(r, c) + go(cost, r + 1, used));
                    used[c] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost.cols])
    }

    fn det(x0: f32, y0: f32) -> PoseDetection {
        PoseDetection {
            bbox: RoiBox::new(x0, y0, x0 + 10.0, y0 + 10.0),
            person_score: 1.0,
            keypoints: Vec::new(),
        }
    }

    fn gt(identity: usize, x0: f32, y0: f32) -> GroundTruthInstance {
        GroundTruthInstance {
            bbox: RoiBox::new(x0, y0, x0 + 10.0, y0 + 10.0),
            keypoints: Vec::new(),
            identity,
        }
    }

    fn track(id: usize, boxes: &[(usize, f32, f32)]) -> Track {
        Track {
            id,
            entries: boxes.iter().map(|&(t, x, y)| (t, det(x, y))).collect(),
        }
    }

    #[test]
    fn hungarian_small_cases() {
        let c = Mat::from_rows(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        let p = hungarian(&c).unwrap();
        assert_eq!(p, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&c, &p), 2.0);
        let mut eye = Mat::identity(4);
        for v in eye.data.iter_mut() {
            *v = 1.0 - *v;
        }
        assert_eq!(hungarian(&eye).unwrap(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let c = Mat::from_rows(5, 5, (0..25).map(|_| rng.random_range(0..100) as f64).collect());
            let p = hungarian(&c).unwrap();
            assert_eq!(p.len(), 5);
            assert_eq!(assignment_cost(&c, &p), brute_force(&c));
        }
    }

    #[test]
    fn hungarian_rectangular_and_errors() {
        let c = Mat::from_rows(2, 3, vec![5.0, 1.0, 9.0, 1.0, 7.0, 8.0]);
        assert_eq!(hungarian(&c).unwrap(), vec![(0, 1), (1, 0)]);
        let t = c.transpose();
        assert_eq!(hungarian(&t).unwrap(), vec![(0, 1), (1, 0)]);
        let bad = Mat::from_rows(1, 2, vec![0.0, f64::NAN]);
        assert!(matches!(hungarian(&bad), Err(Error::Cost(_))));
        assert!(hungarian(&Mat::zeros(0, 3)).unwrap().is_empty());
    }

    #[test]
    fn stationary_detection_forms_one_track() {
        let tracks = track_sequence((0..8).map(|_| vec![det(5.0, 5.0)]).collect(), DEFAULT_GATE).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].len(), 8);
    }

    #[test]
    fn zero_gate_restarts_moving_tracks() {
        let tracks = track_sequence((0..5).map(|t| vec![det(t as f32, 0.0)]).collect(), 0.0).unwrap();
        assert_eq!(tracks.len(), 5);
        assert!(tracks.iter().all(|t| t.len() == 1));
    }

    #[test]
    fn separated_figures_keep_identities() {
        let frames: Vec<Vec<PoseDetection>> = (0..10).map(|t| vec![det(40.0 - t as f32, 0.0), det(t as f32, 0.0)]).collect();
        let gts: Vec<Vec<GroundTruthInstance>> = (0..10).map(|t| vec![gt(0, t as f32, 0.0), gt(1, 40.0 - t as f32, 0.0)]).collect();
        let tracks = track_sequence(frames, DEFAULT_GATE).unwrap();
        assert_eq!(tracks.len(), 2);
        let r = mota(&tracks, &gts, 0.5).unwrap();
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.mota, 1.0);
    }

    #[test]
    fn identity_swap_costs_two_switches() {
        let gts: Vec<Vec<GroundTruthInstance>> = (0..10).map(|_| vec![gt(0, 0.0, 0.0), gt(1, 50.0, 0.0)]).collect();
        let a: Vec<(usize, f32, f32)> = (0..10).map(|t| (t, if t < 5 { 0.0 } else { 50.0 }, 0.0)).collect();
        let b: Vec<(usize, f32, f32)> = (0..10).map(|t| (t, if t < 5 { 50.0 } else { 0.0 }, 0.0)).collect();
        let r = mota(&[track(0, &a), track(1, &b)], &gts, 0.5).unwrap();
        assert_eq!((r.misses, r.false_positives, r.id_switches, r.gt_count), (0, 0, 2, 20));
        assert_eq!(r.mota, 0.9);
    }

    #[test]
    fn mota_edge_cases() {
        let gts: Vec<Vec<GroundTruthInstance>> = (0..4).map(|_| vec![gt(0, 0.0, 0.0)]).collect();
        let r = mota(&[], &gts, 0.5).unwrap();
        assert_eq!((r.misses, r.mota), (4, 0.0));
        assert!(matches!(mota(&[], &[Vec::new()], 0.5), Err(Error::Metric(_))));
    }

    #[test]
    fn stickiness_keeps_previous_correspondence() {
        // Two hypotheses overlap GT 0 at frame 1; the one matched before
        // keeps it even though the other overlaps more.
        let gts = vec![vec![gt(0, 0.0, 0.0)], vec![gt(0, 0.0, 0.0)]];
        let t0 = track(0, &[(0, 0.0, 0.0), (1, 2.0, 0.0)]);
        let t1 = track(1, &[(1, 0.0, 0.0)]);
        let r = mota(&[t0, t1], &gts, 0.5).unwrap();
        assert_eq!((r.id_switches, r.false_positives), (0, 1));
    }

    proptest! {
        #[test]
        fn hungarian_optimal_rectangular(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Mat::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect());
            let p = hungarian(&c).unwrap();
            prop_assert_eq!(p.len(), rows.min(cols));
            let oracle = if rows <= cols { brute_force(&c) } else { brute_force(&c.transpose()) };
            prop_assert!((assignment_cost(&c, &p) - oracle).abs() < 1e-9);
        }

        #[test]
        fn mota_invariant_to_relabeling(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<Vec<GroundTruthInstance>> = (0..6)
                .map(|t| vec![gt(0, t as f32, 0.0), gt(1, 60.0, t as f32)])
                .collect();
            let mut frames: Vec<Vec<PoseDetection>> = Vec::new();
            for t in 0..6 {
                let mut f = Vec::new();
                for g in &gts[t] {
                    if rng.random_bool(0.8) {
                        f.push(det(g.bbox.x0 + rng.random_range(-3.0..3.0), g.bbox.y0));
                    }
                }
                frames.push(f);
            }
            let tracks = track_sequence(frames, DEFAULT_GATE).unwrap();
            let base = mota(&tracks, &gts, 0.5).unwrap();
            let relabeled: Vec<Track> = tracks.iter().map(|t| Track { id: 100 - t.id, entries: t.entries.clone() }).collect();
            prop_assert_eq!(base, mota(&relabeled, &gts, 0.5).unwrap());
            prop_assert!(base.mota <= 1.0);

            let mut spurious = tracks.clone();
            spurious.push(track(999, &[(2, 500.0, 500.0)]));
            let worse = mota(&spurious, &gts, 0.5).unwrap();
            prop_assert!((base.mota - worse.mota - 1.0 / base.gt_count as f64).abs() < 1e-12);
        }
    }
}
