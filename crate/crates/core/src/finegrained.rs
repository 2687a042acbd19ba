//! Fine-grained recognition without action labels for the head: cluster
//! pose and motion descriptors, train the action head on cluster ids, sum its
//! per-pair activations into a video histogram and classify that with a
//! small MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::action::{jitter_box, train_action_batch, ActionConfig, ActionExample, ActionModel, ActionTarget};
use crate::cluster::{cluster_row, kmeans, pca_fit, pose_coordinates, rows_to_mat, ClusterModel, FeatureRecipe};
use crate::detection::{decode_box, decode_keypoints};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::PoseModel;
use crate::motion::extract_joint_features;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{dense_weight, Binder, ParamStore};
use crate::synth::{derive_seed, Dataset, VideoSample};
use crate::tape::{sigmoid, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineGrainedSettings {
    pub k: usize,
    pub pca_dim: usize,
    /// Frame gap of every pair.
    pub gap: usize,
    /// Spacing of frame-A indices when collecting clustering rows.
    pub stride: usize,
    pub kmeans_iters: usize,
    pub pseudo_steps: u64,
    pub pseudo_batch: usize,
    pub pseudo_lr: f32,
    pub jitter: f32,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_lr: f32,
    /// Sum one-hot argmax counts instead of probabilities.
    pub hard_counts: bool,
}

impl Default for FineGrainedSettings {
    fn default() -> Self {
        FineGrainedSettings {
            k: 16,
            pca_dim: 15,
            gap: 5,
            stride: 2,
            kmeans_iters: 100,
            pseudo_steps: 400,
            pseudo_batch: 8,
            pseudo_lr: 1e-3,
            jitter: 0.1,
            mlp_hidden: 64,
            mlp_epochs: 400,
            mlp_lr: 1e-2,
            hard_counts: false,
        }
    }
}

/// One detected person in one frame pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonObservation {
    pub video: usize,
    pub t: usize,
    pub figure: usize,
    /// `2J` pose coordinates.
    pub pose: Vec<f64>,
    /// `[J, D]` motion features at the detected joints.
    pub joint_features: Mat,
}

/// Runs the pose model on pairs `(t, t + gap)` with the frame-A boxes as
/// proposals. Proposals the model scores below 0.5 yield no observation.
pub fn observe_video(model: &PoseModel, video: &VideoSample, index: usize, gap: usize, stride: usize) -> Result<Vec<PersonObservation>> {
    if video.len() <= gap {
        return Err(Error::config_key("finegrained.gap", format!("video of {} frames has no pair at gap {gap}", video.len())));
    }
    let mut out = Vec::new();
    for t in (0..video.len() - gap).step_by(stride.max(1)) {
        let pair = video.pair(t, gap as i32)?;
        let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
        let proposals: Vec<_> = pair.gt_a.iter().map(|g| g.bbox).collect();
        let (raw, offsets) = model.analyze(&pair.frame_a, &pair.frame_b, pair.delta, &proposals)?;
        for (figure, r) in raw.iter().enumerate() {
            if sigmoid(r.person_logit) < 0.5 {
                continue;
            }
            let points: Vec<(f32, f32)> = decode_keypoints(&r.proposal, &r.heatmap)
                .into_iter()
                .map(|(y, x, _)| (y.clamp(0.0, (h - 1) as f32), x.clamp(0.0, (w - 1) as f32)))
                .collect();
            let bbox = decode_box(&r.proposal, r.deltas);
            let features = extract_joint_features(&offsets, &points)?;
            let (j, d) = features.dims2()?;
            out.push(PersonObservation {
                video: index,
                t,
                figure,
                pose: pose_coordinates(&points, bbox.center(), h, w),
                joint_features: Mat::from_rows(j, d, features.data().iter().map(|&v| v as f64).collect()),
            });
        }
    }
    Ok(out)
}

pub fn observe(model: &PoseModel, data: &Dataset, gap: usize, stride: usize) -> Result<Vec<PersonObservation>> {
    let mut out = Vec::new();
    for (i, v) in data.videos.iter().enumerate() {
        out.extend(observe_video(model, v, i, gap, stride)?);
    }
    Ok(out)
}

/// Clustering rows for `obs` under `recipe`.
pub fn build_cluster_features(obs: &[PersonObservation], recipe: FeatureRecipe, pca: Option<&crate::cluster::Pca>) -> Result<Mat> {
    let rows = obs
        .iter()
        .map(|o| cluster_row(recipe, &o.pose, &o.joint_features, pca))
        .collect::<Result<Vec<_>>>()?;
    rows_to_mat(&rows)
}

/// Fits the joint-feature PCA (motion recipe only) and k-means on the
/// training observations; returns the model and each observation's label.
pub fn fit_cluster_model(obs: &[PersonObservation], recipe: FeatureRecipe, settings: &FineGrainedSettings, seed: u64) -> Result<(ClusterModel, Vec<usize>)> {
    if obs.is_empty() {
        return Err(Error::config_key("cluster.k", "no observations to cluster"));
    }
    let pca = match recipe {
        FeatureRecipe::PoseOnly => None,
        FeatureRecipe::PoseMotion => {
            let d = obs[0].joint_features.cols;
            let mut all = Vec::new();
            for o in obs {
                all.extend_from_slice(&o.joint_features.data);
            }
            Some(pca_fit(&Mat::from_rows(all.len() / d, d, all), settings.pca_dim)?)
        }
    };
    let rows = build_cluster_features(obs, recipe, pca.as_ref())?;
    let fit = kmeans(&rows, settings.k, seed, settings.kmeans_iters)?;
    Ok((
        ClusterModel {
            recipe,
            pca,
            centroids: fit.centroids,
        },
        fit.labels,
    ))
}

/// The `K`-way action head that pseudo-label training starts from.
pub fn pseudo_label_head(pose: &PoseModel, k: usize, seed: u64) -> ActionModel {
    let cfg = ActionConfig {
        classes: k,
        ..ActionConfig::default()
    };
    ActionModel::from_pose(pose, cfg, seed)
}

/// One step of pseudo-label training, batch drawn from `(seed, step)`.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_label_step(
    model: &mut ActionModel,
    optimizer: &mut Optimizer,
    data: &Dataset,
    obs: &[PersonObservation],
    labels: &[usize],
    settings: &FineGrainedSettings,
    seed: u64,
    step: u64,
) -> Result<f32> {
    let k = model.config.classes;
    if labels.len() != obs.len() || labels.iter().any(|&l| l >= k) {
        return Err(Error::config_key("cluster.k", format!("{} labels for {} observations with K = {k}", labels.len(), obs.len())));
    }
    if obs.is_empty() {
        return Err(Error::config_key("cluster.k", "no observations to train on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
    let mut batch = Vec::with_capacity(settings.pseudo_batch);
    for _ in 0..settings.pseudo_batch {
        let i = rng.random_range(0..obs.len());
        let o = &obs[i];
        let pair = data.videos[o.video].pair(o.t, settings.gap as i32)?;
        let (h, w) = (pair.frame_a.shape()[1], pair.frame_a.shape()[2]);
        let gt = pair.gt_a[o.figure].bbox;
        let target = ActionTarget {
            proposal: jitter_box(&gt, h, w, settings.jitter, &mut rng),
            gt,
            label: labels[i],
        };
        batch.push(ActionExample { pair, targets: vec![target] });
    }
    train_action_batch(model, optimizer, &batch, 1.0)
}

/// Trains a `K`-way action head initialized from the pose model on the
/// cluster ids of the training observations.
pub fn pseudo_label_train(
    pose: &PoseModel,
    data: &Dataset,
    obs: &[PersonObservation],
    labels: &[usize],
    k: usize,
    settings: &FineGrainedSettings,
    seed: u64,
) -> Result<ActionModel> {
    let mut model = pseudo_label_head(pose, k, seed);
    let mut opt = Optimizer::new(OptimizerKind::adam(), settings.pseudo_lr)?;
    for step in 0..settings.pseudo_steps {
        pseudo_label_step(&mut model, &mut opt, data, obs, labels, settings, seed, step)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDescriptor {
    pub histogram: Vec<f32>,
    pub class: usize,
}

/// Sum of per-pair activations. Each pair contributes the softmax (or the
/// one-hot argmax) of its most confident detection.
pub fn pair_activations(head: &ActionModel, video: &VideoSample, gap: usize, hard: bool) -> Result<Vec<Vec<f32>>> {
    if video.len() <= gap {
        return Err(Error::config_key("finegrained.gap", format!("video of {} frames has no pair at gap {gap}", video.len())));
    }
    (0..video.len() - gap)
        .map(|t| {
            let pair = video.pair(t, gap as i32)?;
            let proposals: Vec<_> = pair.gt_a.iter().map(|g| g.bbox).collect();
            let dets = head.detect(&pair.frame_a, &pair.frame_b, pair.delta, &proposals)?;
            let probs = dets
                .iter()
                .map(|d| d.probabilities())
                .max_by(|a, b| {
                    let ma = a.iter().copied().fold(0.0, f32::max);
                    let mb = b.iter().copied().fold(0.0, f32::max);
                    ma.total_cmp(&mb)
                })
                .ok_or_else(|| Error::Metric("pair without detections".into()))?;
            Ok(if hard {
                let c = crate::action::argmax(&probs);
                (0..probs.len()).map(|i| (i == c) as u8 as f32).collect()
            } else {
                probs
            })
        })
        .collect()
}

pub fn sum_activations(acts: &[Vec<f32>]) -> Vec<f32> {
    let k = acts.first().map_or(0, |a| a.len());
    let mut h = vec![0.0f32; k];
    for a in acts {
        for (s, v) in h.iter_mut().zip(a) {
            *s += v;
        }
    }
    h
}

pub fn describe_video(head: &ActionModel, video: &VideoSample, settings: &FineGrainedSettings) -> Result<VideoDescriptor> {
    let acts = pair_activations(head, video, settings.gap, settings.hard_counts)?;
    Ok(VideoDescriptor {
        histogram: sum_activations(&acts),
        class: video.class.index(),
    })
}

pub fn describe(head: &ActionModel, data: &Dataset, settings: &FineGrainedSettings) -> Result<Vec<VideoDescriptor>> {
    data.videos.iter().map(|v| describe_video(head, v, settings)).collect()
}

/// Two-layer ReLU MLP over histograms normalized to unit sum.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub params: ParamStore,
}

fn normalized(h: &[f32]) -> Vec<f32> {
    let s: f32 = h.iter().sum();
    if s > 0.0 {
        h.iter().map(|v| v / s).collect()
    } else {
        h.to_vec()
    }
}

impl Mlp {
    pub fn new(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("mlp.fc1.w", dense_weight(inputs, hidden, &mut rng));
        params.insert("mlp.fc1.b", Tensor::zeros(&[hidden]));
        params.insert("mlp.fc2.w", dense_weight(hidden, classes, &mut rng));
        params.insert("mlp.fc2.b", Tensor::zeros(&[classes]));
        Mlp { params }
    }

    /// Checks the four `mlp.*` sections and their shapes agree.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let names = ["mlp.fc1.w", "mlp.fc1.b", "mlp.fc2.w", "mlp.fc2.b"];
        let missing: Vec<&str> = names.iter().copied().filter(|n| !params.contains(n)).collect();
        if !missing.is_empty() {
            return Err(Error::config(format!("checkpoint is missing sections: {missing:?}")));
        }
        let (_, hidden) = params.get("mlp.fc1.w")?.dims2()?;
        let (h2, classes) = params.get("mlp.fc2.w")?.dims2()?;
        if h2 != hidden || params.get("mlp.fc1.b")?.shape() != [hidden] || params.get("mlp.fc2.b")?.shape() != [classes] {
            return Err(Error::config("mlp sections have inconsistent shapes"));
        }
        let mut kept = ParamStore::new();
        for n in names {
            kept.insert(n, params.get(n)?.clone());
        }
        Ok(Mlp { params: kept })
    }

    fn logits(&self, tape: &mut Tape, binder: &mut Binder, x: Tensor) -> Result<crate::tape::Var> {
        let x = tape.constant(x);
        let (w1, b1) = (binder.var(tape, "mlp.fc1.w")?, binder.var(tape, "mlp.fc1.b")?);
        let z = tape.linear(x, w1, b1)?;
        let a = tape.relu(z)?;
        let (w2, b2) = (binder.var(tape, "mlp.fc2.w")?, binder.var(tape, "mlp.fc2.b")?);
        tape.linear(a, w2, b2)
    }

    pub fn predict(&self, histogram: &[f32]) -> Result<usize> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params).freeze(&[""]);
        let x = Tensor::new(&[1, histogram.len()], normalized(histogram))?;
        let l = self.logits(&mut tape, &mut binder, x)?;
        Ok(crate::action::argmax(tape.value(l).data()))
    }
}

/// Full-batch Adam on cross-entropy.
pub fn train_mlp(descriptors: &[VideoDescriptor], classes: usize, settings: &FineGrainedSettings, seed: u64) -> Result<Mlp> {
    let k = descriptors.first().map_or(0, |d| d.histogram.len());
    if k == 0 {
        return Err(Error::config_key("cluster.k", "no descriptors to train on"));
    }
    let mut mlp = Mlp::new(k, settings.mlp_hidden, classes, seed);
    let x = Tensor::new(&[descriptors.len(), k], descriptors.iter().flat_map(|d| normalized(&d.histogram)).collect())?;
    let labels: Vec<usize> = descriptors.iter().map(|d| d.class).collect();
    let mut opt = Optimizer::new(OptimizerKind::adam(), settings.mlp_lr)?;
    for _ in 0..settings.mlp_epochs {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mlp.params);
        let l = mlp.logits(&mut tape, &mut binder, x.clone())?;
        let loss = tape.softmax_ce(l, &labels)?;
        let mut grads = tape.backward(loss)?;
        let g = binder.gradients(&mut grads);
        opt.step(&mut mlp.params, &g)?;
    }
    Ok(mlp)
}

pub fn classify_video(video: &VideoSample, head: &ActionModel, mlp: &Mlp, settings: &FineGrainedSettings) -> Result<usize> {
    if video.len() < settings.gap + 1 {
        return Err(Error::config_key("finegrained.gap", format!("video needs at least {} frames", settings.gap + 1)));
    }
    mlp.predict(&describe_video(head, video, settings)?.histogram)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineGrainedResult {
    pub recipe: FeatureRecipe,
    pub accuracy: f32,
    pub observations: usize,
}

/// Cluster, pseudo-label train, describe and classify for one recipe.
/// `obs` must come from `train`.
pub fn run_recipe(
    pose: &PoseModel,
    train: &Dataset,
    eval: &Dataset,
    obs: &[PersonObservation],
    recipe: FeatureRecipe,
    settings: &FineGrainedSettings,
    seed: u64,
) -> Result<(FineGrainedResult, ClusterModel, ActionModel, Mlp)> {
    let (cluster, labels) = fit_cluster_model(obs, recipe, settings, derive_seed(seed, 0))?;
    let head = pseudo_label_train(pose, train, obs, &labels, settings.k, settings, derive_seed(seed, 1))?;
    let train_desc = describe(&head, train, settings)?;
    let classes = crate::synth::MotionClass::ALL.len();
    let mlp = train_mlp(&train_desc, classes, settings, derive_seed(seed, 2))?;
    let eval_desc = describe(&head, eval, settings)?;
    let mut correct = 0;
    for d in &eval_desc {
        correct += (mlp.predict(&d.histogram)? == d.class) as usize;
    }
    if eval_desc.is_empty() {
        return Err(Error::Metric("no evaluation videos".into()));
    }
    Ok((
        FineGrainedResult {
            recipe,
            accuracy: correct as f32 / eval_desc.len() as f32,
            observations: obs.len(),
        },
        cluster,
        head,
        mlp,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::SceneConfig;

    fn tiny_pose() -> PoseModel {
        let mut c = ModelConfig::default();
        c.backbone.channels = 8;
        c.backbone.stem_width = 8;
        c.head.channels = 8;
        let mut m = PoseModel::new(c, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for l in 0..c.backbone.scales {
            let w = crate::params::conv_weight(c.offsets.channels(), 8, 3, &mut rng);
            m.params.insert(crate::dimofs::offset_param(l, "w"), w);
        }
        // Bias the person logit so every proposal counts as a detection.
        m.params.insert("head.cls.b", Tensor::full(&[1], 5.0));
        m
    }

    fn short_scene() -> SceneConfig {
        SceneConfig {
            length: 9,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn row_lengths_follow_recipe() {
        let pose = tiny_pose();
        let data = Dataset::generate(&short_scene(), 2, 1).unwrap();
        let obs = observe(&pose, &data, 5, 1).unwrap();
        assert_eq!(obs.len(), 8);
        let settings = FineGrainedSettings {
            k: 3,
            pca_dim: 4,
            ..FineGrainedSettings::default()
        };
        let (pose_only, _) = fit_cluster_model(&obs, FeatureRecipe::PoseOnly, &settings, 1).unwrap();
        assert_eq!(pose_only.centroids.cols, 10);
        let (both, labels) = fit_cluster_model(&obs, FeatureRecipe::PoseMotion, &settings, 1).unwrap();
        assert_eq!(both.centroids.cols, 10 + 4);
        assert_eq!(labels.len(), obs.len());
        assert_eq!(obs, observe(&pose, &data, 5, 1).unwrap());
    }

    #[test]
    fn histogram_is_order_free_sum() {
        let pose = tiny_pose();
        let head = ActionModel::from_pose(&pose, ActionConfig { classes: 4, width: 8, ..ActionConfig::default() }, 2);
        let data = Dataset::generate(&short_scene(), 1, 2).unwrap();
        let acts = pair_activations(&head, &data.videos[0], 5, false).unwrap();
        assert_eq!(acts.len(), 4);
        let h = sum_activations(&acts);
        let mut rev = acts.clone();
        rev.reverse();
        let hr = sum_activations(&rev);
        for (a, b) in h.iter().zip(&hr) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(h.iter().all(|&v| v >= 0.0));
        assert!((h.iter().sum::<f32>() - 4.0).abs() < 1e-5);
        let hard = sum_activations(&pair_activations(&head, &data.videos[0], 5, true).unwrap());
        assert_eq!(hard.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn short_video_and_label_mismatch_rejected() {
        let pose = tiny_pose();
        let data = Dataset::generate(&SceneConfig { length: 5, ..SceneConfig::default() }, 1, 2).unwrap();
        let head = ActionModel::from_pose(&pose, ActionConfig { classes: 2, width: 8, ..ActionConfig::default() }, 2);
        let mlp = Mlp::new(2, 4, 6, 1);
        let s = FineGrainedSettings::default();
        assert!(matches!(classify_video(&data.videos[0], &head, &mlp, &s), Err(Error::Config { .. })));
        assert!(matches!(pseudo_label_train(&pose, &data, &[], &[0], 2, &s, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn mlp_fits_separable_histograms() {
        let descs: Vec<VideoDescriptor> = (0..12)
            .map(|i| {
                let mut h = vec![0.1f32; 6];
                h[i % 3] += 5.0;
                VideoDescriptor { histogram: h, class: i % 3 }
            })
            .collect();
        let s = FineGrainedSettings {
            mlp_epochs: 200,
            ..FineGrainedSettings::default()
        };
        let mlp = train_mlp(&descs, 3, &s, 4).unwrap();
        assert!(descs.iter().all(|d| mlp.predict(&d.histogram).unwrap() == d.class));
    }
}
