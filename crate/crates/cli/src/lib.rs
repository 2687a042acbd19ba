//! Command-line experiment driver.
//!
//! Every subcommand reads the same `key = value` config, writes metrics to
//! `<out>/metrics.jsonl` and keeps its checkpoints under `<out>`. Training
//! subcommands resume from their latest checkpoint.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use dimofs::action::{evaluate_action, train_action_step, ActionModel};
use dimofs::checkpoint::{latest, load, load_params, load_training, save, save_training};
use dimofs::cluster::ClusterModel;
use dimofs::config::ExperimentConfig;
use dimofs::experiment::{evaluate_pose, motion_rows, motion_readout, saliency_stats, track_videos, train_pose_step, EvalMode};
use dimofs::finegrained::{describe, fit_cluster_model, observe, pseudo_label_head, pseudo_label_step, train_mlp, Mlp};
use dimofs::gradcheck::run_suite;
use dimofs::metrics::{truncate_after, MetricsWriter};
use dimofs::model::PoseModel;
use dimofs::motion::{fit_motion_regressor, offset_channel_field, predict_motion_field, render_motion_field, salient_motion_map, RgbImage};
use dimofs::optim::{Optimizer, OptimizerKind};
use dimofs::params::ParamStore;
use dimofs::synth::{derive_seed, Dataset, MotionClass};
use dimofs::{Error, Tensor};

#[derive(Debug, Parser)]
#[command(name = "dimofs", version, about = "Train and evaluate motion offsets learned from pose detection")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory, overriding the `output` key.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the pose model on frame pairs.
    TrainPose {
        /// `dimofs` or `single-frame-baseline`; overrides `train.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// PCK and keypoint AP of the latest pose checkpoint.
    EvalPose {
        /// Frame offsets to evaluate, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = vec![0, 10])]
        delta: Vec<i32>,
        /// `model`, `copy-baseline` or `single-frame-baseline`.
        #[arg(long, default_value = "model")]
        mode: String,
    },
    /// Ridge motion readout error and saliency contrast of the pose model.
    EvalMotion,
    /// Train the action head on motion-class labels.
    TrainAction {
        /// `pretrained` or `scratch`; overrides `action.init`.
        #[arg(long)]
        init: Option<String>,
    },
    /// Localization accuracy of the latest action checkpoint.
    EvalAction {
        #[arg(long)]
        init: Option<String>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_values_t = vec![0, 5, 10])]
        delta: Vec<i32>,
    },
    /// Cluster person observations into pose ids.
    Cluster,
    /// Train a head to predict the cluster ids.
    TrainPseudo,
    /// Fit the histogram classifier and report video accuracy.
    ClassifyVideos,
    /// Link pose detections into tracks and report MOTA.
    Track,
    /// Write frames, motion fields and saliency maps as PPM images.
    Visualize {
        /// Also write every offset pair of every level.
        #[arg(long)]
        channels: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck,
}

#[derive(Debug)]
pub enum Failure {
    Library(Error),
    Gradcheck(Vec<String>),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Library(e) => write!(f, "{e}"),
            Failure::Gradcheck(ops) => write!(f, "gradient check failed for: {}", ops.join(", ")),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Library(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Library(Error::Io(e))
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Library(Error::Config { .. }) => 2,
            Failure::Library(_) => 1,
            Failure::Gradcheck(_) => 3,
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
    metrics: MetricsWriter,
}

impl Context {
    fn log(&mut self, step: u64, metric: &str, value: f64) -> dimofs::Result<()> {
        self.metrics.log(step, metric, value)
    }

    fn report(&mut self, step: u64, metric: &str, value: f64) -> dimofs::Result<()> {
        println!("{metric} = {value:.4}");
        self.log(step, metric, value)
    }

    fn train_set(&self, count: usize) -> dimofs::Result<Dataset> {
        Dataset::generate(&self.cfg.scene(), count, derive_seed(self.cfg.data_seed, 0))
    }

    fn eval_set(&self, count: usize) -> dimofs::Result<Dataset> {
        Dataset::generate(&self.cfg.scene(), count, derive_seed(self.cfg.data_seed, 1))
    }

    fn stage(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Latest pose checkpoint, or an IO error naming the directory.
    fn pose(&self) -> dimofs::Result<(u64, PoseModel)> {
        let (step, path) = require_latest(&self.out, "train-pose")?;
        Ok((step, PoseModel::from_params(self.cfg.model(), load_params(&path)?)?))
    }
}

fn require_latest(dir: &Path, producer: &str) -> dimofs::Result<(u64, PathBuf)> {
    latest(dir)?.ok_or_else(|| {
        Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no checkpoint in {}; run `{producer}` first", dir.display()),
        ))
    })
}

fn with_override(mut overrides: Vec<String>, key: &str, value: Option<&String>) -> Vec<String> {
    if let Some(v) = value {
        overrides.push(format!("{key}={v}"));
    }
    overrides
}

pub fn run(cli: Cli) -> Outcome {
    let mut overrides = cli.set.clone();
    overrides = match &cli.command {
        Command::TrainPose { mode } => with_override(overrides, "train.mode", mode.as_ref()),
        Command::TrainAction { init } | Command::EvalAction { init, .. } => with_override(overrides, "action.init", init.as_ref()),
        _ => overrides,
    };
    if let Some(out) = &cli.out {
        overrides.push(format!("output={}", out.display()));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let out = cfg.output_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let metrics = MetricsWriter::open(&out, &cfg.hash(), cfg.seed)?;
    let mut ctx = Context { cfg, out, metrics };
    match cli.command {
        Command::TrainPose { .. } => train_pose(&mut ctx),
        Command::EvalPose { delta, mode } => eval_pose(&mut ctx, &delta, &mode),
        Command::EvalMotion => eval_motion(&mut ctx),
        Command::TrainAction { .. } => train_action(&mut ctx),
        Command::EvalAction { delta, .. } => eval_action(&mut ctx, &delta),
        Command::Cluster => cluster(&mut ctx),
        Command::TrainPseudo => train_pseudo(&mut ctx),
        Command::ClassifyVideos => classify_videos(&mut ctx),
        Command::Track => track(&mut ctx),
        Command::Visualize { channels } => visualize(&mut ctx, channels),
        Command::Gradcheck => gradcheck(&mut ctx),
    }
}

fn train_pose(ctx: &mut Context) -> Outcome {
    let cfg = &ctx.cfg;
    let train = ctx.train_set(cfg.train_videos)?;
    let settings = cfg.pose_train();
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr)?;
    let (mut model, start) = match latest(&ctx.out)? {
        Some((step, path)) => {
            let params = load_training(&path, &mut opt)?;
            truncate_after(ctx.metrics.path(), step, &["pose.loss"])?;
            (PoseModel::from_params(cfg.model(), params)?, step)
        }
        None => (PoseModel::new(cfg.model(), derive_seed(cfg.seed, 0)), 0),
    };
    let (steps, every, seed) = (cfg.steps, cfg.checkpoint_every, derive_seed(cfg.seed, 1));
    for step in start..steps {
        let loss = train_pose_step(&mut model, &mut opt, &train, &settings, seed, step)?;
        ctx.log(step + 1, "pose.loss", loss as f64)?;
        if (step + 1) % every == 0 || step + 1 == steps {
            save_training(&ctx.out, step + 1, &model.params, &opt)?;
        }
    }
    println!("pose model trained to step {steps} in {}", ctx.out.display());
    Ok(())
}

fn eval_pose(ctx: &mut Context, deltas: &[i32], mode: &str) -> Outcome {
    let mode = EvalMode::parse(mode).ok_or_else(|| Error::config(format!("unknown eval mode `{mode}`")))?;
    let (step, model) = ctx.pose()?;
    let eval = ctx.eval_set(ctx.cfg.eval_videos)?;
    let settings = ctx.cfg.pose_eval();
    for &d in deltas {
        let r = evaluate_pose(&model, &eval, d, mode, &settings, ctx.cfg.eval_seed)?;
        let name = format!("eval_pose.{}.delta{d}", mode.name());
        ctx.report(step, &format!("{name}.pck"), r.pck as f64)?;
        ctx.report(step, &format!("{name}.ap"), r.ap as f64)?;
    }
    Ok(())
}

fn eval_motion(ctx: &mut Context) -> Outcome {
    let (step, model) = ctx.pose()?;
    let cfg = &ctx.cfg;
    let train = ctx.train_set(cfg.train_videos)?;
    let eval = ctx.eval_set(cfg.eval_videos)?;
    let max = cfg.delta_max as u32;
    let (_, readout) = motion_readout(&model, &train, &eval, max, cfg.ridge_lambda, cfg.eval_seed)?;
    let salient = ctx.eval_set(cfg.saliency_videos)?;
    let stats = saliency_stats(&model, &salient, max, cfg.saliency(), cfg.eval_seed)?;
    ctx.report(step, "motion.epe", readout.epe as f64)?;
    ctx.report(step, "motion.zero_epe", readout.zero_epe as f64)?;
    ctx.report(step, "saliency.inside", stats.inside as f64)?;
    ctx.report(step, "saliency.outside", stats.outside as f64)?;
    ctx.report(step, "saliency.ratio", stats.ratio() as f64)?;
    Ok(())
}

fn action_dir(ctx: &Context) -> PathBuf {
    ctx.stage(&format!("action-{}", ctx.cfg.action_init))
}

fn train_action(ctx: &mut Context) -> Outcome {
    let dir = action_dir(ctx);
    let cfg = &ctx.cfg;
    let train = ctx.train_set(cfg.train_videos)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.action_lr)?;
    let loss_name = format!("action.{}.loss", cfg.action_init);
    let (mut model, start) = match latest(&dir)? {
        Some((step, path)) => {
            let params = load_training(&path, &mut opt)?;
            truncate_after(ctx.metrics.path(), step, &[loss_name.as_str()])?;
            (ActionModel::from_params(cfg.model(), cfg.action(), params)?, step)
        }
        None if cfg.action_init == "scratch" => (ActionModel::scratch(cfg.model(), cfg.action(), derive_seed(cfg.seed, 2)), 0),
        None => (ActionModel::from_pose(&ctx.pose()?.1, cfg.action(), derive_seed(cfg.seed, 2)), 0),
    };
    let settings = cfg.action_train();
    let (steps, every, seed) = (cfg.action_steps, cfg.action_checkpoint_every, derive_seed(cfg.seed, 3));
    for step in start..steps {
        let loss = train_action_step(&mut model, &mut opt, &train, &settings, seed, step)?;
        ctx.log(step + 1, &loss_name, loss as f64)?;
        if (step + 1) % every == 0 || step + 1 == steps {
            save_training(&dir, step + 1, &model.params, &opt)?;
        }
    }
    println!("action head trained to step {steps} in {}", dir.display());
    Ok(())
}

fn eval_action(ctx: &mut Context, deltas: &[i32]) -> Outcome {
    let dir = action_dir(ctx);
    let (step, path) = require_latest(&dir, "train-action")?;
    let cfg = &ctx.cfg;
    let model = ActionModel::from_params(cfg.model(), cfg.action(), load_params(&path)?)?;
    let eval = ctx.eval_set(cfg.eval_videos)?;
    let init = cfg.action_init.clone();
    for &d in deltas {
        let r = evaluate_action(&model, &eval, d, ctx.cfg.action_frames_per_video, ctx.cfg.delta_max as u32, ctx.cfg.eval_seed)?;
        ctx.report(step, &format!("eval_action.{init}.delta{d}.accuracy"), r.accuracy as f64)?;
        ctx.report(step, &format!("eval_action.{init}.delta{d}.class_accuracy"), r.class_accuracy as f64)?;
    }
    Ok(())
}

const CLUSTER_LABELS: &str = "cluster.labels";

fn cluster(ctx: &mut Context) -> Outcome {
    let dir = ctx.stage("cluster");
    if latest(&dir)?.is_some() {
        println!("clusters already fitted in {}", dir.display());
        return Ok(());
    }
    let (_, pose) = ctx.pose()?;
    let cfg = &ctx.cfg;
    let settings = cfg.fine_grained();
    let train = ctx.train_set(cfg.cluster_train_videos)?;
    let obs = observe(&pose, &train, settings.gap, settings.stride)?;
    let (model, labels) = fit_cluster_model(&obs, cfg.recipe(), &settings, derive_seed(cfg.seed, 0))?;
    let mut store = model.to_params();
    store.insert(CLUSTER_LABELS, Tensor::new(&[labels.len()], labels.iter().map(|&l| l as f32).collect())?);
    save(&store, &dimofs::checkpoint::checkpoint_path(&dir, 0))?;
    let mut sizes = vec![0usize; model.k()];
    for &l in &labels {
        sizes[l] += 1;
    }
    ctx.report(0, "cluster.observations", obs.len() as f64)?;
    ctx.report(0, "cluster.used", sizes.iter().filter(|&&s| s > 0).count() as f64)?;
    Ok(())
}

fn cluster_labels(store: &ParamStore) -> dimofs::Result<Vec<usize>> {
    Ok(store.get(CLUSTER_LABELS)?.data().iter().map(|&v| v as usize).collect())
}

fn train_pseudo(ctx: &mut Context) -> Outcome {
    let (_, path) = require_latest(&ctx.stage("cluster"), "cluster")?;
    let store = load(&path)?;
    let clusters = ClusterModel::from_params(&store)?;
    let labels = cluster_labels(&store)?;
    let (_, pose) = ctx.pose()?;
    let cfg = &ctx.cfg;
    let settings = cfg.fine_grained();
    let train = ctx.train_set(cfg.cluster_train_videos)?;
    let obs = observe(&pose, &train, settings.gap, settings.stride)?;
    if obs.len() != labels.len() {
        return Err(Error::config(format!("{} observations but the cluster checkpoint has {} labels", obs.len(), labels.len())).into());
    }
    let dir = ctx.stage("pseudo");
    let seed = derive_seed(cfg.seed, 1);
    let mut opt = Optimizer::new(OptimizerKind::adam(), settings.pseudo_lr)?;
    let (mut head, start) = match latest(&dir)? {
        Some((step, path)) => {
            let params = load_training(&path, &mut opt)?;
            truncate_after(ctx.metrics.path(), step, &["pseudo.loss"])?;
            let fresh = pseudo_label_head(&pose, clusters.k(), seed);
            (ActionModel::from_params(fresh.trunk, fresh.config, params)?, step)
        }
        None => (pseudo_label_head(&pose, clusters.k(), seed), 0),
    };
    let (steps, every) = (settings.pseudo_steps, cfg.pseudo_checkpoint_every);
    for step in start..steps {
        let loss = pseudo_label_step(&mut head, &mut opt, &train, &obs, &labels, &settings, seed, step)?;
        ctx.log(step + 1, "pseudo.loss", loss as f64)?;
        if (step + 1) % every == 0 || step + 1 == steps {
            save_training(&dir, step + 1, &head.params, &opt)?;
        }
    }
    println!("pseudo-label head trained to step {steps} in {}", dir.display());
    Ok(())
}

fn classify_videos(ctx: &mut Context) -> Outcome {
    let (_, cluster_path) = require_latest(&ctx.stage("cluster"), "cluster")?;
    let k = ClusterModel::from_params(&load(&cluster_path)?)?.k();
    let (step, path) = require_latest(&ctx.stage("pseudo"), "train-pseudo")?;
    let (_, pose) = ctx.pose()?;
    let fresh = pseudo_label_head(&pose, k, 0);
    let head = ActionModel::from_params(fresh.trunk, fresh.config, load_params(&path)?)?;
    let cfg = &ctx.cfg;
    let settings = cfg.fine_grained();
    let mlp_dir = ctx.stage("mlp");
    let mlp = match latest(&mlp_dir)? {
        Some((_, p)) => Mlp::from_params(&load(&p)?)?,
        None => {
            let train = ctx.train_set(cfg.cluster_train_videos)?;
            let mlp = train_mlp(&describe(&head, &train, &settings)?, MotionClass::ALL.len(), &settings, derive_seed(cfg.seed, 2))?;
            save(&mlp.params, &dimofs::checkpoint::checkpoint_path(&mlp_dir, 0))?;
            mlp
        }
    };
    let eval = ctx.eval_set(cfg.cluster_eval_videos)?;
    let descs = describe(&head, &eval, &settings)?;
    if descs.is_empty() {
        return Err(Error::Metric("no evaluation videos".into()).into());
    }
    let mut correct = 0;
    for d in &descs {
        correct += (mlp.predict(&d.histogram)? == d.class) as usize;
    }
    ctx.report(step, "classify.accuracy", correct as f64 / descs.len() as f64)?;
    Ok(())
}

fn track(ctx: &mut Context) -> Outcome {
    let (step, model) = ctx.pose()?;
    let cfg = &ctx.cfg;
    let data = Dataset::generate(&cfg.track_scene(), cfg.track_videos, derive_seed(cfg.data_seed, 4))?;
    let r = track_videos(&model, &data, cfg.track_delta, &cfg.pose_eval(), cfg.track_gate, cfg.track_iou, cfg.eval_seed)?;
    ctx.report(step, "track.mota", r.mota)?;
    ctx.report(step, "track.misses", r.misses as f64)?;
    ctx.report(step, "track.false_positives", r.false_positives as f64)?;
    ctx.report(step, "track.id_switches", r.id_switches as f64)?;
    ctx.report(step, "track.gt", r.gt_count as f64)?;
    Ok(())
}

/// Videos whose first frames feed the ridge readout used for colouring.
const VIS_READOUT_VIDEOS: usize = 50;

fn visualize(ctx: &mut Context, channels: bool) -> Outcome {
    let (_, model) = ctx.pose()?;
    let cfg = &ctx.cfg;
    let max = cfg.delta_max as u32;
    let train = ctx.train_set(cfg.train_videos.min(VIS_READOUT_VIDEOS))?;
    let (x, y) = motion_rows(&model, &train, max, 2, cfg.eval_seed)?;
    let reg = fit_motion_regressor(&x, &y, cfg.ridge_lambda)?;
    let eval = ctx.eval_set(cfg.vis_videos)?;
    let dir = ctx.stage("vis");
    std::fs::create_dir_all(&dir)?;
    let delta = cfg.vis_delta;
    let mut written = 0;
    for (vi, video) in eval.videos.iter().enumerate() {
        let t = video.len() / 2;
        let pair = video.pair(t, delta.clamp(-(t as i32), (video.len() - 1 - t) as i32))?;
        let offsets = model.offsets(&pair.frame_a, &pair.frame_b, pair.delta)?;
        let field = predict_motion_field(&offsets, &reg)?;
        let saliency = salient_motion_map(&offsets, cfg.saliency())?;
        let peak = saliency.data().iter().fold(0.0f32, |m, &v| m.max(v));
        let images = [
            ("frame_a", RgbImage::from_frame(&pair.frame_a)?),
            ("frame_b", RgbImage::from_frame(&pair.frame_b)?),
            ("motion", render_motion_field(&field, cfg.vis_max_motion)?),
            ("saliency", RgbImage::from_map(&saliency, peak)?),
        ];
        for (name, img) in images {
            img.write_ppm(&dir.join(format!("video{vi}_{name}.ppm")))?;
            written += 1;
        }
        if channels || cfg.vis_channels {
            for l in 0..offsets.levels.len() {
                for p in 0..offsets.pairs() {
                    let f = offset_channel_field(&offsets, l, p)?;
                    render_motion_field(&f, cfg.vis_max_motion)?.write_ppm(&dir.join(format!("video{vi}_level{l}_pair{p}.ppm")))?;
                    written += 1;
                }
            }
        }
    }
    println!("wrote {written} images to {}", dir.display());
    Ok(())
}

fn gradcheck(ctx: &mut Context) -> Outcome {
    let cfg = &ctx.cfg;
    let reports = run_suite(cfg.gradcheck_instances, cfg.seed, cfg.gradcheck_eps, cfg.gradcheck_tolerance)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:>4} instances  max rel error {:.2e}  {verdict}", r.op, r.instances, r.max_rel_error);
        ctx.log(0, &format!("gradcheck.{}.max_rel_error", r.op), r.max_rel_error)?;
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failed))
    }
}
