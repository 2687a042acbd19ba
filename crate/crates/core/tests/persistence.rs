use dimofs::checkpoint::{checkpoint_path, load_params, load_training, save_training};
use dimofs::experiment::{train_pose_step, PoseTrainSettings};
use dimofs::model::{ModelConfig, PoseModel};
use dimofs::optim::{Optimizer, OptimizerKind};
use dimofs::synth::{Dataset, SceneConfig};
use dimofs::Error;

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.channels = 8;
    c.backbone.stem_width = 8;
    c.head.channels = 8;
    c
}

fn data() -> Dataset {
    let scene = SceneConfig {
        length: 24,
        ..SceneConfig::default()
    };
    Dataset::generate(&scene, 6, 11).unwrap()
}

fn settings() -> PoseTrainSettings {
    PoseTrainSettings {
        batch: 2,
        policy: dimofs::synth::DeltaPolicy::Uniform(5),
        ..PoseTrainSettings::default()
    }
}

fn bits(m: &PoseModel) -> Vec<(String, Vec<u32>)> {
    m.params.iter().map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

fn train(model: &mut PoseModel, opt: &mut Optimizer, data: &Dataset, steps: std::ops::Range<u64>) -> Vec<u32> {
    steps
        .map(|s| train_pose_step(model, opt, data, &settings(), 5, s).unwrap().to_bits())
        .collect()
}

#[test]
fn same_seed_same_run() {
    let d = data();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut m = PoseModel::new(small_config(), 1);
        let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
        let losses = train(&mut m, &mut opt, &d, 0..4);
        runs.push((losses, bits(&m)));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut m = PoseModel::new(small_config(), 1);
    let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
    let mut straight = train(&mut m, &mut opt, &d, 0..2);
    save_training(dir.path(), 2, &m.params, &opt).unwrap();
    straight.extend(train(&mut m, &mut opt, &d, 2..5));

    let mut opt2 = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
    let params = load_training(&checkpoint_path(dir.path(), 2), &mut opt2).unwrap();
    let mut resumed_model = PoseModel::from_params(small_config(), params).unwrap();
    let mut resumed = straight[..2].to_vec();
    resumed.extend(train(&mut resumed_model, &mut opt2, &d, 2..5));
    assert_eq!(resumed, straight);
    assert_eq!(bits(&resumed_model), bits(&m));
}

#[test]
fn fewer_scales_than_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let three = PoseModel::new(small_config(), 0);
    let opt = Optimizer::new(OptimizerKind::adam(), 1e-3).unwrap();
    let path = save_training(dir.path(), 0, &three.params, &opt).unwrap();
    let mut four = small_config();
    four.backbone.scales = 4;
    match PoseModel::from_params(four, load_params(&path).unwrap()) {
        Err(Error::Config { message, .. }) => assert!(message.contains("level3"), "{message}"),
        other => panic!("expected a config error, got {other:?}"),
    }
}
