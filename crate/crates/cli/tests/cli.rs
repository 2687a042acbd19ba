use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.train_videos = 8
data.eval_videos = 4
data.length = 24
delta.max = 5
backbone.channels = 8
backbone.stem_width = 8
head.hidden = 16
train.steps = 6
train.checkpoint_every = 3
action.steps = 4
action.checkpoint_every = 2
action.width = 16
cluster.k = 3
cluster.pca_dim = 4
cluster.train_videos = 6
cluster.eval_videos = 6
pseudo.steps = 4
pseudo.checkpoint_every = 2
mlp.epochs = 20
track.videos = 2
motion.saliency_videos = 4
gradcheck.instances = 2
";

fn dimofs(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dimofs"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(config: &Path, out: &Path, args: &[&str]) {
    let o = dimofs(config, out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn metrics(out: &Path) -> String {
    std::fs::read_to_string(out.join("metrics.jsonl")).unwrap()
}

const PIPELINE: &[&[&str]] = &[
    &["train-pose"],
    &["eval-pose", "--delta", "0,5"],
    &["eval-pose", "--mode", "copy-baseline", "--delta=-5"],
    &["train-action", "--init", "scratch"],
    &["eval-action", "--init", "scratch", "--delta", "0,5"],
    &["cluster"],
    &["train-pseudo"],
    &["classify-videos"],
    &["track"],
];

#[test]
fn identical_runs_write_identical_metrics() {
    let (dir, cfg) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        for args in PIPELINE {
            ok(&cfg, out, args);
        }
    }
    let (ma, mb) = (metrics(&a), metrics(&b));
    assert!(ma.contains("\"eval_pose.copy-baseline.delta-5.pck\""));
    assert!(ma.contains("\"classify.accuracy\""));
    assert_eq!(ma, mb);
    for ckpt in ["ckpt_6.dmf", "action-scratch/ckpt_4.dmf", "cluster/ckpt_0.dmf", "pseudo/ckpt_4.dmf", "mlp/ckpt_0.dmf"] {
        assert_eq!(std::fs::read(a.join(ckpt)).unwrap(), std::fs::read(b.join(ckpt)).unwrap(), "{ckpt}");
    }
}

#[test]
fn interrupted_training_resumes_identically() {
    let (dir, cfg) = setup();
    let out = dir.path().join("run");
    ok(&cfg, &out, &["train-pose"]);
    ok(&cfg, &out, &["train-action", "--init", "scratch"]);
    let full = metrics(&out);
    let pose = std::fs::read(out.join("ckpt_6.dmf")).unwrap();
    let action = std::fs::read(out.join("action-scratch/ckpt_4.dmf")).unwrap();

    std::fs::remove_file(out.join("ckpt_6.dmf")).unwrap();
    std::fs::remove_file(out.join("action-scratch/ckpt_4.dmf")).unwrap();
    ok(&cfg, &out, &["train-pose"]);
    ok(&cfg, &out, &["train-action", "--init", "scratch"]);
    assert_eq!(std::fs::read(out.join("ckpt_6.dmf")).unwrap(), pose);
    assert_eq!(std::fs::read(out.join("action-scratch/ckpt_4.dmf")).unwrap(), action);
    let mut want: Vec<&str> = full.lines().collect();
    let mut got: Vec<String> = metrics(&out).lines().map(String::from).collect();
    want.sort();
    got.sort();
    assert_eq!(got, want);
}

#[test]
fn eval_without_checkpoint_fails() {
    let (dir, cfg) = setup();
    for args in [&["eval-pose"][..], &["eval-action"], &["train-pseudo"], &["classify-videos"], &["track"]] {
        let o = dimofs(&cfg, &dir.path().join("empty"), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("io error"), "{args:?}");
    }
}

#[test]
fn config_errors_name_key_and_line() {
    let (dir, _) = setup();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\nbackbone.scales = -1\n").unwrap();
    let o = dimofs(&cfg, dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("backbone.scales") && err.contains("line 2"), "{err}");

    std::fs::write(&cfg, "delta.maximum = 3\n").unwrap();
    let o = dimofs(&cfg, dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let (dir, cfg) = setup();
    ok(&cfg, dir.path(), &["gradcheck"]);
    let o = dimofs(&cfg, dir.path(), &["gradcheck", "--set", "gradcheck.tolerance=1e-12"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gradient check failed"));
}

#[test]
fn visualize_writes_ppm_images() {
    let (dir, cfg) = setup();
    let out = dir.path().join("vis");
    ok(&cfg, &out, &["train-pose"]);
    ok(&cfg, &out, &["visualize", "--set", "vis.videos=1"]);
    let mut names: Vec<String> = std::fs::read_dir(out.join("vis")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["video0_frame_a.ppm", "video0_frame_b.ppm", "video0_motion.ppm", "video0_saliency.ppm"]);
    let bytes = std::fs::read(out.join("vis/video0_motion.ppm")).unwrap();
    let header = b"P6\n64 64\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 64 * 64 * 3);
}
