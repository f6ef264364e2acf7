use std::path::Path;
use std::process::{Command, Output};

fn posesynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posesynth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_scene(dir: &Path) -> String {
    let scene = dir.join("scene");
    let s = scene.to_str().unwrap().to_string();
    let o = posesynth(&[
        "generate", "--spec", "biased-street", "--seed", "3", "--out", &s, "--train", "24", "--test", "6", "--size", "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    s
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(posesynth(&["--help"]).status.code(), Some(0));
    assert_eq!(posesynth(&["generate", "--bogus"]).status.code(), Some(1));
    assert_eq!(posesynth(&[]).status.code(), Some(1));
}

#[test]
fn stochastic_commands_need_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = posesynth(&["generate", "--spec", "indoor", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));
    assert!(!out.exists());
}

#[test]
fn generate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let n = std::fs::read_dir(Path::new(&scene).join("images")).unwrap().count();
    assert_eq!(n, 30);
    for f in ["poses.txt", "intrinsics.txt", "split.txt"] {
        assert!(Path::new(&scene).join(f).exists(), "{f} missing");
    }

    let o = posesynth(&["analyze-bias", "--scene", &scene, "--split", "train"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let hist = v["histogram"].as_array().unwrap();
    assert_eq!(hist.len(), 36);
    assert_eq!(hist.iter().map(|c| c.as_u64().unwrap()).sum::<u64>(), 24);

    let o = posesynth(&["analyze-bias", "--scene", &scene, "--split", "sideways"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_scene_is_a_user_error() {
    let o = posesynth(&["analyze-bias", "--scene", "/nonexistent/scene"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/scene"));
}

#[test]
fn config_file_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 2\nlearning_rate = 0.1\n").unwrap();
    let scene = dir.path().join("s");
    let o = posesynth(&[
        "--config", cfg.to_str().unwrap(), "generate", "--spec", "indoor", "--out", scene.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));

    let o = posesynth(&["--threads", "0", "analyze-bias", "--scene", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 5 # fixed\n").unwrap();
    let scene = dir.path().join("s");
    let o = posesynth(&[
        "--config", cfg.to_str().unwrap(), "generate", "--spec", "uniform-orbit", "--out",
        scene.to_str().unwrap(), "--train", "4", "--test", "2", "--size", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("seed = 5"));
}

#[test]
fn train_eval_and_synth_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "embed_dim = 8\npos_dim = 4\nlayers = 1\nheads = 2\nbatch_size = 4\n").unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let o = posesynth(&[
        "--config", cfg.to_str().unwrap(), "train", "--scene", &scene, "--seed", "1", "--out", run_s, "--epochs", "2",
        "--policy", "in-dist",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["model.psrp", "loss.csv", "train.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let ckpt = run.join("model.psrp");
    let report = dir.path().join("eval.json");
    let o = posesynth(&[
        "eval", "--scene", &scene, "--checkpoint", ckpt.to_str().unwrap(), "--out", report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["queries"].as_array().unwrap().len(), 6);
    assert!(v["median_r"].as_f64().unwrap().is_finite());

    let o = posesynth(&["eval", "--scene", &scene, "--checkpoint", ckpt.to_str().unwrap(), "--random-neighbour"]);
    assert_eq!(o.status.code(), Some(1), "random neighbour without a seed");

    std::fs::write(&ckpt, b"PSRP garbage").unwrap();
    let o = posesynth(&["eval", "--scene", &scene, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let split = std::fs::read_to_string(Path::new(&scene).join("split.txt")).unwrap();
    let record = split.lines().find(|l| l.ends_with("train")).unwrap().split_whitespace().next().unwrap();
    let png = dir.path().join("view.png");
    let o = posesynth(&[
        "synth", "--scene", &scene, "--record", record, "--yaw-deg", "-10", "--out", png.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(png.exists());
}

#[test]
fn sample_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let out = dir.path().join("pairs");
    let o = posesynth(&[
        "sample", "--scene", &scene, "--seed", "4", "--policy", "out-dist", "--count", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert!(out.join("pairs.json").exists());
}

#[test]
fn sanity_check_experiment_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let scene = tiny_scene(dir.path());
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, "embed_dim = 8\npos_dim = 4\nlayers = 1\nheads = 2\nbatch_size = 4\n").unwrap();
    let out = dir.path().join("exp");
    let o = posesynth(&[
        "--config", cfg.to_str().unwrap(), "experiment", "sanity-check", "--scene", &scene, "--seed", "2", "--epochs",
        "1", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for k in ["upper_bound", "synthetic", "retrieval"] {
        assert!(v[k]["median_r"].is_number(), "{k}");
    }
    assert!(out.join("sanity-check.json").exists());

    let o = posesynth(&["experiment", "nope", "--scene", &scene, "--seed", "2"]);
    assert_eq!(o.status.code(), Some(1));
}
