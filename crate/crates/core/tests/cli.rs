use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use capnet::cli::RunConfig;
use capnet::models::FeatureCache;
use capnet::neural::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn capnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capnet"))
        .args(args)
        .env_remove("CAPNET_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// The resolved-config block printed before each command runs.
fn echo(out: &Output) -> String {
    let text = stderr(out);
    let start = text.find("# capnet resolved configuration").expect("config echo");
    text[start..]
        .lines()
        .take_while(|l| l.starts_with('#') || l.contains(" = "))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn synth(root: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["synth-gen", "--data-root", path(root)];
    args.extend_from_slice(extra);
    capnet(&args)
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Random D-dimensional features for every frame under `root`.
fn feature_cache(root: &Path, dim: usize, file: &Path) {
    let report = capnet::dataset::scan_video_dir(root, 30).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cache = FeatureCache::new(dim);
    for v in &report.videos {
        for &i in v.frames.keys() {
            cache.insert(&v.video_id, i, (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        }
    }
    cache.save(file).unwrap();
}

#[test]
fn synth_gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for root in [&a, &b] {
        let out = synth(root, &["--num-videos", "2", "--frames-per-video", "120", "--seed", "4"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let tree = tree_bytes(&a);
    assert!(tree.iter().any(|(p, _)| p.ends_with("stimulus.csv")));
    assert_eq!(tree.len(), 2 * (120 + 1) + 2);
    assert_eq!(tree, tree_bytes(&b));
}

#[test]
fn bad_frames_per_video_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = synth(dir.path(), &["--frames-per-video", "50"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("frames_per_video"), "{}", stderr(&out));
}

#[test]
fn prepare_pairs_counts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    assert_eq!(synth(&root, &["--num-videos", "1"]).status.code(), Some(0));
    let manifest = dir.path().join("pairs.csv");
    let out = capnet(&["prepare-pairs", "--data-root", path(&root), "--out", path(&manifest)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().count(), 210);
    // video_id, T, nine slots, valence, arousal
    assert!(text.lines().all(|l| l.split(',').count() == 13));

    let out = capnet(&["prepare-pairs", "--data-root", path(&root), "--single"]);
    assert_eq!(out.status.code(), Some(0));
    // synthetic labels before the first full window are invalid
    assert_eq!(stdout(&out).lines().count(), 210);

    let out = capnet(&["prepare-pairs", "--data-root", path(&root), "--set", "sampler.w=5/2"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn fully_labeled_video_counts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    fs::create_dir_all(root.join("v1")).unwrap();
    let mut ann = String::from("valence,arousal\n");
    for i in 1..=300u32 {
        capnet::dataset::write_ppm(&root.join("v1").join(capnet::dataset::frame_file_name(i)), &capnet::dataset::Image::filled(2, 2, 9)).unwrap();
        ann.push_str("0.1,0.2\n");
    }
    fs::write(root.join("v1.txt"), ann).unwrap();
    let out = capnet(&["prepare-pairs", "--data-root", path(&root), "--single"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 300);
    let out = capnet(&["prepare-pairs", "--data-root", path(&root)]);
    assert_eq!(stdout(&out).lines().count(), 210);
    let out = capnet(&["prepare-pairs", "--data-root", path(&root), "--set", "sampler.w=2"]);
    assert_eq!(stdout(&out).lines().count(), 240);
}

#[test]
fn echo_reparses_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth(&root, &["--num-videos", "1"]);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# experiment\nseed = 3\ntrain.lr = 0.01\nsampler.w = 2\n").unwrap();
    let out = capnet(&[
        "prepare-pairs",
        "--config",
        path(&cfg),
        "--seed",
        "8",
        "--data-root",
        path(&root),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = echo(&out);
    let parsed = RunConfig::parse(&text).unwrap();
    assert_eq!(parsed.to_text(), text);
    assert_eq!(parsed.seed, 8);
    assert_eq!(parsed.train.lr, 0.01);
    assert_eq!(parsed.window.to_string(), "2");
    assert_eq!(parsed.threads, 1);
    assert_eq!(parsed.data_root, root);

    fs::write(&cfg, "seed = 3\nmodel.depth = 4\n").unwrap();
    let out = capnet(&["prepare-pairs", "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("model.depth"));
}

#[test]
fn data_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("envroot");
    synth(&root, &["--num-videos", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_capnet"))
        .args(["prepare-pairs"])
        .env("CAPNET_DATA_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 210);
    assert_eq!(RunConfig::parse(&echo(&out)).unwrap().data_root, root);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(capnet(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(capnet(&["evaluate", "--bogus-flag"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = capnet(&["prepare-pairs", "--data-root", path(&missing)]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn evaluate_oracle_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth(&root, &["--num-videos", "2"]);
    let csv = dir.path().join("report.csv");
    let out = capnet(&["evaluate", "--oracle", "--data-root", path(&root), "--csv", path(&csv)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = stdout(&out);
    assert!(table.contains("window size"));
    assert!(table.contains("(seconds)"));
    assert!(table.lines().nth(2).unwrap().trim_end().ends_with("1.000    1.000    1.000"), "{table}");
    let text = fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "oracle");
    assert_eq!(row[1], "3");
    for v in &row[2..] {
        assert_eq!(v.parse::<f64>().unwrap(), 1.0);
    }
    let out = capnet(&["evaluate", "--data-root", path(&root)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let out = capnet(&["gradcheck", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("max relative error"));

    let out = capnet(&["gradcheck", "--layers", "lstm", "--seeds", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("lstm"));

    let out = capnet(&["gradcheck", "--layers", "fc,ccc", "--seeds", "2", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let out = capnet(&["gradcheck", "--layers", "conv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_evaluate_and_stream() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth(&root, &["--num-videos", "3", "--frames-per-video", "160"]);
    let feats = dir.path().join("feats.capf");
    feature_cache(&root, 32, &feats);
    let ckpt = dir.path().join("capnet.ckpt");
    let log = dir.path().join("log.csv");
    let common = ["--data-root", path(&root), "--features", path(&feats)];

    let mut args = vec!["train-capnet", "--out", path(&ckpt), "--log", path(&log), "--epochs", "2", "--batch-size", "16"];
    args.extend(common);
    let first = capnet(&args);
    assert_eq!(first.status.code(), Some(0), "{}", stderr(&first));
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);
    assert!(Checkpoint::load(&ckpt).is_ok());
    let sidecar = fs::read_to_string(dir.path().join("capnet.ckpt.cfg")).unwrap();
    assert_eq!(sidecar, echo(&first));

    let resumed = dir.path().join("resumed.ckpt");
    let mut args = vec!["train-capnet", "--resume", path(&ckpt), "--out", path(&resumed)];
    args.extend(common);
    let second = capnet(&args);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    assert_eq!(echo(&second), echo(&first));

    let mut args = vec!["evaluate", "--checkpoint", path(&ckpt), "--name", "mine"];
    args.extend(common);
    let out = capnet(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("mine"));

    let trace = dir.path().join("trace.csv");
    let mut args = vec!["stream-sim", "--checkpoint", path(&ckpt), "--out", path(&trace), "--video", "synth_001"];
    args.extend(common);
    let out = capnet(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = fs::read_to_string(&trace).unwrap();
    assert_eq!(text.lines().next().unwrap(), "frame,valence,arousal,insufficient_flag,micros_per_prediction");
    assert_eq!(text.lines().count(), 161);
    assert!(text.lines().nth(1).unwrap().starts_with("1,,,1,"));
    assert!(text.lines().nth(91).unwrap().contains(",0,"));
}

#[test]
fn train_fer_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth(&root, &["--num-videos", "2", "--frames-per-video", "120"]);
    let feats = dir.path().join("feats.capf");
    feature_cache(&root, 32, &feats);
    let ckpt = dir.path().join("fer.ckpt");
    let out = capnet(&[
        "train-fer", "--data-root", path(&root), "--features", path(&feats), "--out", path(&ckpt), "--epochs", "2",
        "--batch-size", "8",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let log = fs::read_to_string(dir.path().join("fer.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss"));
}

#[test]
fn mismatched_feature_dim_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    synth(&root, &["--num-videos", "2", "--frames-per-video", "120"]);
    let feats = dir.path().join("feats16.capf");
    feature_cache(&root, 16, &feats);
    let out = capnet(&[
        "train-capnet", "--data-root", path(&root), "--features", path(&feats), "--out",
        path(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("D=16") && err.contains("32"), "{err}");
}
