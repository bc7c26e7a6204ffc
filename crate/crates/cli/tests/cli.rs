//! End-to-end tests of the `drmm` binary: exit codes, file outputs, and
//! byte-level reproducibility.

use drmm_core::data::checkpoint::{load_checkpoint, save_checkpoint};
use drmm_core::data::idx::{write_idx_images, write_idx_labels};
use drmm_core::model::{Model, TrainMeta};
use drmm_core::rmm::{uniform, RmmParams};
use drmm_core::Tensor;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_drmm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Two 6x6 digit-ish classes: bright top half vs bright bottom half, with
/// a deterministic per-sample perturbation.
fn write_synthetic_mnist(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let mut pixels = Vec::with_capacity(n * 36);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        for y in 0..6 {
            for x in 0..6 {
                let bright = if class == 0 { y < 3 } else { y >= 3 };
                let base = if bright { 200 } else { 20 };
                let jitter = ((i * 7 + y * 5 + x * 3) % 17) as u8;
                pixels.push(base + jitter);
            }
        }
        labels.push(class as u8);
    }
    let images_path = dir.join("images.idx");
    let labels_path = dir.join("labels.idx");
    write_idx_images(&images_path, n, 6, 6, &pixels).unwrap();
    write_idx_labels(&labels_path, &labels).unwrap();
    (images_path, labels_path)
}

fn drmm_config(dir: &Path, out_dir: &Path, epochs: usize, extra_train: &str) -> PathBuf {
    let (images, labels) = write_synthetic_mnist(dir, 40);
    let config = format!(
        r#"{{
  "model": {{
    "kind": "drmm",
    "layers": [{{"filters": 2, "filter_h": 3, "filter_w": 3, "stride": 1, "pool_h": 2, "pool_w": 2}}],
    "n_classes": 2,
    "sigma2": 1.0
  }},
  "train": {{"epochs": {}, "batch_size": 8, "learning_rate": 0.05, "seed": 7{}}},
  "data": {{
    "train_images": "{}",
    "train_labels": "{}",
    "test_images": "{}",
    "test_labels": "{}"
  }},
  "out_dir": "{}"
}}"#,
        epochs,
        extra_train,
        images.display(),
        labels.display(),
        images.display(),
        labels.display(),
        out_dir.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    path
}

/// Drops the wall_seconds column, which is the one nondeterministic field.
fn metrics_without_wall(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&["no-such-command"])), 1);
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = drmm_config(dir.path(), &out_dir, 2, "");
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "epoch,train_error,test_error,cross_entropy,recon,kl,total,wall_seconds");
    assert_eq!(lines.len(), 3);

    let (model, meta) = load_checkpoint(&out_dir.join("model.ckpt")).unwrap();
    assert_eq!(model.kind(), "drmm");
    assert_eq!(meta.seed, 7);
    assert_eq!(meta.epoch, 2);
    assert!(meta.config_echo.contains("\"kind\": \"drmm\""));
}

#[test]
fn train_is_reproducible_bar_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let config_a = drmm_config(dir.path(), &out_a, 2, "");
    assert_eq!(code(&run(&["train", "--config", config_a.to_str().unwrap()])), 0);
    // same data and seed, different out dir
    let cfg = fs::read_to_string(&config_a).unwrap().replace(
        out_a.to_str().unwrap(),
        out_b.to_str().unwrap(),
    );
    let config_b = dir.path().join("config_b.json");
    fs::write(&config_b, cfg).unwrap();
    assert_eq!(code(&run(&["train", "--config", config_b.to_str().unwrap()])), 0);

    assert_eq!(
        metrics_without_wall(&out_a.join("metrics.csv")),
        metrics_without_wall(&out_b.join("metrics.csv"))
    );
    // checkpoints differ only in the echoed out_dir inside the config, so
    // compare the loaded models instead of raw bytes
    let (ma, _) = load_checkpoint(&out_a.join("model.ckpt")).unwrap();
    let (mb, _) = load_checkpoint(&out_b.join("model.ckpt")).unwrap();
    match (ma, mb) {
        (Model::Drmm(a), Model::Drmm(b)) => {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert_eq!(la.gamma.data(), lb.gamma.data());
            }
            assert_eq!(a.mu_c.data(), b.mu_c.data());
        }
        _ => panic!("expected drmm checkpoints"),
    }
}

#[test]
fn missing_data_file_exits_two_and_bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = drmm_config(dir.path(), &out_dir, 1, "");

    // break the data path
    let broken = fs::read_to_string(&config).unwrap().replace("images.idx", "gone.idx");
    let broken_path = dir.path().join("broken.json");
    fs::write(&broken_path, broken).unwrap();
    let out = run(&["train", "--config", broken_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // unknown key
    let unknown = fs::read_to_string(&config)
        .unwrap()
        .replace("\"n_classes\": 2", "\"n_classes\": 2, \"mystery\": 1");
    let unknown_path = dir.path().join("unknown.json");
    fs::write(&unknown_path, unknown).unwrap();
    let out = run(&["train", "--config", unknown_path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mystery"));

    // config file itself missing
    let out = run(&["train", "--config", dir.path().join("none.json").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn singular_m_step_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    // constant images make the placement design rank deficient
    let n = 8;
    let pixels = vec![100u8; n * 36];
    let labels = vec![0u8; n];
    let images_path = dir.path().join("flat.idx");
    let labels_path = dir.path().join("flat_labels.idx");
    write_idx_images(&images_path, n, 6, 6, &pixels).unwrap();
    write_idx_labels(&labels_path, &labels).unwrap();
    let out_dir = dir.path().join("run");
    let config = format!(
        r#"{{
  "model": {{"kind": "drmm", "layers": [{{"filters": 2, "filter_h": 3, "filter_w": 3, "pool_h": 2, "pool_w": 2}}], "n_classes": 2}},
  "train": {{"epochs": 1, "batch_size": 8, "step": "m", "ridge": 0.0, "seed": 3}},
  "data": {{"train_images": "{}", "train_labels": "{}"}},
  "out_dir": "{}"
}}"#,
        images_path.display(),
        labels_path.display(),
        out_dir.display()
    );
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, config).unwrap();
    let out = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ridge"));
}

#[test]
fn eval_reproduces_logged_final_test_error() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = drmm_config(dir.path(), &out_dir, 2, "");
    assert_eq!(code(&run(&["train", "--config", config.to_str().unwrap()])), 0);

    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    let logged_test_error = last.split(',').nth(2).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let cli_line = stdout_of(&out);
    assert_eq!(cli_line.trim(), format!("test_error={}", logged_test_error));
}

#[test]
fn sampling_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let config = drmm_config(dir.path(), &out_dir, 1, "");
    assert_eq!(code(&run(&["train", "--config", config.to_str().unwrap()])), 0);
    let ckpt = out_dir.join("model.ckpt");

    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    for s in [&s1, &s2] {
        let out = run(&[
            "sample",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--count",
            "2",
            "--seed",
            "9",
            "--out",
            s.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["sample_000.pgm", "sample_001.pgm"] {
        let a = fs::read(s1.join(name)).unwrap();
        let b = fs::read(s2.join(name)).unwrap();
        assert!(a.starts_with(b"P5\n"));
        assert_eq!(a, b);
    }
}

#[test]
fn actmax_on_toy_model_pins_the_pgm_bytes() {
    let dir = tempfile::tempdir().unwrap();
    // mu(c, g1) = [3, 0], mu(c, g2) = [0, 4]: larger restricted norm wins,
    // so the maximizer is [0, 1], rendered as bytes [0, 255]
    let params = RmmParams::new(
        uniform(1),
        uniform(2),
        0.5,
        Tensor::new(vec![1, 2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap(),
        1.0,
    )
    .unwrap();
    let ckpt = dir.path().join("toy.ckpt");
    save_checkpoint(&ckpt, &Model::Rmm(params), &TrainMeta::default()).unwrap();
    let out_dir = dir.path().join("images");
    let out = run(&[
        "actmax",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--class",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_of(&out).trim(), "class=0 score=4");
    let pgm = fs::read(out_dir.join("actmax_class0.pgm")).unwrap();
    assert_eq!(pgm, b"P5\n2 1\n255\n\x00\xff");
}

#[test]
fn relax_preserves_decisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = Vec::new();
    for i in 0..2 * 3 * 9 {
        data.push(((i * 31 % 17) as f64 - 8.0) / 8.0);
    }
    let params = RmmParams::new(uniform(2), uniform(3), 0.4, Tensor::new(vec![2, 3, 9], data).unwrap(), 0.5).unwrap();
    let ckpt = dir.path().join("gen.ckpt");
    save_checkpoint(&ckpt, &Model::Rmm(params.clone()), &TrainMeta::default()).unwrap();
    let out_dir = dir.path().join("relaxed");
    let out = run(&["relax", "--checkpoint", ckpt.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let (relaxed, _) = load_checkpoint(&out_dir.join("relaxed.ckpt")).unwrap();
    let disc = match relaxed {
        Model::ShallowDiscriminative(d) => d,
        other => panic!("expected shallow discriminative, got {}", other.kind()),
    };
    let natural = params.to_natural().unwrap();
    for i in 0..50u64 {
        let img = Tensor::from_vec((0..9).map(|j| (((i as usize * 9 + j) * 13 % 23) as f64 - 11.0) / 11.0).collect()).unwrap();
        let (c_gen, _) = drmm_core::rmm::classify_maxout(&natural, &img);
        let (c_disc, _) = disc.classify(&img);
        assert_eq!(c_gen, c_disc);
    }
}

#[test]
fn forest_train_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_synthetic_mnist(dir.path(), 60);
    let out_dir = dir.path().join("forest");
    let config = format!(
        r#"{{
  "model": {{"kind": "edrmm", "n_classes": 2}},
  "train": {{"seed": 11}},
  "data": {{
    "train_images": "{}",
    "train_labels": "{}",
    "test_images": "{}",
    "test_labels": "{}"
  }},
  "forest": {{"n_trees": 5, "depth": 1, "branching": [2]}},
  "out_dir": "{}"
}}"#,
        images.display(),
        labels.display(),
        images.display(),
        labels.display(),
        out_dir.display()
    );
    let config_path = dir.path().join("forest.json");
    fs::write(&config_path, config).unwrap();

    let out = run(&["forest-train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = out_dir.join("forest.ckpt");

    let out = run(&["forest-eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let line = stdout_of(&out);
    let err: f64 = line.trim().strip_prefix("test_error=").unwrap().parse().unwrap();
    assert!(err <= 0.2, "forest error too high: {}", err);

    // wrong checkpoint kind for the subcommand
    let out = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "eval also accepts forests via the shared dispatch");
}

#[test]
fn rmm_training_with_m_step_works_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = write_synthetic_mnist(dir.path(), 40);
    let out_dir = dir.path().join("rmm");
    let config = format!(
        r#"{{
  "model": {{"kind": "rmm", "n_classes": 2, "n_nuisances": 2, "sigma2": 0.05}},
  "train": {{"epochs": 3, "batch_size": 40, "step": "m", "seed": 5}},
  "data": {{
    "train_images": "{}",
    "train_labels": "{}",
    "test_images": "{}",
    "test_labels": "{}"
  }},
  "out_dir": "{}"
}}"#,
        images.display(),
        labels.display(),
        images.display(),
        labels.display(),
        out_dir.display()
    );
    let config_path = dir.path().join("rmm.json");
    fs::write(&config_path, config).unwrap();
    let out = run(&["train", "--config", config_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let (model, _) = load_checkpoint(&out_dir.join("model.ckpt")).unwrap();
    assert_eq!(model.kind(), "rmm");
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("model.ckpt").to_str().unwrap(),
        "--config",
        config_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let line = stdout_of(&out);
    let err: f64 = line.trim().strip_prefix("test_error=").unwrap().parse().unwrap();
    assert!(err <= 0.1, "separable shallow problem should fit: {}", err);
}
