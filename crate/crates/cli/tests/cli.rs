use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskdn::checkpoint::Container;
use maskdn::cka::{cka_matrix, FeatureMatrix};
use maskdn::io::save_image;
use maskdn::noise::seeded_rng;
use maskdn::scenes::render;
use maskdn::Image;
use rand_distr::{Distribution, StandardNormal};

fn maskdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdn")).args(args).env_remove("MDN_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = maskdn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Stderr of a failing run, which must be exactly one line.
fn fails(args: &[&str]) -> String {
    let out = maskdn(args);
    assert!(!out.status.success(), "{args:?} succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenes(dir: &Path, count: usize, size: usize) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img: Image = render(11, i as u64, size, size);
        save_image(&img, &dir.join(format!("img{i:02}.png"))).unwrap();
    }
    dir.to_path_buf()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn synth_is_deterministic_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let clean = scenes(&dir.path().join("clean"), 1, 32);
    let input = clean.join("img00.png");
    let (a, b, c) = (dir.path().join("a.png"), dir.path().join("b.png"), dir.path().join("c.png"));
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        ok(&["synth", "--noise", "gaussian", "--sigma255", "15", "--seed", seed, s(&input), s(out)]);
    }
    let bytes = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    let manifest = std::fs::read_to_string(dir.path().join("a.png.manifest.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    assert_eq!(rec["seed"], 1);
    assert_eq!(rec["config"]["noise"]["kind"], "gaussian");
}

#[test]
fn synth_over_a_directory_covers_every_family() {
    let dir = tempfile::tempdir().unwrap();
    let clean = scenes(&dir.path().join("clean"), 3, 24);
    for (i, args) in [
        vec!["--noise", "speckle", "--var", "0.02"],
        vec!["--noise", "poisson", "--alpha", "2"],
        vec!["--noise", "spatial", "--sigma255", "25"],
        vec!["--noise", "salt-pepper", "--density", "0.05"],
        vec!["--noise", "mixture", "--mix-level", "4"],
    ]
    .into_iter()
    .enumerate()
    {
        let out = dir.path().join(format!("out{i}"));
        let mut full = vec!["synth"];
        full.extend(args);
        full.extend([s(&clean), s(&out)]);
        ok(&full);
        assert_eq!(maskdn::io::list_pngs(&out).unwrap().len(), 3);
        assert!(out.join("manifest.jsonl").exists());
    }
}

#[test]
fn usage_errors_are_single_lines() {
    let err = fails(&["synth", "--noise", "gaussian", "a.png", "b.png"]);
    assert!(err.contains("--sigma255"), "{err}");
    fails(&["synth", "--noise", "gaussian", "--sigma255", "5", "--bogus", "a.png", "b.png"]);
    fails(&["synth", "--noise", "salt-pepper", "--density", "3", "a.png", "b.png"]);
    let err = fails(&["synth", "--noise", "gaussian", "--sigma255", "5", "/no/such.png", "/tmp/x.png"]);
    assert!(err.contains("/no/such.png"), "{err}");
    let out = Command::new(env!("CARGO_BIN_EXE_maskdn")).args(["cka", "--features-a", "x", "--features-b", "y", "--out", "z"])
        .env("MDN_THREADS", "zero")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("MDN_THREADS"));
}

#[test]
fn eval_of_identical_directories_hits_the_caps() {
    let dir = tempfile::tempdir().unwrap();
    let clean = scenes(&dir.path().join("clean"), 3, 20);
    let report = dir.path().join("report.csv");
    ok(&["eval", "--clean", s(&clean), "--noisy", s(&clean), "--out", s(&report), "--noise-spec", "none"]);
    let rows = read_csv(&report);
    assert_eq!(rows[0], ["image", "noise_spec", "psnr_db", "ssim"]);
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[1][0], "img00.png");
    assert_eq!(rows[4][0], "mean");
    for row in &rows[1..] {
        assert_eq!(row[2].parse::<f64>().unwrap(), 100.0);
        assert!((row[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn eval_rejects_unpaired_files() {
    let dir = tempfile::tempdir().unwrap();
    let clean = scenes(&dir.path().join("clean"), 3, 20);
    let noisy = scenes(&dir.path().join("noisy"), 2, 20);
    let err = fails(&["eval", "--clean", s(&clean), "--noisy", s(&noisy), "--out", s(&dir.path().join("r.csv"))]);
    assert!(err.contains("img02.png"), "{err}");
}

fn dump(path: &Path, layers: &[FeatureMatrix<f64>]) {
    let mut c = Container::new();
    for (i, l) in layers.iter().enumerate() {
        c.push(format!("layer_{i}"), &l.to_tensor()).unwrap();
    }
    c.save(path).unwrap();
}

fn gaussian(rows: usize, cols: usize, seed: u64) -> FeatureMatrix<f64> {
    let mut rng = seeded_rng(seed);
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

#[test]
fn cka_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let a: Vec<_> = (0..3).map(|i| gaussian(40, 5, i)).collect();
    let b: Vec<_> = (0..2).map(|i| gaussian(40, 3, 10 + i)).collect();
    let (pa, pb, out) = (dir.path().join("a.bin"), dir.path().join("b.bin"), dir.path().join("m.csv"));
    dump(&pa, &a);
    dump(&pb, &b);
    ok(&["cka", "--features-a", s(&pa), "--features-b", s(&pb), "--out", s(&out)]);
    let named = |v: &[FeatureMatrix<f64>]| v.iter().enumerate().map(|(i, m)| (format!("layer_{i}"), m.clone())).collect::<Vec<_>>();
    let want = cka_matrix(&named(&a), &named(&b)).unwrap();
    let rows = read_csv(&out);
    assert_eq!(rows[0], ["layer", "layer_0", "layer_1"]);
    for i in 0..3 {
        for j in 0..2 {
            assert_eq!(rows[i + 1][j + 1].parse::<f64>().unwrap(), want.get(i, j));
        }
    }
}

fn tiny_config(dir: &Path, data: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset_dir": data,
        "crop": 16,
        "batch": 2,
        "total_iters": 6,
        "milestones": [3, 5],
        "model": { "channels": 8, "window": 8, "heads": 2, "depth": 2, "mlp_ratio": 2.0 },
        "checkpoint_every": 3,
        "eval_every": 3,
        "out_dir": dir.join("run"),
    });
    let path = dir.join("train.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn train_denoise_features_cka_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenes(&dir.path().join("data"), 3, 24);
    let cfg = tiny_config(dir.path(), &data);
    let stdout = ok(&["train", "--config", s(&cfg), "--seed", "5"]);
    let ckpt = dir.path().join("run/final.mdnc");
    assert!(stdout.contains("final.mdnc"));
    let manifest = std::fs::read_to_string(dir.path().join("run/manifest.jsonl")).unwrap();
    assert!(manifest.lines().next().unwrap().contains("\"seed\":5"));

    let resumed = dir.path().join("resumed");
    ok(&["train", "--config", s(&cfg), "--seed", "5", "--resume", s(&dir.path().join("run/ckpt_000003.mdnc")), "--out-dir", s(&resumed)]);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(resumed.join("final.mdnc")).unwrap());

    let denoised = dir.path().join("denoised");
    ok(&["denoise", "--checkpoint", s(&ckpt), s(&data), s(&denoised)]);
    assert_eq!(maskdn::io::list_pngs(&denoised).unwrap().len(), 3);
    let report = dir.path().join("report.csv");
    ok(&["eval", "--clean", s(&data), "--noisy", s(&data), "--checkpoint", s(&ckpt), "--out", s(&report)]);
    assert_eq!(read_csv(&report).len(), 5);

    let fa = dir.path().join("fa.bin");
    let stats = dir.path().join("stats.json");
    ok(&["features", "--checkpoint", s(&ckpt), "--input", s(&data), "--out", s(&fa), "--positions", "300", "--seed", "2", "--stats", s(&stats)]);
    let c = Container::load(&fa).unwrap();
    assert_eq!(c.len(), 4);
    assert_eq!(c.get("layer_0").unwrap().shape(), [300, 8]);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(stats.as_array().unwrap().len(), 4);

    let m = dir.path().join("m.csv");
    ok(&["cka", "--features-a", s(&fa), "--features-b", s(&fa), "--out", s(&m)]);
    let rows = read_csv(&m);
    for i in 1..=4 {
        assert!((rows[i][i].parse::<f64>().unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn config_errors_cite_key_and_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\n  \"crop\": 16,\n  \"batchsize\": 4\n}\n").unwrap();
    let err = fails(&["train", "--config", s(&path)]);
    assert!(err.contains("batchsize") && err.contains("line 3") && err.contains("bad.json"), "{err}");
}
