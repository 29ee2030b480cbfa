//! Self-contained evaluations of the acceptance criteria. Each returns a
//! verdict with the measured numbers so callers can assert or report.

use std::fmt::Write as _;
use std::time::Instant;

use maskdn::cka::{cka, gram_linear, hsic, FeatureMatrix, Gram};
use maskdn::image::ImageTensor;
use maskdn::metrics::{psnr, ssim};
use maskdn::model::{sample_mask, sample_ratio};
use maskdn::noise::{
    add_gaussian, add_salt_pepper, add_spatially_correlated, add_speckle, mixture_params, seeded_rng, MixtureParams,
};
use maskdn::scenes::render_set;
use maskdn::train::{lr_at, Dataset, TrainConfig, Trainer};
use maskdn::ModelConfig;
use rand_distr::{Distribution, StandardNormal};

use super::gradients::{op_reports, tiny_model_report, TinyLoss};
use super::linalg;

pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check { passed, detail: detail.into() }
    }

    /// Passes when every part passes; the detail lists failing parts first.
    pub fn all(parts: Vec<(&str, Check)>) -> Self {
        let passed = parts.iter().all(|(_, c)| c.passed);
        let mut detail = String::new();
        for (name, c) in parts.iter().filter(|(_, c)| !c.passed).chain(parts.iter().filter(|(_, c)| c.passed)) {
            let mark = if c.passed { "ok" } else { "FAILED" };
            let _ = write!(detail, "{}{name} {mark} ({})", if detail.is_empty() { "" } else { "; " }, c.detail);
        }
        Check { passed, detail }
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> FeatureMatrix<f64> {
    let mut rng = seeded_rng(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureMatrix::new(rows, cols, data).unwrap()
}

// 1 ---------------------------------------------------------------------------

pub fn gradient_integrity() -> Check {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    for (name, report) in op_reports() {
        let detail = format!("max rel err {:.2e} over {} probes", report.max_rel_err(), report.probes.len());
        parts.push((name, Check::new(report.passed(), detail)));
    }
    for (name, loss) in [("tiny_model", TinyLoss::Plain), ("tiny_model_masked", TinyLoss::Masked), ("tiny_model_l1", TinyLoss::L1)] {
        let report = tiny_model_report(loss);
        let ok = report.passed() && report.probes.len() == 100;
        parts.push((name, Check::new(ok, format!("max rel err {:.2e}", report.max_rel_err()))));
    }
    let secs = t0.elapsed().as_secs_f64();
    parts.push(("runtime", Check::new(secs < 120.0, format!("{secs:.1} s"))));
    Check::all(parts)
}

// 2 ---------------------------------------------------------------------------

pub fn masking_statistics() -> Check {
    let inside = (0..100u64)
        .filter(|&trial| {
            let count = sample_mask(10_000, 0.8, &mut seeded_rng(trial)).iter().filter(|&&m| m).count();
            (7920..=8080).contains(&count)
        })
        .count();
    let mut rng = seeded_rng(12_345);
    let mean = (0..10_000).map(|_| sample_ratio([0.75, 0.85], &mut rng)).sum::<f64>() / 10_000.0;
    Check::all(vec![
        ("binomial_band", Check::new(inside >= 95, format!("{inside}/100 trials in 8000 ± 80"))),
        ("ratio_mean", Check::new(within(mean, 0.80, 0.005), format!("mean {mean:.5}"))),
    ])
}

// 3 ---------------------------------------------------------------------------

fn gray(side: usize) -> ImageTensor<f64> {
    ImageTensor::filled(side, side, 0.5)
}

fn residual(a: &ImageTensor<f64>, b: &ImageTensor<f64>) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()
}

fn std_of(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
}

/// Mean over channels of the horizontal lag-1 autocorrelation of an interleaved RGB field.
pub fn lag1_autocorrelation(field: &[f64], height: usize, width: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let at = |y: usize, x: usize| field[(y * width + x) * 3 + c];
        let n = (height * width) as f64;
        let mu = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| at(y, x)).sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..height {
            for x in 0..width {
                let d = at(y, x) - mu;
                den += d * d;
                if x + 1 < width {
                    num += d * (at(y, x + 1) - mu);
                }
            }
        }
        total += num / den;
    }
    total / 3.0
}

/// Expected mixture parameters per level: gaussian var, speckle var, poisson alpha, s&p density, speckle var.
pub const EXPECTED_MIXTURE: [[f64; 5]; 4] = [
    [0.003, 0.003, 1.0, 0.002, 0.003],
    [0.004, 0.004, 1.0, 0.002, 0.004],
    [0.006, 0.006, 1.0, 0.003, 0.006],
    [0.008, 0.008, 1.0, 0.004, 0.008],
];

pub fn noise_moments() -> Check {
    let side = 256;
    let img = gray(side);

    let g = add_gaussian(&img, 15.0, &mut seeded_rng(1));
    let g_std = std_of(&residual(&g, &img));
    let g_target = 15.0 / 255.0;

    let s = add_speckle(&img, 0.02, &mut seeded_rng(2));
    let s_std = std_of(&residual(&s, &img));
    let s_target = 0.5 * 0.02f64.sqrt();

    let d = 0.012;
    let sp = add_salt_pepper(&img, d, &mut seeded_rng(3));
    let hit = sp.data().chunks_exact(3).filter(|px| px.iter().any(|&v| v != 0.5)).count();
    let n = (side * side) as f64;
    let frac = hit as f64 / n;
    let band = 2.0 * (d * (1.0 - d) / n).sqrt();

    let sc = add_spatially_correlated(&img, 15.0, &mut seeded_rng(4));
    let r_corr = lag1_autocorrelation(&residual(&sc, &img), side, side);
    let r_white = lag1_autocorrelation(&residual(&g, &img), side, side);

    let table_ok = (1..=4u8).all(|level| {
        let MixtureParams { gaussian_var, speckle_var_first, poisson_alpha, salt_pepper_density, speckle_var_second } =
            mixture_params(level).unwrap();
        [gaussian_var, speckle_var_first, poisson_alpha, salt_pepper_density, speckle_var_second]
            == EXPECTED_MIXTURE[level as usize - 1]
    });

    Check::all(vec![
        ("gaussian_std", Check::new(within(g_std, g_target, 0.03 * g_target), format!("{g_std:.5} vs {g_target:.5}"))),
        ("speckle_std", Check::new(within(s_std, s_target, 0.03 * s_target), format!("{s_std:.5} vs {s_target:.5}"))),
        ("salt_pepper_fraction", Check::new(within(frac, d, band), format!("{frac:.5} vs {d} ± {band:.5}"))),
        ("correlated_lag1", Check::new(within(r_corr, 2.0 / 3.0, 0.05), format!("{r_corr:.4}"))),
        ("white_lag1", Check::new(within(r_white, 0.0, 0.05), format!("{r_white:.4}"))),
        ("mixture_table", Check::new(table_ok && mixture_params(5).is_err(), "levels 1-4")),
    ])
}

// 4 ---------------------------------------------------------------------------

/// `tr(K H L H) / (m − 1)²` as an explicit quadruple sum.
pub fn brute_force_hsic(k: &[f64], l: &[f64], m: usize) -> f64 {
    let h = |i: usize, j: usize| (i == j) as u8 as f64 - 1.0 / m as f64;
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            for a in 0..m {
                for b in 0..m {
                    total += k[i * m + j] * h(j, a) * l[a * m + b] * h(b, i);
                }
            }
        }
    }
    total / ((m - 1) * (m - 1)) as f64
}

fn random_gram(m: usize, seed: u64) -> Gram<f64> {
    gram_linear(&gaussian_matrix(m, 3, seed))
}

pub fn cka_correctness() -> Check {
    let x = gaussian_matrix(64, 12, 10);
    let y = gaussian_matrix(64, 7, 11);
    let self_sim = cka(&x, &x).unwrap();

    let r = linalg::random_orthogonal(12, 12);
    let xr = linalg::matmul(&x, &r);
    let base = cka(&x, &y).unwrap();
    let rotated = cka(&xr, &y).unwrap();
    let scaled = cka(&linalg::scale(&x, -3.7), &y).unwrap();
    let reference = linalg::feature_space_cka(&x, &y);

    let mut worst_hsic: f64 = 0.0;
    for m in 2..=5 {
        for trial in 0..20u64 {
            let (k, l) = (random_gram(m, 100 + trial), random_gram(m, 200 + trial));
            let fast = hsic(&k, &l).unwrap();
            let slow = brute_force_hsic(k.data(), l.data(), m);
            worst_hsic = worst_hsic.max((fast - slow).abs());
        }
    }

    Check::all(vec![
        ("self", Check::new(within(self_sim, 1.0, 1e-6), format!("cka(X,X) = {self_sim:.12}"))),
        ("orthogonal", Check::new(within(rotated, base, 1e-6), format!("|Δ| = {:.2e}", (rotated - base).abs()))),
        ("scaling", Check::new(within(scaled, base, 1e-6), format!("|Δ| = {:.2e}", (scaled - base).abs()))),
        ("feature_space_formula", Check::new(within(base, reference, 1e-9), format!("{base:.9} vs {reference:.9}"))),
        ("hsic_brute_force", Check::new(worst_hsic <= 1e-12, format!("max |Δ| = {worst_hsic:.2e} for m = 2..5"))),
    ])
}

// 5 ---------------------------------------------------------------------------

pub fn metric_identities() -> Check {
    let a = ImageTensor::<f64>::from_fn(32, 32, |y, x, c| ((y * 7 + x * 3 + c * 11) % 80) as f64 / 100.0);
    let b = ImageTensor::from_fn(32, 32, |y, x, c| a.get(y, x, c) + 0.1);
    let p = psnr(&a, &b).unwrap();

    let c1 = ImageTensor::<f64>::filled(16, 16, 0.5);
    let c2 = ImageTensor::<f64>::filled(16, 16, 0.25);
    let s = ssim(&c1, &c2).unwrap();
    let closed = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);

    let noisy = add_gaussian(&a, 25.0, &mut seeded_rng(5));
    let same = ssim(&noisy, &noisy).unwrap();

    Check::all(vec![
        ("psnr_offset", Check::new(within(p, 20.0, 1e-9), format!("{p:.12} dB"))),
        ("ssim_constant", Check::new(within(s, 0.8001, 1e-3) && within(s, closed, 1e-12), format!("{s:.6}"))),
        ("ssim_identity", Check::new(within(same, 1.0, 1e-9), format!("{same:.12}"))),
    ])
}

// 6 ---------------------------------------------------------------------------

pub fn schedule() -> Check {
    let cfg = TrainConfig::default();
    let [m1, m2] = cfg.milestones;
    let cases = [(0, 1e-4), (m1 - 1, 1e-4), (m1, 5e-5), (m2 - 1, 5e-5), (m2, 2.5e-5), (cfg.total_iters - 1, 2.5e-5)];
    let bad: Vec<String> = cases
        .iter()
        .filter(|&&(it, lr)| lr_at(it, &cfg) != lr)
        .map(|&(it, lr)| format!("iter {it}: {} != {lr}", lr_at(it, &cfg)))
        .collect();
    Check::new(bad.is_empty(), if bad.is_empty() { "1e-4 / 5e-5 / 2.5e-5 exact".to_string() } else { bad.join(", ") })
}

// 7 ---------------------------------------------------------------------------

pub fn small_train_config(out: &std::path::Path) -> TrainConfig {
    TrainConfig {
        crop: 16,
        batch: 2,
        total_iters: 12,
        milestones: [6, 9],
        model: ModelConfig { channels: 8, window: 8, heads: 2, depth: 2, mlp_ratio: 2.0 },
        seed: 77,
        checkpoint_every: 4,
        eval_every: 4,
        out_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

pub fn small_dataset(crop: usize) -> Dataset<f32> {
    Dataset::from_images(render_set(5, 4, 24, 24), crop).unwrap()
}

fn read(path: &std::path::Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

pub fn determinism_and_resume() -> Check {
    let root = tempfile::tempdir().unwrap();
    let (a, b, c) = (root.path().join("a"), root.path().join("b"), root.path().join("c"));
    let run = |out: &std::path::Path| {
        let cfg = small_train_config(out);
        Trainer::new(cfg.clone(), small_dataset(cfg.crop)).unwrap().run(None).unwrap()
    };
    let ra = run(&a);
    let rb = run(&b);
    let same_final = read(&ra.final_checkpoint) == read(&rb.final_checkpoint);
    let same_mid = read(&a.join("ckpt_000004.mdnc")) == read(&b.join("ckpt_000004.mdnc"));

    let cfg = small_train_config(&c);
    let rc = Trainer::resume(cfg.clone(), small_dataset(cfg.crop), &a.join("ckpt_000004.mdnc"))
        .unwrap()
        .run(Some(&a.join("ckpt_000004.mdnc")))
        .unwrap();
    let resumed = read(&rc.final_checkpoint) == read(&ra.final_checkpoint);

    let pooled = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let d = root.path().join("d");
    let rd = pooled.install(|| run(&d));
    let pipelined = read(&rd.final_checkpoint) == read(&ra.final_checkpoint);

    Check::all(vec![
        ("same_seed_final", Check::new(same_final, "two runs, byte-compared")),
        ("same_seed_intermediate", Check::new(same_mid, "checkpoint at iteration 4")),
        ("resume", Check::new(resumed, "resumed at 4 vs uninterrupted, final bytes")),
        ("prefetch", Check::new(pipelined, "two-worker pipelined run vs serial")),
    ])
}
