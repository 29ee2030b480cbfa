use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use maskdn::checkpoint::Container;
use maskdn::cka::{cka_matrix, feature_stats, sample_positions, FeatureMatrix};
use maskdn::io::{list_pngs, load_image, save_image};
use maskdn::metrics::{score, ImageScore, MetricReport};
use maskdn::noise::{stream_rng, NoiseSpec, RNG_ALGORITHM};
use maskdn::train::{Manifest, TrainConfig, Trainer, CODE_VERSION};
use maskdn::{Image, Model, Tensor};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::{CkaArgs, Command, DenoiseArgs, EvalArgs, FeaturesArgs, NoiseArgs, NoiseKind, SynthArgs, TrainArgs};

pub const THREADS_ENV: &str = "MDN_THREADS";

/// Cap the rayon pool at `MDN_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).with_context(|| {
        format!("{THREADS_ENV} must be a positive integer, got {raw:?}")
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => eval(a),
        Command::Features(a) => features(a),
        Command::Cka(a) => cka(a),
    }
}

fn require(value: Option<f64>, flag: &str, kind: NoiseKind) -> Result<f64> {
    value.with_context(|| format!("--noise {kind:?} needs --{flag}").to_lowercase())
}

pub fn noise_spec(a: &NoiseArgs) -> Result<NoiseSpec> {
    let k = a.noise;
    let spec = match k {
        NoiseKind::Gaussian => NoiseSpec::Gaussian { sigma255: require(a.sigma255, "sigma255", k)? },
        NoiseKind::Speckle => NoiseSpec::Speckle { var: require(a.var, "var", k)? },
        NoiseKind::Poisson => NoiseSpec::Poisson { alpha: a.alpha.unwrap_or(1.0) },
        NoiseKind::Spatial => NoiseSpec::SpatiallyCorrelated { sigma255: require(a.sigma255, "sigma255", k)? },
        NoiseKind::SaltPepper => NoiseSpec::SaltPepper { density: require(a.density, "density", k)? },
        NoiseKind::Mixture => NoiseSpec::Mixture { level: a.mix_level.context("--noise mixture needs --mix-level")? },
    };
    spec.validate()?;
    Ok(spec)
}

/// `(input, output)` pairs: one pair for a file, one per PNG for a directory.
fn io_pairs(input: &Path, output: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if input.is_dir() {
        let files = list_pngs(input)?;
        if files.is_empty() {
            bail!("no PNG files in {}", input.display());
        }
        std::fs::create_dir_all(output).with_context(|| format!("creating {}", output.display()))?;
        Ok(files
            .into_iter()
            .map(|f| {
                let name = f.file_name().expect("listed files have names").to_owned();
                (f, output.join(name))
            })
            .collect())
    } else {
        Ok(vec![(input.to_path_buf(), output.to_path_buf())])
    }
}

fn default_manifest(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.jsonl")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.jsonl");
        output.with_file_name(name)
    }
}

fn record(explicit: &Option<PathBuf>, output: &Path, command: &str, seed: Option<u64>, config: Value) -> Result<()> {
    let path = explicit.clone().unwrap_or_else(|| default_manifest(output));
    Manifest::new(path).append(&json!({
        "event": "run",
        "command": command,
        "seed": seed,
        "rng": RNG_ALGORITHM,
        "code_version": CODE_VERSION,
        "config": config,
    }))?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let c = Container::load(path)?;
    Model::from_named(&c.to_named()).with_context(|| format!("loading model from {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = noise_spec(&a.noise)?;
    let pairs = io_pairs(&a.input, &a.output)?;
    pairs.par_iter().enumerate().try_for_each(|(i, (src, dst))| -> Result<()> {
        let img: Image = load_image(src)?;
        let noisy = spec.apply(&img, &mut stream_rng(a.seed, i as u64))?;
        save_image(&noisy, dst)?;
        Ok(())
    })?;
    let config = json!({ "noise": spec, "input": a.input, "output": a.output, "images": pairs.len() });
    record(&a.manifest, &a.output, "synth", Some(a.seed), config)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(dir) = a.dataset {
        cfg.dataset_dir = dir;
    }
    if let Some(init) = a.init_from {
        cfg.init_from = Some(init);
    }
    cfg.validate()?;
    let dataset = maskdn::train::Dataset::load_dir(&cfg.dataset_dir, cfg.crop)?;
    let outcome = match &a.resume {
        Some(ckpt) => Trainer::<f32>::resume(cfg, dataset, ckpt)?.run(Some(ckpt))?,
        None => Trainer::<f32>::new(cfg, dataset)?.run(None)?,
    };
    if let Some(last) = outcome.history.last() {
        println!("iter {} loss {:.6} psnr {:.3} dB", last.iter, last.loss, last.psnr_db);
    }
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn denoise(a: DenoiseArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let pairs = io_pairs(&a.input, &a.output)?;
    pairs.par_iter().try_for_each(|(src, dst)| -> Result<()> {
        let img: Image = load_image(src)?;
        save_image(&model.denoise(&img)?, dst)?;
        Ok(())
    })?;
    let config = json!({ "checkpoint": a.checkpoint, "input": a.input, "output": a.output, "images": pairs.len() });
    record(&a.manifest, &a.output, "denoise", None, config)
}

/// Pair files by identical name; anything unpaired is an error.
fn paired_names(clean: &Path, noisy: &Path) -> Result<Vec<String>> {
    let names = |dir: &Path| -> Result<Vec<String>> {
        Ok(list_pngs(dir)?
            .iter()
            .map(|p| p.file_name().expect("listed files have names").to_string_lossy().into_owned())
            .collect())
    };
    let (a, b) = (names(clean)?, names(noisy)?);
    if a.is_empty() {
        bail!("no PNG files in {}", clean.display());
    }
    if let Some(n) = a.iter().find(|n| !b.contains(n)) {
        bail!("{n} is in {} but not in {}", clean.display(), noisy.display());
    }
    if let Some(n) = b.iter().find(|n| !a.contains(n)) {
        bail!("{n} is in {} but not in {}", noisy.display(), clean.display());
    }
    Ok(a)
}

fn eval(a: EvalArgs) -> Result<()> {
    let names = paired_names(&a.clean, &a.noisy)?;
    let model = a.checkpoint.as_deref().map(load_model).transpose()?;
    let rows = names
        .par_iter()
        .map(|name| -> Result<ImageScore> {
            let clean: Image = load_image(&a.clean.join(name))?;
            let mut test: Image = load_image(&a.noisy.join(name))?;
            if let Some(m) = &model {
                test = m.denoise(&test)?;
            }
            score(name.clone(), &clean, &test).with_context(|| format!("scoring {name}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_rows(rows);
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["image", "noise_spec", "psnr_db", "ssim"])?;
    for r in &report.rows {
        w.write_record([r.image.as_str(), a.noise_spec.as_str(), &r.psnr_db.to_string(), &r.ssim.to_string()])?;
    }
    w.write_record(["mean", a.noise_spec.as_str(), &report.mean_psnr_db.to_string(), &report.mean_ssim.to_string()])?;
    w.flush().with_context(|| format!("writing {}", a.out.display()))?;
    println!("mean psnr {:.4} dB ssim {:.4} over {} images", report.mean_psnr_db, report.mean_ssim, report.rows.len());
    let config = json!({
        "clean": a.clean, "noisy": a.noisy, "checkpoint": a.checkpoint, "noise_spec": a.noise_spec, "out": a.out,
    });
    record(&a.manifest, &a.out, "eval", None, config)
}

fn features(a: FeaturesArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let files = if a.input.is_dir() { list_pngs(&a.input)? } else { vec![a.input.clone()] };
    if files.is_empty() {
        bail!("no PNG files in {}", a.input.display());
    }
    let per_image = files
        .iter()
        .map(|f| -> Result<Vec<Tensor<f32>>> { Ok(model.features(&load_image(f)?)?) })
        .collect::<Result<Vec<_>>>()?;
    let layers = per_image[0].len();
    let channels = per_image[0][0].last_dim();
    let total: usize = per_image.iter().map(|taps| taps[0].rows()).sum();
    let positions = sample_positions(total, a.positions, a.seed);

    let mut out = Container::new();
    let mut stats = Vec::new();
    for layer in 0..layers {
        let mut all = Vec::with_capacity(total * channels);
        for taps in &per_image {
            all.extend_from_slice(taps[layer].data());
        }
        let full = FeatureMatrix::new(total, channels, all)?;
        let sampled = full.select_rows(&positions)?;
        stats.push(json!({ "layer": format!("layer_{layer}"), "stats": feature_stats(&sampled) }));
        out.push(format!("layer_{layer}"), &sampled.to_tensor())?;
    }
    out.save(&a.out)?;
    if let Some(path) = &a.stats {
        let text = serde_json::to_string_pretty(&stats)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{layers} layers x {} positions x {channels} channels", positions.len());
    let config = json!({
        "checkpoint": a.checkpoint, "input": a.input, "out": a.out, "positions": a.positions, "images": files.len(),
    });
    record(&a.manifest, &a.out, "features", Some(a.seed), config)
}

/// `layer_{i}` entries in index order.
pub fn read_layers(path: &Path) -> Result<Vec<(String, FeatureMatrix<f64>)>> {
    let c = Container::load(path)?;
    let mut layers = Vec::new();
    for i in 0.. {
        let name = format!("layer_{i}");
        let Some(t) = c.tensor::<f64>(&name) else { break };
        if t.shape().len() != 2 {
            bail!("{}: {name} must be 2-D, found shape {:?}", path.display(), t.shape());
        }
        layers.push((name, FeatureMatrix::from_tensor(&t)?));
    }
    if layers.is_empty() {
        bail!("{}: no layer_0 entry", path.display());
    }
    Ok(layers)
}

fn cka(a: CkaArgs) -> Result<()> {
    let la = read_layers(&a.features_a)?;
    let lb = read_layers(&a.features_b)?;
    let m = cka_matrix(&la, &lb)?;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    m.write_csv(file).with_context(|| format!("writing {}", a.out.display()))?;
    let config = json!({ "features_a": a.features_a, "features_b": a.features_b, "out": a.out });
    record(&a.manifest, &a.out, "cka", None, config)
}
