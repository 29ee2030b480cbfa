use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use rand::Rng;

use super::data::{Dataset, TrainBatch};
use super::manifest::{Manifest, TrainEvent, CODE_VERSION, MANIFEST_FILE};
use super::TrainConfig;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::metrics::psnr_from_mse;
use crate::model::{sample_ratio, MaskPolicy, MaskedSwin, TrainMasks};
use crate::noise::{seeded_rng, stream_rng, SeededRng, RNG_ALGORITHM};
use crate::scalar::Scalar;
use crate::tensor::{Adam, Graph, Tensor, TensorError};

/// Batches prepared ahead of the optimizer when a second worker is available.
const PREFETCH: usize = 2;

pub const META_ITER: &str = "meta.iter";
pub const META_INTERVAL: &str = "meta.interval";
pub const META_MANIFEST: &str = "meta.manifest";

/// Data for iteration `iter` comes from stream `2·iter + 2`, its masks from
/// `2·iter + 3`; stream 0 initialises the weights.
fn data_rng(seed: u64, iter: u64) -> SeededRng {
    stream_rng(seed, 2 * iter + 2)
}

fn mask_rng(seed: u64, iter: u64) -> SeededRng {
    stream_rng(seed, 2 * iter + 3)
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Zero-based index of the step.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    /// PSNR of the clipped training output against the clean patches.
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    /// Number of completed iterations at the end of the interval.
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub psnr_db: f64,
}

/// One forward/backward pass and Adam update on `batch` at the optimizer's current
/// learning rate. Masked policies draw one input ratio per sample, then the masks.
/// The L1 loss covers every pixel.
pub fn train_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut MaskedSwin<T>,
    batch: &TrainBatch<T>,
    policy: &MaskPolicy,
    adam: &mut Adam<T>,
    rng: &mut R,
) -> Result<StepStats> {
    let iter = adam.steps_taken();
    let non_finite = |e: TensorError| match e {
        TensorError::NonFinite { op } => Error::NonFiniteLoss { iter, detail: format!("{op} produced a non-finite value") },
        other => Error::Tensor(other),
    };
    let forward_failed = |e: Error| match e {
        Error::Tensor(t) => non_finite(t),
        other => other,
    };
    let mut g = Graph::new();
    let fwd = if policy.is_unmasked() {
        model.forward::<R>(&mut g, &batch.noisy, None, false).map_err(forward_failed)?
    } else {
        let ratios: Vec<f64> = (0..batch.noisy.len()).map(|_| sample_ratio(policy.input_ratio_range, rng)).collect();
        let masks = TrainMasks {
            input_ratios: &ratios,
            attention_ratio: policy.attention_ratio,
            token_mode: policy.token_mode,
            rng,
        };
        model.forward(&mut g, &batch.noisy, Some(masks), false).map_err(forward_failed)?
    };
    let target = g.constant(batch.clean.pixels().clone());
    let loss_var = g.l1_loss(fwd.output, target).map_err(non_finite)?;
    let loss = g.value(loss_var).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { iter, detail: format!("loss is {loss}") });
    }
    let mut sq = 0.0;
    for (&p, &c) in g.value(fwd.output).data().iter().zip(batch.clean.pixels().data()) {
        let d = p.as_f64().clamp(0.0, 1.0) - c.as_f64();
        sq += d * d;
    }
    let psnr_db = psnr_from_mse(sq / batch.clean.pixels().len() as f64);

    let mut grads = g.backward(loss_var).map_err(non_finite)?;
    let grads: Vec<Tensor<T>> = fwd.params.iter().map(|&v| grads.take(v)).collect();
    drop(g);
    adam.step(model.params_mut(), &grads)?;
    Ok(StepStats { iter, lr: adam.config.lr, loss, psnr_db })
}

/// Files written by a completed run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub final_checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub history: Vec<EvalRecord>,
    pub model: MaskedSwin<T>,
}

/// Training state that can be stepped, checkpointed and resumed.
pub struct Trainer<T> {
    cfg: TrainConfig,
    dataset: Arc<Dataset<T>>,
    model: MaskedSwin<T>,
    adam: Adam<T>,
    iter: u64,
    history: Vec<EvalRecord>,
    /// Loss sum, PSNR sum and step count of the open eval interval.
    interval: [f64; 3],
}

fn model_from<T: Scalar>(c: &Container, cfg: &TrainConfig, path: &Path) -> Result<MaskedSwin<T>> {
    let model = MaskedSwin::<T>::from_named(&c.to_named::<T>())?;
    if *model.config() != cfg.model {
        return Err(Error::Config(format!(
            "{}: checkpoint model {:?} differs from the configured model {:?}",
            path.display(),
            model.config(),
            cfg.model
        )));
    }
    Ok(model)
}

impl<T: Scalar> Trainer<T> {
    /// Fresh optimizer at iteration 0. Weights come from `cfg.init_from` when
    /// set, otherwise from a seeded initialisation.
    pub fn new(cfg: TrainConfig, dataset: Dataset<T>) -> Result<Self> {
        cfg.validate()?;
        check_crop(&cfg, &dataset)?;
        let model = match &cfg.init_from {
            Some(path) => model_from(&Container::load(path)?, &cfg, path)?,
            None => MaskedSwin::new(cfg.model, &mut seeded_rng(cfg.seed))?,
        };
        let adam = Adam::new(cfg.adam(cfg.lr0), model.params());
        Ok(Trainer { cfg, dataset: Arc::new(dataset), model, adam, iter: 0, history: Vec::new(), interval: [0.0; 3] })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, dataset: Dataset<T>, checkpoint: &Path) -> Result<Self> {
        cfg.validate()?;
        check_crop(&cfg, &dataset)?;
        let c = Container::load(checkpoint)?;
        let model: MaskedSwin<T> = model_from(&c, &cfg, checkpoint)?;
        let missing = |name: &str| Error::Format { path: checkpoint.to_path_buf(), msg: format!("missing {name}") };
        let iter = c.tensor::<f64>(META_ITER).ok_or_else(|| missing(META_ITER))?.item() as u64;
        let interval = c.tensor::<f64>(META_INTERVAL).ok_or_else(|| missing(META_INTERVAL))?;
        let interval: [f64; 3] = interval.data().try_into().map_err(|_| missing(META_INTERVAL))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for name in model.param_names() {
            let (mk, vk) = (format!("adam.m.{name}"), format!("adam.v.{name}"));
            m.push(c.tensor::<T>(&mk).ok_or_else(|| missing(&mk))?);
            v.push(c.tensor::<T>(&vk).ok_or_else(|| missing(&vk))?);
        }
        let adam = Adam::from_state(cfg.adam(cfg.lr_at(iter)), iter, m, v)?;
        Ok(Trainer { cfg, dataset: Arc::new(dataset), model, adam, iter, history: Vec::new(), interval })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &MaskedSwin<T> {
        &self.model
    }

    pub fn adam(&self) -> &Adam<T> {
        &self.adam
    }

    /// Completed iterations.
    pub fn iter(&self) -> u64 {
        self.iter
    }

    pub fn history(&self) -> &[EvalRecord] {
        &self.history
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.total_iters
    }

    /// The batch consumed by iteration `iter`; depends only on the seed and `iter`.
    pub fn batch_for(&self, iter: u64) -> Result<TrainBatch<T>> {
        make_batch(&self.dataset, &self.cfg, iter)
    }

    /// Run the next iteration.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.batch_for(self.iter)?;
        self.step_with(&batch)
    }

    fn step_with(&mut self, batch: &TrainBatch<T>) -> Result<StepStats> {
        if self.is_done() {
            return Err(Error::Config(format!("all {} iterations already ran", self.cfg.total_iters)));
        }
        let iter = self.iter;
        self.adam.set_lr(self.cfg.lr_at(iter));
        let mut rng = mask_rng(self.cfg.seed, iter);
        let mut stats = train_step(&mut self.model, batch, &self.cfg.policy, &mut self.adam, &mut rng)?;
        stats.iter = iter;
        self.iter += 1;
        self.interval[0] += stats.loss;
        self.interval[1] += stats.psnr_db;
        self.interval[2] += 1.0;
        if self.iter.is_multiple_of(self.cfg.eval_every) {
            let n = self.interval[2];
            self.history.push(EvalRecord {
                iter: self.iter,
                lr: stats.lr,
                loss: self.interval[0] / n,
                psnr_db: self.interval[1] / n,
            });
            self.interval = [0.0; 3];
        }
        Ok(stats)
    }

    /// Step until `end` completed iterations (capped at `total_iters`), calling
    /// `on_step` after each one. With more than one rayon worker, batches are
    /// generated on a separate thread; they are consumed in iteration order, so
    /// the trajectory is the same as a serial run.
    pub fn run_to<F>(&mut self, end: u64, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Self, &StepStats) -> Result<()>,
    {
        let end = end.min(self.cfg.total_iters);
        if self.iter >= end {
            return Ok(());
        }
        if rayon::current_num_threads() < 2 {
            while self.iter < end {
                let stats = self.step()?;
                on_step(self, &stats)?;
            }
            return Ok(());
        }
        let dataset = Arc::clone(&self.dataset);
        let cfg = self.cfg.clone();
        let start = self.iter;
        std::thread::scope(|s| {
            let (tx, rx) = sync_channel(PREFETCH);
            s.spawn(move || {
                for iter in start..end {
                    if tx.send(make_batch(&dataset, &cfg, iter)).is_err() {
                        break;
                    }
                }
            });
            while self.iter < end {
                let batch = rx.recv().expect("producer yields one batch per iteration")?;
                let stats = self.step_with(&batch)?;
                on_step(self, &stats)?;
            }
            Ok(())
        })
    }

    /// Weights, optimizer moments and loop position.
    pub fn checkpoint(&self) -> Result<Container> {
        let mut c = Container::from_named(&self.model.to_named())?;
        for ((name, m), v) in self.model.param_names().iter().zip(self.adam.first_moments()).zip(self.adam.second_moments()) {
            c.push(format!("adam.m.{name}"), m)?;
            c.push(format!("adam.v.{name}"), v)?;
        }
        c.push(META_ITER, &Tensor::<f64>::scalar(self.iter as f64))?;
        c.push(META_INTERVAL, &Tensor::<f64>::from_f64(vec![3], &self.interval)?)?;
        let bytes: Vec<f64> = MANIFEST_FILE.bytes().map(f64::from).collect();
        c.push(META_MANIFEST, &Tensor::<f64>::from_f64(vec![bytes.len()], &bytes)?)?;
        Ok(c)
    }

    /// Run to `total_iters`, writing checkpoints and the manifest into `cfg.out_dir`.
    pub fn run(&mut self, resumed_from: Option<&Path>) -> Result<TrainOutcome<T>> {
        let out = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let manifest = Manifest::new(out.join(MANIFEST_FILE));
        manifest.append(&TrainEvent::Start {
            seed: self.cfg.seed,
            rng: RNG_ALGORITHM.to_string(),
            code_version: CODE_VERSION.to_string(),
            start_iter: self.iter,
            resumed_from: resumed_from.map(Path::to_path_buf),
            config: self.cfg.clone(),
        })?;
        let every = self.cfg.checkpoint_every;
        let total = self.cfg.total_iters;
        self.run_to(total, |t, _| {
            if t.iter % t.cfg.eval_every == 0 {
                let r = t.history.last().expect("interval just closed");
                manifest.append(&TrainEvent::Eval { iter: r.iter, lr: r.lr, loss: r.loss, psnr_db: r.psnr_db })?;
            }
            if every > 0 && t.iter % every == 0 {
                let path = out.join(format!("ckpt_{:06}.mdnc", t.iter));
                t.checkpoint()?.save(&path)?;
                manifest.append(&TrainEvent::Checkpoint { iter: t.iter, path })?;
            }
            Ok(())
        })?;
        let final_checkpoint = out.join("final.mdnc");
        self.checkpoint()?.save(&final_checkpoint)?;
        manifest.append(&TrainEvent::End { iter: self.iter, final_checkpoint: final_checkpoint.clone() })?;
        Ok(TrainOutcome {
            final_checkpoint,
            manifest: manifest.path().to_path_buf(),
            history: self.history.clone(),
            model: self.model.clone(),
        })
    }
}

fn check_crop<T: Scalar>(cfg: &TrainConfig, dataset: &Dataset<T>) -> Result<()> {
    if dataset.crop() != cfg.crop {
        return Err(Error::Config(format!("dataset crop {} differs from config crop {}", dataset.crop(), cfg.crop)));
    }
    Ok(())
}

fn make_batch<T: Scalar>(dataset: &Dataset<T>, cfg: &TrainConfig, iter: u64) -> Result<TrainBatch<T>> {
    dataset.sample_batch(cfg.batch, cfg.noise.as_ref(), &mut data_rng(cfg.seed, iter))
}

/// Load `cfg.dataset_dir` and train from scratch (or from `cfg.init_from`).
pub fn train<T: Scalar>(cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    let dataset = Dataset::load_dir(&cfg.dataset_dir, cfg.crop)?;
    Trainer::new(cfg.clone(), dataset)?.run(None)
}

/// Continue a run from `checkpoint` to `cfg.total_iters`.
pub fn resume<T: Scalar>(cfg: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome<T>> {
    let dataset = Dataset::load_dir(&cfg.dataset_dir, cfg.crop)?;
    Trainer::resume(cfg.clone(), dataset, checkpoint)?.run(Some(checkpoint))
}
