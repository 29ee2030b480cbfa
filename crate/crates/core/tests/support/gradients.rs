//! Finite-difference cases shared by the gradient tests and the acceptance suite.

use std::sync::Arc;

use maskdn::model::TrainMasks;
use maskdn::noise::seeded_rng;
use maskdn::tensor::gradcheck::{check_gradients, GradCheck, GradCheckReport};
use maskdn::tensor::{AttentionGeometry, Conv3x3Dims, Graph, Var};
use maskdn::{ImageBatch, ImageTensor, MaskedSwin, ModelConfig, Result, Tensor, TokenMode};
use rand::Rng;

pub fn uniform(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output entry gets a distinct weight.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.constant(uniform(g.value(y).shape(), 1.0, seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p)?)
}

fn leaves(g: &mut Graph<f64>, ps: &[Tensor<f64>]) -> Vec<Var> {
    ps.iter().map(|p| g.param(p.clone())).collect()
}

fn run(params: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> GradCheckReport {
    check_gradients(&params, &GradCheck::default(), |ps, g| {
        let vs = leaves(g, ps);
        let y = build(g, &vs)?;
        let loss = weighted(g, y, 99)?;
        Ok((loss, vs))
    })
    .expect("gradient check runs")
}

pub fn op_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    out.push(("matmul", run(vec![uniform(&[6, 5], 1.0, 1), uniform(&[5, 4], 1.0, 2)], |g, v| Ok(g.matmul(v[0], v[1])?))));
    out.push((
        "linear",
        run(vec![uniform(&[7, 5], 1.0, 3), uniform(&[5, 3], 1.0, 4), uniform(&[3], 1.0, 5)], |g, v| {
            Ok(g.linear(v[0], v[1], v[2])?)
        }),
    ));
    out.push(("add_bias", run(vec![uniform(&[4, 6], 1.0, 6), uniform(&[6], 1.0, 7)], |g, v| Ok(g.add_bias(v[0], v[1])?))));
    out.push((
        "add",
        run(vec![uniform(&[3, 4], 1.0, 8), uniform(&[3, 4], 1.0, 9)], |g, v| {
            let s = g.add(v[0], v[1])?;
            Ok(g.add(s, v[0])?)
        }),
    ));
    out.push((
        "mul",
        run(vec![uniform(&[3, 4], 1.0, 10), uniform(&[3, 4], 1.0, 11)], |g, v| {
            let s = g.mul(v[0], v[1])?;
            Ok(g.mul(s, v[0])?)
        }),
    ));
    out.push(("gelu", run(vec![uniform(&[60], 4.0, 12)], |g, v| Ok(g.gelu(v[0])?))));
    out.push((
        "layer_norm",
        run(vec![uniform(&[5, 8], 2.0, 13), uniform(&[8], 1.5, 14), uniform(&[8], 1.0, 15)], |g, v| {
            Ok(g.layer_norm(v[0], v[1], v[2], 1e-5)?)
        }),
    ));
    out.push(("softmax", run(vec![uniform(&[4, 6], 3.0, 16)], |g, v| Ok(g.softmax(v[0])?))));
    out.push((
        "gather_rows",
        run(vec![uniform(&[5, 3], 1.0, 17)], |g, v| Ok(g.gather_rows(v[0], Arc::new(vec![4, 0, 0, 2, 4, 4, 1]))?)),
    ));
    out.push((
        "mask_rows",
        run(vec![uniform(&[6, 4], 1.0, 18), uniform(&[4], 1.0, 19)], |g, v| {
            Ok(g.mask_rows(v[0], v[1], vec![true, false, false, true, true, false])?)
        }),
    ));
    // two images, 4×4 grid, 2×2 windows, 2 heads of width 2
    out.push((
        "window_attention",
        run(vec![uniform(&[32, 12], 1.5, 20), uniform(&[9, 2], 1.0, 21)], |g, v| {
            Ok(g.window_attention(v[0], v[1], Arc::new(AttentionGeometry::new(2, 2, 2, 4, 4, 0)))?)
        }),
    ));
    // 8×8 grid, 4×4 windows, shifted by 2: exercises the validity mask
    out.push((
        "window_attention_shifted",
        run(vec![uniform(&[64, 12], 1.5, 22), uniform(&[49, 2], 1.0, 23)], |g, v| {
            Ok(g.window_attention(v[0], v[1], Arc::new(AttentionGeometry::new(4, 2, 1, 8, 8, 2)))?)
        }),
    ));
    out.push((
        "conv3x3",
        run(vec![uniform(&[40, 3], 1.0, 24), uniform(&[27, 2], 1.0, 25), uniform(&[2], 1.0, 26)], |g, v| {
            let dims = Conv3x3Dims { batch: 2, height: 4, width: 5, c_in: 3, c_out: 2 };
            Ok(g.conv3x3(v[0], v[1], v[2], dims)?)
        }),
    ));
    out.push((
        "reshape",
        run(vec![uniform(&[2, 6], 1.0, 27)], |g, v| {
            let r = g.reshape(v[0], vec![3, 4])?;
            Ok(g.gelu(r)?)
        }),
    ));
    // Every prediction sits at least 0.2 away from its target, so no probe
    // crosses the kink of |p - t|.
    let target = Tensor::from_fn(&[5, 3], |i| ((i * 7) % 5) as f64 / 5.0);
    let pred = Tensor::from_fn(&[5, 3], |i| {
        target.data()[i] + if i % 2 == 0 { 0.25 } else { -0.35 } + 0.01 * i as f64
    });
    let l1 = check_gradients(&[pred], &GradCheck::default(), |ps, g| {
        let p = g.param(ps[0].clone());
        let t = g.constant(target.clone());
        Ok((g.l1_loss(p, t)?, vec![p]))
    })
    .expect("gradient check runs");
    out.push(("l1_loss", l1));
    out
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig { channels: 8, window: 8, heads: 2, depth: 2, mlp_ratio: 2.0 }
}

/// The tiny model with every parameter moved away from its structured
/// initial value, so no gradient vanishes by symmetry.
pub fn tiny_model() -> MaskedSwin<f64> {
    let mut model = MaskedSwin::<f64>::new(tiny_config(), &mut seeded_rng(5)).unwrap();
    for (k, p) in model.params_mut().iter_mut().enumerate() {
        let noise = uniform(p.shape(), 0.3, 100 + k as u64);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    model
}

fn tiny_batch() -> ImageBatch<f64> {
    let imgs: Vec<ImageTensor<f64>> = (0..2)
        .map(|k| {
            let mut rng = seeded_rng(40 + k);
            ImageTensor::from_fn(16, 16, |_, _, _| rng.random_range(0.0..1.0))
        })
        .collect();
    ImageBatch::from_images(&imgs).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub enum TinyLoss {
    /// Weighted output sum, mask-free.
    Plain,
    /// Weighted output sum with both masks and learnable tokens.
    Masked,
    /// The training loss against a clean target, mask-free.
    L1,
}

pub fn tiny_model_report(loss: TinyLoss) -> GradCheckReport {
    let base = tiny_model();
    let batch = tiny_batch();
    let target = uniform(&[2 * 16 * 16, 3], 1.0, 77);
    check_gradients(base.params(), &GradCheck::default(), |ps, g| {
        let mut model = base.clone();
        for (dst, src) in model.params_mut().iter_mut().zip(ps) {
            *dst = src.clone();
        }
        let mut rng = seeded_rng(9);
        let ratios = [0.5, 0.3];
        let masks = matches!(loss, TinyLoss::Masked).then(|| TrainMasks {
            input_ratios: &ratios,
            attention_ratio: 0.4,
            token_mode: TokenMode::Learnable,
            rng: &mut rng,
        });
        let fwd = model.forward(g, &batch, masks, false)?;
        let l = match loss {
            TinyLoss::L1 => {
                let t = g.constant(target.clone());
                g.l1_loss(fwd.output, t)?
            }
            _ => weighted(g, fwd.output, 31)?,
        };
        Ok((l, fwd.params))
    })
    .expect("gradient check runs")
}
