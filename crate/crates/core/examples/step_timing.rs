//! Times training steps of the default model on procedural scenes.
//!
//! cargo run --release -p maskdn-core --example step_timing [steps]

use std::time::Instant;

use maskdn::scenes::render_set;
use maskdn::train::{Dataset, TrainConfig, Trainer};

fn main() -> maskdn::Result<()> {
    maskdn::runtime::tune_allocator();
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = TrainConfig { total_iters: steps.max(3), milestones: [1, 2], ..TrainConfig::default() };
    let dataset = Dataset::from_images(render_set::<f32>(0, 16, 96, 96), cfg.crop)?;
    let mut trainer = Trainer::new(cfg, dataset)?;
    let t0 = Instant::now();
    trainer.run_to(steps, |_, s| {
        println!("iter {:>4} loss {:.5} psnr {:.2} dB", s.iter, s.loss, s.psnr_db);
        Ok(())
    })?;
    println!("{:?} per step", t0.elapsed() / steps as u32);
    Ok(())
}
