//! Trains the baseline, masked and input-mask-only variants and prints their scores.
//!
//! cargo run --release -p maskdn-core --example policy_study [seed] [iters]

use maskdn::study::{run_variant, StudyConfig, TestSet, Variant};

fn main() -> maskdn::Result<()> {
    maskdn::runtime::tune_allocator();
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let iters: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let cfg = StudyConfig { seed, iters, milestones: [iters / 2, iters * 3 / 4], ..StudyConfig::default() };
    let tests = TestSet::<f32>::new(&cfg)?;
    for variant in [Variant::Baseline, Variant::Masked, Variant::InputOnly] {
        let t0 = std::time::Instant::now();
        let r = run_variant(&cfg, variant, &tests)?;
        println!("{} ({:.0?})", serde_json::to_string(&r).expect("report serialises"), t0.elapsed());
    }
    Ok(())
}
