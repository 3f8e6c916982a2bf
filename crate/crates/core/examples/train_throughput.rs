//! Time training of each model on a generated dataset.
//!
//! `cargo run --release --example train_throughput -- [samples] [epochs]`

use std::time::Instant;

use pass_core::model::ModelConfig;
use pass_core::pamoe::PaMoeConfig;
use pass_core::paformer::PaFormerConfig;
use pass_core::pilots::build_dataset;
use pass_core::scene::SystemConfig;
use pass_core::trainer::{train, TrainConfig};

fn main() -> pass_core::Result<()> {
    let samples: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2048);
    let cfg = SystemConfig::default();
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let tc = TrainConfig { epochs, ..Default::default() };
    let start = Instant::now();
    let (_, records) = build_dataset(&cfg, samples, 1, tc.snr_policy())?;
    println!("generated {samples} records in {:.2}s", start.elapsed().as_secs_f64());
    for m in [
        ModelConfig::PaMoe(PaMoeConfig::default()),
        ModelConfig::PaFormer(PaFormerConfig::default()),
    ] {
        let model = m.build()?;
        let start = Instant::now();
        let out = train(model.as_ref(), &records, &tc, |e| {
            println!("  epoch {:>3} loss {:.4} val nmse {:.4} ({:.0}s)", e.epoch, e.train_loss, e.val_nmse, e.wallclock_s)
        })?;
        let secs = start.elapsed().as_secs_f64();
        println!(
            "{}: {:.2}s total, {:.1} samples/s, val nmse {:.4}",
            m.id(),
            secs,
            (samples * epochs) as f64 / secs,
            out.best_val_nmse
        );
    }
    Ok(())
}
