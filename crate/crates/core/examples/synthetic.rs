//! Synthetic cross-domain run: DNA-DA against a source-only baseline.
//!
//! `cargo run --release --example synthetic -- [seeds] [epochs]`

use std::time::Instant;

use dnada::datapipe::{synth_domains, DatasetSplit};
use dnada::trainer::{evaluate, fit, SourceOnly, TrainConfig};

fn main() -> dnada::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    for seed in 0..seeds {
        let start = Instant::now();
        let (source, target) = synth_domains(500, 2, 8, 4.0, seed)?;
        let mut split = DatasetSplit::new(source, &target)?;
        split.assign_pseudo_labels(seed)?;
        let mut cfg: TrainConfig = match std::env::var("DNADA_CONFIG") {
            Ok(text) => toml::from_str(&text).expect("config"),
            Err(_) => TrainConfig::default(),
        };
        cfg.epochs = epochs;
        cfg.seed = seed;
        let result = fit(&split, &cfg)?;
        let acc = evaluate(&result.models, &split.test_target, &cfg)?;
        let base = SourceOnly::train(&split, &cfg)?.evaluate(&split.test_target)?;
        let h = &result.history;
        println!(
            "seed {seed}: dnada {acc:.4}  source-only {base:.4}  best epoch {}  l_total {:.3} -> {:.3}  {:.1}s",
            result.best_epoch,
            h.first().map_or(f64::NAN, |r| r.losses.l_total),
            h.last().map_or(f64::NAN, |r| r.losses.l_total),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
