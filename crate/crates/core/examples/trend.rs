//! Trains the default model with and without AU alignment on the synthetic
//! set and prints test accuracy and localization scores per seed.
//!
//! `cargo run --release -p aufer-core --example trend -- [epochs] [seeds...]`

use aufer_core::au::AuMapBuilder;
use aufer_core::cam::CamMethod;
use aufer_core::metrics::evaluate;
use aufer_core::model::{ModelConfig, ModelState};
use aufer_core::synth::{generate, SynthConfig};
use aufer_core::train::{fit, TrainConfig};

fn env_or(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> aufer_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().map_or(8, |e| e.parse().expect("epochs"));
    let seeds: Vec<u64> = if args.len() > 1 {
        args[1..].iter().map(|s| s.parse().expect("seed")).collect()
    } else {
        vec![1, 2, 3]
    };
    for seed in seeds {
        let data = generate(&SynthConfig {
            split: (0.7, 0.07),
            seed,
            ..SynthConfig::default()
        })?;
        let builder = AuMapBuilder::with_defaults(data.classes(), (64, 64), (64, 64))?;
        for lambda in [0.0, 1.0] {
            let mut model = ModelState::init(ModelConfig {
                seed,
                ..ModelConfig::default()
            })?;
            let cfg = TrainConfig {
                lambda,
                epochs,
                seed,
                lr: env_or("LR", 0.01),
                batch_size: env_or("BATCH", 16.0) as usize,
                ..TrainConfig::default()
            };
            let log = fit(&mut model, &data.train, &data.val, &cfg, Some(&builder))?;
            let r = evaluate(&model, &data.test, 5, &builder, &[CamMethod::GradCam], lambda > 0.0)?;
            let secs: f64 = log.records.iter().map(|r| r.seconds).sum::<f64>() / epochs as f64;
            let first = log.records[0].r_train.unwrap_or(f64::NAN);
            let last = log.last().and_then(|r| r.r_train).unwrap_or(f64::NAN);
            println!(
                "seed {seed} lambda {lambda}: acc {:.3} att_cos {:.3} gradcam {:.3} r_train {first:.3}->{last:.3} ce {:.3} {secs:.2}s/epoch",
                r.cl, r.att_cos, r.cam_cos[&CamMethod::GradCam], log.last().unwrap().ce
            );
        }
    }
    Ok(())
}
