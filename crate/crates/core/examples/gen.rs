//! Writes the default synthetic dataset to a directory.
//!
//! `cargo run --release -p aufer-core --example gen -- <dir> [seed]`

use std::path::PathBuf;

use aufer_core::synth::{generate, save_dataset, SynthConfig};

fn main() -> aufer_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("output directory"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let data = generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })?;
    save_dataset(&data, &dir)
}
