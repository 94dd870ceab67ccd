//! Writes the synthetic disambiguation task to a directory and reports how
//! well a nearest-class probe reads the sense off the features.
//!
//! `cargo run --release --example synthetic_data -- /tmp/synthetic`

use std::path::PathBuf;

use dccn::data::{generate_synthetic, probe_accuracy, write_dataset, SyntheticTaskSpec};

fn main() -> dccn::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("dccn-synthetic"), PathBuf::from);
    let spec = SyntheticTaskSpec::default();
    let data = generate_synthetic(&spec)?;
    write_dataset(&dir, &data, Some(&spec))?;
    println!("{} / {} / {} sentences in {}", data.train.len(), data.valid.len(), data.test.len(), dir.display());
    for ex in data.train.examples.iter().take(3) {
        println!("  {}  =>  {}", ex.src.join(" "), ex.tgt.join(" "));
    }

    for noise in [0.0, 0.5, 1.0, 2.0] {
        let spec = SyntheticTaskSpec { noise, train: 1000, ..SyntheticTaskSpec::default() };
        let probe = probe_accuracy(&generate_synthetic(&spec)?.train)?;
        println!("noise {noise:.1}: probe accuracy {probe:.3}");
    }
    Ok(())
}
