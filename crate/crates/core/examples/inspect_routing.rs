//! Trains a small model for a few hundred steps, then writes the routing
//! trace of one test sentence as CSV and SVG heatmaps.
//!
//! `cargo run --release --example inspect_routing -- /tmp/trace`

use std::path::PathBuf;

use dccn::cli::{build_model, load_data};
use dccn::config::{Overrides, RunConfig};
use dccn::data::SyntheticTaskSpec;
use dccn::inspect::{gate_csv, gate_heatmap, trace_csv, trace_heatmaps, trace_sentence};
use dccn::train::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("dccn-trace"), PathBuf::from);
    let mut cfg = RunConfig::from_toml(include_str!("../configs/synthetic.toml"))?;
    cfg.data.synthetic = Some(SyntheticTaskSpec { train: 2000, valid: 200, test: 20, ..SyntheticTaskSpec::default() });
    cfg.train.max_steps = 300;
    let cfg = cfg.resolve(&Overrides::default())?;

    let data = load_data(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    train(&mut model, &cfg.train, &data, None, |_| {})?;

    let trace = trace_sentence(&model, &data.test, 0)?;
    println!("{}  =>  {}", trace.source.join(" "), trace.translation.join(" "));
    std::fs::create_dir_all(&dir)?;
    let write = |name: &str, text: &str| std::fs::write(dir.join(name), text);
    let csv = trace_csv(&trace.layer);
    write("routing.csv", &csv)?;
    for (name, svg) in trace_heatmaps(&csv)? {
        write(&name, &svg)?;
    }
    if let Some(alpha) = &trace.layer.alpha {
        let gate = gate_csv(alpha);
        write("gate.csv", &gate)?;
        write("gate.svg", &gate_heatmap(&gate)?)?;
    }
    println!("{} trace rows written to {}", csv.lines().count() - 1, dir.display());
    Ok(())
}
