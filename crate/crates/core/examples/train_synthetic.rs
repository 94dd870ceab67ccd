//! Trains one variant with the desk recipe in `configs/synthetic.toml` and
//! reports ambiguous-token accuracy on the test split.
//!
//! `cargo run --release --example train_synthetic -- full`
//! `cargo run --release --example train_synthetic -- full shuffled`

use std::time::Instant;

use dccn::cli::{build_model, load_data};
use dccn::config::{Overrides, RunConfig};
use dccn::eval::{translate_corpus, EvalReport, DEFAULT_EDGES};
use dccn::train::train;

fn main() -> dccn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = RunConfig::from_toml(include_str!("../configs/synthetic.toml"))?;
    cfg.data.shuffle_features = args.iter().any(|a| a == "shuffled");
    let variant = args.get(1).map(|v| v.parse()).transpose()?;
    let cfg = cfg.resolve(&Overrides { variant, ..Overrides::default() })?;

    let data = load_data(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    let start = Instant::now();
    let outcome = train(&mut model, &cfg.train, &data, None, |m| {
        if let Some(vl) = m.valid_loss {
            println!("epoch {} step {} train {:.4} valid {vl:.4} ({:.0}s)", m.epoch, m.step, m.train_loss, start.elapsed().as_secs_f64());
        }
    })?;
    model.store = outcome.best;

    let hyps = translate_corpus(&model, &data.test, cfg.train.batch_tokens)?;
    let report = EvalReport::build(&model, &data.test, &hyps, &DEFAULT_EDGES)?;
    println!(
        "{}: BLEU {:.2}, ambiguous accuracy {:.4}",
        report.variant,
        report.bleu,
        report.ambiguous_accuracy.unwrap_or(f64::NAN)
    );
    for (h, e) in hyps.iter().zip(&data.test.examples).take(3) {
        println!("  {}  =>  {}", e.src.join(" "), h.join(" "));
    }
    Ok(())
}
