//! Parameter counts of every variant at the 4-layer, 8-head, 256-wide size,
//! plus a checkpoint round trip of the full model.
//!
//! `cargo run --release --example param_count`

use dccn::checkpoint;
use dccn::data::{generate_synthetic, SyntheticTaskSpec, Vocab};
use dccn::model::{Model, ModelConfig};
use dccn::multimodal::Variant;

fn main() -> dccn::Result<()> {
    let data = generate_synthetic(&SyntheticTaskSpec::default())?;
    let src = Vocab::build(data.train.examples.iter().map(|e| e.src.as_slice()))?;
    let tgt = Vocab::build(data.train.examples.iter().map(|e| e.tgt.as_slice()))?;
    println!("{:<22} {:>10} {:>12} {:>10}", "variant", "total", "dccn+gate", "attention");
    for variant in Variant::ALL {
        let model = Model::new(ModelConfig { variant, ..ModelConfig::default() }, src.clone(), tgt.clone())?;
        let c = model.count_params();
        println!("{:<22} {:>10} {:>12} {:>10}", variant.name(), c.total, c.dccn_related(), c.attention);
    }

    let model = Model::new(ModelConfig::default(), src, tgt)?;
    let bytes = checkpoint::to_bytes(&model);
    let same = checkpoint::to_bytes(&checkpoint::from_bytes(&bytes)?) == bytes;
    println!("checkpoint: {} bytes, reload bit-identical: {same}", bytes.len());
    Ok(())
}
