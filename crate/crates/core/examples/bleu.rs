//! Corpus BLEU and per-length buckets on a handful of sentences.
//!
//! `cargo run --example bleu`

use dccn::data::tokenize;
use dccn::eval::{bleu, length_buckets};

fn main() -> dccn::Result<()> {
    let pairs = [
        ("a man rides a brown horse on the beach", "a man rides a brown horse along the beach"),
        ("two dogs play in the snow", "two dogs are playing in the snow"),
        ("a child in a red coat climbs a wooden ladder near the old barn at dusk", "a child in a red coat climbs a ladder near the old barn at dusk"),
    ];
    let hyps: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(p.0)).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| tokenize(p.1)).collect();
    println!("corpus BLEU {:.2}", bleu(&hyps, &refs)?);

    let lens: Vec<usize> = refs.iter().map(Vec::len).collect();
    for b in length_buckets(&lens, &hyps, &refs, &[8, 12])? {
        println!("  {:>6}: {} sentences, BLEU {:.2}", b.label(), b.sentences, b.bleu);
    }
    Ok(())
}
