//! Corpus BLEU, length buckets, ambiguous-token accuracy and reports.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{sequential_batches, Corpus};
use crate::error::{Error, Result};
use crate::model::{Model, ParamCounts};

/// Length edges of the default source-length buckets: `<=10`, `11-15`,
/// `16-20` and `>20`.
pub const DEFAULT_EDGES: [usize; 3] = [10, 15, 20];

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sufficient statistics of corpus BLEU: clipped matches and totals for
/// n = 1..4, hypothesis length, reference length.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[String], reference: &[String]) {
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let r = ngrams(reference, n);
            self.matches[n - 1] += h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
    }

    /// Unsmoothed score in [0, 100]; any zero precision gives 0.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|k| (self.matches[k] as f64 / self.totals[k] as f64).ln()).sum::<f64>() / 4.0;
        let bp = if self.hyp_len >= self.ref_len { 1.0 } else { (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp() };
        100.0 * bp * log_p.exp()
    }
}

/// Corpus-level 4-gram BLEU with brevity penalty against one reference each.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let mut s = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        s.add(h, r);
    }
    Ok(s.score())
}

/// One source-length bucket.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    /// Inclusive bounds; `hi` is `None` for the open last bucket.
    pub lo: usize,
    pub hi: Option<usize>,
    pub sentences: usize,
    pub bleu: f64,
}

impl Bucket {
    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("{}-{}", self.lo, hi),
            None => format!(">{}", self.lo - 1),
        }
    }
}

/// Index of the bucket a length falls in, for strictly increasing `edges`.
pub fn bucket_of(len: usize, edges: &[usize]) -> usize {
    edges.iter().position(|&e| len <= e).unwrap_or(edges.len())
}

/// Splits the corpus by source length and scores each part on its own.
pub fn length_buckets(src_lens: &[usize], hyps: &[Vec<String>], refs: &[Vec<String>], edges: &[usize]) -> Result<Vec<Bucket>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bucket edges must be non-empty and strictly increasing, got {edges:?}")));
    }
    if src_lens.len() != hyps.len() || hyps.len() != refs.len() {
        return Err(Error::Input(format!(
            "{} source lengths, {} hypotheses, {} references",
            src_lens.len(),
            hyps.len(),
            refs.len()
        )));
    }
    let mut stats = vec![BleuStats::default(); edges.len() + 1];
    let mut counts = vec![0; edges.len() + 1];
    for ((&len, h), r) in src_lens.iter().zip(hyps).zip(refs) {
        let k = bucket_of(len, edges);
        stats[k].add(h, r);
        counts[k] += 1;
    }
    Ok((0..=edges.len())
        .map(|k| Bucket {
            lo: if k == 0 { 0 } else { edges[k - 1] + 1 },
            hi: edges.get(k).copied(),
            sentences: counts[k],
            bleu: stats[k].score(),
        })
        .collect())
}

/// Greedy translations of every example, as target tokens.
pub fn translate_corpus(model: &Model, corpus: &Corpus, budget: usize) -> Result<Vec<Vec<String>>> {
    let mut out = vec![Vec::new(); corpus.len()];
    for idx in sequential_batches(corpus, budget) {
        let batch = model.batch(corpus, &idx)?;
        for (&i, ids) in idx.iter().zip(model.greedy(&batch)?) {
            out[i] = model.tgt_vocab.decode(&ids);
        }
    }
    Ok(out)
}

/// Fraction of ambiguous examples whose hypothesis carries the gold token at
/// the aligned position. `None` when the corpus has no ambiguous examples.
pub fn ambiguous_accuracy_of(corpus: &Corpus, hyps: &[Vec<String>]) -> Option<f64> {
    let mut total = 0;
    let mut correct = 0;
    for (ex, h) in corpus.examples.iter().zip(hyps) {
        if let Some(a) = &ex.ambiguity {
            total += 1;
            if h.get(a.position) == Some(&a.gold) {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

pub fn ambiguous_accuracy(model: &Model, corpus: &Corpus, budget: usize) -> Result<Option<f64>> {
    let hyps = translate_corpus(model, corpus, budget)?;
    Ok(ambiguous_accuracy_of(corpus, &hyps))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub sentences: usize,
    pub bleu: f64,
    pub ambiguous_accuracy: Option<f64>,
    pub buckets: Vec<Bucket>,
    pub params: ParamCounts,
}

impl EvalReport {
    pub fn build(model: &Model, corpus: &Corpus, hyps: &[Vec<String>], edges: &[usize]) -> Result<Self> {
        let refs: Vec<Vec<String>> = corpus.examples.iter().map(|e| e.tgt.clone()).collect();
        let lens: Vec<usize> = corpus.examples.iter().map(|e| e.src.len()).collect();
        Ok(EvalReport {
            variant: model.variant().name().to_string(),
            sentences: corpus.len(),
            bleu: bleu(hyps, &refs)?,
            ambiguous_accuracy: ambiguous_accuracy_of(corpus, hyps),
            buckets: length_buckets(&lens, hyps, &refs, edges)?,
            params: model.count_params(),
        })
    }

    /// One JSON record per line: the summary, then one per bucket.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "record": "summary",
            "variant": self.variant,
            "sentences": self.sentences,
            "bleu": self.bleu,
            "ambiguous_accuracy": self.ambiguous_accuracy,
            "params": self.params,
        })
        .to_string();
        out.push('\n');
        for b in &self.buckets {
            let line = serde_json::json!({
                "record": "bucket",
                "variant": self.variant,
                "bucket": b.label(),
                "sentences": b.sentences,
                "bleu": b.bleu,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// `variant,bucket,sentences,bleu` with an `all` row first.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,bucket,sentences,bleu\n");
        let _ = writeln!(out, "{},all,{},{:.6}", self.variant, self.sentences, self.bleu);
        for b in &self.buckets {
            let _ = writeln!(out, "{},{},{},{:.6}", self.variant, b.label(), b.sentences, b.bleu);
        }
        out
    }
}
