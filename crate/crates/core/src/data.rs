//! Corpora: vocabularies, the synthetic ambiguous-word task, token-budget
//! batching and the on-disk dataset layout.
//!
//! A dataset directory holds, per split (`train`, `valid`, `test`):
//!
//! - `{split}.src`, `{split}.tgt`: one whitespace-tokenized sentence per line
//! - `{split}.manifest`: one feature reference per line, either a container
//!   path relative to the directory or `synth <sense> <seed>` for features
//!   the synthetic generator rebuilds on demand
//! - `{split}.ambig` (optional): `<position> <gold token>` for sentences with
//!   an ambiguous word, `-` otherwise
//!
//! plus `dataset.toml` with the synthetic task settings when any manifest line
//! is a `synth` recipe.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureShape, FeatureSynth, VisualFeatures};
use crate::rng;
use crate::transformer::{BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id bijection with the four reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Ids by descending frequency, ties in lexicographic order.
    pub fn build<'a, I, S>(sentences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.as_ref() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(w)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(
            RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w.to_string())).collect(),
        ))
    }

    /// `tokens` must start with the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<u32> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens up to the first EOS, skipping padding and BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }
}

pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Where a sentence's visual features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureRef {
    /// Rebuilt by the synthetic generator.
    Synth { sense: usize, seed: u64 },
    File(PathBuf),
    Loaded(Rc<VisualFeatures>),
}

/// The ambiguous word of a sentence: its position (same on both sides) and
/// the sense-determined gold target token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ambiguity {
    pub position: usize,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub features: Option<FeatureRef>,
    pub ambiguity: Option<Ambiguity>,
}

impl Example {
    /// Tokens this pair spends from a batch budget.
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

/// Examples plus what is needed to resolve their features.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub synth: Option<Rc<FeatureSynth>>,
    pub shape: FeatureShape,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn features(&self, i: usize) -> Result<Option<VisualFeatures>> {
        let ex = &self.examples[i];
        match &ex.features {
            None => Ok(None),
            Some(FeatureRef::Loaded(f)) => Ok(Some((**f).clone())),
            Some(FeatureRef::File(p)) => VisualFeatures::load(p, self.shape).map(Some),
            Some(FeatureRef::Synth { sense, seed }) => {
                let synth = self
                    .synth
                    .as_ref()
                    .ok_or_else(|| Error::Input(format!("sentence {} needs the synthetic generator", ex.id)))?;
                synth.synthesize(*sense, *seed, ex.id).map(Some)
            }
        }
    }

    /// The same corpus with feature references permuted across sentences
    /// by a seeded shuffle, breaking the text/image alignment.
    pub fn with_shuffled_features(&self, seed: u64) -> Corpus {
        let mut refs: Vec<Option<FeatureRef>> = self.examples.iter().map(|e| e.features.clone()).collect();
        refs.shuffle(&mut rng::stream(seed, rng::SHUFFLE_BASE - 1));
        let examples = self
            .examples
            .iter()
            .zip(refs)
            .map(|(e, f)| Example { features: f, ..e.clone() })
            .collect();
        Corpus { examples, ..self.clone() }
    }
}

/// Settings of the synthetic disambiguation task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    /// Source word types `w0 .. w{vocab-1}`.
    pub vocab_size: usize,
    /// The first this many source words are ambiguous.
    pub ambiguous: usize,
    pub senses: usize,
    /// Prior over senses; must sum to 1.
    pub sense_prior: Vec<f64>,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub noise: f64,
    /// Classes that only ever appear as distractor regions.
    pub distractor_classes: usize,
    pub global_rows: usize,
    pub regions: usize,
    pub d_c: usize,
    /// Keep one-hot class annotations with each feature set.
    pub annotations: bool,
    /// Write feature containers instead of `synth` recipes.
    pub materialize: bool,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 200,
            ambiguous: 20,
            senses: 2,
            sense_prior: vec![0.6, 0.4],
            min_len: 4,
            max_len: 10,
            train: 8000,
            valid: 1000,
            test: 1000,
            noise: 0.0,
            distractor_classes: 24,
            global_rows: 196,
            regions: 10,
            d_c: 256,
            annotations: false,
            materialize: false,
            seed: 1,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.train + self.valid + self.test == 0 {
            return bad("synthetic task has 0 sentences".into());
        }
        if self.ambiguous == 0 || self.ambiguous >= self.vocab_size {
            return bad(format!("need 0 < ambiguous ({}) < vocab_size ({})", self.ambiguous, self.vocab_size));
        }
        if self.senses < 2 || self.sense_prior.len() != self.senses {
            return bad(format!("need at least 2 senses and one prior entry per sense (got {} and {:?})", self.senses, self.sense_prior));
        }
        if self.sense_prior.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (self.sense_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("sense prior {:?} is not a distribution", self.sense_prior));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad sentence length range {}..={}", self.min_len, self.max_len));
        }
        if self.regions == 0 || self.global_rows == 0 || self.d_c < 2 {
            return bad("feature matrices need rows and a width of at least 2".into());
        }
        Ok(())
    }

    pub fn shape(&self) -> FeatureShape {
        FeatureShape { global_rows: self.global_rows, regions: self.regions, d_c: self.d_c }
    }

    /// Number of distinct (ambiguous word, sense) pairs.
    pub fn sense_ids(&self) -> usize {
        self.ambiguous * self.senses
    }

    pub fn feature_synth(&self) -> Result<FeatureSynth> {
        let mut s = FeatureSynth::new(self.shape(), self.sense_ids(), self.distractor_classes, self.noise, self.seed)?;
        s.keep_annotations = self.annotations;
        Ok(s)
    }

    pub fn target_word(&self, word: usize, sense: Option<usize>) -> String {
        match sense {
            Some(s) => format!("t{word}_{s}"),
            None => format!("t{word}"),
        }
    }
}

/// Train, validation and test corpora.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

/// Sentences with exactly one ambiguous word whose sense is drawn from the
/// prior independently of the rest of the sentence, so only the features
/// reveal it.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let synth = Rc::new(spec.feature_synth()?);
    let mut r = rng::stream(spec.seed, rng::SYNTH_TEXT_STREAM);
    let mut split = |n: usize| -> Corpus {
        let mut examples = Vec::with_capacity(n);
        for id in 0..n as u64 {
            let len = r.random_range(spec.min_len..=spec.max_len);
            let position = r.random_range(0..len);
            let word = r.random_range(0..spec.ambiguous);
            let u: f64 = r.random();
            let mut acc = 0.0;
            let mut sense = spec.senses - 1;
            for (s, &p) in spec.sense_prior.iter().enumerate() {
                acc += p;
                if u < acc {
                    sense = s;
                    break;
                }
            }
            let mut src = Vec::with_capacity(len);
            let mut tgt = Vec::with_capacity(len);
            for k in 0..len {
                if k == position {
                    src.push(format!("w{word}"));
                    tgt.push(spec.target_word(word, Some(sense)));
                } else {
                    let w = r.random_range(spec.ambiguous..spec.vocab_size);
                    src.push(format!("w{w}"));
                    tgt.push(spec.target_word(w, None));
                }
            }
            let seed: u64 = r.random();
            examples.push(Example {
                id,
                ambiguity: Some(Ambiguity { position, gold: tgt[position].clone() }),
                src,
                tgt,
                features: Some(FeatureRef::Synth { sense: word * spec.senses + sense, seed }),
            });
        }
        Corpus { examples, synth: Some(Rc::clone(&synth)), shape: spec.shape() }
    };
    let train = split(spec.train);
    let valid = split(spec.valid);
    let test = split(spec.test);
    Ok(Dataset { train, valid, test })
}

/// Shuffles with the seed's stream for `epoch`, then packs greedily so that
/// every batch stays within `budget` tokens. Returns example indices.
pub fn make_batches(corpus: &Corpus, budget: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(ex) = corpus.examples.iter().find(|e| e.tokens() > budget) {
        return Err(Error::Input(format!(
            "sentence {} has {} tokens, more than the batch budget of {budget}",
            ex.id,
            ex.tokens()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(seed, rng::SHUFFLE_BASE + epoch));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        let t = corpus.examples[i].tokens();
        if used + t > budget && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += t;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

/// Contiguous batches in corpus order, for evaluation.
pub fn sequential_batches(corpus: &Corpus, budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for (i, ex) in corpus.examples.iter().enumerate() {
        if used + ex.tokens() > budget && !cur.is_empty() {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += ex.tokens();
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Fraction of sentences whose sense the nearest-class probe recovers from the
/// regional features.
pub fn probe_accuracy(corpus: &Corpus) -> Result<f64> {
    let synth = corpus.synth.as_ref().ok_or_else(|| Error::Input("probe needs the synthetic generator".into()))?;
    let mut hits = 0;
    let mut total = 0;
    for (i, ex) in corpus.examples.iter().enumerate() {
        if let Some(FeatureRef::Synth { sense, .. }) = ex.features {
            let f = corpus.features(i)?.expect("synth reference");
            total += 1;
            hits += usize::from(synth.probe(&f) == sense);
        }
    }
    if total == 0 {
        return Err(Error::Input("no synthetic sentences to probe".into()));
    }
    Ok(hits as f64 / total as f64)
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes a dataset in the directory layout described at the top of this
/// module.
pub fn write_dataset(dir: &Path, data: &Dataset, spec: Option<&SyntheticTaskSpec>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(spec) = spec {
        let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&dir.join("dataset.toml"), &text)?;
    }
    let materialize = spec.is_some_and(|s| s.materialize);
    for (name, corpus) in SPLITS.iter().zip([&data.train, &data.valid, &data.test]) {
        let (mut src, mut tgt, mut man, mut amb) = (String::new(), String::new(), String::new(), String::new());
        let fdir = dir.join("features").join(name);
        if materialize {
            std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        }
        for (i, ex) in corpus.examples.iter().enumerate() {
            writeln!(src, "{}", detokenize(&ex.src)).unwrap();
            writeln!(tgt, "{}", detokenize(&ex.tgt)).unwrap();
            match (&ex.features, materialize) {
                (Some(FeatureRef::Synth { sense, seed }), false) => writeln!(man, "synth {sense} {seed}").unwrap(),
                (Some(_), _) => {
                    let rel = format!("features/{name}/{}.feat", ex.id);
                    if materialize {
                        corpus.features(i)?.expect("feature reference").save(dir.join(&rel))?;
                    } else if let Some(FeatureRef::File(p)) = &ex.features {
                        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
                        std::fs::copy(p, dir.join(&rel)).map_err(|e| Error::io(p, e))?;
                    } else {
                        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
                        corpus.features(i)?.expect("feature reference").save(dir.join(&rel))?;
                    }
                    writeln!(man, "{rel}").unwrap();
                }
                (None, _) => writeln!(man, "-").unwrap(),
            }
            match &ex.ambiguity {
                Some(a) => writeln!(amb, "{} {}", a.position, a.gold).unwrap(),
                None => writeln!(amb, "-").unwrap(),
            }
        }
        write_file(&dir.join(format!("{name}.src")), &src)?;
        write_file(&dir.join(format!("{name}.tgt")), &tgt)?;
        write_file(&dir.join(format!("{name}.manifest")), &man)?;
        write_file(&dir.join(format!("{name}.ambig")), &amb)?;
    }
    Ok(())
}

fn read_spec(dir: &Path) -> Result<Option<SyntheticTaskSpec>> {
    let spec_path = dir.join("dataset.toml");
    if !spec_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
    Ok(Some(toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?))
}

/// Text lines of one corpus plus the optional per-line side files.
struct Lines<'a> {
    label: &'a str,
    src: Vec<String>,
    tgt: Option<Vec<String>>,
    manifest: Option<(String, Vec<String>)>,
    ambig: Option<Vec<String>>,
}

fn optional_lines(path: &Path, expect: usize) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let lines = read_lines(path)?;
    if lines.len() != expect {
        return Err(Error::Input(format!("{}: {} lines, expected {}", path.display(), lines.len(), expect)));
    }
    Ok(Some(lines))
}

/// Builds a corpus; feature paths in the manifest are relative to `base`.
fn assemble(lines: Lines<'_>, base: &Path, spec: Option<&SyntheticTaskSpec>, shape: FeatureShape) -> Result<Corpus> {
    let mut needs_synth = false;
    let mut examples = Vec::with_capacity(lines.src.len());
    for (i, s) in lines.src.iter().enumerate() {
        let features = match lines.manifest.as_ref().map(|(_, m)| m[i].trim()) {
            None | Some("-") => None,
            Some(line) if line.starts_with("synth ") => {
                let parts: Vec<&str> = line.split_whitespace().collect();
                let parse = |k: usize| parts.get(k).and_then(|x| x.parse::<u64>().ok());
                match (parts.len(), parse(1), parse(2)) {
                    (3, Some(sense), Some(seed)) => {
                        needs_synth = true;
                        Some(FeatureRef::Synth { sense: sense as usize, seed })
                    }
                    _ => {
                        let name = &lines.manifest.as_ref().expect("manifest present").0;
                        return Err(Error::Input(format!("{name} line {}: malformed recipe `{line}`", i + 1)));
                    }
                }
            }
            Some(line) => Some(FeatureRef::File(base.join(line))),
        };
        let ambiguity = match lines.ambig.as_ref().map(|a| a[i].trim()) {
            None | Some("-") => None,
            Some(line) => {
                let label = lines.label;
                let (p, g) = line
                    .split_once(' ')
                    .ok_or_else(|| Error::Input(format!("{label}.ambig line {}: expected `<position> <token>`", i + 1)))?;
                let position = p
                    .parse()
                    .map_err(|_| Error::Input(format!("{label}.ambig line {}: bad position `{p}`", i + 1)))?;
                Some(Ambiguity { position, gold: g.trim().to_string() })
            }
        };
        let tgt = lines.tgt.as_ref().map(|t| tokenize(&t[i])).unwrap_or_default();
        examples.push(Example { id: i as u64, src: tokenize(s), tgt, features, ambiguity });
    }
    let synth = match (needs_synth, spec) {
        (false, _) => None,
        (true, Some(spec)) => Some(Rc::new(spec.feature_synth()?)),
        (true, None) => {
            let name = &lines.manifest.as_ref().expect("manifest present").0;
            return Err(Error::Input(format!("{name} uses synth recipes but no dataset.toml sits next to it")));
        }
    };
    let shape = spec.map_or(shape, SyntheticTaskSpec::shape);
    Ok(Corpus { examples, synth, shape })
}

/// Reads one split. The manifest and ambiguity files are optional; when the
/// manifest is absent the corpus has no features.
pub fn read_split(dir: &Path, split: &str, shape: FeatureShape) -> Result<Corpus> {
    let spec = read_spec(dir)?;
    let src = read_lines(&dir.join(format!("{split}.src")))?;
    let tgt = read_lines(&dir.join(format!("{split}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(Error::Input(format!("{split}: {} source lines but {} target lines", src.len(), tgt.len())));
    }
    let n = src.len();
    let manifest = optional_lines(&dir.join(format!("{split}.manifest")), n)?.map(|m| (format!("{split}.manifest"), m));
    let ambig = optional_lines(&dir.join(format!("{split}.ambig")), n)?;
    assemble(Lines { label: split, src, tgt: Some(tgt), manifest, ambig }, dir, spec.as_ref(), shape)
}

/// Reads source sentences for translation, with an optional feature manifest.
/// Feature paths and synth recipes resolve against the manifest's directory
/// (and the `dataset.toml` there). Target sides are empty.
pub fn read_source(input: &Path, manifest: Option<&Path>, shape: FeatureShape) -> Result<Corpus> {
    let src = read_lines(input)?;
    let (manifest, base, spec) = match manifest {
        Some(m) => {
            if !m.exists() {
                return Err(Error::Input(format!("feature manifest {} does not exist", m.display())));
            }
            let base = m.parent().map(Path::to_path_buf).unwrap_or_default();
            let lines = optional_lines(m, src.len())?.expect("manifest exists");
            let spec = read_spec(&base)?;
            (Some((m.display().to_string(), lines)), base, spec)
        }
        None => (None, PathBuf::new(), None),
    };
    assemble(Lines { label: "input", src, tgt: None, manifest, ambig: None }, &base, spec.as_ref(), shape)
}

pub fn read_dataset(dir: &Path, shape: FeatureShape) -> Result<Dataset> {
    Ok(Dataset {
        train: read_split(dir, "train", shape)?,
        valid: read_split(dir, "valid", shape)?,
        test: read_split(dir, "test", shape)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn vocab_orders_by_frequency_then_name() {
        let v = Vocab::build(&[toks("a a b")]).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v = Vocab::build(&[toks("b a")]).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        let empty: [Vec<String>; 0] = [];
        assert!(matches!(Vocab::build(&empty), Err(Error::Input(_))));
    }

    #[test]
    fn tokenize_round_trip() {
        let s = "a quick  test";
        assert_eq!(detokenize(&tokenize("a quick test")), "a quick test");
        assert_eq!(tokenize(s).len(), 3);
    }

    #[test]
    fn zero_sentences_is_rejected() {
        let spec = SyntheticTaskSpec { train: 0, valid: 0, test: 0, ..Default::default() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }
}
