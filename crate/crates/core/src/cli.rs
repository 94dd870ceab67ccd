//! Command-line front end: `gen`, `train`, `translate`, `evaluate`, `inspect`.
//!
//! Every failure is reported as one line, `E_CODE: message`, and a nonzero
//! exit status.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{Overrides, RunConfig};
use crate::data::{generate_synthetic, read_dataset, read_source, read_split, Corpus, Dataset, SyntheticTaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::eval::{translate_corpus, EvalReport, DEFAULT_EDGES};
use crate::inspect;
use crate::model::Model;
use crate::multimodal::Variant;
use crate::plot;
use crate::train;

/// Environment variable that overrides the output directory of a config file.
pub const OUT_ENV: &str = "DCCN_OUT";

const SHUFFLE_SALT: [u64; 3] = [0x5eed_0001, 0x5eed_0002, 0x5eed_0003];

#[derive(Debug, Parser)]
#[command(name = "dccn", version, about = "Context-guided capsule routing for multimodal translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: GlobalArgs,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file: a run configuration, or a task spec for `gen`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// text-only, full, global-only, regional-only, attention-both,
    /// conventional-routing, ...
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Pin every stochastic choice to the seed.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Dataset directory (as written by `gen`); defaults to the config's data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic disambiguation dataset.
    Gen,
    /// Train a model from a run configuration.
    Train,
    /// Greedy translation of a source file.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One tokenized sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// Feature manifest aligned with the input lines.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// BLEU, length buckets and ambiguous-token accuracy on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
    },
    /// Routing trace of one sentence as CSV and SVG heatmaps.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Sentence index within the split (or input file).
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Source file to inspect instead of a dataset split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the exit
/// status. Errors are printed to stderr as a single line.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", Error::Usage(first.to_string()).cli_line());
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.cli_line());
            1
        }
    }
}

impl Error {
    /// `E_CODE: message` on one line.
    pub fn cli_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("{}: {msg}", self.code())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Gen => cmd_gen(g),
        Command::Train => cmd_train(g),
        Command::Translate { checkpoint, input, manifest } => cmd_translate(g, checkpoint, input, manifest.as_deref()),
        Command::Evaluate { checkpoint, corpus } => cmd_evaluate(g, checkpoint, corpus),
        Command::Inspect { checkpoint, corpus, index, input, manifest } => {
            cmd_inspect(g, checkpoint, corpus, *index, input.as_deref(), manifest.as_deref())
        }
    }
}

fn parse_variant(v: &Option<String>) -> Result<Option<Variant>> {
    v.as_deref().map(str::parse).transpose()
}

/// Creates `dir`, refusing one that already has entries unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!("output directory {} is not empty; pass --force to write into it", dir.display())));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_out(g: &GlobalArgs) -> Result<PathBuf> {
    g.out.clone().ok_or_else(|| Error::Usage(format!("an output directory is required (--out or {OUT_ENV})")))
}

fn cmd_gen(g: &GlobalArgs) -> Result<()> {
    let mut spec = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SyntheticTaskSpec>(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => SyntheticTaskSpec::default(),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let out = require_out(g)?;
    let data = generate_synthetic(&spec)?;
    prepare_out(&out, g.force)?;
    crate::data::write_dataset(&out, &data, Some(&spec))?;
    println!(
        "wrote {} train, {} valid, {} test sentences to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

/// Loads the dataset a run configuration points at.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let mut data = match (&cfg.data.dir, &cfg.data.synthetic) {
        (Some(dir), None) => read_dataset(dir, cfg.model.feature_shape())?,
        (None, Some(spec)) => generate_synthetic(spec)?,
        _ => return Err(Error::Config("data: set exactly one of `dir` and `synthetic`".into())),
    };
    if data.train.shape != cfg.model.feature_shape() && cfg.model.variant.uses_visual() {
        return Err(Error::Config(format!(
            "model expects features {:?} but the dataset provides {:?}",
            cfg.model.feature_shape(),
            data.train.shape
        )));
    }
    if cfg.data.shuffle_features {
        data = Dataset {
            train: data.train.with_shuffled_features(cfg.seed ^ SHUFFLE_SALT[0]),
            valid: data.valid.with_shuffled_features(cfg.seed ^ SHUFFLE_SALT[1]),
            test: data.test.with_shuffled_features(cfg.seed ^ SHUFFLE_SALT[2]),
        };
    }
    Ok(data)
}

/// Builds vocabularies from the training split and a fresh model.
pub fn build_model(cfg: &RunConfig, data: &Dataset) -> Result<Model> {
    let src = Vocab::build(data.train.examples.iter().map(|e| e.src.as_slice()))?;
    let tgt = Vocab::build(data.train.examples.iter().map(|e| e.tgt.as_slice()))?;
    Model::new(cfg.model.clone(), src, tgt)
}

fn cmd_train(g: &GlobalArgs) -> Result<()> {
    let cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.resolve(&Overrides {
        seed: g.seed,
        variant: parse_variant(&g.variant)?,
        deterministic: g.deterministic,
        out: g.out.clone(),
    })?;
    let data = load_data(&cfg)?;
    let mut model = build_model(&cfg, &data)?;
    prepare_out(&cfg.out, g.force)?;
    cfg.write_snapshot(&cfg.out)?;
    let counts = model.count_params();
    eprintln!("{} parameters ({} in the multimodal layer)", counts.total, counts.dccn_related() + counts.attention);
    let outcome = train::train(&mut model, &cfg.train, &data, Some(&cfg.out), |m| {
        if let Some(vl) = m.valid_loss {
            let acc = m.ambiguous_accuracy.map_or(String::new(), |a| format!(" ambiguous {a:.4}"));
            eprintln!("step {} epoch {} train {:.4} valid {vl:.4}{acc}", m.step, m.epoch, m.train_loss);
        }
    })?;
    checkpoint::save(&model, cfg.out.join("last.ckpt"))?;
    println!(
        "trained {} steps; best valid loss {:.4} at step {}; checkpoints in {}",
        outcome.steps,
        outcome.best_valid_loss,
        outcome.best_step,
        cfg.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, variant: &Option<String>) -> Result<Model> {
    let model = checkpoint::load(path)?;
    if let Some(v) = parse_variant(variant)? {
        if v != model.variant() {
            return Err(Error::Config(format!("checkpoint {} holds variant {}, not {v}", path.display(), model.variant())));
        }
    }
    Ok(model)
}

const DECODE_BUDGET: usize = 512;

fn cmd_translate(g: &GlobalArgs, ckpt: &Path, input: &Path, manifest: Option<&Path>) -> Result<()> {
    let model = load_checkpoint(ckpt, &g.variant)?;
    let corpus = read_source(input, manifest, model.config.feature_shape())?;
    if model.variant().uses_visual() && manifest.is_none() && !corpus.is_empty() {
        return Err(Error::Input(format!("variant {} needs a feature manifest (--manifest)", model.variant())));
    }
    let hyps = translate_corpus(&model, &corpus, DECODE_BUDGET)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&h.join(" "));
        text.push('\n');
    }
    match &g.out {
        Some(dir) => {
            prepare_out(dir, g.force)?;
            write(&dir.join("translations.txt"), &text)
        }
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn eval_corpus(g: &GlobalArgs, args: &CorpusArgs, model: &Model) -> Result<Corpus> {
    if let Some(dir) = &args.data {
        return read_split(dir, &args.split, model.config.feature_shape());
    }
    let Some(path) = &g.config else {
        return Err(Error::Usage("pass --data DIR or a --config whose data section names the corpus".into()));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let data = load_data(&cfg)?;
    match args.split.as_str() {
        "train" => Ok(data.train),
        "valid" => Ok(data.valid),
        "test" => Ok(data.test),
        other => Err(Error::Usage(format!("unknown split `{other}` (train, valid, test)"))),
    }
}

fn cmd_evaluate(g: &GlobalArgs, ckpt: &Path, args: &CorpusArgs) -> Result<()> {
    let model = load_checkpoint(ckpt, &g.variant)?;
    let corpus = eval_corpus(g, args, &model)?;
    let out = require_out(g)?;
    let hyps = translate_corpus(&model, &corpus, DECODE_BUDGET)?;
    let report = EvalReport::build(&model, &corpus, &hyps, &DEFAULT_EDGES)?;
    prepare_out(&out, g.force)?;
    write(&out.join("report.jsonl"), &report.to_jsonl())?;
    let csv = report.to_csv();
    write(&out.join("report.csv"), &csv)?;
    write(&out.join("buckets.svg"), &bucket_chart(&csv)?)?;
    let mut text = String::new();
    for h in &hyps {
        text.push_str(&h.join(" "));
        text.push('\n');
    }
    write(&out.join("translations.txt"), &text)?;
    let acc = report.ambiguous_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    println!("{} sentences: BLEU {:.2}, ambiguous-token accuracy {acc}", report.sentences, report.bleu);
    Ok(())
}

/// Bar chart of the per-bucket BLEU rows of an evaluation CSV.
pub fn bucket_chart(csv: &str) -> Result<String> {
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut variant = String::new();
    for (ln, line) in csv.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::Input(format!("report CSV line {}: {} fields, expected 4", ln + 1, f.len())));
        }
        variant = f[0].to_string();
        let v: f64 = f[3].parse().map_err(|_| Error::Input(format!("report CSV line {}: bad BLEU `{}`", ln + 1, f[3])))?;
        labels.push(format!("{} ({})", f[1], f[2]));
        values.push(v);
    }
    Ok(plot::bar_chart(&format!("BLEU by source length, {variant}"), &labels, &values, 100.0))
}

fn cmd_inspect(
    g: &GlobalArgs,
    ckpt: &Path,
    args: &CorpusArgs,
    index: usize,
    input: Option<&Path>,
    manifest: Option<&Path>,
) -> Result<()> {
    let model = load_checkpoint(ckpt, &g.variant)?;
    let corpus = match input {
        Some(p) => read_source(p, manifest, model.config.feature_shape())?,
        None => eval_corpus(g, args, &model)?,
    };
    let out = require_out(g)?;
    let trace = inspect::trace_sentence(&model, &corpus, index)?;
    prepare_out(&out, g.force)?;
    let csv = inspect::trace_csv(&trace.layer);
    write(&out.join("routing.csv"), &csv)?;
    for (name, svg) in inspect::trace_heatmaps(&csv)? {
        write(&out.join(name), &svg)?;
    }
    if let Some(alpha) = &trace.layer.alpha {
        let gate = inspect::gate_csv(alpha);
        write(&out.join("gate.csv"), &gate)?;
        write(&out.join("gate.svg"), &inspect::gate_heatmap(&gate)?)?;
    }
    write(
        &out.join("sentence.txt"),
        &format!("{}\n{}\n", trace.source.join(" "), trace.translation.join(" ")),
    )?;
    println!(
        "{} => {} ({} timesteps, {} trace rows)",
        trace.source.join(" "),
        trace.translation.join(" "),
        trace.timesteps,
        csv.lines().count() - 1
    );
    Ok(())
}
