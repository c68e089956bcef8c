//! `tbg` command line: synth, train, generate, eval, bench.
//!
//! Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
//!
//! `train` settings resolve as command-line flag, then `--config` file, then
//! built-in default. The config file holds `key = value` lines (`#` starts a
//! comment); keys match [`TrainSettings`] field names.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{bench_scaling, write_bench_csv, Kernel};
use crate::dataset::{tokenize_split, Tokenizers, DEFAULT_CODEBOOK_SIZE, DEFAULT_PATCH};
use crate::error::{invalid, Error, Result};
use crate::evaluate::{evaluate, EvalConfig, Subset};
use crate::generation::{ensemble_generate_image, generate_report, Ensemble, SamplerConfig};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamWConfig;
use crate::synth::{generate_corpus, load_corpus, manifest_path, save_corpus, Corpus, Split};
use crate::tokenizer::ToyImage;
use crate::train::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Parser)]
#[command(name = "tbg", version, about = "Longitudinal image/report generation with a causal FAVOR+ transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal corpus.
    Synth(SynthArgs),
    /// Fit the tokenizers and train a model.
    Train(TrainArgs),
    /// Generate a report or an image from checkpoints.
    Generate(GenerateArgs),
    /// Generate for a corpus split and write metrics.
    Eval(EvalArgs),
    /// Time causal attention kernels against sequence length.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub patients: usize,
    #[arg(long, default_value_t = 0.75)]
    pub two_study_frac: f64,
    #[arg(long, default_value_t = 4)]
    pub pathologies: usize,
    /// Output directory (receives corpus.jsonl and its manifest).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus file, or a directory containing corpus.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Any other setting, as `key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Train into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Report,
    Image,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Take the most likely token at every step.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 0.9)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            p: self.top_p,
            temperature: self.temperature,
            greedy: self.greedy,
            max_tokens: None,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// Checkpoint files; images use all of them as an ensemble, reports use
    /// the last one.
    #[arg(long = "checkpoint", alias = "ensemble", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    /// Current image (8-bit PGM), input of the report task.
    #[arg(long)]
    pub current_image: Option<PathBuf>,
    /// Prior image (8-bit PGM).
    #[arg(long)]
    pub prior_image: Option<PathBuf>,
    /// Days between the prior and current study.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Current report text, input of the image task.
    #[arg(long)]
    pub report: Option<String>,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long = "checkpoint", alias = "checkpoints", required = true, num_args = 1..)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "all")]
    pub subset: Subset,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [KernelArg::Favor, KernelArg::Exact])]
    pub kernel: Vec<KernelArg>,
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [1024, 2048, 4096])]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub m: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Favor,
    Exact,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?} (train, val, test)")),
    }
}

/// Every knob of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub keep_checkpoints: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub m_features: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub lambda: f64,
    pub orthogonal_features: bool,
    pub redraw_features: bool,
    pub codebook_size: usize,
    pub patch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::toy(crate::layout::Vocab::new(0, 0), crate::layout::Geometry { n_x: 0, n_r: 0 }, 0);
        Self {
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            clip_norm: t.clip_norm,
            keep_checkpoints: t.keep_checkpoints,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            m_features: m.m_features,
            mlp_hidden: m.mlp_hidden,
            dropout: m.dropout,
            lambda: m.lambda,
            orthogonal_features: m.orthogonal_features,
            redraw_features: m.redraw_features,
            codebook_size: DEFAULT_CODEBOOK_SIZE,
            patch: DEFAULT_PATCH,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("bad value {value:?} for {key}")))
}

impl TrainSettings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "clip_norm" => self.clip_norm = parse_value(key, v)?,
            "keep_checkpoints" => self.keep_checkpoints = parse_value(key, v)?,
            "d_model" => self.d_model = parse_value(key, v)?,
            "n_layers" => self.n_layers = parse_value(key, v)?,
            "n_heads" => self.n_heads = parse_value(key, v)?,
            "m_features" => self.m_features = parse_value(key, v)?,
            "mlp_hidden" => self.mlp_hidden = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "orthogonal_features" => self.orthogonal_features = parse_value(key, v)?,
            "redraw_features" => self.redraw_features = parse_value(key, v)?,
            "codebook_size" => self.codebook_size = parse_value(key, v)?,
            "patch" => self.patch = parse_value(key, v)?,
            other => return Err(invalid(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document; errors name the offending line.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| invalid(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut s = Self::default();
        if let Some(path) = &args.config {
            s.apply_file_text(&std::fs::read_to_string(path)?)?;
        }
        for kv in &args.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            s.set(k, v)?;
        }
        if let Some(v) = args.seed {
            s.seed = v;
        }
        if let Some(v) = args.epochs {
            s.epochs = v;
        }
        if let Some(v) = args.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = args.lr {
            s.lr = v;
        }
        if let Some(v) = args.lambda {
            s.lambda = v;
        }
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("keep_checkpoints", self.keep_checkpoints.to_string());
        put("d_model", self.d_model.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("m_features", self.m_features.to_string());
        put("mlp_hidden", self.mlp_hidden.to_string());
        put("dropout", self.dropout.to_string());
        put("lambda", self.lambda.to_string());
        put("orthogonal_features", self.orthogonal_features.to_string());
        put("redraw_features", self.redraw_features.to_string());
        put("codebook_size", self.codebook_size.to_string());
        put("patch", self.patch.to_string());
        out
    }

    pub fn model_config(&self, tok: &Tokenizers, pathologies: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            m_features: self.m_features,
            mlp_hidden: self.mlp_hidden,
            dropout: self.dropout,
            lambda: self.lambda,
            orthogonal_features: self.orthogonal_features,
            redraw_features: self.redraw_features,
            init_seed: self.seed,
            ..ModelConfig::toy(tok.vocab(), tok.geometry(pathologies), pathologies)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            clip_norm: self.clip_norm,
            keep_checkpoints: self.keep_checkpoints,
            seed: self.seed,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Malformed { .. } | Error::Checkpoint(_) | Error::Json(_) | Error::Csv(_) => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn corpus_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CORPUS_FILE)
    } else {
        path.to_path_buf()
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    load_corpus(&corpus_file(path))
}

fn run_synth(a: &SynthArgs) -> Result<()> {
    let corpus = generate_corpus(a.seed, a.patients, a.two_study_frac, a.pathologies)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join(CORPUS_FILE);
    save_corpus(&corpus, &path)?;
    println!("wrote {} records to {}", corpus.records.len(), path.display());
    println!("manifest {}", manifest_path(&path).display());
    for c in &corpus.manifest.splits {
        println!(
            "  {:5}  one-study {:4}  two-study {:4}  records {:5}",
            format!("{:?}", c.split).to_lowercase(),
            c.one_study_patients,
            c.two_study_patients,
            c.records
        );
    }
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let settings = TrainSettings::resolve(a)?;
    let corpus = read_corpus(&a.corpus)?;
    if a.out.exists() && std::fs::read_dir(&a.out)?.next().is_some() && !a.force {
        return Err(invalid(format!(
            "output directory {} is not empty (use --force to train into it)",
            a.out.display()
        )));
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("settings.txt"), settings.to_text())?;
    let tok = Tokenizers::fit(&corpus, settings.codebook_size, settings.patch, settings.seed)?;
    tok.words.save(&a.out.join("vocab.txt"))?;
    let train_set = tokenize_split(&corpus, Split::Train, &tok)?;
    let val_set = tokenize_split(&corpus, Split::Val, &tok)?;
    let cfg = settings.model_config(&tok, corpus.pathologies());
    eprintln!(
        "training on {} samples ({} val), {} parameters",
        train_set.len(),
        val_set.len(),
        cfg.parameter_count()
    );
    let outcome = train(
        Model::new(cfg)?,
        &tok,
        &train_set,
        &val_set,
        &settings.train_config(),
        Some(&a.out),
        |row| {
            eprintln!(
                "epoch {:3} {:5} gen_ce {:.5} cls_bce {:.5} total {:.5}",
                row.epoch, row.split, row.gen_ce, row.cls_bce, row.total
            )
        },
    )?;
    for p in &outcome.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}

fn read_pgm(path: &Path) -> Result<ToyImage> {
    ToyImage::from_pgm(&std::fs::read(path)?)
}

fn run_generate(a: &GenerateArgs) -> Result<()> {
    if a.delta.is_some() != a.prior_image.is_some() {
        return Err(invalid("--prior-image and --delta must be given together"));
    }
    match a.task {
        Task::Report if a.current_image.is_none() => {
            return Err(invalid("the report task needs --current-image"))
        }
        Task::Report if a.report.is_some() => return Err(invalid("the report task does not take --report")),
        Task::Image if a.report.is_none() => return Err(invalid("the image task needs --report")),
        Task::Image if a.current_image.is_some() => {
            return Err(invalid("the image task does not take --current-image"))
        }
        _ => {}
    }
    let sampler = a.sampler.config();
    sampler.validate()?;
    let ensemble = Ensemble::load(&a.checkpoints)?;
    for w in &ensemble.warnings {
        eprintln!("warning: {w}");
    }
    let tok = &ensemble.members[0].tokenizers;
    if ensemble.members.iter().any(|m| &m.tokenizers != tok) {
        return Err(invalid("ensemble members were trained with different tokenizers"));
    }
    let prior = a
        .prior_image
        .as_deref()
        .map(|p| read_pgm(p).and_then(|img| tok.encode_image(&img)))
        .transpose()?;
    std::fs::create_dir_all(&a.out)?;
    match a.task {
        Task::Report => {
            let current = tok.encode_image(&read_pgm(a.current_image.as_deref().expect("checked"))?)?;
            let model = &ensemble.members.last().expect("non-empty").model;
            let g = generate_report(model, &current, prior.as_deref(), a.delta, &sampler)?;
            let text = tok.decode_report(&g.words)?;
            std::fs::write(a.out.join("report.txt"), format!("{text}\n"))?;
            let json = serde_json::json!({
                "words": g.words,
                "text": text,
                "truncated": g.truncated,
                "cls_probs": g.cls_probs,
            });
            std::fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
            if g.truncated {
                eprintln!("warning: no stop token before the length limit; report truncated");
            }
            println!("{text}");
        }
        Task::Image => {
            let report = tok.encode_report(a.report.as_deref().expect("checked"))?;
            let models: Vec<&Model> = ensemble.members.iter().map(|m| &m.model).collect();
            let out = ensemble_generate_image(&models, tok, &report, prior.as_deref(), a.delta, &sampler)?;
            std::fs::write(a.out.join("image.pgm"), out.image.to_pgm())?;
            let json = serde_json::json!({
                "codes": out.codes,
                "chosen": ensemble.paths[out.chosen],
                "entropies": out.entropies,
            });
            std::fs::write(a.out.join("image.json"), serde_json::to_string_pretty(&json)? + "\n")?;
            println!("{}", a.out.join("image.pgm").display());
        }
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let sampler = a.sampler.config();
    sampler.validate()?;
    let ensemble = Ensemble::load(&a.checkpoints)?;
    for w in &ensemble.warnings {
        eprintln!("warning: {w}");
    }
    let last = ensemble.members.last().expect("non-empty");
    let models: Vec<&Model> = ensemble.members.iter().map(|m| &m.model).collect();
    let report = evaluate(
        &corpus,
        &last.tokenizers,
        &last.model,
        &models,
        &EvalConfig {
            split: a.split,
            subset: a.subset,
            sampler,
            reports: true,
            images: true,
        },
    )?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("metrics.json");
    std::fs::write(&path, report.to_json()?)?;
    for (row, metrics) in &report.rows {
        let summary: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        println!("{row:12} {}", summary.join(" "));
    }
    println!("{}", path.display());
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let kernels: Vec<Kernel> = a
        .kernel
        .iter()
        .map(|k| match k {
            KernelArg::Favor => Kernel::Favor,
            KernelArg::Exact => Kernel::Exact,
        })
        .collect();
    println!("n = {:?}", a.n);
    let rows = bench_scaling(&a.n, &kernels, a.m, a.d, a.repeats, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    let path = a.out.join("bench.csv");
    write_bench_csv(&rows, std::fs::File::create(&path)?)?;
    for r in &rows {
        println!("{:6} {:6} median {:9.3} ms", r.n, r.method, r.median_ms);
    }
    println!("{}", path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Generate(a) => run_generate(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
