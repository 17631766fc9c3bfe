//! Command-line front end.
//!
//! Every subcommand accepts `--config <file.toml>` whose keys are the
//! subcommand's long flag names; flags on the command line take precedence.
//! The fully resolved settings are echoed to stderr as TOML, which is itself
//! a valid `--config` file.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapter::{AdaptedModel, AdapterSpec, Artifact};
use crate::analysis::{densify, random_drop, rank_report, CheckpointPair, DEFAULT_RANK_TOL};
use crate::baselines::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::checkpoint;
use crate::data::{
    filter_by_length, load_jsonl, make_synthetic_task, DatasetSplits, InstructionTemplate,
    SyntheticKind, SyntheticSpec, Tokenizer, DEFAULT_MAX_TOKENS,
};
use crate::delta_file::{DeltaFile, IndexMode, ValueDtype};
use crate::error::{Error, ErrorCategory, Result};
use crate::io::write_atomic;
use crate::memory::{memory_report, render_table, table_row, MemoryReport, TABLE_SPARSITIES};
use crate::model::{HeadInit, ModelConfig, ParamType, ParameterStore, TargetSet};
use crate::sparta::{sample_for_budget, sample_indices, SparseDelta, SparsityConfig};
use crate::train::{
    ablate_targets, ablation_target_sets, evaluate_store, sweep, train_with_hook, SweepGrid,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sparta", version, about = "Sparse random parameter adaptation toolkit")]
pub struct Cli {
    /// TOML file with default values for the subcommand's flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Create a randomly initialized model, optionally with a classification head.
    InitModel(InitModelArgs),
    /// Generate a synthetic classification dataset.
    MakeData(MakeDataArgs),
    /// Build a dataset from JSONL files with `text` and `label` fields.
    ImportJsonl(ImportArgs),
    /// Train an adapter.
    Train(TrainArgs),
    /// Evaluate a model, optionally with an adapter applied.
    Eval(EvalArgs),
    /// Sample a random index set and write it as a zero-valued delta file.
    SampleIndices(SampleArgs),
    /// Fold an adapter into its base model.
    Merge(MergeArgs),
    /// Rank of per-matrix fine-tuning deltas.
    AnalyzeRank(RankArgs),
    /// Randomly drop entries of a delta, optionally rescaling the survivors.
    Drop(DropArgs),
    /// Training-memory accounting.
    MemoryReport(MemoryArgs),
    /// Compare sparse target sets at a fixed trainable budget.
    AblateTargets(AblateArgs),
    /// Learning-rate sweep over seeds.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct InitModelArgs {
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Defaults to `heads`.
    #[arg(long)]
    pub kv_heads: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub mlp_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Swap the vocabulary head for one with this many classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated token ids whose head rows initialize the classes.
    #[arg(long)]
    pub class_tokens: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub head_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Parity,
    KeywordSentiment,
    MajorityToken,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MakeDataArgs {
    #[arg(long, value_enum)]
    pub kind: TaskKind,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a split manifest (ids, counts, hashes).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ImportArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub classes: usize,
    /// Comma-separated word vocabulary; other text falls back to bytes.
    #[arg(long)]
    pub words: Option<String>,
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[arg(long, default_value = "")]
    pub suffix: String,
    #[arg(long, default_value = "imported")]
    pub name: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sparta,
    Lora,
    Dora,
    Full,
    Head,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MethodOpts {
    #[arg(long, value_enum, default_value = "sparta")]
    pub method: Method,
    /// Sparse density k in (0, 1].
    #[arg(long)]
    pub density: Option<f64>,
    /// Sparse trainable budget; the density is derived from it.
    #[arg(long, conflicts_with = "density")]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    pub rank: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Comma-separated parameter types (also `all`, `MLP`, `W`, `norm`).
    /// Defaults to `all` for sparta and `Wq,Wv` for low-rank methods.
    #[arg(long)]
    pub targets: Option<String>,
    /// Full fine-tuning only: keep the embedding table frozen.
    #[arg(long)]
    pub freeze_embeddings: bool,
}

impl MethodOpts {
    fn spec(&self, seed: u64) -> Result<AdapterSpec> {
        let targets = |default: &str| TargetSet::parse(self.targets.as_deref().unwrap_or(default));
        Ok(match self.method {
            Method::Sparta => {
                if self.density.is_none() && self.budget.is_none() {
                    return Err(Error::config("sparta needs --density or --budget"));
                }
                AdapterSpec::Sparta {
                    density: self.density,
                    budget: self.budget,
                    targets: targets("all")?,
                    seed,
                }
            }
            Method::Lora => AdapterSpec::Lora {
                rank: self.rank,
                alpha: self.alpha,
                targets: targets("Wq,Wv")?,
                seed,
            },
            Method::Dora => AdapterSpec::DoraLite {
                rank: self.rank,
                alpha: self.alpha,
                targets: targets("Wq,Wv")?,
                seed,
            },
            Method::Full => AdapterSpec::Full {
                freeze_embeddings: self.freeze_embeddings,
            },
            Method::Head => AdapterSpec::HeadOnly,
        })
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 25)]
    pub eval_every: usize,
    /// Training examples longer than this are dropped.
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    pub max_tokens: usize,
}

impl TrainOpts {
    fn config(&self, adapter: AdapterSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            adapter,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            max_steps: self.max_steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            max_grad_norm: self.max_grad_norm,
            patience: self.patience,
            eval_every: self.eval_every,
            seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub method: MethodOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    /// Adapter artifact (sparse delta, low-rank file, or checkpoint for dense methods).
    #[arg(long)]
    pub out: PathBuf,
    /// Run summary as JSON.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Also write the merged standalone checkpoint.
    #[arg(long)]
    pub merged: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Explicit,
    SeedDerived,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtypeArg {
    F32,
    Bf16,
}

impl From<DtypeArg> for ValueDtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => ValueDtype::F32,
            DtypeArg::Bf16 => ValueDtype::Bf16,
        }
    }
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long, conflicts_with = "density")]
    pub budget: Option<usize>,
    #[arg(long, default_value = "all")]
    pub targets: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "explicit")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MergeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub adapter: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct RankArgs {
    #[arg(long)]
    pub pt: PathBuf,
    #[arg(long)]
    pub ft: PathBuf,
    /// Singular values at or below tol times the largest are treated as zero.
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub tol: f64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DropArgs {
    /// Pre-trained checkpoint of a checkpoint pair.
    #[arg(long, requires = "ft", conflicts_with = "delta")]
    pub pt: Option<PathBuf>,
    /// Fine-tuned checkpoint of a checkpoint pair.
    #[arg(long, requires = "pt")]
    pub ft: Option<PathBuf>,
    /// Sparse-delta file to thin out further (needs --model).
    #[arg(long, requires = "model")]
    pub delta: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Drop probability in [0, 1).
    #[arg(short = 'p', long = "drop-prob")]
    pub p: f64,
    #[arg(long)]
    pub rescale: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DtypeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct MemoryArgs {
    /// Scalar parameter count (accepts forms like 2e9).
    #[arg(long, value_parser = parse_count)]
    pub n: Option<u64>,
    #[arg(long)]
    pub density: Option<f64>,
    /// Print the full comparison table for these model sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_count)]
    pub table: Vec<u64>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub budget: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    /// Semicolon-separated target sets, e.g. "Wq,Wv;MLP". Defaults to the
    /// standard thirteen.
    #[arg(long)]
    pub sets: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub method: MethodOpts,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainOpts,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if f < 1.0 || f.fract() != 0.0 || f > u64::MAX as f64 {
        return Err(format!("'{s}' is not a positive integer count"));
    }
    Ok(f as u64)
}

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Ok(resolved) = toml::to_string(&cli.command) {
        eprintln!("# resolved config\n{}", resolved.trim_end());
    }
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Usage => EXIT_USAGE,
        ErrorCategory::Runtime => EXIT_RUNTIME,
        ErrorCategory::Data => EXIT_DATA,
    }
}

fn parse_once(argv: &[OsString]) -> std::result::Result<Cli, i32> {
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(argv).map_err(clap_exit)?;
    Cli::from_arg_matches(&matches).map_err(clap_exit)
}

fn parse(argv: &[OsString]) -> std::result::Result<Cli, i32> {
    let cli = parse_once(argv)?;
    let Some(path) = cli.config.clone() else {
        return Ok(cli);
    };
    let extra = match config_tokens(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return Err(exit_code(&e));
        }
    };
    // Splice the file's flags in right after the subcommand name so that
    // explicit flags, which come later, override them.
    let sub = subcommand_name(&cli.command);
    let pos = argv
        .iter()
        .skip(1)
        .position(|a| a.to_str() == Some(sub))
        .map(|p| p + 1)
        .expect("subcommand present");
    let mut merged: Vec<OsString> = argv[..=pos].to_vec();
    merged.extend(extra.into_iter().map(OsString::from));
    merged.extend_from_slice(&argv[pos + 1..]);
    parse_once(&merged)
}

fn clap_exit(e: clap::Error) -> i32 {
    use clap::error::ErrorKind;
    let _ = e.print();
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
        _ => EXIT_USAGE,
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::InitModel(_) => "init-model",
        Command::MakeData(_) => "make-data",
        Command::ImportJsonl(_) => "import-jsonl",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::SampleIndices(_) => "sample-indices",
        Command::Merge(_) => "merge",
        Command::AnalyzeRank(_) => "analyze-rank",
        Command::Drop(_) => "drop",
        Command::MemoryReport(_) => "memory-report",
        Command::AblateTargets(_) => "ablate-targets",
        Command::Sweep(_) => "sweep",
    }
}

/// Turns a TOML table into `--key value` tokens, keys being long flag names
/// (`_` or `-`). Booleans become bare flags when true; arrays are comma-joined.
fn config_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &toml::Value| -> Result<String> {
            match v {
                toml::Value::String(s) => Ok(s.clone()),
                toml::Value::Integer(i) => Ok(i.to_string()),
                toml::Value::Float(f) => Ok(f.to_string()),
                toml::Value::Boolean(b) => Ok(b.to_string()),
                _ => Err(Error::config(format!("config key '{key}' has an unsupported value"))),
            }
        };
        match &value {
            toml::Value::Boolean(true) => out.push(flag),
            toml::Value::Boolean(false) => {}
            toml::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>>>()?;
                out.push(flag);
                out.push(parts.join(","));
            }
            v => {
                out.push(flag);
                out.push(scalar(v)?);
            }
        }
    }
    Ok(out)
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::InitModel(a) => init_model(a),
        Command::MakeData(a) => make_data(a),
        Command::ImportJsonl(a) => import_jsonl(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SampleIndices(a) => sample_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::AnalyzeRank(a) => rank_cmd(a),
        Command::Drop(a) => drop_cmd(a),
        Command::MemoryReport(a) => memory_cmd(a),
        Command::AblateTargets(a) => ablate_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn stdout_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn init_model(a: &InitModelArgs) -> Result<()> {
    if a.heads == 0 || a.hidden_dim % a.heads != 0 {
        return Err(Error::config(format!(
            "hidden dim {} is not divisible by {} heads",
            a.hidden_dim, a.heads
        )));
    }
    let cfg = ModelConfig {
        vocab_size: a.vocab_size,
        hidden_dim: a.hidden_dim,
        num_layers: a.layers,
        num_heads: a.heads,
        num_kv_heads: a.kv_heads.unwrap_or(a.heads),
        head_dim: a.hidden_dim / a.heads,
        mlp_dim: a.mlp_dim,
        max_seq_len: a.max_seq_len,
        num_classes: a.vocab_size,
    };
    let mut store = ParameterStore::init_pretrained(&cfg, a.seed)?;
    if let Some(c) = a.classes {
        let init = match &a.class_tokens {
            Some(ids) => HeadInit::FromVocabRows(parse_list(ids)?),
            None => HeadInit::Random { seed: a.head_seed },
        };
        store = store.swap_head(c, &init)?;
    } else if a.class_tokens.is_some() {
        return Err(Error::config("--class-tokens needs --classes"));
    }
    checkpoint::save(&store, &a.out)?;
    stdout_line(&format!(
        "wrote {} ({} scalars, head {}x{}, fingerprint {})",
        a.out.display(),
        store.num_scalars(),
        store.config().num_classes,
        store.config().hidden_dim,
        store.fingerprint()
    ));
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| Error::config(format!("bad list item '{x}'"))))
        .collect()
}

fn make_data(a: &MakeDataArgs) -> Result<()> {
    let kind = match a.kind {
        TaskKind::Parity => SyntheticKind::Parity,
        TaskKind::KeywordSentiment => SyntheticKind::KeywordSentiment,
        TaskKind::MajorityToken => SyntheticKind::MajorityToken,
    };
    let spec = SyntheticSpec {
        kind,
        train: a.train,
        dev: a.dev,
        test: a.test,
        vocab_size: a.vocab_size,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
    };
    let splits = make_synthetic_task(&spec)?;
    save_splits(&splits, &a.out, a.manifest.as_deref())
}

fn save_splits(splits: &DatasetSplits, out: &Path, manifest: Option<&Path>) -> Result<()> {
    splits.validate()?;
    splits.save(out)?;
    if let Some(m) = manifest {
        write_json(m, &splits.manifest())?;
    }
    stdout_line(&format!(
        "wrote {}: {} classes, train {}, dev {}, test {}",
        out.display(),
        splits.num_classes,
        splits.train.len(),
        splits.dev.len(),
        splits.test.len()
    ));
    Ok(())
}

fn import_jsonl(a: &ImportArgs) -> Result<()> {
    let tok = match &a.words {
        Some(w) => Tokenizer::with_words(parse_list(w)?),
        None => Tokenizer::bytes(),
    };
    let template = InstructionTemplate {
        prefix: a.prefix.clone(),
        suffix: a.suffix.clone(),
    };
    let train = load_jsonl(&a.train, &tok, &template, 0)?;
    let dev = load_jsonl(&a.dev, &tok, &template, 1 << 40)?;
    let test = match &a.test {
        Some(p) => load_jsonl(p, &tok, &template, 2 << 40)?,
        None => Vec::new(),
    };
    let splits = DatasetSplits {
        name: a.name.clone(),
        num_classes: a.classes,
        train,
        dev,
        test,
    };
    eprintln!("tokenizer vocabulary: {}", tok.vocab_size());
    save_splits(&splits, &a.out, a.manifest.as_deref())
}

fn load_data(path: &Path, base: &ParameterStore) -> Result<DatasetSplits> {
    let data = DatasetSplits::load(path)?;
    let v = base.config().vocab_size;
    if data.max_token() >= v {
        return Err(Error::Vocabulary {
            id: data.max_token(),
            vocab_size: v,
        });
    }
    Ok(data)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let data = load_data(&a.data, &base)?;
    let (data, report) = filter_by_length(&data, a.train.max_tokens)?;
    eprintln!(
        "length filter: kept {}/{} training examples",
        report.after, report.before
    );
    let cfg = a.train.config(a.method.spec(a.seed)?, a.seed);
    let outcome = train_with_hook(&base, &data, &cfg, |rec| {
        let line = serde_json::json!({
            "event": "eval",
            "step": rec.step,
            "epoch": rec.epoch,
            "train_loss": rec.train_loss,
            "dev_loss": rec.dev.loss,
            "dev_accuracy": rec.dev.accuracy,
            "dev_mcc": rec.dev.mcc,
        });
        stdout_line(&line.to_string());
    })?;
    let m = &outcome.metrics;
    outcome.model.artifact()?.save(&a.out)?;
    if let Some(p) = &a.merged {
        checkpoint::save(&outcome.model.merged()?, p)?;
    }
    if let Some(p) = &a.metrics {
        write_json(p, m)?;
    }
    let summary = serde_json::json!({
        "event": "summary",
        "method": m.method,
        "trainable": m.trainable,
        "realized_m": m.realized_m,
        "steps": m.steps,
        "best_step": m.best_step,
        "best_dev_loss": m.best_dev.loss,
        "best_dev_accuracy": m.best_dev.accuracy,
        "stop_reason": m.stop_reason,
        "test": m.test,
    });
    stdout_line(&summary.to_string());
    eprintln!("wall clock: {:.2}s", outcome.wall_clock_secs);
    if m.stop_reason == crate::train::StopReason::NonFinite {
        return Err(Error::Numeric(
            "training hit a non-finite loss; the last good snapshot was saved".into(),
        ));
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let store = match &a.adapter {
        Some(p) => Artifact::load(p, Some(&base))?.apply(&base)?,
        None => base,
    };
    let data = load_data(&a.data, &store)?;
    let split = match a.split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    };
    let m = evaluate_store(&store, split)?;
    stdout_line(&serde_json::to_string(&m)?);
    if let Some(p) = &a.json {
        write_json(p, &m)?;
    }
    Ok(())
}

fn sample_cmd(a: &SampleArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let targets = TargetSet::parse(&a.targets)?;
    let (config, index) = match (a.density, a.budget) {
        (Some(k), None) => {
            let cfg = SparsityConfig::new(k, targets, a.seed);
            let idx = sample_indices(&base, &cfg)?;
            (cfg, idx)
        }
        (None, Some(b)) => {
            let s = sample_for_budget(&base, &targets, b, a.seed, crate::adapter::BUDGET_TOLERANCE)?;
            (s.config, s.index)
        }
        _ => return Err(Error::config("give --density or --budget")),
    };
    let mode = match a.mode {
        ModeArg::Explicit => IndexMode::Explicit,
        ModeArg::SeedDerived => IndexMode::SeedDerived,
    };
    let file = DeltaFile {
        model_fingerprint: base.fingerprint(),
        sparsity: config,
        mode,
        value_dtype: a.dtype.into(),
        delta: SparseDelta::zeros(&index),
        index,
        dense: Vec::new(),
    };
    file.save(&a.out)?;
    let n = base.num_scalars() as u64;
    stdout_line(&format!(
        "sampled m = {} of {} targeted scalars (n = {n}); sparse payload {} bytes",
        file.index.count(),
        base.count_params(&file.sparsity.targets),
        file.sparse_payload_bytes()
    ));
    Ok(())
}

fn merge_cmd(a: &MergeArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let merged = Artifact::load(&a.adapter, Some(&base))?.apply(&base)?;
    checkpoint::save(&merged, &a.out)?;
    stdout_line(&format!(
        "wrote {} (fingerprint {})",
        a.out.display(),
        merged.fingerprint()
    ));
    Ok(())
}

fn rank_cmd(a: &RankArgs) -> Result<()> {
    let pair = CheckpointPair::new(checkpoint::load(&a.pt)?, checkpoint::load(&a.ft)?)?;
    let report = rank_report(&pair, a.tol)?;
    print!("{}", report.render());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn drop_cmd(a: &DropArgs) -> Result<()> {
    let (base, dense_deltas, dense_keep) = match (&a.pt, &a.ft, &a.delta, &a.model) {
        (Some(pt), Some(ft), None, _) => {
            let pair = CheckpointPair::new(checkpoint::load(pt)?, checkpoint::load(ft)?)?;
            let mut sparse = Vec::new();
            let mut dense = Vec::new();
            for (name, ty, d) in pair.dense_delta() {
                match ty {
                    ParamType::Head => dense.push((name.clone(), pair.ft.tensor(&name)?.clone())),
                    ParamType::Embedding => {}
                    _ => sparse.push((name, ty, d)),
                }
            }
            (pair.pt, sparse, dense)
        }
        (None, None, Some(delta), Some(model)) => {
            let base = checkpoint::load(model)?;
            let file = DeltaFile::load(delta, Some(&base))?;
            file.check_base(&base)?;
            let tensors = densify(&file.index, &file.delta)?;
            let sparse = file
                .index
                .entries
                .iter()
                .zip(tensors)
                .map(|(e, t)| {
                    let ty = base.get(&e.name).map(|p| p.param_type).expect("validated");
                    (e.name.clone(), ty, t)
                })
                .collect();
            (base, sparse, file.dense)
        }
        _ => return Err(Error::config("give either --pt and --ft, or --delta and --model")),
    };
    let dropped = random_drop(&dense_deltas, a.p, a.rescale, a.seed)?;
    let total: usize = dense_deltas.iter().map(|(_, _, t)| t.numel()).sum();
    let file = DeltaFile {
        model_fingerprint: base.fingerprint(),
        sparsity: SparsityConfig::new(1.0 - a.p, dropped.targets.clone(), a.seed),
        mode: IndexMode::Explicit,
        value_dtype: a.dtype.into(),
        index: dropped.index,
        delta: dropped.delta,
        dense: dense_keep,
    };
    file.save(&a.out)?;
    stdout_line(&format!(
        "kept {} of {total} delta scalars ({} bytes of indices and values)",
        file.index.count(),
        file.sparse_payload_bytes()
    ));
    Ok(())
}

fn memory_cmd(a: &MemoryArgs) -> Result<()> {
    let mut reports: Vec<MemoryReport> = Vec::new();
    match (a.n, a.density) {
        (Some(n), Some(k)) => {
            let r = memory_report(n, k)?;
            stdout_line(&render_report(&r));
            reports.push(r);
        }
        (None, None) => {}
        _ => return Err(Error::config("--n and --density go together")),
    }
    if !a.table.is_empty() {
        let rows = a
            .table
            .iter()
            .map(|&n| table_row(n, &TABLE_SPARSITIES))
            .collect::<Result<Vec<_>>>()?;
        print!("{}", render_table(&rows));
    }
    if reports.is_empty() && a.table.is_empty() {
        return Err(Error::config("give --n and --density, or --table"));
    }
    if let Some(p) = &a.json {
        write_json(p, &reports)?;
    }
    Ok(())
}

fn render_report(r: &MemoryReport) -> String {
    use crate::memory::gb;
    let savings = match r.savings_fraction {
        Some(s) => format!("{:.1}%", s * 100.0),
        None => "none".into(),
    };
    format!(
        "n={} k={} s={:.2}%  full-ft {:.1} GB  sparta {:.1} GB  savings {}  adapter {:.1} GB  storage {:.1} GB",
        r.n,
        r.density,
        r.sparsity * 100.0,
        gb(r.fullft_train_bytes),
        gb(r.sparta_train_bytes),
        savings,
        gb(r.extra_adapter_bytes),
        gb(r.storage_bytes)
    )
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let data = load_data(&a.data, &base)?;
    let (data, _) = filter_by_length(&data, a.train.max_tokens)?;
    let sets = match &a.sets {
        Some(s) => s
            .split(';')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|x| Ok((x.to_string(), TargetSet::parse(x)?)))
            .collect::<Result<Vec<_>>>()?,
        None => ablation_target_sets(),
    };
    let cfg = a.train.config(AdapterSpec::HeadOnly, 0);
    let table = ablate_targets(&base, &data, a.budget, &sets, &cfg, &a.seeds)?;
    print!("{}", table.render());
    if let Some(p) = &a.out {
        write_json(p, &table)?;
    }
    Ok(())
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let base = checkpoint::load(&a.model)?;
    let data = load_data(&a.data, &base)?;
    let (data, _) = filter_by_length(&data, a.train.max_tokens)?;
    let seed = a.seeds.first().copied().unwrap_or(0);
    let cfg = a.train.config(a.method.spec(seed)?, seed);
    // Each run gets its own model instance; check the spec once up front.
    AdaptedModel::new(&base, &cfg.adapter)?;
    let grid = SweepGrid {
        learning_rates: a.lrs.clone(),
        seeds: a.seeds.clone(),
    };
    let result = sweep(&base, &data, &cfg, &grid)?;
    for p in &result.points {
        stdout_line(&serde_json::to_string(p)?);
    }
    stdout_line(&format!("best lr {}", result.best_lr));
    if let Some(p) = &a.out {
        write_json(p, &result)?;
    }
    Ok(())
}
