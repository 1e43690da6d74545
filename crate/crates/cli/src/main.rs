mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use defemb_core::evalkit::{Init, Metric, ReportFormat};
use defemb_core::model::{Architecture, Precision};
use defemb_core::pipeline::Strategy;
use defemb_core::prompts::CorruptionMode;

#[derive(Debug, Parser)]
#[command(name = "defemb", version, about = "Token-embedding geometry and definition-embedding runs")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Flat `key = value` file; flags on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Parent of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub run_dir: PathBuf,
    /// Run directory name; defaults to the subcommand name.
    #[arg(long, global = true)]
    pub name: Option<String>,
    /// Falls back to DEFEMB_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ArchArg {
    Encoder,
    EncoderDecoder,
}

impl From<ArchArg> for Architecture {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Encoder => Architecture::Encoder,
            ArchArg::EncoderDecoder => Architecture::EncoderDecoder,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Bert,
    T5,
}

impl From<ModeArg> for CorruptionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bert => CorruptionMode::Bert,
            ModeArg::T5 => CorruptionMode::T5,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhaseArg {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StrategyArg {
    Last,
    Random,
    Top,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Last => Strategy::Last,
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Top => Strategy::Top,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Dot,
    Cosine,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Dot => Metric::Dot,
            MetricArg::Cosine => Metric::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Scratch,
    Pretrained,
}

impl From<InitArg> for Init {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Scratch => Init::Scratch,
            InitArg::Pretrained => Init::Pretrained,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
    SvgScatter,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::SvgScatter => ReportFormat::SvgScatter,
        }
    }
}

/// Optional inputs that define frequency groups.
#[derive(Debug, Args)]
pub struct GroupArgs {
    /// Pretraining count table (JSONL) from `tokenizer-train`.
    #[arg(long)]
    pub counts: Option<String>,
    /// Downstream text whose tokens are the appearing ones.
    #[arg(long)]
    pub task_corpus: Option<String>,
    #[arg(long)]
    pub tokenizer: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Base rate of the inverse-sqrt schedule; the peak is lr / sqrt(warmup).
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a byte-level BPE tokenizer and count its tokens in the corpus.
    TokenizerTrain {
        /// Text file, or `@toy` for the bundled corpus.
        #[arg(long, default_value = "@toy")]
        corpus: String,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long, default_value_t = 4)]
        sentinels: usize,
    },
    /// Pretrain a toy language model.
    Pretrain {
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value = "@toy")]
        corpus: String,
        #[arg(long, value_enum, default_value_t = ArchArg::Encoder)]
        arch: ArchArg,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        ffn_dim: usize,
        #[arg(long, default_value_t = 128)]
        max_seq_len: usize,
        #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
        precision: PrecisionArg,
        #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
        tie_weights: bool,
        #[arg(long, default_value_t = 0.15)]
        mask_prob: f64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Build full and corrupted definition prompts.
    PromptsBuild {
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value = "@toy")]
        defs: String,
        #[arg(long, value_enum, default_value_t = ModeArg::Bert)]
        mode: ModeArg,
        #[arg(long, value_enum, default_value_t = PhaseArg::Train)]
        phase: PhaseArg,
    },
    /// Train the definition mimic model from a pretrained checkpoint.
    MimicTrain {
        #[arg(long)]
        plm: String,
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value = "@toy")]
        defs: String,
        /// Defaults to frozen for encoder-decoder models only.
        #[arg(long, action = clap::ArgAction::Set)]
        freeze_embeddings: Option<bool>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.25)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        warmup: u64,
    },
    /// Definition embeddings for every word-slot token.
    Reconstruct {
        #[arg(long)]
        defemb: String,
        #[arg(long)]
        tokenizer: String,
        #[arg(long, default_value = "@toy")]
        defs: String,
    },
    /// Choose which task tokens get their embeddings replaced.
    Plan {
        #[arg(long)]
        tokenizer: String,
        #[arg(long)]
        counts: String,
        #[arg(long, default_value = "@toy")]
        task_corpus: String,
        /// Percentage of the vocabulary.
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = StrategyArg::Last)]
        strategy: StrategyArg,
        #[arg(long, default_value_t = defemb_core::pipeline::TOP_MIN_INDEX)]
        top_min_index: usize,
        #[arg(long, action = clap::ArgAction::Set, default_value_t = false)]
        backfill: bool,
        #[arg(long, action = clap::ArgAction::Set, default_value_t = false)]
        count_after_exclusions: bool,
        /// Tokens without a reconstruction in this file are excluded.
        #[arg(long)]
        reconstructions: Option<String>,
        /// Ids replaced earlier in the session.
        #[arg(long)]
        lock: Option<String>,
    },
    /// Overwrite planned rows with their definition embeddings.
    Apply {
        #[arg(long)]
        emb: String,
        #[arg(long)]
        plan: String,
        #[arg(long)]
        reconstructions: String,
        #[arg(long)]
        lock: Option<String>,
    },
    /// Isotropy per frequency group and overall.
    Isotropy {
        #[arg(long)]
        emb: String,
        #[command(flatten)]
        groups: GroupArgs,
    },
    /// Remove the mean and the top principal directions.
    Deldirection {
        #[arg(long)]
        emb: String,
        /// Defaults to max(1, h_e / 100).
        #[arg(long)]
        beta: Option<usize>,
    },
    /// Two-dimensional SVD projection.
    Project {
        #[arg(long)]
        emb: String,
        #[command(flatten)]
        groups: GroupArgs,
    },
    /// Spearman correlation on a word-similarity dataset.
    Wordsim {
        #[arg(long)]
        emb: String,
        #[arg(long)]
        tokenizer: String,
        /// TSV file, or `@toy`.
        #[arg(long, default_value = "@toy")]
        dataset: String,
        #[arg(long, value_enum, default_value_t = MetricArg::Dot)]
        metric: MetricArg,
    },
    /// Distribution of per-token MSE between two embedding files.
    MseDist {
        #[arg(long)]
        pre: String,
        #[arg(long)]
        def: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.0001,0.0003,0.001,0.003,0.01,0.03,0.1")]
        bins: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,100,200,300,400,500")]
        bands: Vec<usize>,
        /// Count table; bands then use pretraining ranks instead of ids.
        #[arg(long)]
        counts: Option<String>,
    },
    /// Two-layer probe on final hidden states of single words.
    Probe {
        #[arg(long)]
        model: String,
        #[arg(long)]
        tokenizer: String,
        /// One word per line, or `@toy`; labels come from the word itself.
        #[arg(long, default_value = "@toy")]
        words: String,
        #[arg(long, default_value_t = 0.3)]
        test_fraction: f64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        hidden: usize,
    },
    /// Embedding geometry while training on a Zipfian corpus.
    Dynamics {
        /// Defaults to byte tokens only.
        #[arg(long)]
        tokenizer: Option<String>,
        #[arg(long, value_enum, default_value_t = InitArg::Scratch)]
        init: InitArg,
        #[arg(long, action = clap::ArgAction::Set, default_value_t = true)]
        weight_tying: bool,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 500)]
        snapshot_every: usize,
        #[arg(long, default_value_t = 3000)]
        pretrain_steps: usize,
        #[arg(long, default_value_t = 1.1)]
        exponent: f64,
        #[arg(long, default_value_t = 100)]
        task_types: usize,
        #[arg(long, default_value_t = 2000)]
        pretrain_sequences: usize,
        #[arg(long, default_value_t = 1000)]
        task_sequences: usize,
        #[arg(long, default_value_t = 16)]
        seq_len: usize,
        #[arg(long, default_value_t = 32)]
        embed_dim: usize,
        #[arg(long, default_value_t = 32)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// Re-emit a CSV report from an earlier run in another format.
    Report {
        #[arg(long)]
        input: String,
        #[arg(long, value_enum)]
        format: FormatArg,
    },
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::TokenizerTrain { .. } => "tokenizer-train",
            Cmd::Pretrain { .. } => "pretrain",
            Cmd::PromptsBuild { .. } => "prompts-build",
            Cmd::MimicTrain { .. } => "mimic-train",
            Cmd::Reconstruct { .. } => "reconstruct",
            Cmd::Plan { .. } => "plan",
            Cmd::Apply { .. } => "apply",
            Cmd::Isotropy { .. } => "isotropy",
            Cmd::Deldirection { .. } => "deldirection",
            Cmd::Project { .. } => "project",
            Cmd::Wordsim { .. } => "wordsim",
            Cmd::MseDist { .. } => "mse-dist",
            Cmd::Probe { .. } => "probe",
            Cmd::Dynamics { .. } => "dynamics",
            Cmd::Report { .. } => "report",
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
    eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg }));
    ExitCode::from(2)
}

/// Help and version requests exit 0; anything else is a usage error.
fn clap_exit(e: clap::Error) -> ExitCode {
    let _ = e.print();
    if !e.use_stderr() {
        return ExitCode::SUCCESS;
    }
    let msg = e.kind().as_str().map_or_else(|| e.to_string(), str::to_string);
    eprintln!("{}", serde_json::json!({ "error": "usage", "message": msg }));
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let root = Cli::command();
    // Required values may come from the config file, so the first pass only
    // needs to locate it.
    let names: Vec<String> = root.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let relaxed = names.iter().fold(root.clone(), |c, n| {
        c.mut_subcommand(n, |s| s.mut_args(|a| a.required(false)))
    });
    let first = match relaxed.try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => return clap_exit(e),
    };
    let mut full = argv.clone();
    let matches = first;
    let seed_on_cli = matches!(
        matches.value_source("seed"),
        Some(clap::parser::ValueSource::CommandLine)
    );
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage_error(&format!("cannot read config {}: {e}", path.display())),
        };
        let config_pairs = match config::parse_config(&text) {
            Ok(p) => p,
            Err(e) => return usage_error(&e.to_string()),
        };
        let (sub, sub_m) = matches.subcommand().expect("subcommand required");
        match config::injected_args(&root, sub, &matches, sub_m, &config_pairs) {
            Ok(extra) => full.extend(extra),
            Err(e) => return usage_error(&e.to_string()),
        }
    }
    let matches = match root.clone().try_get_matches_from(&full) {
        Ok(m) => m,
        Err(e) => return clap_exit(e),
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return clap_exit(e),
    };
    let (sub_name, sub_m) = matches.subcommand().expect("subcommand required");
    let effective = config::effective(root.find_subcommand(sub_name).expect("known subcommand"), sub_m);

    let (seed, seed_source) = match cli.global.seed {
        Some(s) if seed_on_cli => (s, "flag"),
        Some(s) => (s, "config"),
        None => match std::env::var("DEFEMB_SEED") {
            Ok(v) => match v.trim().parse::<u64>() {
                Ok(s) => (s, "env"),
                Err(_) => return usage_error(&format!("DEFEMB_SEED={v:?} is not an unsigned integer")),
            },
            Err(_) => (0, "default"),
        },
    };
    let name = cli.global.name.clone().unwrap_or_else(|| cli.command.name().to_string());
    if name.is_empty() || name.contains(['/', '\\']) || name == ".." {
        return usage_error(&format!("invalid run name {name:?}"));
    }
    let dir = cli.global.run_dir.join(&name);
    let m = manifest::Manifest {
        command: cli.command.name().into(),
        name,
        seed,
        seed_source: seed_source.into(),
        config: effective,
        inputs: Vec::new(),
        outputs: Vec::new(),
        results: serde_json::json!({}),
    };
    let run = match manifest::Run::new(dir.clone(), m) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": "io", "message": format!("{e:#}") }));
            return ExitCode::from(1);
        }
    };
    match commands::execute(&cli.command, run, seed) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = match e.downcast_ref::<defemb_core::Error>() {
                Some(defemb_core::Error::Io { .. }) => "io",
                Some(defemb_core::Error::Diverged { .. }) => "diverged",
                Some(_) => "core",
                None => "runtime",
            };
            let msg = format!("{e:#}");
            manifest::write_error_record(&dir, kind, &msg);
            eprintln!("{}", serde_json::json!({ "error": kind, "message": msg }));
            ExitCode::from(1)
        }
    }
}
