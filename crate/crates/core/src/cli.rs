//! The `bcpred` command line.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 internal.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{ConfigError, RunConfig};
use crate::corpus::{
    self, BcCategory, BcInstance, ContinuerLexicon, CorpusError, ListenerRegistry, SpeakerRow, SplitName, SplitSpec,
    TranscriptSource,
};
use crate::dsp::{self, DspError};
use crate::features::{self, FeatureCache, FeatureError, InputLayout};
use crate::model::checkpoint::{self, CheckpointError};
use crate::model::{predict, Example, ModelError};
use crate::nn::OptimizerKind;
use crate::synthetic::{self, SyntheticSpec};
use crate::textfeat::{self, EmbeddingTable, TextError};
use crate::train::{self, LabeledExample, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

pub const LABELED_FILE: &str = "labeled.jsonl";
pub const LISTENERS_FILE: &str = "listeners.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(m: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: m.into() }
    }
    fn data(m: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: m.into() }
    }
    fn internal(m: impl Into<String>) -> Self {
        Self { code: EXIT_INTERNAL, message: m.into() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data(e.to_string())
            }
        }
    )*};
}
data_errors!(CorpusError, FeatureError, DspError, TextError, CheckpointError, serde_json::Error);

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::usage(e.to_string()),
            ModelError::ListenerOutOfRange { .. } => CliError::data(e.to_string()),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptySplit(_) | TrainError::FeatureShapeMismatch(_) => CliError::data(e.to_string()),
            TrainError::InvalidConfig(_) => CliError::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Nn(_) => CliError::internal(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "bcpred", version, about = "Backchannel prediction: annotate, extract features, train, evaluate, predict")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Label manifest rows and assign listener ids.
    Annotate(AnnotateArgs),
    /// Extract and cache lexical and acoustic features.
    Features(FeaturesArgs),
    /// Train a model on cached features.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict the class of a single anchor.
    Predict(PredictArgs),
    /// Write a small synthetic corpus.
    #[command(hide = true)]
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TranscriptChoice {
    Manual,
    Automatic,
}

impl From<TranscriptChoice> for TranscriptSource {
    fn from(c: TranscriptChoice) -> Self {
        match c {
            TranscriptChoice::Manual => TranscriptSource::Manual,
            TranscriptChoice::Automatic => TranscriptSource::Automatic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerChoice {
    Sgd,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `conversation_id,channel,speaker_key` table. Without it every
    /// channel is its own listener.
    #[arg(long)]
    pub speakers: Option<PathBuf>,
    /// Continuer lexicon; the built-in one by default.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Conversation id lists; checked for overlap and summarized.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"])]
    pub splits: Option<Vec<PathBuf>>,
    /// Fail on the first malformed row or unregistered listener.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// `labeled.jsonl` written by `annotate`.
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// Directory holding `manual/` and `automatic/` transcript folders.
    #[arg(long)]
    pub transcript_dir: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Only instances with this transcript source.
    #[arg(long, value_enum)]
    pub transcripts: Option<TranscriptChoice>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub no_lexical: bool,
    #[arg(long)]
    pub no_acoustic: bool,
    #[arg(long)]
    pub no_listener: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    /// Listener registry; defaults to `listeners.json` next to `--labeled`.
    #[arg(long)]
    pub listeners: Option<PathBuf>,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"], required = true)]
    pub splits: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub transcripts: Option<TranscriptChoice>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub ablation: AblationArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerChoice>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub labeled: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VALID", "TEST"], required = true)]
    pub splits: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: SplitName,
    #[arg(long, value_enum)]
    pub transcripts: Option<TranscriptChoice>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate even if the cache and checkpoint feature hashes differ.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frontchannel recording.
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub anchor_ms: u64,
    /// Frontchannel transcript (`{token, end_ms}` JSON lines).
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Listener channel as `conversation:channel`.
    #[arg(long)]
    pub listener: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub conversations: usize,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
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
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    let run = || -> Result<()> {
        match cli.command {
            Command::Annotate(a) => annotate(&a, config),
            Command::Features(a) => extract_features(&a, config),
            Command::Train(a) => train_cmd(&a, config),
            Command::Eval(a) => eval_cmd(&a),
            Command::Predict(a) => predict_cmd(&a),
            Command::Synth(a) => synth(&a, cli.seed),
        }
    };
    match cli.jobs {
        Some(0) => Err(CliError::usage("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::internal(e.to_string()))?
            .install(run),
        None => run(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn read_splits(paths: &[PathBuf]) -> Result<SplitSpec> {
    match paths {
        [t, v, e] => Ok(SplitSpec::read(t, v, e)?),
        _ => Err(CliError::usage("--splits takes exactly three files")),
    }
}

pub fn read_labeled(path: &Path) -> Result<Vec<BcInstance>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = serde_json::from_str(&line)
            .map_err(|e| CliError::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

fn read_registry(path: &Path) -> Result<ListenerRegistry> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

fn filter_source(instances: Vec<BcInstance>, choice: Option<TranscriptChoice>) -> Vec<BcInstance> {
    match choice {
        Some(c) => {
            let source = TranscriptSource::from(c);
            instances.into_iter().filter(|i| i.transcript_source == source).collect()
        }
        None => instances,
    }
}

fn class_map(counts: [usize; 3]) -> BTreeMap<&'static str, usize> {
    BcCategory::ALL.iter().map(|c| (c.label(), counts[c.index()])).collect()
}

fn annotate(args: &AnnotateArgs, config: RunConfig) -> Result<()> {
    let config = config.resolve()?;
    let strict = args.strict || config.corpus.strict;
    let lexicon = match &args.lexicon {
        Some(p) => ContinuerLexicon::load(p)?,
        None => ContinuerLexicon::default(),
    };
    let rows = corpus::read_manifest(&args.manifest)?;
    let speaker_rows = match &args.speakers {
        Some(p) => corpus::read_speaker_table(p)?,
        None => {
            let mut rows: Vec<SpeakerRow> = rows
                .iter()
                .filter_map(|r| r.parsed.as_ref().ok())
                .map(|r| SpeakerRow { conversation_id: r.conversation_id.clone(), channel: r.channel.opposite(), speaker_key: None })
                .collect();
            rows.dedup();
            rows
        }
    };
    let registry = corpus::assign_listener_ids(&speaker_rows, config.corpus.speaker_seed);
    let outcome = corpus::build_instances(&rows, &lexicon, &registry, strict)?;
    for (line, reason) in &outcome.malformed {
        log::warn!("{}:{line}: skipped: {reason}", args.manifest.display());
    }

    let mut summary = json!({
        "instances": outcome.instances.len(),
        "class_counts": class_map(corpus::class_counts(&outcome.instances)),
        "malformed_rows": outcome.malformed.len(),
        "unknown_listeners": outcome.unknown_listeners,
        "listeners": registry.count(),
        "config_hash": config.hash(),
    });
    if let Some(paths) = &args.splits {
        let split = corpus::split_dataset(&outcome.instances, &read_splits(paths)?)?;
        let mut per_split = serde_json::Map::new();
        for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
            let part = split.get(name);
            per_split.insert(
                format!("{name:?}").to_lowercase(),
                json!({ "instances": part.len(), "class_counts": class_map(corpus::class_counts(part)) }),
            );
        }
        per_split.insert("dropped".into(), json!(split.dropped));
        summary["splits"] = serde_json::Value::Object(per_split);
    }

    create_dir(&args.out)?;
    let mut labeled = String::new();
    for inst in &outcome.instances {
        labeled.push_str(&serde_json::to_string(inst)?);
        labeled.push('\n');
    }
    write_file(&args.out.join(LABELED_FILE), labeled)?;
    write_file(&args.out.join(LISTENERS_FILE), serde_json::to_string_pretty(&registry)?)?;
    let summary_text = serde_json::to_string_pretty(&summary)?;
    write_file(&args.out.join("summary.json"), &summary_text)?;
    println!("{summary_text}");
    Ok(())
}

fn extract_features(args: &FeaturesArgs, config: RunConfig) -> Result<()> {
    let config = config.resolve()?;
    let instances = filter_source(read_labeled(&args.labeled)?, args.transcripts);
    let table = EmbeddingTable::load(&args.embeddings, config.features.unk_seed)?;
    let spec = config.feature_spec(features::file_sha256(&args.embeddings)?);
    let cache = FeatureCache::create(&args.out, spec, table.dim())?;
    let layout = InputLayout { audio_dir: args.audio_dir.clone(), transcript_dir: args.transcript_dir.clone() };
    let stats = cache.fill(&instances, &layout, &table)?;
    println!(
        "{}",
        json!({ "written": stats.written, "skipped": stats.skipped, "feature_hash": cache.index().feature_hash })
    );
    Ok(())
}

fn load_examples(cache: &FeatureCache, instances: &[BcInstance]) -> Result<Vec<LabeledExample>> {
    instances
        .par_iter()
        .map(|inst| {
            let (lex, ac) = cache.load(inst)?;
            Ok(LabeledExample { grid: lex.data, acoustic: ac.data, listener: inst.listener_id, target: inst.category })
        })
        .collect()
}

fn train_cmd(args: &TrainArgs, mut config: RunConfig) -> Result<()> {
    let t = &mut config.train;
    if let Some(v) = args.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.patience {
        t.early_stop_patience = v;
    }
    if let Some(v) = args.optimizer {
        t.optimizer = match v {
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
            OptimizerChoice::Adaptive => OptimizerKind::Adaptive,
        };
    }
    let m = &mut config.model;
    m.use_lexical &= !args.ablation.no_lexical;
    m.use_acoustic &= !args.ablation.no_acoustic;
    m.use_listener &= !args.ablation.no_listener;

    let cache = FeatureCache::open(&args.cache)?;
    let listeners_path = args
        .listeners
        .clone()
        .unwrap_or_else(|| args.labeled.with_file_name(LISTENERS_FILE));
    let registry = read_registry(&listeners_path)?;
    config.model.lexical.word_dim = cache.index().word_dim;
    config.model.listener.count = registry.count();
    let config = config.resolve()?;
    let expected = config.feature_spec(cache.index().spec.embeddings_sha256.clone());
    cache.check_hash(&expected.hash()).map_err(|e| {
        CliError::data(format!("{e}; the cache was built with different feature settings than this run"))
    })?;

    let instances = filter_source(read_labeled(&args.labeled)?, args.transcripts);
    let split = corpus::split_dataset(&instances, &read_splits(&args.splits)?)?;
    let train_set = load_examples(&cache, &split.train)?;
    let val_set = load_examples(&cache, &split.validation)?;
    let outcome = train::train(&train_set, &val_set, &config.train, &config.model)?;

    create_dir(&args.out)?;
    let mut meta = BTreeMap::new();
    meta.insert("config_hash".to_string(), config.hash());
    meta.insert("run_config".to_string(), config.canonical_json());
    meta.insert("features_hash".to_string(), cache.index().feature_hash.clone());
    meta.insert("listeners".to_string(), serde_json::to_string(&registry)?);
    checkpoint::save(&args.out.join("best.bcck"), &outcome.best, &meta, None)?;
    checkpoint::save(&args.out.join("last.bcck"), &outcome.last, &meta, Some(&outcome.optimizer))?;
    write_file(&args.out.join("history.csv"), outcome.history.to_csv())?;
    write_file(&args.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    let best = outcome.history.best().copied().ok_or_else(|| CliError::internal("no epochs were run"))?;
    println!(
        "{}",
        json!({
            "epochs": outcome.history.epochs.len(),
            "best_epoch": best.epoch,
            "best_val_acc": best.val_acc,
            "config_hash": config.hash(),
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    split: SplitName,
    checkpoint: String,
    config_hash: &'a str,
    features_hash: &'a str,
    #[serde(flatten)]
    report: &'a train::EvalReport,
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::data(format!("{}: {e}", args.checkpoint.display())))?;
    let cache = FeatureCache::open(&args.cache)?;
    let ck_hash = ck.metadata.get("features_hash").map(String::as_str).unwrap_or("");
    if ck_hash != cache.index().feature_hash {
        let msg = format!(
            "checkpoint features hash {ck_hash:?} does not match cache hash {:?}",
            cache.index().feature_hash
        );
        if !args.force {
            return Err(CliError::data(format!("{msg} (use --force to evaluate anyway)")));
        }
        log::warn!("{msg}");
    }
    let instances = filter_source(read_labeled(&args.labeled)?, args.transcripts);
    let split = corpus::split_dataset(&instances, &read_splits(&args.splits)?)?;
    let examples = load_examples(&cache, split.get(args.split))?;
    let report = train::evaluate(&ck.model, &examples)?;

    create_dir(&args.out)?;
    let file = ReportFile {
        split: args.split,
        checkpoint: args.checkpoint.display().to_string(),
        config_hash: ck.metadata.get("config_hash").map(String::as_str).unwrap_or(""),
        features_hash: &cache.index().feature_hash,
        report: &report,
    };
    write_file(&args.out.join("report.json"), serde_json::to_string_pretty(&file)?)?;
    let text = report.to_text();
    write_file(&args.out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn predict_cmd(args: &PredictArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)
        .map_err(|e| CliError::data(format!("{}: {e}", args.checkpoint.display())))?;
    let run_config: RunConfig = match ck.metadata.get("run_config") {
        Some(text) => serde_json::from_str(text)?,
        None => RunConfig { model: ck.model.config.clone(), ..Default::default() },
    };
    let model_config = &ck.model.config;
    let table = EmbeddingTable::load(&args.embeddings, run_config.features.unk_seed)?;
    if let Some(expected) = ck.metadata.get("features_hash") {
        let spec = run_config.feature_spec(features::file_sha256(&args.embeddings)?);
        if &spec.hash() != expected {
            log::warn!("embeddings or feature settings differ from those the checkpoint was trained with");
        }
    }

    let wave = dsp::read_wav(&args.audio).map_err(|e| CliError::data(format!("{}: {e}", args.audio.display())))?;
    let window = dsp::extract_window(&wave, args.anchor_ms, model_config.acoustic.window_ms)?;
    let acoustic = dsp::extract(&window, &model_config.acoustic.frame, model_config.acoustic.feature_kind)?;
    let words = textfeat::read_transcript(&args.transcript)?;
    let tokens = textfeat::lexical_window(&words, args.anchor_ms, model_config.lexical.n_words);
    let grid = textfeat::build_grid(&tokens, &table, model_config.lexical.n_words);

    let registry: Option<ListenerRegistry> = match ck.metadata.get("listeners") {
        Some(text) => Some(serde_json::from_str(text)?),
        None => None,
    };
    let unk = model_config.listener.count;
    let listener = match (&args.listener, &registry) {
        (Some(key), Some(reg)) => reg.get_key(key).unwrap_or_else(|| {
            log::warn!("unknown listener {key}; using the unknown-listener embedding");
            unk
        }),
        (Some(key), None) => {
            log::warn!("checkpoint has no listener table; using the unknown-listener embedding for {key}");
            unk
        }
        (None, _) => unk,
    };

    let example = Example { grid: &grid.data, acoustic: &acoustic.data, listener };
    let probs = ck.model.predict_proba(&example)?;
    let line = json!({ "class": predict(&probs).label(), "probs": probs });
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{line}").map_err(|e| CliError::internal(e.to_string()))?;
    Ok(())
}

fn synth(args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = SyntheticSpec { conversations: args.conversations, ..Default::default() };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.train_conversations = spec.train_conversations.min(args.conversations * 2 / 3);
    spec.validation_conversations = spec.validation_conversations.min(args.conversations / 6);
    let summary = synthetic::generate(&args.out, &spec).map_err(io_err(&args.out))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
