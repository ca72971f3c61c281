//! The `pg` command line. Exit codes: 0 success, 1 validation error,
//! 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::deid::{apply_policy, audit_phi, DeidPolicy, PatientKey, UidMapLog};
use crate::dicom::json::{parse_dicom_json, serialize_dicom_json_pretty};
use crate::dicom::{extract_protocol_header, read_part10_file, DataSet, FieldSchema, ProtocolHeader, Tag};
use crate::genome::{tokenize, GenomeVocab, VocabConfig};
use crate::model::{FileProvider, ImageFeatureProvider, ProtocolModel, VocabLayout};
use crate::numeric::{load_checkpoint, save_checkpoint};
use crate::pacs::{ClientConfig, PhiGate, QidoClient, QidoQuery, QueryLevel};
use crate::stats::{
    drift_alert, evaluate, key_histograms, protocol_sensitivity, psi, read_predictions_csv, subgroup_report,
    write_predictions_csv, write_reliability_csv, write_roc_csv, DriftThresholds, MetricsReport, PredictionRecord,
    ReportOptions, SUBGROUP_KEYS,
};
use crate::synth::{read_tree, CorpusSpec, TreeSeries};
use crate::trainer::{
    corpus_hash, evaluate_site_heldout, finetune, predict, prediction_records, pretrain, tree_records, tree_vocab,
    write_ndjson, RunConfig, RunManifest, StudyRecord, TrainError,
};

mod card;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InsufficientStudies { .. }
            | TrainError::LabelSpaceMismatch(_)
            | TrainError::SingleSiteCorpus
            | TrainError::InvalidConfig(_)
            | TrainError::InvalidRecord(_) => invalid(e),
            _ => runtime(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "pg", version, about = "Protocol genome pipeline")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search a DICOMweb endpoint and store the headers.
    Fetch(FetchArgs),
    /// Apply a de-identification policy to DICOM files.
    Deid(DeidArgs),
    /// Report PHI left in DICOM files.
    Audit(AuditArgs),
    /// Vocabulary commands.
    Vocab {
        #[command(subcommand)]
        command: VocabCommand,
    },
    /// Print the token sequence of one header.
    Tokenize(TokenizeArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
    /// Self-supervised pretraining.
    Pretrain(TrainArgs),
    /// Supervised finetuning from a pretrained checkpoint.
    Finetune(TrainArgs),
    /// Metrics from predictions or a model.
    Eval(EvalArgs),
    /// Compare two reports for drift.
    Monitor(MonitorArgs),
    /// Counterfactual header-field sensitivity.
    Sensitivity(SensitivityArgs),
    /// Tables, curves and a model card from predictions.
    Report(ReportArgs),
}

#[derive(Subcommand, Debug)]
pub enum VocabCommand {
    Build(VocabBuildArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LevelArg {
    Studies,
    Series,
}

#[derive(Args, Debug)]
pub struct FetchArgs {
    #[arg(long)]
    pub base: String,
    #[arg(long, value_enum, default_value = "studies")]
    pub level: LevelArg,
    /// Match filter ATTRIBUTE=VALUE; attribute is a keyword or 8-digit tag.
    #[arg(long = "filter")]
    pub filters: Vec<String>,
    #[arg(long = "include")]
    pub include: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub limit: usize,
    #[arg(long, default_value_t = 10_000)]
    pub max_total: usize,
    #[arg(long, default_value_t = 30)]
    pub timeout_secs: u64,
    /// De-identify with this key file before anything is stored.
    #[arg(long)]
    pub secret_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DeidArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub secret_file: PathBuf,
    /// Policy JSON; the default profile otherwise.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct VocabBuildArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary options, TOML or JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TokenizeArgs {
    /// A DICOM-JSON object or a Part 10 file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Corpus directory with manifest.csv and features.json.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained checkpoint (finetune only).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Rerun from an earlier run's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predictions CSV.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Subgroup keys, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub by: Vec<String>,
    /// Corpus directory, when scoring a model.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Finetuned checkpoint to score, or the pretrained one with --site-heldout.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Leave-one-site-out finetuning and evaluation.
    #[arg(long)]
    pub site_heldout: bool,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MonitorArgs {
    /// Report JSON or predictions CSV.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub current: PathBuf,
    /// Thresholds, TOML or JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SensitivityArgs {
    /// Header as DICOM-JSON or Part 10.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// features.json holding the item.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub item: String,
    #[arg(long)]
    pub field: String,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest of the run that produced the predictions.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub by: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    match dispatch(cli.command, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            let kind = match e {
                CliError::Validation(_) => "validation",
                CliError::Runtime(_) => "runtime",
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": e.to_string() }));
            e.code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Runs one command, writing its standard output to `out`.
pub fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Fetch(a) => fetch(a, out),
        Command::Deid(a) => deid(a, out),
        Command::Audit(a) => audit(a, out),
        Command::Vocab {
            command: VocabCommand::Build(a),
        } => vocab_build(a),
        Command::Tokenize(a) => tokenize_cmd(a, out),
        Command::Synth(a) => synth(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a, out),
        Command::Monitor(a) => monitor(a, out),
        Command::Sensitivity(a) => sensitivity(a, out),
        Command::Report(a) => report(a),
    }
}

fn read_text(p: &Path) -> CliResult<String> {
    fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn read_bytes(p: &Path) -> CliResult<Vec<u8>> {
    fs::read(p).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(p: &Path) -> CliResult<T> {
    let text = read_text(p)?;
    let is_json = p.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
    } else {
        toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
    }
}

fn run_config(p: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = match p {
        Some(p) => RunConfig::load(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(p: &Path) -> String {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v).expect("value serializes") + "\n")?;
    Ok(())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    corpus: String,
    inputs: &[(&str, &Path)],
) -> CliResult<RunManifest> {
    let mut m = RunManifest::new(command, cfg, corpus);
    for (k, p) in inputs {
        m.inputs.insert((*k).to_string(), absolute(p));
    }
    write_json(&dir.join("manifest.json"), &m)?;
    Ok(m)
}

fn sha256_hex(parts: impl IntoIterator<Item = impl AsRef<[u8]>>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref());
    }
    hex::encode(h.finalize())
}

/// DICOM files under `path`, sorted: `.dcm` as Part 10, `.json` as DICOM-JSON.
fn dicom_files(path: &Path) -> CliResult<Vec<PathBuf>> {
    if !path.exists() {
        return Err(invalid(format!("{} does not exist", path.display())));
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for e in fs::read_dir(&p)? {
                stack.push(e?.path());
            }
        } else if p.extension().is_some_and(|e| e == "dcm" || e == "json") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// `None` for JSON files that are not a DICOM-JSON object.
fn read_dataset(p: &Path) -> CliResult<Option<DataSet>> {
    if p.extension().is_some_and(|e| e == "dcm") {
        return read_part10_file(p)?
            .map(Some)
            .map_err(|e| invalid(format!("{}: {e}", p.display())));
    }
    Ok(parse_dicom_json(&read_text(p)?).ok())
}

fn read_header(p: &Path) -> CliResult<ProtocolHeader> {
    let ds = read_dataset(p)?.ok_or_else(|| invalid(format!("{}: not a DICOM data set", p.display())))?;
    Ok(extract_protocol_header(&ds, &FieldSchema::default()))
}

fn read_secret(p: &Path) -> CliResult<Vec<u8>> {
    let s = read_bytes(p)?;
    let trimmed = s.trim_ascii().to_vec();
    if trimmed.len() < 16 {
        return Err(invalid("secret must be at least 16 bytes"));
    }
    Ok(trimmed)
}

fn load_policy(p: Option<&Path>) -> CliResult<DeidPolicy> {
    match p {
        Some(p) => DeidPolicy::from_json(&read_text(p)?).map_err(invalid),
        None => Ok(DeidPolicy::default_profile(&FieldSchema::default())),
    }
}

fn fetch(a: FetchArgs, out: &mut dyn Write) -> CliResult {
    let level = match a.level {
        LevelArg::Studies => QueryLevel::Studies,
        LevelArg::Series => QueryLevel::Series,
    };
    let mut q = QidoQuery::new(&a.base, level);
    q.limit = a.limit;
    for f in &a.filters {
        let (k, v) = f.split_once('=').ok_or_else(|| invalid(format!("filter {f:?} is not ATTRIBUTE=VALUE")))?;
        q = q.filter(k, v).map_err(invalid)?;
    }
    for i in &a.include {
        q = q.include(i).map_err(invalid)?;
    }
    let gate = match &a.secret_file {
        Some(p) => PhiGate::Deidentify {
            policy: load_policy(None)?,
            secret: read_secret(p)?,
            uid_log: Some(a.out.join("uidmap.ndjson")),
        },
        None => PhiGate::Reject,
    };
    let cfg = ClientConfig {
        timeout: Duration::from_secs(a.timeout_secs),
        max_total: a.max_total,
        access_log: Some(a.out.join("access.ndjson")),
        gate,
        ..ClientConfig::default()
    };
    q.validate(cfg.max_limit).map_err(invalid)?;
    fs::create_dir_all(&a.out)?;
    let client = QidoClient::new(cfg);
    let results = match std::env::var_os("PG_CACHE_DIR") {
        Some(dir) => client.cached_search(&q, Path::new(&dir)),
        None => client.qido_search(&q).and_then(|r| client.gate(r)),
    }
    .map_err(runtime)?;
    let mut payloads = Vec::new();
    for (i, ds) in results.iter().enumerate() {
        let text = serialize_dicom_json_pretty(ds);
        fs::write(a.out.join(format!("{i:06}.json")), &text)?;
        payloads.push(text);
    }
    let mut m = RunManifest::new("fetch", &RunConfig::default(), sha256_hex(&payloads));
    m.inputs.insert("base".into(), a.base.clone());
    m.inputs.insert("query".into(), q.canonical());
    write_json(&a.out.join("manifest.json"), &m)?;
    writeln!(out, "{}", results.len())?;
    Ok(())
}

fn deid(a: DeidArgs, out: &mut dyn Write) -> CliResult {
    let secret = read_secret(&a.secret_file)?;
    let policy = load_policy(a.policy.as_deref())?;
    let files = dicom_files(&a.input)?;
    let root = if a.input.is_dir() {
        a.input.clone()
    } else {
        a.input.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    fs::create_dir_all(&a.out)?;
    let log = UidMapLog::new(a.out.join("uidmap.ndjson"));
    let mut digests = Vec::new();
    let mut done = 0usize;
    for f in &files {
        let Some(ds) = read_dataset(f)? else {
            log::warn!("{}: not a DICOM data set, skipped", f.display());
            continue;
        };
        let pid = ds.get(Tag::new(0x0010, 0x0020)).and_then(|e| e.as_str()).unwrap_or("");
        let outcome = apply_policy(&ds, &policy, &PatientKey::derive(pid, &secret));
        let left = audit_phi(&outcome.dataset);
        if let Some(v) = left.first() {
            return Err(runtime(format!("{}: {} left after de-identification ({})", f.display(), v.tag, v.reason)));
        }
        log.append(&outcome.map_records(&secret)).map_err(runtime)?;
        let rel = f.strip_prefix(&root).unwrap_or(f).with_extension("json");
        let dest = a.out.join(rel);
        if let Some(d) = dest.parent() {
            fs::create_dir_all(d)?;
        }
        let text = serialize_dicom_json_pretty(&outcome.dataset);
        fs::write(&dest, &text)?;
        digests.push(text);
        done += 1;
    }
    write_manifest(&a.out, "deid", &RunConfig::default(), sha256_hex(&digests), &[("in", &a.input)])?;
    writeln!(out, "{done}")?;
    Ok(())
}

#[derive(Serialize)]
struct AuditLine<'a> {
    file: &'a str,
    tag: String,
    reason: &'a str,
}

fn audit(a: AuditArgs, out: &mut dyn Write) -> CliResult {
    let mut n = 0usize;
    for f in dicom_files(&a.input)? {
        let Some(ds) = read_dataset(&f)? else { continue };
        let name = f.display().to_string();
        for v in audit_phi(&ds) {
            n += 1;
            let line = AuditLine {
                file: &name,
                tag: v.tag.to_string(),
                reason: &v.reason,
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("line serializes"))?;
        }
    }
    if n > 0 {
        return Err(invalid(format!("{n} PHI violation(s)")));
    }
    Ok(())
}

fn corpus_rows(dir: &Path) -> CliResult<Vec<TreeSeries>> {
    if !dir.join("manifest.csv").exists() {
        return Err(invalid(format!("{}: no manifest.csv", dir.display())));
    }
    read_tree(dir, &FieldSchema::default()).map_err(invalid)
}

fn vocab_build(a: VocabBuildArgs) -> CliResult {
    let cfg: VocabConfig = match &a.config {
        Some(p) => parse_config(p)?,
        None => VocabConfig::default(),
    };
    let vocab = if a.input.join("manifest.csv").exists() {
        tree_vocab(&corpus_rows(&a.input)?, &cfg)?
    } else {
        let mut headers = Vec::new();
        for f in dicom_files(&a.input)? {
            if let Some(ds) = read_dataset(&f)? {
                headers.push(extract_protocol_header(&ds, &FieldSchema::default()));
            }
        }
        GenomeVocab::build(&headers, &FieldSchema::default(), &cfg).map_err(invalid)?
    };
    if let Some(d) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    let bytes = vocab.to_binary();
    fs::write(&a.out, &bytes)?;
    let mut m = RunManifest::new("vocab build", &RunConfig::default(), sha256_hex([&bytes]));
    m.inputs.insert("in".into(), absolute(&a.input));
    let mut name = a.out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    write_json(&a.out.with_file_name(name), &m)?;
    Ok(())
}

fn load_vocab(p: &Path) -> CliResult<GenomeVocab> {
    GenomeVocab::read_binary(&read_bytes(p)?[..]).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn tokenize_cmd(a: TokenizeArgs, out: &mut dyn Write) -> CliResult {
    let vocab = load_vocab(&a.vocab)?;
    let h = read_header(&a.input)?;
    let seq = tokenize(&h, &vocab).map_err(invalid)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&seq).expect("sequence serializes"))?;
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let mut spec = match &a.spec {
        Some(p) => CorpusSpec::from_json(&read_text(p)?).map_err(invalid)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = crate::synth::generate_corpus(&spec).map_err(invalid)?;
    corpus.write_tree(&a.out).map_err(runtime)?;
    write_json(&a.out.join("corpus_spec.json"), &spec)?;
    let mut cfg = RunConfig::default();
    cfg.seed = spec.seed;
    let mut m = RunManifest::new("synth", &cfg, corpus.fingerprint());
    if let Some(p) = &a.spec {
        m.inputs.insert("spec".into(), absolute(p));
    }
    write_json(&a.out.join("manifest.json"), &m)?;
    Ok(())
}

struct TrainInputs {
    corpus: PathBuf,
    vocab: PathBuf,
    pretrained: Option<PathBuf>,
    cfg: RunConfig,
}

fn train_inputs(a: &TrainArgs) -> CliResult<TrainInputs> {
    let prior = match &a.manifest {
        Some(p) => Some(serde_json::from_str::<RunManifest>(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let from_prior = |k: &str| prior.as_ref().and_then(|m| m.inputs.get(k)).map(PathBuf::from);
    let corpus = a.input.clone().or_else(|| from_prior("in")).ok_or_else(|| invalid("--in is required"))?;
    let vocab = a.vocab.clone().or_else(|| from_prior("vocab")).ok_or_else(|| invalid("--vocab is required"))?;
    let pretrained = a.pretrained.clone().or_else(|| from_prior("pretrained"));
    let mut cfg = match (&a.config, &prior) {
        (Some(p), _) => run_config(Some(p), None)?,
        (None, Some(m)) => m.config.clone(),
        (None, None) => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(TrainInputs {
        corpus,
        vocab,
        pretrained,
        cfg,
    })
}

fn load_corpus(dir: &Path, vocab: &GenomeVocab) -> CliResult<(Vec<StudyRecord>, FileProvider)> {
    let rows = corpus_rows(dir)?;
    let studies = tree_records(&rows, vocab)?;
    let provider = FileProvider::load(&dir.join("features.json")).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    Ok((studies, provider))
}

fn load_model(path: &Path, cfg: &RunConfig, vocab: &GenomeVocab) -> CliResult<ProtocolModel> {
    let mut model = ProtocolModel::new(cfg.model.clone(), VocabLayout::from_vocab(vocab));
    let store = load_checkpoint(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    model
        .params
        .load_from(&store)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(model)
}

fn write_log<T: Serialize>(path: &Path, records: &[T]) -> CliResult {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_ndjson(records, &mut f)?;
    Ok(())
}

fn pretrain_cmd(a: TrainArgs) -> CliResult {
    let t = train_inputs(&a)?;
    let vocab = load_vocab(&t.vocab)?;
    let (studies, provider) = load_corpus(&t.corpus, &vocab)?;
    fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoints");
    let outcome = pretrain(&studies, &provider, &vocab, &t.cfg, Some(&ckpt))?;
    write_log(&a.out.join("metrics.ndjson"), &outcome.log)?;
    save_checkpoint(&outcome.model.params, &a.out.join("model.ckpt")).map_err(runtime)?;
    write_manifest(
        &a.out,
        "pretrain",
        &t.cfg,
        corpus_hash(&studies),
        &[("in", &t.corpus), ("vocab", &t.vocab)],
    )?;
    Ok(())
}

fn finetune_cmd(a: TrainArgs) -> CliResult {
    let t = train_inputs(&a)?;
    let pre = t.pretrained.clone().ok_or_else(|| invalid("--pretrained is required"))?;
    let vocab = load_vocab(&t.vocab)?;
    let (studies, provider) = load_corpus(&t.corpus, &vocab)?;
    let pretrained = load_model(&pre, &t.cfg, &vocab)?;
    fs::create_dir_all(&a.out)?;
    let outcome = finetune(&studies, None, &provider, &pretrained, &t.cfg)?;
    write_log(&a.out.join("metrics.ndjson"), &outcome.log)?;
    save_checkpoint(&outcome.model.params, &a.out.join("model.ckpt")).map_err(runtime)?;
    write_json(&a.out.join("adversary_classes.json"), &outcome.adversary_classes)?;
    write_manifest(
        &a.out,
        "finetune",
        &t.cfg,
        corpus_hash(&studies),
        &[("in", &t.corpus), ("vocab", &t.vocab), ("pretrained", &pre)],
    )?;
    Ok(())
}

fn keys(by: &[String]) -> CliResult<Vec<&str>> {
    if by.is_empty() {
        return Ok(SUBGROUP_KEYS.to_vec());
    }
    by.iter()
        .map(|k| {
            SUBGROUP_KEYS
                .iter()
                .copied()
                .find(|s| s == k)
                .ok_or_else(|| invalid(format!("unknown subgroup key {k:?}; expected one of {SUBGROUP_KEYS:?}")))
        })
        .collect()
}

fn read_predictions(p: &Path) -> CliResult<Vec<PredictionRecord>> {
    let f = fs::File::open(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    read_predictions_csv(f).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

fn report_options(replicates: usize, seed: Option<u64>) -> ReportOptions {
    ReportOptions {
        replicates,
        seed: seed.unwrap_or(0),
        ..ReportOptions::default()
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let opts = report_options(a.replicates, a.seed);
    let keys = keys(&a.by)?;
    if let Some(p) = &a.pred {
        let records = read_predictions(p)?;
        let report = subgroup_report(&records, &keys, &opts);
        let json = report.to_json();
        if let Some(o) = &a.out {
            fs::create_dir_all(o)?;
            fs::write(o.join("report.json"), &json)?;
        }
        writeln!(out, "{json}")?;
        return Ok(());
    }
    let corpus = a.input.as_deref().ok_or_else(|| invalid("either --pred or --in is required"))?;
    let vocab_path = a.vocab.as_deref().ok_or_else(|| invalid("--vocab is required"))?;
    let model_path = a.model.as_deref().ok_or_else(|| invalid("--model is required"))?;
    let dir = a.out.as_deref().ok_or_else(|| invalid("--out is required"))?;
    let cfg = run_config(a.config.as_deref(), a.seed)?;
    let vocab = load_vocab(vocab_path)?;
    let (studies, provider) = load_corpus(corpus, &vocab)?;
    let model = load_model(model_path, &cfg, &vocab)?;
    fs::create_dir_all(dir)?;
    if a.site_heldout {
        let rep = evaluate_site_heldout(&studies, &provider, &model, &cfg, &opts)?;
        rep.write(dir)?;
        for f in &rep.folds {
            writeln!(out, "{}\t{}", f.site, f.report.to_json().replace('\n', " "))?;
        }
    } else {
        let logits: Vec<Vec<f64>> = predict(&model, &studies, &provider)?.into_iter().map(|p| p.logits).collect();
        let records = prediction_records(&studies, &logits, 1.0);
        let file = fs::File::create(dir.join("predictions.csv"))?;
        write_predictions_csv(&records, file).map_err(runtime)?;
        let json = subgroup_report(&records, &keys, &opts).to_json();
        fs::write(dir.join("report.json"), &json)?;
        writeln!(out, "{json}")?;
    }
    let mut inputs: Vec<(&str, &Path)> = vec![("in", corpus), ("vocab", vocab_path), ("model", model_path)];
    if let Some(c) = &a.config {
        inputs.push(("config", c));
    }
    write_manifest(dir, "eval", &cfg, corpus_hash(&studies), &inputs)?;
    Ok(())
}

fn load_report(p: &Path) -> CliResult<(MetricsReport, Option<Vec<PredictionRecord>>)> {
    if p.extension().is_some_and(|e| e == "csv") {
        let recs = read_predictions(p)?;
        Ok((evaluate(&recs, &ReportOptions::default()), Some(recs)))
    } else {
        let r = serde_json::from_str(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        Ok((r, None))
    }
}

fn monitor(a: MonitorArgs, out: &mut dyn Write) -> CliResult {
    let t: DriftThresholds = match &a.config {
        Some(p) => parse_config(p)?,
        None => DriftThresholds::default(),
    };
    let (reference, ref_recs) = load_report(&a.reference)?;
    let (mut current, cur_recs) = load_report(&a.current)?;
    if let (Some(r), Some(c)) = (&ref_recs, &cur_recs) {
        let rk: Vec<&str> = r.iter().map(|x| x.protocol_key.as_str()).collect();
        let ck: Vec<&str> = c.iter().map(|x| x.protocol_key.as_str()).collect();
        let (_, hr, hc) = key_histograms(&rk, &ck);
        current.psi = Some(psi(&hr, &hc).map_err(invalid)?);
    }
    let alerts = drift_alert(&[reference, current], &t);
    let json = serde_json::to_string_pretty(&alerts).expect("alerts serialize");
    if let Some(o) = &a.out {
        write_json(o, &alerts)?;
    }
    writeln!(out, "{json}")?;
    Ok(())
}

fn sensitivity(a: SensitivityArgs, out: &mut dyn Write) -> CliResult {
    let cfg = run_config(a.config.as_deref(), None)?;
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.model, &cfg, &vocab)?;
    let header = read_header(&a.input)?;
    let provider = FileProvider::load(&a.features).map_err(|e| invalid(format!("{}: {e}", a.features.display())))?;
    let feats = provider.features(&a.item).map_err(invalid)?;
    let entries = protocol_sensitivity(&model, &vocab, &header, &feats, &a.field).map_err(invalid)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&entries).expect("entries serialize"))?;
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let records = read_predictions(&a.pred)?;
    let keys = keys(&a.by)?;
    let opts = report_options(a.replicates, a.seed);
    let rep = subgroup_report(&records, &keys, &opts);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.json"), rep.to_json())?;
    rep.write_subgroup_csv(fs::File::create(a.out.join("subgroups.csv"))?).map_err(runtime)?;
    write_roc_csv(&records, fs::File::create(a.out.join("roc.csv"))?).map_err(runtime)?;
    write_reliability_csv(&records, opts.bins, fs::File::create(a.out.join("reliability.csv"))?).map_err(runtime)?;
    let prior = match &a.manifest {
        Some(p) => Some(serde_json::from_str::<RunManifest>(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let cfg = prior.as_ref().map(|m| m.config.clone()).unwrap_or_default();
    let mut inputs: Vec<(&str, &Path)> = vec![("pred", &a.pred)];
    if let Some(m) = &a.manifest {
        inputs.push(("manifest", m));
    }
    let pred_hash = sha256_hex([read_bytes(&a.pred)?]);
    let manifest = write_manifest(&a.out, "report", &cfg, pred_hash, &inputs)?;
    let card = card::model_card(&rep, &records, prior.as_ref().unwrap_or(&manifest), &opts);
    fs::write(a.out.join("model_card.md"), card)?;
    Ok(())
}

pub fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
    Cli::try_parse_from(std::iter::once("pg").chain(args.iter().copied()))
}

/// Output of [`dispatch`] captured as a string.
pub fn run_captured(args: &[&str]) -> CliResult<String> {
    let cli = parse(args).map_err(|e| invalid(e.to_string()))?;
    let mut buf = Vec::new();
    dispatch(cli.command, &mut buf)?;
    Ok(String::from_utf8(buf).expect("commands print UTF-8"))
}
