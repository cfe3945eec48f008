//! The `riskgrid` command line.
//!
//! Each command stages its outputs in memory and only writes them (via a
//! temporary file and rename) once everything succeeded, then records a
//! [`RunManifest`] next to the primary output.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::dataset::{prepare, split, synth, Dataset, FeatureSchema, RiskState, SynthConfig, COHORT_CLASS_COUNTS};
use crate::error::{Error, Result};
use crate::explain::{
    force_data, interaction_screen, shapley_auto, transition_tendency, ScreenOptions, ValueFunction,
    DEFAULT_PERMUTATIONS, DEFAULT_TRANSITION_THRESHOLD, EXACT_MAX_FEATURES,
};
use crate::models::{Architecture, Checkpoint, Model, ModelKind, ModelSpec, QiMode, TrainingMeta};
use crate::pipeline::{
    classification_report, fit_prepare, model_baseline, model_feature_names, model_inputs, predict, rank_features,
    screen_pairs, select_from_pairs, stroke_report, DEFAULT_THRESHOLD,
};
use crate::training::{train, TrainConfig, TrainTrace};

pub const THREADS_ENV: &str = "RISKGRID_THREADS";

#[derive(Debug, Parser)]
#[command(name = "riskgrid", version, about = "Stroke risk-state models with Shapley explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted interactions.
    Synth(SynthArgs),
    /// Stratified train/test split of a dataset.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and training trace.
    Train(TrainArgs),
    /// Classification report of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-state force plots and attributions for one sample.
    Explain(ExplainArgs),
    /// Visualization-layer coordinates of a base model.
    Project(ProjectArgs),
    /// Rank feature pairs by Shapley interaction magnitude.
    Screen(ScreenArgs),
    /// Re-run the command recorded in a manifest and compare checksums.
    Rerun(RerunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = COHORT_CLASS_COUNTS.iter().sum::<usize>())]
    pub n: usize,
    /// Low, medium, high and attack proportions.
    #[arg(long, default_value = "7221,5868,5475,1967")]
    pub ratios: String,
    #[arg(long, default_value_t = 1.0)]
    pub interaction_strength: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub missing_rate: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub train_out: PathBuf,
    #[arg(long)]
    pub test_out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    BaseDnn,
    Qidnn,
    Mmoe,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long)]
    pub data: PathBuf,
    /// `auto:N` screens pairs and keeps N features, or an explicit list
    /// such as `LSBP:RSBP,LDBP:HbA1c`. Defaults to auto:7 (qidnn) and
    /// auto:3 (mmoe).
    #[arg(long)]
    pub qi_pairs: Option<String>,
    /// Restrict the inputs to the K most important features.
    #[arg(long)]
    pub top_k_features: Option<usize>,
    /// TOML file with a `[train]` table and optional model settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base-model checkpoint over every column used for screening instead
    /// of training one.
    #[arg(long)]
    pub screen_model: Option<PathBuf>,
    /// Overrides the seed of the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint path with a `.trace.csv` suffix.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Decision threshold of the stroke head.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Zero-based data row of the sample.
    #[arg(long)]
    pub sample_id: usize,
    /// Directory receiving one force-plot SVG per risk state.
    #[arg(long)]
    pub out_svg: PathBuf,
    #[arg(long)]
    pub out_json: PathBuf,
    /// Permutations for the sampled estimator (used above 12 features).
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Runner-up probability, as a fraction of the top one, that flags a
    /// transition tendency.
    #[arg(long, default_value_t = DEFAULT_TRANSITION_THRESHOLD)]
    pub transition_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ProjectArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScreenArgs {
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub top_m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Arguments after the program name; enough to repeat the run.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_at: String,
    pub finished_at: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl Artifact {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        }
    }

    fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Artifact::of(path, &bytes))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `SOURCE_DATE_EPOCH` when set (for reproducible manifests), else now.
fn timestamp() -> Result<String> {
    let time = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("SOURCE_DATE_EPOCH must be an integer, got {v:?}")))?;
            chrono::DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| Error::Argument(format!("SOURCE_DATE_EPOCH {secs} is out of range")))?
        }
        Err(_) => chrono::Utc::now(),
    };
    Ok(time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
}

/// Writes through a temporary file in the destination directory and
/// renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// `a/b/model.json` -> `a/b/model.manifest.json`.
pub fn manifest_path(primary: &Path) -> PathBuf {
    let stem = primary.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    primary.with_file_name(format!("{stem}.manifest.json"))
}

/// Outputs staged in memory until the command has fully succeeded.
struct Run {
    command: &'static str,
    argv: Vec<String>,
    config: serde_json::Value,
    seed: Option<u64>,
    started_at: String,
    inputs: Vec<Artifact>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    fn new(command: &'static str, argv: &[String], config: impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Run {
            command,
            argv: argv.to_vec(),
            config: serde_json::to_value(config)?,
            seed,
            started_at: timestamp()?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Artifact::of_file(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((path.to_path_buf(), bytes.into()));
    }

    /// Writes every staged output, then the manifest beside `primary`.
    fn commit(self, primary: &Path) -> Result<PathBuf> {
        for (path, bytes) in &self.outputs {
            if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            write_atomic(path, bytes)?;
        }
        let manifest = RunManifest {
            tool: format!("riskgrid {}", env!("CARGO_PKG_VERSION")),
            command: self.command.to_string(),
            argv: self.argv,
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|(p, b)| Artifact::of(p, b)).collect(),
            started_at: self.started_at,
            finished_at: timestamp()?,
        };
        let path = manifest_path(primary);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Exit status for an error: 2 usage, 3 data, 4 model or compatibility.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Argument(_) | Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Data(_)
        | Error::Stratification(_)
        | Error::UndefinedAuc(_)
        | Error::NotFound(_)
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_) => 3,
        Error::Shape { .. }
        | Error::Contract(_)
        | Error::Diverged { .. }
        | Error::Compat(_)
        | Error::Unsupported(_) => 4,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match configure_threads().and_then(|_| execute(cli.command, &argv)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Argument(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool already set up by an earlier call in this process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a, argv),
        Command::Split(a) => cmd_split(&a, argv),
        Command::Train(a) => cmd_train(&a, argv),
        Command::Eval(a) => cmd_eval(&a, argv),
        Command::Explain(a) => cmd_explain(&a, argv),
        Command::Project(a) => cmd_project(&a, argv),
        Command::Screen(a) => cmd_screen(&a, argv),
        Command::Rerun(a) => cmd_rerun(&a),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load_csv(path, &FeatureSchema::stroke_default())
}

fn csv_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    ds.write_csv(&mut buf)?;
    Ok(buf)
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn parse_ratios(text: &str) -> Result<[f64; 4]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Argument(format!("--ratios needs four comma-separated values, got {text:?}")));
    }
    let mut out = [0.0; 4];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .parse()
            .map_err(|_| Error::Argument(format!("--ratios entry {p:?} is not a number")))?;
    }
    Ok(out)
}

pub fn cmd_synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let config = SynthConfig {
        n: a.n,
        class_ratios: parse_ratios(&a.ratios)?,
        interaction_strength: a.interaction_strength,
        noise: a.noise,
        missing_rate: a.missing_rate,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = synth(&config)?;
    let mut run = Run::new("synth", argv, &config, Some(a.seed))?;
    run.output(&a.out, csv_bytes(&ds)?);
    run.commit(&a.out)?;
    let counts = ds.class_counts();
    println!(
        "wrote {} rows to {} (low {}, medium {}, high {}, attack {})",
        ds.len(),
        a.out.display(),
        counts[0],
        counts[1],
        counts[2],
        counts[3]
    );
    Ok(())
}

pub fn cmd_split(a: &SplitArgs, argv: &[String]) -> Result<()> {
    let ds = load_data(&a.data)?;
    let (train_part, test_part) = split(&ds, a.test_fraction, a.seed)?;
    let mut run = Run::new("split", argv, a, Some(a.seed))?;
    run.input(&a.data)?;
    run.output(&a.train_out, csv_bytes(&train_part)?);
    run.output(&a.test_out, csv_bytes(&test_part)?);
    run.commit(&a.train_out)?;
    println!("train {} rows, test {} rows", train_part.len(), test_part.len());
    Ok(())
}

/// Settings accepted by `train --config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: TrainConfig,
    /// Explicit input columns by abbreviation.
    pub features: Option<Vec<String>>,
    pub latent_len: Option<usize>,
    pub qi_mode: Option<QiMode>,
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QiPairs {
    Auto(usize),
    Explicit(Vec<(String, String)>),
}

impl QiPairs {
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(n) = text.strip_prefix("auto:") {
            let n: usize = n
                .parse()
                .map_err(|_| Error::Argument(format!("--qi-pairs auto:N needs an integer N, got {n:?}")))?;
            return Ok(QiPairs::Auto(n));
        }
        let pairs = text
            .split(',')
            .map(|p| match p.trim().split_once(':') {
                Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::Argument(format!(
                    "--qi-pairs entry {p:?} should look like LSBP:RSBP (or use auto:N)"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QiPairs::Explicit(pairs))
    }
}

fn require_column(schema: &FeatureSchema, abbrev: &str) -> Result<usize> {
    schema
        .index_of(abbrev)
        .ok_or_else(|| Error::Data(format!("feature {abbrev:?} is not a column of the data schema")))
}

pub fn cmd_train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let file = match &a.config {
        Some(p) => TrainFile::load(p)?,
        None => TrainFile::default(),
    };
    let mut config = file.train.clone();
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(e) = a.max_epochs {
        config.max_epochs = e;
    }
    config.validate()?;

    let qi = match (a.model, &a.qi_pairs) {
        (ModelArg::BaseDnn, Some(_)) => {
            return Err(Error::Argument("--qi-pairs does not apply to base-dnn".into()));
        }
        (ModelArg::BaseDnn, None) => None,
        (_, Some(text)) => Some(QiPairs::parse(text)?),
        (ModelArg::Qidnn, None) => Some(QiPairs::Auto(7)),
        (ModelArg::Mmoe, None) => Some(QiPairs::Auto(3)),
    };
    if file.features.is_some() && a.top_k_features.is_some() {
        return Err(Error::Argument("--top-k-features conflicts with features listed in the config".into()));
    }

    let raw = load_data(&a.data)?;
    let schema = raw.schema.clone();
    let d = schema.len();
    let (stats, data) = fit_prepare(&raw)?;
    let mut run = Run::new("train", argv, json!({ "args": a, "config": &file, "train": &config }), Some(config.seed))?;
    run.input(&a.data)?;
    if let Some(p) = &a.config {
        run.input(p)?;
    }

    let needs_screen = a.top_k_features.is_some() || matches!(qi, Some(QiPairs::Auto(_)));
    let screen_model = if needs_screen {
        Some(match &a.screen_model {
            Some(path) => {
                run.input(path)?;
                let ck = Checkpoint::load(path)?;
                ck.check_schema(&schema)?;
                if ck.normalization_stats != stats {
                    return Err(Error::Compat(
                        "screening checkpoint was fitted on different training data".into(),
                    ));
                }
                ck.model()?
            }
            None => {
                eprintln!("training a base model over all {d} columns for screening");
                train(&ModelSpec::base_dnn((0..d).collect()), &data, &config)?.0
            }
        })
    } else {
        None
    };

    let mut extra = std::collections::BTreeMap::new();
    let features: Vec<usize> = match (&file.features, a.top_k_features) {
        (Some(list), _) => {
            let mut cols = list.iter().map(|f| require_column(&schema, f)).collect::<Result<Vec<_>>>()?;
            cols.sort_unstable();
            cols.dedup();
            cols
        }
        (None, Some(k)) => {
            if k < 2 || k > d {
                return Err(Error::Argument(format!("--top-k-features must lie in 2..={d}, got {k}")));
            }
            let ranked = rank_features(screen_model.as_ref().expect("screen model"), &stats, &data, config.seed)?;
            let top = &ranked[..k];
            extra.insert(
                "feature_importance".to_string(),
                serde_json::to_value(top.iter().map(|f| json!({"feature": f.feature, "mean_abs_phi": f.mean_abs_phi})).collect::<Vec<_>>())?,
            );
            let mut cols: Vec<usize> = top.iter().map(|f| f.index).collect();
            cols.sort_unstable();
            cols
        }
        (None, None) => (0..d).collect(),
    };

    let selected: Option<Vec<usize>> = match &qi {
        None => None,
        Some(QiPairs::Auto(n)) => {
            let pairs = screen_pairs(screen_model.as_ref().expect("screen model"), &stats, &data, &features, config.seed)?;
            let selected = select_from_pairs(&pairs, &features, *n)?;
            let top: Vec<serde_json::Value> = pairs
                .iter()
                .take(*n)
                .map(|p| json!({"first": p.first_name, "second": p.second_name, "score": p.score}))
                .collect();
            extra.insert("qi_pairs".to_string(), serde_json::Value::Array(top));
            Some(selected)
        }
        Some(QiPairs::Explicit(pairs)) => {
            let mut members = Vec::new();
            for (x, y) in pairs {
                for f in [x, y] {
                    let col = require_column(&schema, f)?;
                    let pos = features.iter().position(|&c| c == col).ok_or_else(|| {
                        Error::Argument(format!("interaction feature {f:?} is not among the model inputs"))
                    })?;
                    if !members.contains(&pos) {
                        members.push(pos);
                    }
                }
            }
            let listed: Vec<serde_json::Value> =
                pairs.iter().map(|(x, y)| json!({"first": x, "second": y, "score": null})).collect();
            extra.insert("qi_pairs".to_string(), serde_json::Value::Array(listed));
            Some(members)
        }
    };
    if let Some(sel) = &selected {
        let names: Vec<&str> = sel.iter().map(|&p| schema.get(features[p]).abbrev.as_str()).collect();
        extra.insert("qi_features".to_string(), json!(names));
    }

    let mut spec = match a.model {
        ModelArg::BaseDnn => ModelSpec::base_dnn(features),
        ModelArg::Qidnn => ModelSpec::qidnn(features, selected.expect("qidnn has pairs")),
        ModelArg::Mmoe => ModelSpec::mmoe(features, selected.expect("mmoe has pairs")),
    };
    apply_qi_settings(&mut spec, &file);
    spec.validate()?;

    let (model, trace) = train(&spec, &data, &config)?;
    let best = trace.best();
    let meta = TrainingMeta {
        seed: config.seed,
        epochs: trace.stopped_at_epoch,
        best_epoch: trace.best_epoch,
        final_train_loss: best.train_loss,
        final_val_loss: best.val_loss,
        config: serde_json::to_value(&config)?,
    };
    let mut ck = Checkpoint::new(&model, &schema, &stats, meta);
    ck.extra = extra;

    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        a.out.with_file_name(format!("{stem}.trace.csv"))
    });
    let mut trace_csv = Vec::new();
    trace.write_csv(&mut trace_csv)?;
    let mut ck_text = ck.to_json()?;
    ck_text.push('\n');
    run.output(&a.out, ck_text);
    run.output(&trace_path, trace_csv);
    run.commit(&a.out)?;
    println!("{}", train_summary(&model, &trace));
    Ok(())
}

fn apply_qi_settings(spec: &mut ModelSpec, file: &TrainFile) {
    let qi = match &mut spec.arch {
        Architecture::BaseDnn(_) => return,
        Architecture::Qidnn(s) => vec![&mut s.qi],
        Architecture::Mmoe(s) => s
            .experts
            .iter_mut()
            .filter_map(|e| match e {
                crate::models::ExpertSpec::Qidnn { spec, .. } => Some(&mut spec.qi),
                crate::models::ExpertSpec::Mlp { .. } => None,
            })
            .collect(),
    };
    for q in qi {
        if let Some(k) = file.latent_len {
            q.latent_len = k;
        }
        if let Some(m) = file.qi_mode {
            q.mode = m;
        }
    }
}

fn train_summary(model: &Model, trace: &TrainTrace) -> String {
    let stop = if trace.early_stopped { "early stop" } else { "epoch limit" };
    format!(
        "trained {} ({} inputs, {} parameters): best epoch {} of {} ({stop}), validation loss {:.4}",
        model.kind().as_str(),
        model.input_dim(),
        model.params().num_scalars(),
        trace.best_epoch,
        trace.stopped_at_epoch,
        trace.best().val_loss
    )
}

/// Loads a checkpoint and a raw dataset and prepares the data with the
/// checkpoint's statistics.
fn load_for_model(model_path: &Path, data_path: &Path) -> Result<(Checkpoint, Model, Dataset, Dataset)> {
    let ck = Checkpoint::load(model_path)?;
    let raw = load_data(data_path)?;
    ck.check_schema(&raw.schema)?;
    let model = ck.model()?;
    let data = prepare(&raw, &ck.normalization_stats)?;
    Ok((ck, model, raw, data))
}

pub fn cmd_eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let (_, model, _, data) = load_for_model(&a.model_path, &a.data)?;
    let report = classification_report(&model, &data)?;
    let stroke = stroke_report(&model, &data, a.threshold)?;
    let mut text = format!("{} on {} rows\n\n{}", model.kind().as_str(), data.len(), report.to_table());
    if let Some(s) = &stroke {
        let _ = write!(
            text,
            "\nstroke occurrence (threshold {:.2})\n  precision {:6.2}  recall {:6.2}  f1 {:6.2}  auc {:.4}\n",
            s.threshold,
            100.0 * s.precision,
            100.0 * s.recall,
            100.0 * s.f1,
            s.auc
        );
    }
    print!("{text}");
    if let Some(out) = &a.out {
        let mut run = Run::new("eval", argv, a, None)?;
        run.input(&a.model_path)?;
        run.input(&a.data)?;
        let body = json!({
            "model_kind": model.kind(),
            "rows": data.len(),
            "risk_state": report,
            "stroke": stroke,
        });
        run.output(out, json_bytes(&body)?);
        run.commit(out)?;
    }
    Ok(())
}

fn state_phrase(c: usize) -> String {
    match RiskState::from_index(c) {
        Some(RiskState::Attack) => "attack state".to_string(),
        Some(s) => format!("{}-risk", s.name()),
        None => format!("state {c}"),
    }
}

pub fn cmd_explain(a: &ExplainArgs, argv: &[String]) -> Result<()> {
    if !(a.transition_threshold > 0.0 && a.transition_threshold <= 1.0) {
        return Err(Error::Argument(format!(
            "--transition-threshold must lie in (0, 1], got {}",
            a.transition_threshold
        )));
    }
    let (ck, model, raw, data) = load_for_model(&a.model_path, &a.data)?;
    let index = data
        .samples
        .iter()
        .position(|s| s.id == a.sample_id)
        .ok_or_else(|| Error::NotFound(format!("sample id {} (data has {} rows)", a.sample_id, data.len())))?;
    let one = data.subset(&[index]);
    let row = model_inputs(&model, &one)?;
    let baseline = model_baseline(&model, &ck.normalization_stats, &one);
    let names = model_feature_names(&model, &one);
    let raw_values: Vec<f64> = model
        .spec()
        .features
        .iter()
        .zip(&row)
        .map(|(&j, &v)| raw.samples[index].features[j].unwrap_or(v))
        .collect();

    let vf = ValueFunction::new(&model, baseline, row.clone())?;
    let values = shapley_auto(&vf, a.permutations, a.seed)?;
    let explanations = values.explanations(&model, Some(a.sample_id), &names, &raw_values);

    let out = predict(&model, &one)?;
    let probs = out.risk_probs_row(0);
    let tendency = transition_tendency(&probs, a.transition_threshold)?;
    let truth = one.samples[0].risk_state;

    let mut run = Run::new("explain", argv, a, Some(a.seed))?;
    run.input(&a.model_path)?;
    run.input(&a.data)?;
    for (c, state) in RiskState::ALL.iter().enumerate() {
        let plot = force_data(&explanations[c]);
        run.output(&a.out_svg.join(format!("force-{}.svg", state.name())), plot.to_svg());
    }
    let body = json!({
        "sample_id": a.sample_id,
        "true_state": truth,
        "predicted_state": RiskState::from_index(tendency.predicted),
        "probabilities": probs,
        "stroke_probability": out.stroke_prob(0),
        "transition": {
            "threshold": a.transition_threshold,
            "runner_up": RiskState::from_index(tendency.runner_up),
            "ratio": tendency.ratio,
            "flagged": tendency.flagged,
        },
        "estimator": if names.len() <= EXACT_MAX_FEATURES { "exact" } else { "sampled" },
        "permutations": a.permutations,
        "explanations": explanations,
    });
    run.output(&a.out_json, json_bytes(&body)?);
    run.commit(&a.out_json)?;

    let scores: Vec<String> = probs.iter().map(|p| format!("{p:.4}")).collect();
    println!(
        "sample {}: true state {}, scores ({})",
        a.sample_id,
        truth.name(),
        scores.join(", ")
    );
    if tendency.flagged {
        println!(
            "{}, tendency toward {} (runner-up at {:.0}% of the top score)",
            state_phrase(tendency.predicted),
            state_phrase(tendency.runner_up),
            100.0 * tendency.ratio
        );
    } else {
        println!("{}, no transition tendency", state_phrase(tendency.predicted));
    }
    print!("{}", force_data(&explanations[tendency.predicted]).to_text());
    Ok(())
}

pub fn cmd_project(a: &ProjectArgs, argv: &[String]) -> Result<()> {
    let (_, model, _, data) = load_for_model(&a.model_path, &a.data)?;
    if model.kind() != ModelKind::BaseDnn {
        return Err(Error::Unsupported(format!(
            "{} checkpoints have no visualization layer; project needs a base-dnn model",
            model.kind().as_str()
        )));
    }
    let out = predict(&model, &data)?;
    let viz = out.viz.as_ref().expect("base model exposes its visualization layer");
    let width = viz.len() / out.rows;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string(), "state".to_string()];
    for p in 0..width / 2 {
        header.push(format!("pair{}_x", p + 1));
        header.push(format!("pair{}_y", p + 1));
    }
    wtr.write_record(&header)?;
    for (r, s) in data.samples.iter().enumerate() {
        let mut record = vec![s.id.to_string(), s.risk_state.name().to_string()];
        record.extend(viz[r * width..(r + 1) * width].iter().map(|v| v.to_string()));
        wtr.write_record(&record)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::io(&a.out, e.into_error()))?;
    let mut run = Run::new("project", argv, a, None)?;
    run.input(&a.model_path)?;
    run.input(&a.data)?;
    run.output(&a.out, bytes);
    run.commit(&a.out)?;
    println!("wrote {} rows with {} coordinates to {}", data.len(), width, a.out.display());
    Ok(())
}

pub fn cmd_screen(a: &ScreenArgs, argv: &[String]) -> Result<()> {
    let (ck, model, _, data) = load_for_model(&a.model_path, &a.data)?;
    let names = model_feature_names(&model, &data);
    let baseline = model_baseline(&model, &ck.normalization_stats, &data);
    let inputs = model_inputs(&model, &data)?;
    let mut options = ScreenOptions {
        top_m: a.top_m,
        ..ScreenOptions::default()
    };
    options.explain.seed = a.seed;
    let pairs = interaction_screen(&model, &baseline, &inputs, &names, &options)?;
    let mut run = Run::new("screen", argv, a, Some(a.seed))?;
    run.input(&a.model_path)?;
    run.input(&a.data)?;
    run.output(&a.out, json_bytes(&pairs)?);
    run.commit(&a.out)?;
    println!("{:>4}  {:<8} {:<8} {:>10}", "rank", "first", "second", "score");
    for (i, p) in pairs.iter().enumerate() {
        println!("{:>4}  {:<8} {:<8} {:>10.5}", i + 1, p.first_name, p.second_name, p.score);
    }
    Ok(())
}

pub fn cmd_rerun(a: &RerunArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("unreadable manifest: {e}")))?;
    for input in &manifest.inputs {
        let now = Artifact::of_file(Path::new(&input.path))?;
        if now.sha256 != input.sha256 {
            return Err(Error::Data(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let mut args = vec!["riskgrid".to_string()];
    args.extend(manifest.argv.iter().cloned());
    let cli = Cli::try_parse_from(&args).map_err(|e| Error::Data(format!("manifest arguments do not parse: {e}")))?;
    if matches!(cli.command, Command::Rerun(_)) {
        return Err(Error::Data("manifest records a rerun".into()));
    }
    execute(cli.command, &manifest.argv)?;
    let mut mismatched = Vec::new();
    for output in &manifest.outputs {
        let now = Artifact::of_file(Path::new(&output.path))?;
        if now.sha256 != output.sha256 {
            mismatched.push(output.path.clone());
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Data(format!("outputs differ from the manifest: {}", mismatched.join(", "))));
    }
    println!("reproduced {} output(s) bit-for-bit", manifest.outputs.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qi_pair_argument_forms() {
        assert_eq!(QiPairs::parse("auto:7").unwrap(), QiPairs::Auto(7));
        assert_eq!(
            QiPairs::parse("LSBP:RSBP, LDBP:HbA1c").unwrap(),
            QiPairs::Explicit(vec![
                ("LSBP".into(), "RSBP".into()),
                ("LDBP".into(), "HbA1c".into())
            ])
        );
        assert!(matches!(QiPairs::parse("auto:x"), Err(Error::Argument(_))));
        assert!(matches!(QiPairs::parse("LSBP"), Err(Error::Argument(_))));
    }

    #[test]
    fn ratios_and_manifest_names() {
        assert_eq!(parse_ratios("1,2,3,4").unwrap(), [1.0, 2.0, 3.0, 4.0]);
        assert!(parse_ratios("1,2,3").is_err());
        assert!(parse_ratios("1,2,x,4").is_err());
        assert_eq!(manifest_path(Path::new("out/model.json")), PathBuf::from("out/model.manifest.json"));
        assert_eq!(manifest_path(Path::new("data.csv")), PathBuf::from("data.manifest.json"));
    }

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(exit_code(&Error::Argument("x".into())), 2);
        assert_eq!(exit_code(&Error::NotFound("x".into())), 3);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Compat("x".into())), 4);
        assert_eq!(exit_code(&Error::Unsupported("x".into())), 4);
    }

    #[test]
    fn train_file_defaults_and_unknown_keys() {
        let f: TrainFile = toml::from_str("features = [\"LSBP\"]\n[train]\nmax_epochs = 5\n").unwrap();
        assert_eq!(f.train.max_epochs, 5);
        assert_eq!(f.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(f.features.as_deref(), Some(&["LSBP".to_string()][..]));
        assert!(toml::from_str::<TrainFile>("bogus = 1").is_err());
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
