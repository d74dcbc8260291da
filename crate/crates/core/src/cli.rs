//! Command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage or input error.
//! Every run that produces files also records the exact configuration that
//! produced them; `sweep` additionally keeps per-cell digests so interrupted
//! grids resume without recomputing finished cells. The `ALC_SEED`
//! environment variable overrides the sweep manifest's master seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cache::{encode_cache, read_cache, write_cache, CacheError};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::experiment::{run_experiment, ExperimentError, Protocol};
use crate::models::{Model, ModelError, ModelKind, ModelSpec};
use crate::pamap2::{load_subject, IntensityLevel, MetTable, Pamap2Error};
use crate::preprocess::{
    apply_normalizer, build_stream, fit_normalizer, make_windows, PreprocessError, SensorConfig,
    WindowSet,
};
use crate::stats::{bonferroni, compare_configs, wilcoxon_signed_rank, KeyedScores, StatsError};
use crate::synth::{generate, SynthSpec};
use crate::train::{evaluate, train, EvalResult, Hyperparams, TrainError};

#[derive(Debug)]
pub struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    pub fn code(&self) -> i32 {
        self.code
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(message: impl std::fmt::Display) -> CliError {
    CliError {
        code: 2,
        message: message.to_string(),
    }
}

fn internal(message: impl std::fmt::Display) -> CliError {
    CliError {
        code: 1,
        message: message.to_string(),
    }
}

impl From<Pamap2Error> for CliError {
    fn from(e: Pamap2Error) -> Self {
        usage(e)
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        usage(e)
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        usage(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Engine(inner) => internal(inner),
            other => usage(other),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Engine(inner) => internal(inner),
            other => usage(other),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Engine(inner) => internal(inner),
            TrainError::Model(inner) => inner.into(),
            other => usage(other),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(inner) => inner.into(),
            ExperimentError::Model(inner) => inner.into(),
            other => usage(other),
        }
    }
}

impl From<StatsError> for CliError {
    fn from(e: StatsError) -> Self {
        usage(e)
    }
}

fn parse_config(s: &str) -> Result<SensorConfig, String> {
    s.parse().map_err(|e: PreprocessError| e.to_string())
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: ModelError| e.to_string())
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse()
}

#[derive(Parser)]
#[command(
    name = "alc",
    version,
    about = "Activity-level classification from wearable IMU time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw subject files into a labeled window cache
    Prepare(PrepareArgs),
    /// Generate a synthetic labeled window cache
    Synth(SynthArgs),
    /// Train one model on a window cache and save a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint against a window cache
    Evaluate(EvaluateArgs),
    /// Paired Wilcoxon/Bonferroni comparison across sensor configurations
    Compare(CompareArgs),
    /// Run a (sensor config x model) grid from a JSON manifest
    Sweep(SweepArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory containing subject .dat files
    #[arg(long)]
    raw_dir: PathBuf,
    /// Tab-separated activity MET table
    #[arg(long)]
    met_table: PathBuf,
    /// Output cache path
    #[arg(long)]
    out: PathBuf,
    /// Sensor configuration to extract
    #[arg(long, default_value = "W18", value_parser = parse_config)]
    config: SensorConfig,
    #[arg(long, default_value_t = 200)]
    window: usize,
    #[arg(long, default_value_t = 100)]
    stride: usize,
    /// Longest interior missing-value gap repaired by interpolation
    #[arg(long, default_value_t = 10)]
    max_gap: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output cache path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    subjects: usize,
    /// Windows per class per subject
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    #[arg(long, default_value_t = 18)]
    channels: usize,
    #[arg(long, default_value_t = 200)]
    window: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Window cache to train on (the whole cache is the training set)
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, value_parser = parse_model)]
    model: ModelKind,
    #[arg(long, default_value = "W18", value_parser = parse_config)]
    config: SensorConfig,
    /// Directory for model.ckpt and history.csv
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    /// Directory for metrics.csv and confusion matrices
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Results CSV (config,model,protocol,subject,repeat,accuracy,macro_f1)
    #[arg(long)]
    results: PathBuf,
    /// Output report CSV
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Restrict to one model when the results file mixes several
    #[arg(long)]
    model: Option<String>,
    /// Restrict to one protocol when the results file mixes several
    #[arg(long)]
    protocol: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON run manifest
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Comma-separated model list override
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated sensor-config list override
    #[arg(long, value_delimiter = ',')]
    configs: Option<Vec<String>>,
}

/// Parses arguments and executes; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn class_counts(set: &WindowSet) -> [usize; 3] {
    let mut counts = [0usize; 3];
    for e in &set.examples {
        counts[e.label.index()] += 1;
    }
    counts
}

fn print_cache_summary(path: &Path, set: &WindowSet) {
    let counts = class_counts(set);
    println!(
        "wrote {}: {} windows ({} channels x {} samples) from {} subjects; low {}, medium {}, high {}",
        path.display(),
        set.len(),
        set.channels(),
        set.window_len(),
        set.subjects().len(),
        counts[0],
        counts[1],
        counts[2],
    );
}

fn subject_id_from_path(path: &Path) -> Result<u16, CliError> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("unreadable file name {}", path.display())))?;
    let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
    digits.parse().map_err(|_| {
        usage(format!(
            "cannot derive a subject id from {} (expected digits in the name, like subject101.dat)",
            path.display()
        ))
    })
}

fn prepare_windows(
    raw_dir: &Path,
    met_table: &Path,
    config: SensorConfig,
    window: usize,
    stride: usize,
    max_gap: usize,
) -> Result<WindowSet, CliError> {
    let table = MetTable::from_file(met_table)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(raw_dir)
        .map_err(|e| usage(format!("cannot read {}: {e}", raw_dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "dat"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(usage(format!(
            "no .dat subject files in {}",
            raw_dir.display()
        )));
    }
    let mut set = WindowSet::new(config.channel_count(), window);
    for file in &files {
        let subject = subject_id_from_path(file)?;
        let records = load_subject(file)?;
        let stream = build_stream(&records, subject, config, &table, max_gap)?;
        for example in make_windows(&stream, window, stride)? {
            set.push(example)?;
        }
    }
    Ok(set)
}

fn cmd_prepare(args: PrepareArgs) -> Result<(), CliError> {
    let set = prepare_windows(
        &args.raw_dir,
        &args.met_table,
        args.config,
        args.window,
        args.stride,
        args.max_gap,
    )?;
    write_cache(&args.out, &set).map_err(internal)?;
    print_cache_summary(&args.out, &set);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        n_subjects: args.subjects,
        windows_per_class: args.per_class,
        channels: args.channels,
        window_length: args.window,
        noise_std: args.noise,
        seed: args.seed,
    };
    let set = generate(&spec)?;
    write_cache(&args.out, &set).map_err(internal)?;
    print_cache_summary(&args.out, &set);
    Ok(())
}

fn apply_hp_overrides(
    hp: &mut Hyperparams,
    lr: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    momentum: Option<f64>,
    seed: Option<u64>,
) {
    if let Some(v) = lr {
        hp.learning_rate = v;
    }
    if let Some(v) = epochs {
        hp.epochs = v;
    }
    if let Some(v) = batch_size {
        hp.batch_size = v;
    }
    if let Some(v) = momentum {
        hp.momentum = v;
    }
    if let Some(v) = seed {
        hp.seed = v;
    }
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents)
        .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let set = read_cache(&args.cache)?;
    let mut selected = set.select_config(args.config)?;
    let mut hp = Hyperparams::default();
    apply_hp_overrides(
        &mut hp,
        args.lr,
        args.epochs,
        args.batch_size,
        args.momentum,
        args.seed,
    );
    let stats = fit_normalizer(&selected)?;
    apply_normalizer(&stats, &mut selected)?;
    let spec = ModelSpec {
        kind: args.model,
        in_channels: selected.channels(),
        window_length: selected.window_len(),
        n_classes: 3,
    };
    let mut model = Model::build(spec, hp.seed)?;
    let history = train(&mut model, &selected, &hp)?;
    create_out_dir(&args.out_dir)?;
    save_checkpoint(
        &args.out_dir.join("model.ckpt"),
        &model,
        args.config,
        &stats,
    )?;
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in history.iter().enumerate() {
        csv.push_str(&format!("{},{loss:.6}\n", i + 1));
    }
    write_file(&args.out_dir.join("history.csv"), &csv)?;
    match history.last() {
        Some(loss) => println!(
            "trained {} on {} windows for {} epochs ({} parameters); final loss {loss:.6}",
            args.model,
            selected.len(),
            hp.epochs,
            model.count_params(),
        ),
        None => println!(
            "saved untrained {} ({} parameters); no epochs requested",
            args.model,
            model.count_params(),
        ),
    }
    Ok(())
}

fn confusion_csv(counts: &[[u64; 3]; 3]) -> String {
    let mut out = String::from("truth,low,medium,high\n");
    for (level, row) in IntensityLevel::ALL.iter().zip(counts) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            level.name().to_ascii_lowercase(),
            row[0],
            row[1],
            row[2]
        ));
    }
    out
}

fn confusion_percent_csv(rows: &[[f64; 3]; 3]) -> String {
    let mut out = String::from("truth,low,medium,high\n");
    for (level, row) in IntensityLevel::ALL.iter().zip(rows) {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            level.name().to_ascii_lowercase(),
            row[0],
            row[1],
            row[2]
        ));
    }
    out
}

fn metrics_csv(eval: &EvalResult) -> String {
    format!(
        "accuracy,macro_f1,recall_low,recall_medium,recall_high\n{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        eval.accuracy,
        eval.macro_f1,
        eval.per_class_recall[0],
        eval.per_class_recall[1],
        eval.per_class_recall[2]
    )
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let (mut model, config, normalizer) = load_checkpoint(&args.checkpoint)?;
    let set = read_cache(&args.cache)?;
    let mut selected = set.select_config(config)?;
    apply_normalizer(&normalizer, &mut selected)?;
    let eval = evaluate(&mut model, &selected)?;
    create_out_dir(&args.out_dir)?;
    write_file(&args.out_dir.join("metrics.csv"), &metrics_csv(&eval))?;
    write_file(
        &args.out_dir.join("confusion_counts.csv"),
        &confusion_csv(eval.confusion.counts()),
    )?;
    write_file(
        &args.out_dir.join("confusion_percent.csv"),
        &confusion_percent_csv(&eval.confusion.row_normalize()),
    )?;
    println!(
        "evaluated {} windows ({} config): accuracy {:.4}, macro-F1 {:.4}",
        selected.len(),
        config.tag(),
        eval.accuracy,
        eval.macro_f1
    );
    Ok(())
}

pub const RESULTS_HEADER: &str = "config,model,protocol,subject,repeat,accuracy,macro_f1";

#[derive(Debug, Clone, PartialEq)]
struct ResultRow {
    config: String,
    model: String,
    protocol: String,
    subject: u16,
    repeat: usize,
    accuracy: f64,
    macro_f1: f64,
}

impl ResultRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.config,
            self.model,
            self.protocol,
            self.subject,
            self.repeat,
            self.accuracy,
            self.macro_f1
        )
    }
}

fn parse_results(path: &Path) -> Result<Vec<ResultRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == RESULTS_HEADER => {}
        _ => {
            return Err(usage(format!(
                "{} is not a results CSV (expected header {RESULTS_HEADER:?})",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(usage(format!(
                "{}:{}: expected 7 fields, found {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| usage(format!("{}:{}: invalid {what}", path.display(), i + 1));
        rows.push(ResultRow {
            config: fields[0].to_string(),
            model: fields[1].to_string(),
            protocol: fields[2].to_string(),
            subject: fields[3].parse().map_err(|_| bad("subject"))?,
            repeat: fields[4].parse().map_err(|_| bad("repeat"))?,
            accuracy: fields[5].parse().map_err(|_| bad("accuracy"))?,
            macro_f1: fields[6].parse().map_err(|_| bad("macro_f1"))?,
        });
    }
    Ok(rows)
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let mut rows = parse_results(&args.results)?;
    if let Some(model) = &args.model {
        rows.retain(|r| &r.model == model);
    }
    if let Some(protocol) = &args.protocol {
        rows.retain(|r| &r.protocol == protocol);
    }
    if rows.is_empty() {
        return Err(usage("no result rows left after filtering"));
    }
    let mut groups: std::collections::BTreeSet<(String, String)> = Default::default();
    for r in &rows {
        groups.insert((r.model.clone(), r.protocol.clone()));
    }
    if groups.len() > 1 {
        return Err(usage(
            "results mix several models or protocols; restrict with --model / --protocol",
        ));
    }
    let mut by_config: BTreeMap<usize, (SensorConfig, KeyedScores)> = BTreeMap::new();
    for r in &rows {
        let config: SensorConfig = r.config.parse().map_err(usage)?;
        let order = SensorConfig::ALL
            .iter()
            .position(|&c| c == config)
            .expect("config in canonical order table");
        by_config
            .entry(order)
            .or_insert_with(|| (config, Vec::new()))
            .1
            .push(((r.subject, r.repeat), r.macro_f1));
    }
    if by_config.len() < 2 {
        return Err(usage(
            "comparison needs results from at least two sensor configurations",
        ));
    }
    let configs: Vec<&(SensorConfig, KeyedScores)> = by_config.values().collect();
    struct PairOutcome {
        label: String,
        n_effective: usize,
        w: f64,
        p_value: f64,
        method: String,
    }
    let mut outcomes = Vec::new();
    for i in 0..configs.len() {
        for j in i + 1..configs.len() {
            let (ca, sa) = configs[i];
            let (cb, sb) = configs[j];
            let paired = compare_configs(ca.tag(), sa, cb.tag(), sb)?;
            let label = format!("{}-{}", ca.tag(), cb.tag());
            match wilcoxon_signed_rank(&paired.diffs) {
                Ok(r) => outcomes.push(PairOutcome {
                    label,
                    n_effective: r.n_effective,
                    w: r.w,
                    p_value: r.p_value,
                    method: r.method.to_string(),
                }),
                Err(StatsError::Degenerate) => outcomes.push(PairOutcome {
                    label,
                    n_effective: 0,
                    w: 0.0,
                    p_value: 1.0,
                    method: "degenerate".into(),
                }),
                Err(other) => return Err(other.into()),
            }
        }
    }
    let p_values: Vec<f64> = outcomes.iter().map(|o| o.p_value).collect();
    let (decisions, threshold) = bonferroni(&p_values, args.alpha, outcomes.len())?;
    let mut report = String::from("pair,n_effective,W,p_value,method,threshold,significant\n");
    for (o, sig) in outcomes.iter().zip(&decisions) {
        report.push_str(&format!(
            "{},{},{:.1},{:.6},{},{:.6},{}\n",
            o.label, o.n_effective, o.w, o.p_value, o.method, threshold, sig
        ));
        println!(
            "{}: n={} W={:.1} p={:.6} ({}) -> {}",
            o.label,
            o.n_effective,
            o.w,
            o.p_value,
            o.method,
            if *sig {
                "significant"
            } else {
                "not significant"
            }
        );
    }
    write_file(&args.out, &report)?;
    Ok(())
}

fn default_protocol() -> Protocol {
    Protocol::Random8020
}

fn default_repeats() -> usize {
    2
}

fn default_window() -> usize {
    200
}

fn default_stride() -> usize {
    100
}

fn default_max_gap() -> usize {
    10
}

/// Sweep manifest. Exactly one of `cache`, `raw_dir`, `synth` supplies the
/// dataset; `window`/`stride`/`max_gap` only apply to `raw_dir`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub raw_dir: Option<PathBuf>,
    #[serde(default)]
    pub met_table: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    pub configs: Vec<String>,
    pub models: Vec<String>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub out_dir: PathBuf,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_max_gap")]
    pub max_gap: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellScore {
    subject: u16,
    repeat: usize,
    accuracy: f64,
    macro_f1: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CellResult {
    digest: String,
    config: String,
    model: String,
    protocol: String,
    overall_accuracy: f64,
    overall_macro_f1: f64,
    confusion: [[u64; 3]; 3],
    scores: Vec<CellScore>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SweepManifest {
    dataset_digest: String,
    seed: u64,
    protocol: Protocol,
    repeats: usize,
    cells: BTreeMap<String, String>,
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn cell_digest(
    dataset_digest: &str,
    config: SensorConfig,
    kind: ModelKind,
    protocol: Protocol,
    repeats: usize,
    hp: &Hyperparams,
) -> String {
    let hp_json = serde_json::to_string(hp).expect("hyperparams serialize");
    let key = format!(
        "{dataset_digest}|{}|{}|{}|{repeats}|{hp_json}",
        config.tag(),
        kind.tag(),
        protocol.tag()
    );
    hex_digest(key.as_bytes())
}

fn load_sweep_dataset(rc: &RunConfig) -> Result<WindowSet, CliError> {
    let sources = rc.cache.is_some() as u8 + rc.raw_dir.is_some() as u8 + rc.synth.is_some() as u8;
    if sources != 1 {
        return Err(usage(
            "manifest must set exactly one of cache, raw_dir, or synth",
        ));
    }
    if let Some(cache) = &rc.cache {
        return Ok(read_cache(cache)?);
    }
    if let Some(raw_dir) = &rc.raw_dir {
        let met_table = rc
            .met_table
            .as_ref()
            .ok_or_else(|| usage("raw_dir requires met_table in the manifest"))?;
        return prepare_windows(
            raw_dir,
            met_table,
            SensorConfig::W18,
            rc.window,
            rc.stride,
            rc.max_gap,
        );
    }
    Ok(generate(rc.synth.as_ref().expect("synth source"))?)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read {}: {e}", args.config.display())))?;
    let mut rc: RunConfig = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: {e}", args.config.display())))?;

    if let Some(dir) = args.out_dir {
        rc.out_dir = dir;
    }
    if let Some(cache) = args.cache {
        rc.cache = Some(cache);
        rc.raw_dir = None;
        rc.synth = None;
    }
    if let Some(p) = args.protocol {
        rc.protocol = p;
    }
    if let Some(r) = args.repeats {
        rc.repeats = r;
    }
    if let Some(models) = args.models {
        rc.models = models;
    }
    if let Some(configs) = args.configs {
        rc.configs = configs;
    }
    apply_hp_overrides(
        &mut rc.hyperparams,
        args.lr,
        args.epochs,
        args.batch_size,
        args.momentum,
        args.seed,
    );
    if let Ok(seed) = std::env::var("ALC_SEED") {
        rc.hyperparams.seed = seed
            .parse()
            .map_err(|_| usage(format!("ALC_SEED must be an integer, got {seed:?}")))?;
    }
    if rc.configs.is_empty() || rc.models.is_empty() {
        return Err(usage(
            "manifest needs at least one sensor config and one model",
        ));
    }
    let mut configs = Vec::new();
    for tag in &rc.configs {
        configs.push(tag.parse::<SensorConfig>().map_err(usage)?);
    }
    let mut models = Vec::new();
    for tag in &rc.models {
        models.push(tag.parse::<ModelKind>().map_err(usage)?);
    }
    configs.sort_by_key(|c| SensorConfig::ALL.iter().position(|x| x == c));
    configs.dedup();
    models.sort_by_key(|m| ModelKind::ALL.iter().position(|x| x == m));
    models.dedup();

    create_out_dir(&rc.out_dir)?;
    let cells_dir = rc.out_dir.join("cells");
    create_out_dir(&cells_dir)?;
    let effective = serde_json::to_string_pretty(&rc).expect("config serialize");
    write_file(&rc.out_dir.join("config.json"), &effective)?;

    let dataset = load_sweep_dataset(&rc)?;
    let dataset_digest = hex_digest(&encode_cache(&dataset));

    struct Cell {
        config: SensorConfig,
        kind: ModelKind,
        digest: String,
        path: PathBuf,
    }
    let grid: Vec<Cell> = configs
        .iter()
        .flat_map(|&config| models.iter().map(move |&kind| (config, kind)))
        .map(|(config, kind)| {
            let digest = cell_digest(
                &dataset_digest,
                config,
                kind,
                rc.protocol,
                rc.repeats,
                &rc.hyperparams,
            );
            let path = cells_dir.join(format!("{}_{}.json", config.tag(), kind.tag()));
            Cell {
                config,
                kind,
                digest,
                path,
            }
        })
        .collect();

    let mut completed: BTreeMap<(usize, usize), CellResult> = BTreeMap::new();
    let mut pending: Vec<&Cell> = Vec::new();
    for cell in &grid {
        let key = grid_key(cell.config, cell.kind);
        match std::fs::read_to_string(&cell.path) {
            Ok(text) => match serde_json::from_str::<CellResult>(&text) {
                Ok(parsed) if parsed.digest == cell.digest => {
                    completed.insert(key, parsed);
                }
                _ => pending.push(cell),
            },
            Err(_) => pending.push(cell),
        }
    }
    let reused = completed.len();

    let fresh: Vec<((usize, usize), CellResult)> = pending
        .par_iter()
        .map(|cell| -> Result<((usize, usize), CellResult), CliError> {
            let result = run_experiment(
                cell.config,
                cell.kind,
                &dataset,
                &rc.hyperparams,
                rc.protocol,
                rc.repeats,
            )?;
            let cell_result = CellResult {
                digest: cell.digest.clone(),
                config: cell.config.tag().to_string(),
                model: cell.kind.tag().to_string(),
                protocol: rc.protocol.tag().to_string(),
                overall_accuracy: result.overall.accuracy,
                overall_macro_f1: result.overall.macro_f1,
                confusion: *result.overall.confusion.counts(),
                scores: result
                    .scores
                    .iter()
                    .map(|s| CellScore {
                        subject: s.subject,
                        repeat: s.repeat,
                        accuracy: s.accuracy,
                        macro_f1: s.macro_f1,
                    })
                    .collect(),
            };
            Ok((grid_key(cell.config, cell.kind), cell_result))
        })
        .collect::<Result<_, _>>()?;

    for (key, cell_result) in fresh {
        let cell = grid
            .iter()
            .find(|c| grid_key(c.config, c.kind) == key)
            .expect("fresh cell in grid");
        let json = serde_json::to_string_pretty(&cell_result).expect("cell serialize");
        write_file(&cell.path, &json)?;
        completed.insert(key, cell_result);
    }

    let mut results = String::from(RESULTS_HEADER);
    results.push('\n');
    for cell_result in completed.values() {
        for s in &cell_result.scores {
            let row = ResultRow {
                config: cell_result.config.clone(),
                model: cell_result.model.clone(),
                protocol: cell_result.protocol.clone(),
                subject: s.subject,
                repeat: s.repeat,
                accuracy: s.accuracy,
                macro_f1: s.macro_f1,
            };
            results.push_str(&row.to_csv());
            results.push('\n');
        }
    }
    write_file(&rc.out_dir.join("results.csv"), &results)?;

    let grid_csv = |metric: &dyn Fn(&CellResult) -> f64| {
        let mut out = String::from("model");
        for config in &configs {
            out.push(',');
            out.push_str(config.tag());
        }
        out.push('\n');
        for &kind in &models {
            out.push_str(kind.tag());
            for &config in &configs {
                let cell = completed
                    .get(&grid_key(config, kind))
                    .expect("grid complete");
                out.push_str(&format!(",{:.6}", metric(cell)));
            }
            out.push('\n');
        }
        out
    };
    write_file(
        &rc.out_dir.join("accuracy_grid.csv"),
        &grid_csv(&|c| c.overall_accuracy),
    )?;
    write_file(
        &rc.out_dir.join("f1_grid.csv"),
        &grid_csv(&|c| c.overall_macro_f1),
    )?;

    let manifest = SweepManifest {
        dataset_digest,
        seed: rc.hyperparams.seed,
        protocol: rc.protocol,
        repeats: rc.repeats,
        cells: grid
            .iter()
            .map(|c| {
                (
                    format!("{}/{}", c.config.tag(), c.kind.tag()),
                    c.digest.clone(),
                )
            })
            .collect(),
    };
    write_file(
        &rc.out_dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serialize"),
    )?;

    println!(
        "sweep complete: {} cells ({} reused), results in {}",
        grid.len(),
        reused,
        rc.out_dir.display()
    );
    Ok(())
}

fn grid_key(config: SensorConfig, kind: ModelKind) -> (usize, usize) {
    (
        SensorConfig::ALL
            .iter()
            .position(|&c| c == config)
            .expect("known config"),
        ModelKind::ALL
            .iter()
            .position(|&k| k == kind)
            .expect("known model"),
    )
}
