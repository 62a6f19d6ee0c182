//! deepsca: trace synthesis and conversion, profiling-model training, rank
//! evaluation, CPA and class gradient visualization from one binary.
//!
//! Every artifact-producing run writes a `run.json` manifest next to its
//! outputs; feeding that manifest back through `--config` re-executes the
//! run byte-identically.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use deepsca_core::analysis::{cgv_aggregate, cpa};
use deepsca_core::attack::{average_rank_curve, required_traces, DEFAULT_REPEATS};
use deepsca_core::engine::checkpoint::{
    load_model, load_standardizer, save_model, save_standardizer,
};
use deepsca_core::engine::train;
use deepsca_core::netspec::{build_attention_network, dataset_preset};
use deepsca_core::plot::{cgv_overlay_svg, cpa_svg, rank_curve_svg};
use deepsca_core::traces::{
    apply_standardizer, compute_labels, estimate_snr, fit_standardizer, load_ascad_hdf5,
    load_canonical, save_canonical, split_profiling_attack, synthesize,
};
use deepsca_core::{
    ClassPolicy, Error as CoreError, KeyMaterial, LeakageModel, NetworkConfig, PowerModel,
    Provenance, SynthConfig, Threshold, TraceSet, TrainingConfig,
};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "deepsca", version, about = "deep-learning side-channel analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic trace container with planted first-order leakage.
    Synth(SynthArgs),
    /// Convert a public dataset file into the canonical container layout.
    Convert(ConvertArgs),
    /// Train an attention network on the profiling part of a container.
    Train(TrainArgs),
    /// Evaluate a checkpoint: average rank curve and required traces.
    Attack(AttackArgs),
    /// Correlation power analysis of one container.
    Cpa(CpaArgs),
    /// Class gradient weight map of a trained model.
    Cgv(CgvArgs),
    /// Describe a preset, container or checkpoint.
    Info(InfoArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Convert(a) => cmd_convert(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Attack(a) => cmd_attack(a),
        Cmd::Cpa(a) => cmd_cpa(a),
        Cmd::Cgv(a) => cmd_cgv(a),
        Cmd::Info(a) => cmd_info(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input (config, paths, shapes), 3 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err
        .chain()
        .any(|c| c.downcast_ref::<CoreError>().map_or(false, CoreError::is_usage));
    if usage {
        2
    } else {
        3
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

// ---------------------------------------------------------------- plumbing

/// Load a command config from JSON, defaulting absent fields. A run.json
/// manifest is accepted directly: its embedded resolved config is used.
fn load_job<T: Default + DeserializeOwned>(config: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = config else {
        return Ok(T::default());
    };
    if !path.is_file() {
        return Err(usage(format!("config file not found: {}", path.display())));
    }
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    let value = match value {
        serde_json::Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").unwrap()
        }
        v => v,
    };
    serde_json::from_value(value).map_err(|e| usage(format!("config file {}: {e}", path.display())))
}

/// Relative paths that do not exist locally are retried under
/// DEEPSCA_DATA_DIR before being reported missing.
fn resolve_data_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() || p.exists() {
        return p;
    }
    if let Ok(root) = env::var("DEEPSCA_DATA_DIR") {
        let cand = Path::new(&root).join(raw);
        if cand.exists() {
            return cand;
        }
    }
    p
}

fn require_file(raw: &str, what: &str) -> anyhow::Result<PathBuf> {
    if raw.is_empty() {
        return Err(usage(format!("{what} path required")));
    }
    let p = resolve_data_path(raw);
    if !p.is_file() {
        return Err(usage(format!("{what} not found: {raw}")));
    }
    Ok(p)
}

fn prepare_out_dir(out: Option<&Path>) -> anyhow::Result<PathBuf> {
    let dir = out.map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(path)?;
    std::io::copy(&mut file, &mut hasher)?;
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct InputRecord {
    path: String,
    sha256: String,
}

/// Provenance manifest: enough to re-execute the run (`--config run.json`)
/// and to audit what went into it. Deliberately carries no wall-clock
/// timestamp so re-execution reproduces it byte-identically.
#[derive(Serialize)]
struct RunRecord<C: Serialize> {
    command: String,
    tool_version: String,
    seed: u64,
    config: C,
    inputs: BTreeMap<String, InputRecord>,
    outputs: Vec<String>,
}

fn write_run_json<C: Serialize>(out_dir: &Path, rec: &RunRecord<C>) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(rec)?;
    text.push('\n');
    fs::write(out_dir.join("run.json"), text)?;
    Ok(())
}

fn input_record(name: &str, path: &Path) -> anyhow::Result<(String, InputRecord)> {
    Ok((
        name.to_string(),
        InputRecord { path: path.display().to_string(), sha256: sha256_file(path)? },
    ))
}

fn parse_threshold(s: &str) -> Result<Threshold, String> {
    match s {
        "zero" => Ok(Threshold::Zero),
        "below1" | "below_one" => Ok(Threshold::BelowOne),
        other => Err(format!("expected zero or below1, got {other}")),
    }
}

/// `sbox:I`, `sbox_xor_mask:I[:M]`, `last_round_hd:I1,I2`; byte positions
/// 1-based as quoted in dataset documentation.
fn parse_leakage(s: &str) -> Result<LeakageModel, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    let parts: Vec<&str> =
        if rest.is_empty() { Vec::new() } else { rest.split([':', ',']).collect() };
    let num = |i: usize| -> Result<usize, String> {
        parts
            .get(i)
            .ok_or_else(|| format!("leakage spec {s}: missing byte index"))?
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("leakage spec {s}: {e}"))
    };
    let lm = match name {
        "sbox" => LeakageModel::Sbox { byte_index: num(0)? },
        "sbox_xor_mask" => LeakageModel::SboxXorMask {
            byte_index: num(0)?,
            mask_byte: if parts.len() > 1 { Some(num(1)?) } else { None },
        },
        "last_round_hd" => LeakageModel::LastRoundHd { i1: num(0)?, i2: num(1)? },
        other => Err(format!(
            "unknown leakage model {other} (expected sbox, sbox_xor_mask or last_round_hd)"
        ))?,
    };
    lm.validate().map_err(|e| e.to_string())?;
    Ok(lm)
}

fn parse_power_model(s: &str) -> Result<PowerModel, String> {
    match s {
        "hw" | "hamming_weight" => Ok(PowerModel::HammingWeight),
        "identity" => Ok(PowerModel::Identity),
        other => Err(format!("expected hw or identity, got {other}")),
    }
}

/// `predicted`, `true`, or `fixed:CLASS`.
fn parse_policy(s: &str) -> Result<ClassPolicy, String> {
    match s {
        "predicted" => Ok(ClassPolicy::Predicted),
        "true" | "true_labels" => Ok(ClassPolicy::TrueLabels),
        other => match other.strip_prefix("fixed:") {
            Some(c) => Ok(ClassPolicy::Fixed {
                class: c.parse::<u8>().map_err(|e| format!("fixed class {c}: {e}"))?,
            }),
            None => Err(format!("expected predicted, true or fixed:CLASS, got {other}")),
        },
    }
}

fn first_n(ts: &TraceSet, n: usize) -> anyhow::Result<TraceSet> {
    if n == 0 {
        return Err(usage("n_traces must be positive"));
    }
    let idx: Vec<usize> = (0..n.min(ts.n_traces())).collect();
    Ok(ts.subset(&idx)?)
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

// ------------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SynthJob {
    synth: SynthConfig,
    file_name: String,
}

impl Default for SynthJob {
    fn default() -> Self {
        SynthJob { synth: SynthConfig::default(), file_name: "synth.h5".into() }
    }
}

#[derive(clap::Args)]
struct SynthArgs {
    /// JSON config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_traces: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    /// Sample index carrying planted leakage; repeatable.
    #[arg(long = "leak-pos")]
    leak_pos: Vec<usize>,
    #[arg(long, allow_hyphen_values = true)]
    snr: Option<f64>,
    /// Maximum random alignment offset per trace.
    #[arg(long)]
    desync_max: Option<usize>,
    /// Plant first-order masked leakage (two shares).
    #[arg(long)]
    masked: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Container name inside --out.
    #[arg(long)]
    file_name: Option<String>,
    /// Accepted for interface stability; runs are always deterministic.
    #[arg(long)]
    deterministic: bool,
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let mut job: SynthJob = load_job(args.config.as_deref())?;
    if let Some(v) = args.n_traces {
        job.synth.n_traces = v;
    }
    if let Some(v) = args.n_samples {
        job.synth.n_samples = v;
    }
    if !args.leak_pos.is_empty() {
        job.synth.leak_positions = args.leak_pos.clone();
    }
    if let Some(v) = args.snr {
        job.synth.snr = v;
    }
    if let Some(v) = args.desync_max {
        job.synth.desync_max = v;
    }
    if args.masked {
        job.synth.masked = true;
    }
    if let Some(v) = args.seed {
        job.synth.seed = v;
    }
    if let Some(v) = &args.file_name {
        job.file_name = v.clone();
    }

    let out_dir = prepare_out_dir(args.out.as_deref())?;
    let ts = synthesize(&job.synth)?;
    let path = out_dir.join(&job.file_name);
    save_canonical(&ts, &path)?;

    // Achieved SNR at each planted position under the generator's own label.
    let key = ts.fixed_key()?;
    let lm = if job.synth.masked {
        LeakageModel::SboxXorMask { byte_index: 1, mask_byte: None }
    } else {
        LeakageModel::Sbox { byte_index: 1 }
    };
    let labels = compute_labels(&ts, &lm, &key)?;
    for &p in &job.synth.leak_positions {
        let snr = estimate_snr(&ts.samples, &labels, p)?;
        println!("estimated snr at sample {p}: {snr:.3}");
    }
    println!("wrote {} ({} traces x {} samples)", path.display(), ts.n_traces(), ts.n_samples());

    write_run_json(
        &out_dir,
        &RunRecord {
            command: "synth".into(),
            tool_version: TOOL_VERSION.into(),
            seed: job.synth.seed,
            config: &job,
            inputs: BTreeMap::new(),
            outputs: vec![job.file_name.clone()],
        },
    )
}

// ----------------------------------------------------------------- convert

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ConvertJob {
    input: String,
    /// Source layout; only the ASCAD HDF5 family is recognized.
    format: String,
    /// HDF5 group holding traces and metadata.
    group: String,
    file_name: String,
}

impl Default for ConvertJob {
    fn default() -> Self {
        ConvertJob {
            input: String::new(),
            format: "ascad".into(),
            group: "Profiling_traces".into(),
            file_name: "converted.h5".into(),
        }
    }
}

#[derive(clap::Args)]
struct ConvertArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Source dataset file.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    file_name: Option<String>,
    #[arg(long)]
    deterministic: bool,
}

fn cmd_convert(args: &ConvertArgs) -> anyhow::Result<()> {
    let mut job: ConvertJob = load_job(args.config.as_deref())?;
    if let Some(v) = &args.input {
        job.input = v.clone();
    }
    if let Some(v) = &args.format {
        job.format = v.clone();
    }
    if let Some(v) = &args.group {
        job.group = v.clone();
    }
    if let Some(v) = &args.file_name {
        job.file_name = v.clone();
    }

    if job.format != "ascad" {
        return Err(usage(format!("unsupported format {} (expected ascad)", job.format)));
    }
    let input = require_file(&job.input, "input")?;
    let out_dir = prepare_out_dir(args.out.as_deref())?;

    let ts = load_ascad_hdf5(&input, &job.group)?;
    let path = out_dir.join(&job.file_name);
    save_canonical(&ts, &path)?;
    println!(
        "wrote {} ({} traces x {} samples, key {})",
        path.display(),
        ts.n_traces(),
        ts.n_samples(),
        match ts.key {
            KeyMaterial::Fixed(_) => "fixed",
            KeyMaterial::PerTrace(_) => "per-trace",
        }
    );

    let mut inputs = BTreeMap::new();
    inputs.extend([input_record("input", &input)?]);
    write_run_json(
        &out_dir,
        &RunRecord {
            command: "convert".into(),
            tool_version: TOOL_VERSION.into(),
            seed: 0,
            config: &job,
            inputs,
            outputs: vec![job.file_name.clone()],
        },
    )
}

// ------------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    dataset: String,
    preset: Option<String>,
    net: Option<NetworkConfig>,
    training: Option<TrainingConfig>,
    leakage: Option<LeakageModel>,
    n_profiling: Option<usize>,
    n_attack: Option<usize>,
    split_seed: u64,
    /// Fit per-sample standardization on the profiling set and store it in
    /// the checkpoint.
    standardize: bool,
    model_file: String,
}

impl Default for TrainJob {
    fn default() -> Self {
        TrainJob {
            dataset: String::new(),
            preset: None,
            net: None,
            training: None,
            leakage: None,
            n_profiling: None,
            n_attack: None,
            split_seed: 0,
            standardize: true,
            model_file: "model.h5".into(),
        }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Canonical container with profiling traces.
    #[arg(long)]
    dataset: Option<String>,
    /// Named dataset preset supplying network, training and leakage defaults.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training seed (init, shuffling, dropout).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_leakage)]
    leakage: Option<LeakageModel>,
    #[arg(long)]
    n_profiling: Option<usize>,
    #[arg(long)]
    n_attack: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Train on raw samples instead of standardized ones.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    model_file: Option<String>,
    #[arg(long)]
    deterministic: bool,
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut job: TrainJob = load_job(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        job.dataset = v.clone();
    }
    if let Some(v) = &args.preset {
        job.preset = Some(v.clone());
    }
    if let Some(v) = &args.leakage {
        job.leakage = Some(v.clone());
    }
    if let Some(v) = args.n_profiling {
        job.n_profiling = Some(v);
    }
    if let Some(v) = args.n_attack {
        job.n_attack = Some(v);
    }
    if let Some(v) = args.split_seed {
        job.split_seed = v;
    }
    if args.no_standardize {
        job.standardize = false;
    }
    if let Some(v) = &args.model_file {
        job.model_file = v.clone();
    }

    // Preset supplies whatever the config file left open; flags win last.
    let (net, mut training, leakage) = match &job.preset {
        Some(name) => {
            let p = dataset_preset(name)?;
            job.n_profiling.get_or_insert(p.n_profiling);
            job.n_attack.get_or_insert(p.n_attack);
            (
                job.net.clone().unwrap_or(p.net),
                job.training.clone().unwrap_or(p.training),
                job.leakage.clone().unwrap_or(p.leakage),
            )
        }
        None => (
            job.net
                .clone()
                .ok_or_else(|| usage("network config required: pass --preset or a net section"))?,
            job.training.clone().unwrap_or_default(),
            job.leakage.clone().ok_or_else(|| {
                usage("leakage model required: pass --preset, --leakage or a leakage section")
            })?,
        ),
    };
    if let Some(v) = args.epochs {
        training.epochs = v;
    }
    if let Some(v) = args.batch_size {
        training.batch_size = v;
    }
    if let Some(v) = args.seed {
        training.seed = v;
    }
    if let Some(v) = args.validation_fraction {
        training.validation_fraction = Some(v);
    }

    let ds_path = require_file(&job.dataset, "dataset")?;
    let hash = sha256_file(&ds_path)?;
    let ts = load_canonical(&ds_path)?;
    let n = ts.n_traces();
    let (np, na) = match (job.n_profiling, job.n_attack) {
        (Some(p), Some(a)) => (p, a),
        (Some(p), None) => (p, n.saturating_sub(p)),
        (None, Some(a)) => (n.saturating_sub(a), a),
        (None, None) => (n * 4 / 5, n - n * 4 / 5),
    };
    let (prof, _) = split_profiling_attack(&ts, np, na, job.split_seed)?;

    if net.input_length != prof.n_samples() {
        return Err(usage(format!(
            "net input_length {} does not match trace length {}",
            net.input_length,
            prof.n_samples()
        )));
    }

    let st = if job.standardize { Some(fit_standardizer(&prof)?) } else { None };
    let prof = match &st {
        Some(s) => apply_standardizer(s, &prof)?,
        None => prof,
    };
    let key = prof.fixed_key()?;
    let labels = compute_labels(&prof, &leakage, &key)?;

    // Freeze the resolved values so run.json re-executes identically.
    job.net = Some(net.clone());
    job.training = Some(training.clone());
    job.leakage = Some(leakage.clone());
    job.n_profiling = Some(np);
    job.n_attack = Some(na);

    println!(
        "training on {} traces x {} samples ({} epochs, batch {})",
        prof.n_traces(),
        prof.n_samples(),
        training.epochs,
        training.batch_size
    );
    let graph = build_attention_network(&net, training.seed)?;
    let mut trained = train(graph, &prof.samples, &labels, &training)?;
    trained.provenance = Provenance {
        preset: job.preset.clone(),
        seed: training.seed,
        dataset_hash: Some(hash.clone()),
        tool_version: TOOL_VERSION.into(),
        leakage: Some(leakage.clone()),
    };

    let out_dir = prepare_out_dir(args.out.as_deref())?;
    let model_path = out_dir.join(&job.model_file);
    save_model(&mut trained, &model_path)?;
    if let Some(s) = &st {
        save_standardizer(&model_path, s)?;
    }

    let mut csv = String::from("epoch,loss,accuracy,val_loss,val_accuracy\n");
    for e in &trained.history {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            e.loss,
            e.accuracy,
            opt_fmt(e.val_loss),
            opt_fmt(e.val_accuracy)
        ));
    }
    fs::write(out_dir.join("history.csv"), csv)?;

    if let Some(e) = trained.history.last() {
        println!("final epoch {}: loss {:.4}, accuracy {:.4}", e.epoch, e.loss, e.accuracy);
    }
    println!("wrote {}", model_path.display());

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "dataset".to_string(),
        InputRecord { path: ds_path.display().to_string(), sha256: hash },
    );
    write_run_json(
        &out_dir,
        &RunRecord {
            command: "train".into(),
            tool_version: TOOL_VERSION.into(),
            seed: training.seed,
            config: &job,
            inputs,
            outputs: vec![job.model_file.clone(), "history.csv".into()],
        },
    )
}

// ------------------------------------------------------------------ attack

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct AttackJob {
    model: String,
    dataset: String,
    /// Defaults to the leakage model recorded in the checkpoint.
    leakage: Option<LeakageModel>,
    /// When set, the container is split as in training and only the attack
    /// part is evaluated; otherwise the whole container is the attack set.
    n_profiling: Option<usize>,
    n_attack: Option<usize>,
    split_seed: u64,
    max_traces: Option<usize>,
    repeats: usize,
    seed: u64,
    threshold: Threshold,
}

impl Default for AttackJob {
    fn default() -> Self {
        AttackJob {
            model: String::new(),
            dataset: String::new(),
            leakage: None,
            n_profiling: None,
            n_attack: None,
            split_seed: 0,
            max_traces: None,
            repeats: DEFAULT_REPEATS,
            seed: 0,
            threshold: Threshold::Zero,
        }
    }
}

#[derive(clap::Args)]
struct AttackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trained checkpoint.
    #[arg(long)]
    model: Option<String>,
    /// Canonical container providing attack traces.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, value_parser = parse_leakage)]
    leakage: Option<LeakageModel>,
    #[arg(long)]
    n_profiling: Option<usize>,
    #[arg(long)]
    n_attack: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Largest number of attack traces on the rank curve.
    #[arg(long)]
    max_traces: Option<usize>,
    /// Random subsets averaged per curve point.
    #[arg(long)]
    repeats: Option<usize>,
    /// Subset-sampling seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Success convention: zero (rank = 0) or below1 (rank < 1).
    #[arg(long, value_parser = parse_threshold)]
    threshold: Option<Threshold>,
    #[arg(long)]
    deterministic: bool,
}

fn cmd_attack(args: &AttackArgs) -> anyhow::Result<()> {
    let mut job: AttackJob = load_job(args.config.as_deref())?;
    if let Some(v) = &args.model {
        job.model = v.clone();
    }
    if let Some(v) = &args.dataset {
        job.dataset = v.clone();
    }
    if let Some(v) = &args.leakage {
        job.leakage = Some(v.clone());
    }
    if let Some(v) = args.n_profiling {
        job.n_profiling = Some(v);
    }
    if let Some(v) = args.n_attack {
        job.n_attack = Some(v);
    }
    if let Some(v) = args.split_seed {
        job.split_seed = v;
    }
    if let Some(v) = args.max_traces {
        job.max_traces = Some(v);
    }
    if let Some(v) = args.repeats {
        job.repeats = v;
    }
    if let Some(v) = args.seed {
        job.seed = v;
    }
    if let Some(v) = args.threshold {
        job.threshold = v;
    }

    let model_path = require_file(&job.model, "model")?;
    let ds_path = require_file(&job.dataset, "dataset")?;
    let mut trained = load_model(&model_path)?;
    let st = load_standardizer(&model_path)?;
    let full = load_canonical(&ds_path)?;

    let att = match job.n_profiling {
        Some(np) => {
            let na = job.n_attack.unwrap_or_else(|| full.n_traces().saturating_sub(np));
            split_profiling_attack(&full, np, na, job.split_seed)?.1
        }
        None => full,
    };
    let att = match &st {
        Some(s) => apply_standardizer(s, &att)?,
        None => att,
    };

    let d_model = trained.graph.config().input_length;
    if d_model != att.n_samples() {
        return Err(usage(format!(
            "model expects traces of length {d_model} but dataset has {}",
            att.n_samples()
        )));
    }
    let lm = job
        .leakage
        .clone()
        .or_else(|| trained.provenance.leakage.clone())
        .ok_or_else(|| usage("leakage model not recorded in checkpoint; pass --leakage"))?;

    let n_max = job.max_traces.unwrap_or_else(|| att.n_traces().min(1000));
    println!(
        "rank curve over {} attack traces, {} repeats, threshold {}",
        n_max, job.repeats, job.threshold
    );
    let curve = average_rank_curve(&mut trained, &att, &lm, n_max, job.repeats, job.seed)?;
    let required = required_traces(&curve, job.threshold);

    job.leakage = Some(lm.clone());
    job.max_traces = Some(n_max);

    let out_dir = prepare_out_dir(args.out.as_deref())?;
    fs::write(out_dir.join("rank_curve.csv"), curve.to_csv())?;
    fs::write(
        out_dir.join("rank_curve.svg"),
        rank_curve_svg(&curve, &format!("average rank, {} repeats", curve.repeats())),
    )?;

    let final_mean = curve.mean.last().copied().unwrap_or(f64::NAN);
    let required_text =
        required.map_or_else(|| format!("not reached within {n_max}"), |v| v.to_string());
    let report = format!(
        "threshold: {}\nrequired_traces: {}\nrepeats: {}\nmax_traces: {}\nfinal_mean_rank: {}\n",
        job.threshold,
        required_text,
        curve.repeats(),
        curve.n_max(),
        final_mean
    );
    fs::write(out_dir.join("report.txt"), report)?;
    println!("required traces at {}: {}", job.threshold, required_text);

    let mut inputs = BTreeMap::new();
    inputs.extend([input_record("model", &model_path)?, input_record("dataset", &ds_path)?]);
    write_run_json(
        &out_dir,
        &RunRecord {
            command: "attack".into(),
            tool_version: TOOL_VERSION.into(),
            seed: job.seed,
            config: &job,
            inputs,
            outputs: vec!["rank_curve.csv".into(), "rank_curve.svg".into(), "report.txt".into()],
        },
    )
}

// --------------------------------------------------------------------- cpa

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CpaJob {
    dataset: String,
    preset: Option<String>,
    leakage: Option<LeakageModel>,
    power_model: PowerModel,
    /// Hypothesis row to export; defaults to the known-key row.
    row: Option<usize>,
    max_traces: Option<usize>,
}

impl Default for CpaJob {
    fn default() -> Self {
        CpaJob {
            dataset: String::new(),
            preset: None,
            leakage: None,
            power_model: PowerModel::HammingWeight,
            row: None,
            max_traces: None,
        }
    }
}

#[derive(clap::Args)]
struct CpaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Preset supplying the leakage model.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_leakage)]
    leakage: Option<LeakageModel>,
    /// hw or identity.
    #[arg(long, value_parser = parse_power_model)]
    power_model: Option<PowerModel>,
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    max_traces: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

fn cmd_cpa(args: &CpaArgs) -> anyhow::Result<()> {
    let mut job: CpaJob = load_job(args.config.as_deref())?;
    if let Some(v) = &args.dataset {
        job.dataset = v.clone();
    }
    if let Some(v) = &args.preset {
        job.preset = Some(v.clone());
    }
    if let Some(v) = &args.leakage {
        job.leakage = Some(v.clone());
    }
    if let Some(v) = args.power_model {
        job.power_model = v;
    }
    if let Some(v) = args.row {
        job.row = Some(v);
    }
    if let Some(v) = args.max_traces {
        job.max_traces = Some(v);
    }

    let lm = match (&job.leakage, &job.preset) {
        (Some(lm), _) => lm.clone(),
        (None, Some(p)) => dataset_preset(p)?.leakage,
        (None, None) => return Err(usage("leakage model required: pass --leakage or --preset")),
    };
    job.leakage = Some(lm.clone());

    let ds_path = require_file(&job.dataset, "dataset")?;
    let mut ts = load_canonical(&ds_path)?;
    if let Some(n) = job.max_traces {
        ts = first_n(&ts, n)?;
    }

    let res = cpa(&ts, &lm, job.power_model)?;
    let row = job
        .row
        .or(res.known_key_row)
        .ok_or_else(|| usage("dataset key unknown; pass --row to choose a hypothesis"))?;
    let peak = res.argmax_abs(row);

    let out_dir = prepare_out_dir(args.out.as_deref())?;
    fs::write(out_dir.join("cpa.csv"), res.row_csv(row))?;
    fs::write(
        out_dir.join("cpa.svg"),
        cpa_svg(&res, row, &format!("correlation, hypothesis {row}")),
    )?;
    println!(
        "row {}: peak |corr| {:.4} at sample {} ({} traces)",
        row,
        res.corr[[row, peak]].abs(),
        peak,
        ts.n_traces()
    );
    if !res.constant_rows.is_empty() {
        println!("{} hypothesis rows had constant power (zeroed)", res.constant_rows.len());
    }

    let mut inputs = BTreeMap::new();
    inputs.extend([input_record("dataset", &ds_path)?]);
    write_run_json(
        &out_dir,
        &RunRecord {
            command: "cpa".into(),
            tool_version: TOOL_VERSION.into(),
            seed: 0,
            config: &job,
            inputs,
            outputs: vec!["cpa.csv".into(), "cpa.svg".into()],
        },
    )
}

// --------------------------------------------------------------------- cgv

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct CgvJob {
    model: String,
    dataset: String,
    policy: ClassPolicy,
    /// Traces aggregated into the map.
    n_traces: usize,
    /// Needed for the true-labels policy and the CPA overlay; defaults to
    /// the checkpoint's recorded model.
    leakage: Option<LeakageModel>,
    /// Overlay the known-key CPA row on the plot.
    with_cpa: bool,
}

impl Default for CgvJob {
    fn default() -> Self {
        CgvJob {
            model: String::new(),
            dataset: String::new(),
            policy: ClassPolicy::Predicted,
            n_traces: 100,
            leakage: None,
            with_cpa: false,
        }
    }
}

#[derive(clap::Args)]
struct CgvArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// predicted, true or fixed:CLASS.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ClassPolicy>,
    #[arg(long)]
    n_traces: Option<usize>,
    #[arg(long, value_parser = parse_leakage)]
    leakage: Option<LeakageModel>,
    #[arg(long)]
    with_cpa: bool,
    #[arg(long)]
    deterministic: bool,
}

fn cmd_cgv(args: &CgvArgs) -> anyhow::Result<()> {
    let mut job: CgvJob = load_job(args.config.as_deref())?;
    if let Some(v) = &args.model {
        job.model = v.clone();
    }
    if let Some(v) = &args.dataset {
        job.dataset = v.clone();
    }
    if let Some(v) = args.policy {
        job.policy = v;
    }
    if let Some(v) = args.n_traces {
        job.n_traces = v;
    }
    if let Some(v) = &args.leakage {
        job.leakage = Some(v.clone());
    }
    if args.with_cpa {
        job.with_cpa = true;
    }

    let model_path = require_file(&job.model, "model")?;
    let ds_path = require_file(&job.dataset, "dataset")?;
    let mut trained = load_model(&model_path)?;
    let st = load_standardizer(&model_path)?;
    let full = load_canonical(&ds_path)?;

    let raw = first_n(&full, job.n_traces)?;
    let sub = match &st {
        Some(s) => apply_standardizer(s, &raw)?,
        None => raw.clone(),
    };
    let d_model = trained.graph.config().input_length;
    if d_model != sub.n_samples() {
        return Err(usage(format!(
            "model expects traces of length {d_model} but dataset has {}",
            sub.n_samples()
        )));
    }

    let leakage = job.leakage.clone().or_else(|| trained.provenance.leakage.clone());
    let labels = if matches!(job.policy, ClassPolicy::TrueLabels) {
        let lm = leakage
            .as_ref()
            .ok_or_else(|| usage("true-labels policy needs a leakage model; pass --leakage"))?;
        Some(compute_labels(&raw, lm, &raw.fixed_key()?)?)
    } else {
        None
    };

    let map = cgv_aggregate(&mut trained, &sub.samples, labels.as_deref(), job.policy)?;

    let cpa_row: Option<Vec<f64>> = if job.with_cpa {
        let lm = leakage
            .as_ref()
            .ok_or_else(|| usage("--with-cpa needs a leakage model; pass --leakage"))?;
        let res = cpa(&raw, lm, PowerModel::HammingWeight)?;
        let k = res
            .known_key_row
            .ok_or_else(|| usage("--with-cpa needs a dataset with a known key"))?;
        Some(res.corr.row(k).to_vec())
    } else {
        None
    };

    let trace0: Vec<f64> = raw.samples.row(0).to_vec();
    let peak = map
        .expanded
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);

    let out_dir = prepare_out_dir(args.out.as_deref())?;
    fs::write(out_dir.join("cgv.csv"), map.to_csv())?;
    fs::write(
        out_dir.join("cgv.svg"),
        cgv_overlay_svg(
            &map,
            &trace0,
            cpa_row.as_deref(),
            &format!("class gradient weight map, {} traces", map.count),
        ),
    )?;
    println!("weight map over {} traces peaks at sample {}", map.count, peak);

    let mut inputs = BTreeMap::new();
    inputs.extend([input_record("model", &model_path)?, input_record("dataset", &ds_path)?]);
    write_run_json(
        &out_dir,
        &RunRecord {
            command: "cgv".into(),
            tool_version: TOOL_VERSION.into(),
            seed: 0,
            config: &job,
            inputs,
            outputs: vec!["cgv.csv".into(), "cgv.svg".into()],
        },
    )
}

// -------------------------------------------------------------------- info

#[derive(clap::Args)]
struct InfoArgs {
    /// Preset name to describe.
    #[arg(long)]
    preset: Option<String>,
    /// Canonical container to summarize.
    #[arg(long)]
    dataset: Option<String>,
    /// Checkpoint to summarize.
    #[arg(long)]
    model: Option<String>,
}

fn cmd_info(args: &InfoArgs) -> anyhow::Result<()> {
    if let Some(name) = &args.preset {
        let p = dataset_preset(name)?;
        #[derive(Serialize)]
        struct PresetInfo<'a> {
            name: &'a str,
            n_profiling: usize,
            n_attack: usize,
            leakage: &'a LeakageModel,
            net: &'a NetworkConfig,
            training: &'a TrainingConfig,
        }
        let info = PresetInfo {
            name: p.name,
            n_profiling: p.n_profiling,
            n_attack: p.n_attack,
            leakage: &p.leakage,
            net: &p.net,
            training: &p.training,
        };
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    if let Some(raw) = &args.dataset {
        let path = require_file(raw, "dataset")?;
        let ts = load_canonical(&path)?;
        let info = serde_json::json!({
            "path": path.display().to_string(),
            "n_traces": ts.n_traces(),
            "n_samples": ts.n_samples(),
            "key": match ts.key { KeyMaterial::Fixed(_) => "fixed", KeyMaterial::PerTrace(_) => "per_trace" },
            "ciphertexts": ts.ciphertexts.is_some(),
            "masks": ts.masks.is_some(),
            "source_tag": ts.source_tag,
        });
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    if let Some(raw) = &args.model {
        let path = require_file(raw, "model")?;
        let trained = load_model(&path)?;
        let st = load_standardizer(&path)?;
        let last = trained.history.last();
        let info = serde_json::json!({
            "path": path.display().to_string(),
            "input_length": trained.graph.config().input_length,
            "n_classes": trained.graph.config().n_classes,
            "epochs_trained": trained.history.len(),
            "final_loss": last.map(|e| e.loss),
            "final_accuracy": last.map(|e| e.accuracy),
            "standardizer": st.is_some(),
            "provenance": serde_json::to_value(&trained.provenance)?,
        });
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    Err(usage("nothing to describe: pass --preset, --dataset or --model"))
}
