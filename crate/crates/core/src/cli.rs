//! Subcommands behind the `weatherformer` binary.
//!
//! Each command resolves its flags into a serializable run configuration,
//! writes into a fresh run directory and leaves a `manifest.json` there.
//! Handing a manifest (or a bare configuration) back through `--config`
//! repeats the run; explicit flags still override the file.

use std::ffi::OsString;
use std::fmt::{self, Write as _};
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Fault;
use crate::data::{generate, load_wfr, save_wfr, DatasetBundle, GenConfig, SpeedProfile};
use crate::eval::{evaluate, init_times, rollout, EvalOptions, EvalReport, Source};
use crate::model::{load_checkpoint, save_checkpoint, MixerSpec, ModelConfig};
use crate::pafno::{effective_kernel, kernel_csv, MixerDomain, MixerMode};
use crate::train::{gradcheck, gradcheck_fixture, history_csv, train, GradcheckConfig, LossKind, TrainConfig};
use crate::{Error, ModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRAIN_ABORT: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.wfck";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Gradcheck(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Gradcheck(_) => EXIT_GRADCHECK,
            CliError::Run(Error::NonFinite { .. }) => EXIT_TRAIN_ABORT,
            CliError::Run(Error::ConfigMismatch(_)) => EXIT_MISMATCH,
            CliError::Run(Error::Argument(_)) => EXIT_USAGE,
            CliError::Run(_) => EXIT_OTHER,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Gradcheck(m) => write!(f, "{m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Parser, Debug)]
#[command(name = "weatherformer", version, about = "Space-time Fourier mixer forecasting on gridded fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic advection-diffusion dataset into a WFR1 file.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on the test split against persistence and climatology.
    Evaluate(EvaluateArgs),
    /// Roll a checkpoint forward from one init time and export the fields.
    Predict(PredictArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score the five-row component ladder.
    Ablate(AblateArgs),
    /// Export the effective convolution kernel of one mixer.
    KernelDump(KernelDumpArgs),
    /// Matched-budget runs with and without input noise over several seeds.
    NoiseStudy(NoiseStudyArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run configuration or run manifest; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    out_dir: PathBuf,
}

/// Parses a command line and runs it, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::KernelDump(a) => cmd_kernel_dump(a),
        Command::NoiseStudy(a) => cmd_noise_study(a),
    }
}

// ---------------------------------------------------------------------------
// Run directories and manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
    /// Paths relative to the directory holding the manifest.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// CRC32 of the compact JSON form, as used in run directory names.
pub fn config_hash<T: Serialize>(config: &T) -> u32 {
    crc32fast::hash(serde_json::to_string(config).unwrap_or_default().as_bytes())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Creates `<parent>/<unix-secs>-<hash>`, suffixing `-1`, `-2`, ... rather
/// than reusing an existing directory.
pub fn fresh_run_dir(parent: &Path, hash: u32) -> std::io::Result<PathBuf> {
    fs::create_dir_all(parent)?;
    let base = format!("{}-{hash:08x}", unix_now());
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let p = parent.join(name);
        match fs::create_dir(&p) {
            Ok(()) => return Ok(p),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}

struct Run {
    dir: PathBuf,
    command: &'static str,
    config: Value,
    seed: u64,
    started: Instant,
    started_unix: u64,
    outputs: Vec<String>,
}

impl Run {
    fn create<T: Serialize>(parent: &Path, command: &'static str, config: &T, seed: u64) -> CliResult<Self> {
        let dir = fresh_run_dir(parent, config_hash(config))?;
        Self::in_dir(dir, command, config, seed)
    }

    fn in_dir<T: Serialize>(dir: PathBuf, command: &'static str, config: &T, seed: u64) -> CliResult<Self> {
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            command,
            config: serde_json::to_value(config)?,
            seed,
            started: Instant::now(),
            started_unix: unix_now(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name);
        fs::write(&p, contents)?;
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn finish(self) -> CliResult<PathBuf> {
        let m = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started_unix,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        fs::write(self.dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
        Ok(self.dir)
    }
}

/// Reads a run configuration, unwrapping a manifest if given one.
pub fn load_run_config<T: DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let v: Value = serde_json::from_slice(&fs::read(path)?)?;
    let inner = match v {
        Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").unwrap_or(Value::Null)
        }
        other => other,
    };
    Ok(serde_json::from_value(inner)?)
}

fn base_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        Some(p) => Ok(load_run_config(p)?),
        None => Ok(T::default()),
    }
}

fn require_path(p: &Path, flag: &str) -> CliResult<()> {
    if p.as_os_str().is_empty() {
        return usage(format!("{flag} is required"));
    }
    Ok(())
}

fn parse_domain(s: &str) -> std::result::Result<MixerDomain, String> {
    match s.to_ascii_lowercase().as_str() {
        "spatial" => Ok(MixerDomain::Spatial),
        "temporal" => Ok(MixerDomain::Temporal),
        other => Err(format!("unknown mixer domain {other:?} (spatial|temporal)")),
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "lat" | "lat-weighted" | "lat_weighted" => Ok(LossKind::LatWeighted),
        "plain" => Ok(LossKind::Plain),
        other => Err(format!("unknown loss {other:?} (lat-weighted|plain)")),
    }
}

fn switch(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// gen-data

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "config")]
    h: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    w: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    steps: Option<usize>,
    #[arg(long, required_unless_present = "config")]
    seed: Option<u64>,
    /// Output WFR1 file; its manifest is written next to it.
    #[arg(short = 'o', long)]
    output: PathBuf,
    #[arg(long)]
    dyn_channels: Option<usize>,
    /// Uniform zonal speed in columns per step (replaces the jet profile).
    #[arg(long, conflicts_with_all = ["jet_base", "jet_amplitude"])]
    speed: Option<f64>,
    #[arg(long)]
    jet_base: Option<f64>,
    #[arg(long)]
    jet_amplitude: Option<f64>,
    /// Per-channel damping; one value applies to every channel.
    #[arg(long, value_delimiter = ',')]
    diffusion: Option<Vec<f64>>,
    #[arg(long)]
    blobs: Option<usize>,
    #[arg(long)]
    blob_width: Option<f64>,
    #[arg(long)]
    step_hours: Option<f64>,
    /// Use a flat static channel instead of the latitude ridge.
    #[arg(long)]
    no_ridge: bool,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    val_frac: Option<f64>,
}

fn resolve_gen(a: &GenDataArgs) -> CliResult<GenConfig> {
    let mut g: GenConfig = base_config(a.common.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag.clone() { g.$field = v; })* };
    }
    set!(h => height, w => width, steps => steps, seed => seed, dyn_channels => dyn_channels,
         diffusion => diffusion, blobs => blobs, blob_width => blob_width, step_hours => step_hours,
         train_frac => train_frac, val_frac => val_frac);
    if let Some(v) = a.speed {
        g.speed = SpeedProfile::Uniform { speed: v };
    }
    if a.jet_base.is_some() || a.jet_amplitude.is_some() {
        let (b0, a0) = match g.speed {
            SpeedProfile::Jet { base, amplitude } => (base, amplitude),
            _ => (0.0, 0.0),
        };
        g.speed = SpeedProfile::Jet {
            base: a.jet_base.unwrap_or(b0),
            amplitude: a.jet_amplitude.unwrap_or(a0),
        };
    }
    if a.no_ridge {
        g.static_ridge = false;
    }
    g.validate()?;
    Ok(g)
}

/// One-paragraph description of a dataset.
pub fn bundle_summary(b: &DatasetBundle) -> String {
    let [n, h, w, c] = b.dims();
    let s = b.splits();
    let mut out = format!(
        "{n} snapshots of {h}x{w} with {c} channels every {}h\nsplits train {:?} val {:?} test {:?}\n",
        b.step_hours(),
        s.train,
        s.val,
        s.test
    );
    for m in b.channel_meta() {
        let kind = if m.is_static { "static" } else { "dynamic" };
        let _ = writeln!(out, "  {:<8} {kind:<7} mean {:+.4e} std {:.4e}", m.name, m.mean, m.std);
    }
    out
}

fn cmd_gen_data(a: GenDataArgs) -> CliResult<()> {
    let g = resolve_gen(&a)?;
    let started = Instant::now();
    let bundle = generate(&g)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    save_wfr(&bundle, &a.output)?;
    let name = a.output.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest = RunManifest {
        command: "gen-data".into(),
        config: serde_json::to_value(&g)?,
        seed: g.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix: unix_now(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        outputs: vec![name],
    };
    let mpath = manifest_beside(&a.output);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    print!("{}", bundle_summary(&bundle));
    println!("wrote {}", a.output.display());
    Ok(())
}

/// `data/toy.wfr` keeps its manifest at `data/toy.wfr.manifest.json`.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub data: PathBuf,
    pub train: TrainConfig,
}

/// Budget and size flags shared by every command that trains.
#[derive(Args, Debug, Clone, Default)]
struct BudgetFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Diagonal blocks of every spectral mixer.
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    windows_per_epoch: Option<usize>,
    #[arg(long)]
    val_windows: Option<usize>,
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
}

impl BudgetFlags {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.embed_dim {
            t.model.embed_dim = v;
        }
        if let Some(v) = self.layers {
            t.model.layers = v;
        }
        if let Some(v) = self.blocks {
            t.model.spatial.blocks = v;
            if let Some(tm) = t.model.temporal.as_mut() {
                tm.blocks = v;
            }
        }
        if let Some(v) = self.lr {
            t.optimizer.base_lr = v;
        }
        if let Some(v) = self.warmup_epochs {
            t.optimizer.warmup_epochs = v;
        }
        if let Some(v) = self.weight_decay {
            t.optimizer.weight_decay = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if self.windows_per_epoch.is_some() {
            t.windows_per_epoch = self.windows_per_epoch;
        }
        if self.val_windows.is_some() {
            t.val_windows = self.val_windows;
        }
        if let Some(v) = self.loss {
            t.loss = v;
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// WFR1 dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetFlags,
    #[arg(long)]
    mixer: Option<MixerMode>,
    /// Drop the temporal mixer from every block.
    #[arg(long, conflicts_with = "temporal")]
    no_temporal: bool,
    /// Restore a temporal mixer (same settings as the spatial one).
    #[arg(long)]
    temporal: bool,
    #[arg(long, conflicts_with = "no_rotate")]
    rotate: bool,
    #[arg(long)]
    no_rotate: bool,
    #[arg(long, conflicts_with = "no_noise")]
    noise: bool,
    #[arg(long)]
    no_noise: bool,
    /// Variance of the input noise in normalized units.
    #[arg(long)]
    noise_variance: Option<f64>,
    /// Supervise two unrolled steps.
    #[arg(long, conflicts_with = "one_step")]
    two_step: bool,
    #[arg(long)]
    one_step: bool,
}

/// Copies grid and channel counts of the dataset into the model shape.
pub fn fit_model_to(model: &mut ModelConfig, b: &DatasetBundle) {
    let [_, h, w, _] = b.dims();
    model.height = h;
    model.width = w;
    model.dyn_channels = b.dyn_channels();
    model.static_channels = b.static_channels();
}

fn resolve_train(a: &TrainArgs) -> CliResult<(TrainRun, DatasetBundle)> {
    let mut r: TrainRun = base_config(a.common.config.as_deref())?;
    if let Some(d) = &a.data {
        r.data = d.clone();
    }
    require_path(&r.data, "--data")?;
    let t = &mut r.train;
    a.budget.apply(t);
    if a.temporal && t.model.temporal.is_none() {
        t.model.temporal = Some(t.model.spatial);
    }
    if a.no_temporal {
        t.model.temporal = None;
    }
    if let Some(m) = a.mixer {
        t.model = t.model.clone().with_mixer(m);
    }
    if let Some(v) = switch(a.rotate, a.no_rotate) {
        t.augment.rotate = v;
    }
    if let Some(v) = switch(a.noise, a.no_noise) {
        t.augment.noise = v;
    }
    if let Some(v) = a.noise_variance {
        t.augment.noise_variance = v;
    }
    if let Some(v) = switch(a.two_step, a.one_step) {
        t.two_step = v;
    }
    let bundle = load_wfr(&r.data)?;
    fit_model_to(&mut r.train.model, &bundle);
    r.train.validate()?;
    Ok((r, bundle))
}

/// Trains into `run_dir`, writing the checkpoint, loss history and manifest.
pub fn train_into(run: &TrainRun, bundle: &DatasetBundle, run_dir: PathBuf, verbose: bool) -> CliResult<PathBuf> {
    let mut out = Run::in_dir(run_dir, "train", run, run.train.seed)?;
    let outcome = train(bundle, &run.train, |r| {
        if verbose {
            println!(
                "epoch {:>3}  train {:.6}  val {:.6}  lr {:.3e}",
                r.epoch, r.train_loss, r.val_loss, r.lr
            );
        }
    })?;
    save_checkpoint(out.path(CHECKPOINT), &outcome.params)?;
    out.record(CHECKPOINT);
    out.write("loss.csv", history_csv(&outcome.history))?;
    out.finish()
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let (run, bundle) = resolve_train(&a)?;
    let dir = fresh_run_dir(&a.common.out_dir, config_hash(&run))?;
    println!(
        "training {} parameters on {} ({} epochs)",
        run.train.model.param_count(),
        run.data.display(),
        run.train.epochs
    );
    let dir = train_into(&run, &bundle, dir, true)?;
    println!("checkpoint {}", dir.join(CHECKPOINT).display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub leads: usize,
    pub max_inits: Option<usize>,
    pub baselines: bool,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            leads: 5,
            max_inits: None,
            baselines: true,
        }
    }
}

impl EvalRun {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            leads: self.leads,
            max_inits: self.max_inits,
            baselines: self.baselines,
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Forecast leads 1..=n.
    #[arg(long)]
    leads: Option<usize>,
    /// Score only the first n usable test init times.
    #[arg(long)]
    max_inits: Option<usize>,
    /// Skip the persistence and climatology rows.
    #[arg(long)]
    no_baselines: bool,
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut r: EvalRun = base_config(a.common.config.as_deref())?;
    if let Some(p) = a.checkpoint {
        r.checkpoint = p;
    }
    if let Some(p) = a.data {
        r.data = p;
    }
    if let Some(v) = a.leads {
        r.leads = v;
    }
    if a.max_inits.is_some() {
        r.max_inits = a.max_inits;
    }
    if a.no_baselines {
        r.baselines = false;
    }
    require_path(&r.checkpoint, "--checkpoint")?;
    require_path(&r.data, "--data")?;
    if r.leads == 0 {
        return usage("--leads must be at least 1");
    }
    let params = load_checkpoint(&r.checkpoint)?;
    let bundle = load_wfr(&r.data)?;
    let report = evaluate(&params, &bundle, r.options())?;
    let mut out = Run::create(&a.common.out_dir, "evaluate", &r, 0)?;
    out.write("report.csv", report.to_csv())?;
    let table = report.to_table();
    out.write("report.txt", &table)?;
    let dir = out.finish()?;
    println!("{} test init times", report.init_times);
    print!("{table}");
    println!("report {}", dir.join("report.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Absolute index of the first input snapshot; defaults to the first
    /// usable test init time.
    pub init: Option<usize>,
    pub leads: usize,
}

impl Default for PredictRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            data: PathBuf::new(),
            init: None,
            leads: 5,
        }
    }
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    init: Option<usize>,
    #[arg(long)]
    leads: Option<usize>,
}

/// Long-format CSV of a rollout in physical units, with the verifying
/// truth where the dataset extends far enough.
pub fn forecast_csv(params: &ModelParams, bundle: &DatasetBundle, init: usize, leads: usize) -> crate::Result<String> {
    crate::eval::check_compatible(params, bundle)?;
    let t = params.config().input_steps;
    let phys = bundle.denormalized()?;
    let norm = bundle.normalized()?;
    let x0 = norm.window(init, t)?.x;
    let series = rollout(&x0, params, leads)?;
    let lats = phys.latitudes().to_vec();
    let names: Vec<String> = phys.channel_meta().iter().map(|m| m.name.clone()).collect();
    let [n, h, w, _] = phys.dims();
    let cd = phys.dyn_channels();
    let mut s = String::from("lead,row,col,lat,lon,channel,forecast,truth\n");
    for (k, f) in series.leads.iter().enumerate() {
        let pred = phys.denormalize_field(f)?;
        let idx = init + t + k;
        let truth = (idx < n).then(|| phys.target(idx));
        for i in 0..h {
            for j in 0..w {
                for c in 0..cd {
                    let tv = truth.as_ref().map(|tr| format!("{:.9e}", tr.get(&[i, j, c]))).unwrap_or_default();
                    let _ = writeln!(
                        s,
                        "{},{i},{j},{:.6},{:.6},{},{:.9e},{tv}",
                        k + 1,
                        lats[i],
                        360.0 * j as f64 / w as f64,
                        names[c],
                        pred.get(&[i, j, c])
                    );
                }
            }
        }
    }
    Ok(s)
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let mut r: PredictRun = base_config(a.common.config.as_deref())?;
    if let Some(p) = a.checkpoint {
        r.checkpoint = p;
    }
    if let Some(p) = a.data {
        r.data = p;
    }
    if a.init.is_some() {
        r.init = a.init;
    }
    if let Some(v) = a.leads {
        r.leads = v;
    }
    require_path(&r.checkpoint, "--checkpoint")?;
    require_path(&r.data, "--data")?;
    if r.leads == 0 {
        return usage("--leads must be at least 1");
    }
    let params = load_checkpoint(&r.checkpoint)?;
    let bundle = load_wfr(&r.data)?;
    let t = params.config().input_steps;
    let init = match r.init {
        Some(i) => i,
        None => *init_times(&bundle, t, r.leads)
            .first()
            .ok_or_else(|| CliError::Usage("test split too short for the requested leads".into()))?,
    };
    r.init = Some(init);
    let csv = forecast_csv(&params, &bundle, init, r.leads)?;
    let mut out = Run::create(&a.common.out_dir, "predict", &r, 0)?;
    out.write("forecast.csv", csv)?;
    let dir = out.finish()?;
    println!("forecast from snapshot {init}, {} leads: {}", r.leads, dir.join("forecast.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckRun {
    pub model: ModelConfig,
    pub check: GradcheckConfig,
    /// Negative control: corrupts one backward rule.
    pub inject_fault: bool,
}

impl Default for GradcheckRun {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(8, 16, 16),
            check: GradcheckConfig::default(),
            inject_fault: false,
        }
    }
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mixer: Option<MixerMode>,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// Runs the finite-difference check; a failing report is an error naming
/// the offending groups and scalars.
pub fn gradcheck_run(r: &GradcheckRun) -> CliResult<crate::train::GradcheckReport> {
    if r.check.samples == 0 {
        return usage("--samples must be at least 1");
    }
    r.model.validate()?;
    let mut check = r.check.clone();
    check.fault = r.inject_fault.then_some(Fault::LambdaGradient);
    let (params, x, ys, w) = gradcheck_fixture(&r.model, check.seed)?;
    Ok(gradcheck(&params, &x, &ys, &w, &check)?)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let mut r: GradcheckRun = base_config(a.common.config.as_deref())?;
    if let Some(v) = a.samples {
        r.check.samples = v;
    }
    if let Some(v) = a.seed {
        r.check.seed = v;
    }
    if let Some(v) = a.eps {
        r.check.eps = v;
    }
    if let Some(v) = a.h {
        r.model.height = v;
    }
    if let Some(v) = a.w {
        r.model.width = v;
    }
    if let Some(v) = a.embed_dim {
        r.model.embed_dim = v;
    }
    if let Some(v) = a.layers {
        r.model.layers = v;
    }
    if let Some(m) = a.mixer {
        r.model = r.model.clone().with_mixer(m);
    }
    if a.inject_fault {
        r.inject_fault = true;
    }
    let report = gradcheck_run(&r)?;
    let text = report.to_text();
    let mut out = Run::create(&a.common.out_dir, "gradcheck", &r, r.check.seed)?;
    out.write("report.txt", &text)?;
    out.write("report.json", serde_json::to_string_pretty(&report)?)?;
    out.finish()?;
    print!("{text}");
    if report.passed {
        return Ok(());
    }
    let worst: Vec<String> = report
        .groups
        .iter()
        .filter(|g| g.failed > 0)
        .map(|g| {
            format!(
                "group {} ({} of {} failed, worst parameter index {} in {}, rel err {:.3e})",
                g.group.name(),
                g.failed,
                g.sampled,
                g.worst_index,
                g.worst_name,
                g.worst_rel_err
            )
        })
        .collect();
    Err(CliError::Gradcheck(format!("gradient check failed: {}", worst.join("; "))))
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateRun {
    pub data: PathBuf,
    pub base: TrainConfig,
    pub leads: usize,
    pub max_inits: Option<usize>,
}

impl Default for AblateRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            base: TrainConfig::default(),
            leads: 5,
            max_inits: None,
        }
    }
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetFlags,
    #[arg(long)]
    leads: Option<usize>,
    #[arg(long)]
    max_inits: Option<usize>,
}

pub const ABLATION_ROWS: [&str; 5] = ["baseline", "+SF-B", "+PAFNO", "+ER", "+noise"];

/// The cumulative component ladder: AFNO without a temporal mixer and no
/// augmentation, then the temporal mixer, the per-bin coefficients, earth
/// rotation and input noise, each added on top of the previous row.
pub fn ablation_ladder(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut c = base.clone();
    c.model = c.model.with_mixer(MixerMode::Afno);
    c.model.spatial.mode = MixerMode::Afno;
    let temporal = MixerSpec { mode: MixerMode::Afno, ..c.model.temporal.unwrap_or(c.model.spatial) };
    c.model.temporal = None;
    c.augment.rotate = false;
    c.augment.noise = false;
    let mut rows = vec![(ABLATION_ROWS[0], c.clone())];
    c.model.temporal = Some(temporal);
    rows.push((ABLATION_ROWS[1], c.clone()));
    c.model = c.model.with_mixer(MixerMode::Pafno);
    rows.push((ABLATION_ROWS[2], c.clone()));
    c.augment.rotate = true;
    rows.push((ABLATION_ROWS[3], c.clone()));
    c.augment.noise = true;
    rows.push((ABLATION_ROWS[4], c));
    rows
}

fn row_slug(i: usize, name: &str) -> String {
    let s: String = name.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
    format!("row{}-{s}", i + 1)
}

/// Channel-mean scores of one trained row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowScore {
    pub name: String,
    pub config_hash: String,
    pub run_dir: String,
    pub rmse: Vec<f64>,
    pub acc: Vec<f64>,
}

fn score_row(name: &str, cfg: &TrainConfig, dir: &Path, report: &EvalReport) -> RowScore {
    RowScore {
        name: name.to_string(),
        config_hash: format!("{:08x}", config_hash(cfg)),
        run_dir: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        rmse: (1..=report.leads).map(|l| report.mean_rmse(Source::Model, l)).collect(),
        acc: (1..=report.leads).map(|l| report.mean_acc(Source::Model, l)).collect(),
    }
}

fn eval_checkpoint(dir: &Path, bundle: &DatasetBundle, opts: EvalOptions) -> CliResult<EvalReport> {
    let params = load_checkpoint(dir.join(CHECKPOINT))?;
    Ok(evaluate(&params, bundle, opts)?)
}

pub fn scores_csv(rows: &[RowScore]) -> String {
    let mut s = String::from("row,name,config_hash,run_dir,lead,rmse,acc\n");
    for (i, r) in rows.iter().enumerate() {
        for (l, (rm, ac)) in r.rmse.iter().zip(&r.acc).enumerate() {
            let _ = writeln!(s, "{},{},{},{},{},{rm:.9e},{ac:.9e}", i + 1, r.name, r.config_hash, r.run_dir, l + 1);
        }
    }
    s
}

/// Markdown grid with one row per configuration and an RMSE and ACC
/// column per lead.
pub fn scores_markdown(rows: &[RowScore], leads: usize) -> String {
    let mut s = String::from("| row |");
    for l in 1..=leads {
        let _ = write!(s, " RMSE({l}) | ACC({l}) |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|---:|".repeat(leads));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.name);
        for l in 0..leads {
            let _ = write!(s, " {:.4} | {:.3} |", r.rmse[l], r.acc[l]);
        }
        s.push('\n');
    }
    s
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let mut r: AblateRun = base_config(a.common.config.as_deref())?;
    if let Some(d) = a.data {
        r.data = d;
    }
    require_path(&r.data, "--data")?;
    a.budget.apply(&mut r.base);
    if let Some(v) = a.leads {
        r.leads = v;
    }
    if a.max_inits.is_some() {
        r.max_inits = a.max_inits;
    }
    if r.leads == 0 {
        return usage("--leads must be at least 1");
    }
    let bundle = load_wfr(&r.data)?;
    fit_model_to(&mut r.base.model, &bundle);
    r.base.validate()?;
    let mut out = Run::create(&a.common.out_dir, "ablate", &r, r.base.seed)?;
    let opts = EvalOptions {
        leads: r.leads,
        max_inits: r.max_inits,
        baselines: true,
    };
    let mut rows = Vec::new();
    let mut persistence = None;
    for (i, (name, cfg)) in ablation_ladder(&r.base).into_iter().enumerate() {
        let slug = row_slug(i, name);
        println!("[{}/5] {name}", i + 1);
        let run = TrainRun {
            data: r.data.clone(),
            train: cfg.clone(),
        };
        let dir = train_into(&run, &bundle, out.path(&slug), false)?;
        let report = eval_checkpoint(&dir, &bundle, opts)?;
        persistence.get_or_insert_with(|| {
            (1..=r.leads).map(|l| report.mean_rmse(Source::Persistence, l)).collect::<Vec<_>>()
        });
        out.record(&format!("{slug}/{MANIFEST}"));
        rows.push(score_row(name, &cfg, &dir, &report));
    }
    let rmse_at = |name: &str| rows.iter().find(|x| x.name == name).map(|x| x.rmse[r.leads - 1]).unwrap_or(f64::NAN);
    let mut md = scores_markdown(&rows, r.leads);
    if let Some(p) = &persistence {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(md, "\npersistence RMSE by lead: {}", cells.join(", "));
    }
    let (afno, pafno) = (rmse_at("+SF-B"), rmse_at("+PAFNO"));
    let (plain, aug) = (rmse_at("+PAFNO"), rmse_at("+noise"));
    let _ = writeln!(
        md,
        "\nseed {}, lead {}: PAFNO {pafno:.4} vs AFNO {afno:.4} ({}); augmented {aug:.4} vs unaugmented {plain:.4} ({})",
        r.base.seed,
        r.leads,
        if pafno <= afno { "holds" } else { "does not hold" },
        if aug <= plain { "holds" } else { "does not hold" },
    );
    out.write("ablation.csv", scores_csv(&rows))?;
    out.write("ablation.md", &md)?;
    let dir = out.finish()?;
    print!("{md}");
    println!("ablation {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// kernel-dump

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelRun {
    pub checkpoint: PathBuf,
    pub block: usize,
    pub domain: MixerDomain,
}

impl Default for KernelRun {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            block: 0,
            domain: MixerDomain::Spatial,
        }
    }
}

#[derive(Args, Debug)]
struct KernelDumpArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long, value_parser = parse_domain)]
    domain: Option<MixerDomain>,
}

/// Effective kernel CSV of one block's per-bin coefficients.
pub fn kernel_dump(params: &ModelParams, block: usize, domain: MixerDomain) -> crate::Result<String> {
    let cfg = params.config();
    if block >= cfg.layers {
        return Err(Error::Argument(format!("block {block} of {}", cfg.layers)));
    }
    let filter = params.filter(block, domain)?;
    let lambda = filter.lambda.ok_or_else(|| {
        Error::Argument(format!("block {block} {domain:?} mixer is {:?} and has no per-bin coefficients", filter.mode))
    })?;
    let grid: Vec<usize> = match domain {
        MixerDomain::Spatial => cfg.spatial_grid().to_vec(),
        MixerDomain::Temporal => cfg.temporal_grid().to_vec(),
    };
    Ok(kernel_csv(&effective_kernel(&lambda, &grid)?))
}

fn cmd_kernel_dump(a: KernelDumpArgs) -> CliResult<()> {
    let mut r: KernelRun = base_config(a.common.config.as_deref())?;
    if let Some(p) = a.checkpoint {
        r.checkpoint = p;
    }
    if let Some(v) = a.block {
        r.block = v;
    }
    if let Some(d) = a.domain {
        r.domain = d;
    }
    require_path(&r.checkpoint, "--checkpoint")?;
    let params = load_checkpoint(&r.checkpoint)?;
    let csv = kernel_dump(&params, r.block, r.domain)?;
    let mut out = Run::create(&a.common.out_dir, "kernel-dump", &r, 0)?;
    out.write("kernel.csv", csv)?;
    let dir = out.finish()?;
    println!("kernel {}", dir.join("kernel.csv").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// noise-study

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseStudyRun {
    pub data: PathBuf,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    /// Adds a two-step-loss variant without noise.
    pub two_step: bool,
    pub leads: usize,
    pub max_inits: Option<usize>,
}

impl Default for NoiseStudyRun {
    fn default() -> Self {
        Self {
            data: PathBuf::new(),
            base: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            two_step: false,
            leads: 5,
            max_inits: None,
        }
    }
}

#[derive(Args, Debug)]
struct NoiseStudyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetFlags,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    two_step: bool,
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long)]
    leads: Option<usize>,
    #[arg(long)]
    max_inits: Option<usize>,
}

/// Variants trained per seed, identical apart from the named change.
pub fn noise_variants(base: &TrainConfig, seed: u64, two_step: bool) -> Vec<(&'static str, TrainConfig)> {
    let mut off = base.clone();
    off.seed = seed;
    off.augment.noise = false;
    off.two_step = false;
    let mut on = off.clone();
    on.augment.noise = true;
    let mut v = vec![("no-noise", off.clone()), ("noise", on)];
    if two_step {
        off.two_step = true;
        v.push(("two-step", off));
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStudyResult {
    pub seed: u64,
    pub variant: String,
    pub score: RowScore,
}

/// Seeds on which the noise run's last-lead RMSE does not exceed the
/// no-noise run's, and the number of seeds compared.
pub fn noise_wins(results: &[NoiseStudyResult]) -> (usize, usize) {
    let mut seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let last = |seed: u64, v: &str| {
        results
            .iter()
            .find(|r| r.seed == seed && r.variant == v)
            .and_then(|r| r.score.rmse.last().copied())
    };
    let wins = seeds
        .iter()
        .filter(|&&s| matches!((last(s, "noise"), last(s, "no-noise")), (Some(a), Some(b)) if a <= b))
        .count();
    (wins, seeds.len())
}

/// Trains and scores every seed and variant into subdirectories of `out`.
fn noise_study_into(r: &NoiseStudyRun, bundle: &DatasetBundle, out: &mut Run) -> CliResult<Vec<NoiseStudyResult>> {
    let opts = EvalOptions {
        leads: r.leads,
        max_inits: r.max_inits,
        baselines: false,
    };
    let mut results = Vec::new();
    for &seed in &r.seeds {
        for (variant, cfg) in noise_variants(&r.base, seed, r.two_step) {
            let slug = format!("seed{seed}-{variant}");
            println!("seed {seed} {variant}");
            let run = TrainRun {
                data: r.data.clone(),
                train: cfg.clone(),
            };
            let dir = train_into(&run, bundle, out.path(&slug), false)?;
            let report = eval_checkpoint(&dir, bundle, opts)?;
            out.record(&format!("{slug}/{MANIFEST}"));
            results.push(NoiseStudyResult {
                seed,
                variant: variant.to_string(),
                score: score_row(variant, &cfg, &dir, &report),
            });
        }
    }
    Ok(results)
}

fn cmd_noise_study(a: NoiseStudyArgs) -> CliResult<()> {
    let mut r: NoiseStudyRun = base_config(a.common.config.as_deref())?;
    if let Some(d) = a.data {
        r.data = d;
    }
    require_path(&r.data, "--data")?;
    a.budget.apply(&mut r.base);
    if let Some(s) = a.seeds {
        r.seeds = s;
    }
    if a.two_step {
        r.two_step = true;
    }
    if let Some(v) = a.noise_variance {
        r.base.augment.noise_variance = v;
    }
    if let Some(v) = a.leads {
        r.leads = v;
    }
    if a.max_inits.is_some() {
        r.max_inits = a.max_inits;
    }
    if r.seeds.is_empty() {
        return usage("--seeds needs at least one seed");
    }
    if r.leads == 0 {
        return usage("--leads must be at least 1");
    }
    let bundle = load_wfr(&r.data)?;
    fit_model_to(&mut r.base.model, &bundle);
    r.base.validate()?;
    let mut out = Run::create(&a.common.out_dir, "noise-study", &r, r.seeds[0])?;
    let results = noise_study_into(&r, &bundle, &mut out)?;
    let mut csv = String::from("seed,variant,lead,rmse,acc\n");
    let mut md = format!("| seed | variant | RMSE({}) | ACC({}) |\n|---|---|---:|---:|\n", r.leads, r.leads);
    for x in &results {
        for (l, (rm, ac)) in x.score.rmse.iter().zip(&x.score.acc).enumerate() {
            let _ = writeln!(csv, "{},{},{},{rm:.9e},{ac:.9e}", x.seed, x.variant, l + 1);
        }
        let _ = writeln!(
            md,
            "| {} | {} | {:.4} | {:.3} |",
            x.seed,
            x.variant,
            x.score.rmse[r.leads - 1],
            x.score.acc[r.leads - 1]
        );
    }
    let (wins, n) = noise_wins(&results);
    let _ = writeln!(md, "\nnoise lead-{} RMSE <= no-noise on {wins}/{n} seeds", r.leads);
    out.write("noise_study.csv", csv)?;
    out.write("noise_study.md", &md)?;
    let dir = out.finish()?;
    print!("{md}");
    println!("study {}", dir.display());
    Ok(())
}
