//! `mixer` command line: `gen`, `train`, `eval` and `verify`.
//!
//! Every command reads an optional JSON [`RunConfig`], applies flag
//! overrides, and writes fixed-name outputs under `--out`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use mixer_core::evalharness::{self, EmbedMode, GalleryKind, GallerySetting};
use mixer_core::miprobe::{self, CheckReport};
use mixer_core::model::{Checkpoint, MixerModel, ModelConfig};
use mixer_core::synthgen::{self, Dataset, GenConfig, Modality};
use mixer_core::trainer::{self, TrainConfig, TrainError, TrainState};

pub const DATASET_FILE: &str = "dataset.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.csv";
pub const HIST_FILE: &str = "dist_hist.csv";
pub const DIST_STATS_FILE: &str = "dist_stats.csv";
pub const VERIFY_FILE: &str = "verify.csv";
pub const SWEEP_DIR: &str = "sweep";
pub const SWEEP_REPORT_FILE: &str = "sweep_report.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub settings: Vec<GalleryKind>,
    pub embed_modes: Vec<EmbedMode>,
    pub query_modality: Modality,
    /// Single-shot trials; all-shot when absent.
    pub single_shot_trials: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            settings: vec![
                GalleryKind::Mix,
                GalleryKind::MixCam,
                GalleryKind::MixCamId,
                GalleryKind::MixId,
            ],
            embed_modes: vec![EmbedMode::FusedRule],
            query_modality: Modality::Infrared,
            single_shot_trials: None,
        }
    }
}

/// Everything one pipeline needs. `model.input_dim` and `model.num_ids` are
/// taken from the dataset at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.gen.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }
}

#[derive(Debug, Parser)]
#[command(name = "mixer", version, about = "Modality-erased / modality-related feature learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for generation, initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(Common),
    /// Train a model on the dataset in the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (default: <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint to resume from (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue training from the checkpoint.
        #[arg(long)]
        resume: bool,
        /// Grid axis such as `lambda_m=0,0.2,0.4`; repeat for a product grid.
        #[arg(long)]
        sweep: Vec<String>,
    },
    /// Evaluate a checkpoint under the retrieval protocols.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (default: <out>/dataset.csv).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint (default: <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma list of Mix, MixCam, MixCamID, MixID, CrossModal, UniModal.
        #[arg(long)]
        settings: Option<String>,
        /// Comma list of fused_rule, erased_only, related_only.
        #[arg(long)]
        embed_mode: Option<String>,
        /// Query modality, V or I.
        #[arg(long)]
        query_modality: Option<String>,
        /// Single-shot protocol with this many trials.
        #[arg(long)]
        single_shot: Option<usize>,
        /// Evaluate every run under <out>/sweep instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Run the information-theoretic checks.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Random tables per check.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(common) => cmd_gen(&resolve(&common)?).map(|_| ()),
        Command::Train {
            common,
            dataset,
            checkpoint,
            resume,
            sweep,
        } => {
            let cfg = resolve(&common)?;
            let dataset = dataset.unwrap_or_else(|| cfg.out.join(DATASET_FILE));
            if sweep.is_empty() {
                let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
                cmd_train(&cfg, &dataset, resume.then_some(ckpt.as_path()))
            } else {
                cmd_train_sweep(&cfg, &dataset, &sweep)
            }
        }
        Command::Eval {
            common,
            dataset,
            checkpoint,
            settings,
            embed_mode,
            query_modality,
            single_shot,
            sweep,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = settings {
                cfg.eval.settings = parse_settings(&s)?;
            }
            if let Some(m) = embed_mode {
                cfg.eval.embed_modes = parse_embed_modes(&m)?;
            }
            if let Some(q) = query_modality {
                cfg.eval.query_modality = q.parse().map_err(CliError::Usage)?;
            }
            if single_shot.is_some() {
                cfg.eval.single_shot_trials = single_shot;
            }
            let dataset = dataset.unwrap_or_else(|| cfg.out.join(DATASET_FILE));
            if sweep {
                cmd_eval_sweep(&cfg, &dataset)
            } else {
                let ckpt = checkpoint.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
                cmd_eval(&cfg, &ckpt, &dataset, &cfg.out).map(|_| ())
            }
        }
        Command::Verify { common, trials } => {
            let cfg = resolve(&common)?;
            let seed = common.seed.unwrap_or(0);
            cmd_verify(&cfg.out, || miprobe::run_all_checks(trials, seed)).map(|_| ())
        }
    }
}

/// Loads the config file if given and applies flag overrides.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn valid_names<T: std::fmt::Display>(all: impl IntoIterator<Item = T>) -> String {
    all.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

pub fn parse_settings(list: &str) -> Result<Vec<GalleryKind>> {
    list.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "unknown setting {:?}; valid settings: {}",
                    s.trim(),
                    valid_names(GalleryKind::ALL)
                ))
            })
        })
        .collect()
}

pub fn parse_embed_modes(list: &str) -> Result<Vec<EmbedMode>> {
    list.split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "unknown embed mode {:?}; valid modes: {}",
                    s.trim(),
                    valid_names(EmbedMode::ALL)
                ))
            })
        })
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<Dataset> {
    cfg.gen.validate().map_err(config_err)?;
    let ds = synthgen::generate(&cfg.gen).map_err(config_err)?;
    create_dir(&cfg.out)?;
    synthgen::save(&ds, &cfg.out.join(DATASET_FILE)).map_err(config_err)?;
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write(&cfg.out.join(CONFIG_FILE), json + "\n")?;
    let oracle = synthgen::oracle_check(&ds);
    println!(
        "generated {} samples ({} train, {} test); nearest-centroid oracle accuracy {:.4} (V {:.4}, I {:.4})",
        ds.samples.len(),
        ds.train().len(),
        ds.test().len(),
        oracle.accuracy,
        oracle.accuracy_visible,
        oracle.accuracy_infrared
    );
    Ok(ds)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset {} not found", path.display())));
    }
    synthgen::load(path).map_err(config_err)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

/// Trains into `dir`, writing the checkpoint and history there.
pub fn train_into(cfg: &RunConfig, ds: &Dataset, resume: Option<&Path>, dir: &Path) -> Result<TrainState> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.input_dim = ds.input_dim();
    model_cfg.num_ids = ds.config.num_ids;
    let (state, mut history) = match resume {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
            }
            let ck = Checkpoint::load(path).map_err(config_err)?;
            if ck.model.config.input_dim != model_cfg.input_dim || ck.model.config.num_ids != model_cfg.num_ids {
                return Err(CliError::Config("checkpoint does not match the dataset".into()));
            }
            let done = ck.epochs_completed;
            let previous = match fs::read_to_string(dir.join(HISTORY_FILE)) {
                Ok(text) => trainer::parse_history(&text).map_err(config_err)?,
                Err(_) => Vec::new(),
            };
            let kept = previous.into_iter().filter(|r| r.epoch < done).collect();
            (TrainState::from_checkpoint(ck), kept)
        }
        None => {
            let model = MixerModel::new(model_cfg).map_err(config_err)?;
            (TrainState::fresh(model), Vec::new())
        }
    };
    let (state, new) = trainer::train_from(state, ds, &cfg.train).map_err(train_error)?;
    history.extend(new);
    create_dir(dir)?;
    state.to_checkpoint().save(&dir.join(CHECKPOINT_FILE)).map_err(config_err)?;
    write(&dir.join(HISTORY_FILE), trainer::history_csv(&history))?;
    Ok(state)
}

pub fn cmd_train(cfg: &RunConfig, dataset: &Path, resume: Option<&Path>) -> Result<()> {
    cfg.train.validate().map_err(config_err)?;
    let ds = load_dataset(dataset)?;
    let state = train_into(cfg, &ds, resume, &cfg.out)?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}",
        state.epochs_completed,
        state.optimizer.step,
        cfg.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// One sweep axis: a config key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<f64>,
}

pub const SWEEP_KEYS: [&str; 6] = ["lambda_m", "lambda_o", "lambda_f", "margin_alpha", "cc_margin_rho", "grl_coeff"];

pub fn parse_sweep(spec: &str) -> Result<SweepAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("sweep {spec:?} must look like key=v1,v2")))?;
    if !SWEEP_KEYS.contains(&key) {
        return Err(CliError::Usage(format!(
            "unknown sweep key {key:?}; valid keys: {}",
            SWEEP_KEYS.join(", ")
        )));
    }
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad sweep value {v:?} for {key}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepAxis { key: key.into(), values })
}

fn apply_sweep(train: &mut TrainConfig, key: &str, value: f64) {
    let w = &mut train.weights;
    match key {
        "lambda_m" => w.lambda_m = value,
        "lambda_o" => w.lambda_o = value,
        "lambda_f" => w.lambda_f = value,
        "margin_alpha" => w.margin_alpha = value,
        "cc_margin_rho" => w.cc_margin_rho = value,
        "grl_coeff" => train.grl_coeff = value,
        _ => unreachable!("validated sweep key"),
    }
}

/// Cartesian product of the axes as `(run name, assignments)`.
pub fn sweep_grid(axes: &[SweepAxis]) -> Vec<(String, Vec<(String, f64)>)> {
    let mut grid: Vec<Vec<(String, f64)>> = vec![vec![]];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut next = prefix.clone();
                    next.push((axis.key.clone(), v));
                    next
                })
            })
            .collect();
    }
    grid.into_iter()
        .map(|assign| {
            let name = assign.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",");
            (name, assign)
        })
        .collect()
}

pub fn cmd_train_sweep(cfg: &RunConfig, dataset: &Path, specs: &[String]) -> Result<()> {
    let axes = specs.iter().map(|s| parse_sweep(s)).collect::<Result<Vec<_>>>()?;
    let ds = load_dataset(dataset)?;
    for (name, assign) in sweep_grid(&axes) {
        let mut run = cfg.clone();
        for (k, v) in &assign {
            apply_sweep(&mut run.train, k, *v);
        }
        run.train.validate().map_err(config_err)?;
        let dir = cfg.out.join(SWEEP_DIR).join(&name);
        let state = train_into(&run, &ds, None, &dir)?;
        println!("sweep {name}: {} epochs", state.epochs_completed);
    }
    Ok(())
}

/// Evaluates every requested setting and embed mode; returns the report CSV.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path, dataset: &Path) -> Result<(String, Vec<String>)> {
    if !checkpoint.exists() {
        return Err(CliError::Usage(format!("checkpoint {} not found", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint).map_err(config_err)?;
    let ds = load_dataset(dataset)?;
    let records = ck.model.embed_dataset(ds.test()).map_err(config_err)?;
    let q = cfg.eval.query_modality;
    let mut rows = Vec::new();
    let mut hist = None;
    let mut stats = String::from("setting,embed_mode,query_modality,intra_count,intra_mean,intra_var,inter_count,inter_mean,inter_var\n");
    for &kind in &cfg.eval.settings {
        for &mode in &cfg.eval.embed_modes {
            let mut setting = GallerySetting::new(kind, mode);
            if let Some(trials) = cfg.eval.single_shot_trials {
                setting = setting.single_shot(trials, cfg.train.seed);
            }
            let report = evalharness::evaluate(&records, q, &setting).map_err(config_err)?;
            rows.push(evalharness::report_row(&setting, q, &report));
            let dist = evalharness::distance_distribution(&records, q, &setting).map_err(config_err)?;
            writeln!(
                stats,
                "{kind},{mode},{q},{},{},{},{},{},{}",
                dist.intra.count, dist.intra.mean, dist.intra.variance, dist.inter.count, dist.inter.mean, dist.inter.variance
            )
            .expect("string write");
            hist.get_or_insert_with(|| evalharness::histogram_csv(&dist));
        }
    }
    Ok((stats, [vec![hist.unwrap_or_default()], rows].concat()))
}

/// Writes `report.csv`, `dist_hist.csv` (first setting and mode) and
/// `dist_stats.csv` into `dir`; returns the report text.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, dir: &Path) -> Result<String> {
    if cfg.eval.settings.is_empty() || cfg.eval.embed_modes.is_empty() {
        return Err(CliError::Usage("at least one setting and embed mode are required".into()));
    }
    let (stats, mut parts) = evaluate_checkpoint(cfg, checkpoint, dataset)?;
    let hist = parts.remove(0);
    let mut report = String::from(evalharness::REPORT_HEADER);
    report.push('\n');
    for row in &parts {
        report.push_str(row);
        report.push('\n');
    }
    create_dir(dir)?;
    write(&dir.join(REPORT_FILE), &report)?;
    write(&dir.join(HIST_FILE), hist)?;
    write(&dir.join(DIST_STATS_FILE), stats)?;
    print!("{report}");
    Ok(report)
}

pub fn cmd_eval_sweep(cfg: &RunConfig, dataset: &Path) -> Result<()> {
    let root = cfg.out.join(SWEEP_DIR);
    let mut runs: Vec<PathBuf> = fs::read_dir(&root)
        .map_err(|e| CliError::Usage(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CHECKPOINT_FILE).exists())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(CliError::Usage(format!("no sweep runs under {}", root.display())));
    }
    let mut out = format!("run,{}\n", evalharness::REPORT_HEADER);
    for dir in runs {
        let name = dir.file_name().expect("run dir").to_string_lossy().into_owned();
        let report = cmd_eval(cfg, &dir.join(CHECKPOINT_FILE), dataset, &dir)?;
        for row in report.lines().skip(1) {
            writeln!(out, "\"{name}\",{row}").expect("string write");
        }
    }
    write(&cfg.out.join(SWEEP_REPORT_FILE), out)
}

/// Runs `suite`, writes `verify.csv`, and fails if any check fails.
pub fn cmd_verify(out: &Path, suite: impl FnOnce() -> Vec<CheckReport>) -> Result<Vec<CheckReport>> {
    let reports = suite();
    create_dir(out)?;
    write(&out.join(VERIFY_FILE), miprobe::verify_csv(&reports))?;
    for r in &reports {
        println!(
            "{:<44} trials {:>5}  max violation {:.3e}  {}",
            r.check,
            r.trials,
            r.max_violation,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
