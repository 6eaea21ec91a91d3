//! The `hint` command line.
//!
//! Every tunable value can come from a flag, an environment variable
//! `HINT_<NAME>` (upper-case, `-` replaced by `_`), or a `key = value` line in
//! the file given by `--config`. Flags win over environment variables, which
//! win over the config file. Keys are the flag names without the leading
//! dashes, e.g. `learning-rate = 3e-4` or `learning_rate = 3e-4`.
//!
//! Exit codes: 0 ok, 2 input error, 3 numeric failure, 4 compatibility error,
//! 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::dataio::{format_timestamp, read_series_csv, SensorSeries};
use crate::error::{Error, Result};
use crate::metrics::{write_scatter_csv, MetricsReport};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, HintModel, ModelConfig};
use crate::netgraph::{
    adjacency_cache_key, build_adjacency, read_adjacency_csv, read_distance_csv, read_nodes_csv,
    write_adjacency_cache, write_adjacency_csv, SensorNode,
};
use crate::staticfeat::{
    align_rows, drop_simulation_columns, encode_attributes, read_attributes_csv,
    read_simulation_csv, write_feature_matrix, SimulationProfile,
};
use crate::study::{Baseline, Study, StudyConfig};
use crate::synth::{self, SynthConfig};
use crate::trainer::{self, EpochRecord, NoHooks, Precision, TrainConfig, TrainHooks};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ADJACENCY_FILE: &str = "adjacency.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const SCHEMA_FILE: &str = "features_schema.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PER_NODE_FILE: &str = "metrics_per_node.csv";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "hint", version, about = "Traffic flow kriging on road sensor networks")]
pub struct Cli {
    /// `key = value` file with default option values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the top-k Gaussian-kernel adjacency from a distance table.
    BuildGraph(BuildGraphArgs),
    /// Encode segment attributes (and optional simulated flows) into static features.
    ExtractFeatures(ExtractFeaturesArgs),
    /// Write a synthetic corridor dataset.
    Synth(SynthArgs),
    /// Train a model and write its checkpoint and manifest.
    Train(TrainArgs),
    /// Write flow estimates for hidden nodes.
    Impute(ImputeArgs),
    /// Score a checkpoint on the hold-out nodes of the test segment.
    Evaluate(EvaluateArgs),
    /// Score a simple baseline on the same hold-out nodes and test segment.
    Baseline(BaselineArgs),
}

/// Input tables. Paths default to the standard file names inside `--data`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory with nodes.csv, distances.csv, attributes.csv, simulation.csv and series.csv.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub nodes: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub distances: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub attributes: Option<PathBuf>,
    /// Hourly simulated flows; used when present.
    #[arg(long, value_name = "FILE")]
    pub simulation: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub series: Option<PathBuf>,
    /// Precomputed adjacency CSV; built from the distances otherwise.
    #[arg(long, value_name = "FILE")]
    pub adjacency: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    /// Gaussian kernel width in metres (default: std of finite distances).
    #[arg(long)]
    pub kernel_sigma: Option<f64>,
    #[arg(long)]
    pub holdout_ratio: Option<f64>,
    /// Train, validation and test fractions, e.g. `0.6,0.2,0.2`.
    #[arg(long, value_name = "A,B,C")]
    pub split: Option<String>,
    /// Seed of the hold-out draw and of training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the simulated-flow feature columns.
    #[arg(long)]
    pub no_simulation: bool,
    /// Flows below this are excluded from MAPE.
    #[arg(long)]
    pub mape_floor: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildGraphArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub kernel_sigma: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractFeaturesArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub no_simulation: bool,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_mainline: Option<usize>,
    #[arg(long)]
    pub n_ramp: Option<usize>,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub interval_minutes: Option<u32>,
    #[arg(long)]
    pub ramp_scale: Option<f64>,
    #[arg(long)]
    pub free_flow_speed: Option<f64>,
    #[arg(long)]
    pub capacity_rate: Option<f64>,
    #[arg(long)]
    pub coupling: Option<f64>,
    #[arg(long)]
    pub sim_noise: Option<f64>,
    #[arg(long)]
    pub mean_flow: Option<f64>,
    #[arg(long)]
    pub speed_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainConfigArgs {
    #[arg(long)]
    pub r_min: Option<f64>,
    #[arg(long)]
    pub r_max: Option<f64>,
    /// Mining temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub e_warm: Option<usize>,
    #[arg(long)]
    pub e_noise: Option<usize>,
    /// Poisson noise scale on visible inputs.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub lr_floor: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long, alias = "max-epochs")]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub gate_l1_weight: Option<f64>,
    #[arg(long)]
    pub window_length: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `f32` or `f64`.
    #[arg(long)]
    pub precision: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub attention_heads: Option<usize>,
    #[arg(long)]
    pub transformer_layers: Option<usize>,
    #[arg(long)]
    pub gcn_layers: Option<usize>,
    #[arg(long)]
    pub diffusion_steps: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub gru_hidden: Option<usize>,
    #[arg(long)]
    pub time_dim: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Neighbours kept per adjacency row.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub study: StudyArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Segment {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub segment: Segment,
    /// Comma-separated node ids to estimate (default: the hold-out nodes).
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output CSV with columns timestamp,node_id,flow.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Knn,
    Mean,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub study: StudyArgs,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Neighbours averaged by `knn` (the graph's `k` is set with the config file).
    #[arg(long = "k", id = "knn_k")]
    pub knn_k: Option<usize>,
    /// Take the data preparation (hold-out set, split) from this checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Option values from the environment and the config file.
#[derive(Debug, Default, Clone)]
pub struct Settings {
    file: BTreeMap<String, String>,
    env: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_").to_ascii_lowercase()
}

impl Settings {
    /// Reads `HINT_*` variables from the process environment.
    pub fn load(config: Option<&Path>) -> Result<Self> {
        let env = std::env::vars().filter_map(|(k, v)| k.strip_prefix("HINT_").map(|k| (normalize_key(k), v)));
        Self::from_sources(config, env)
    }

    pub fn from_sources(config: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            file = parse_config(&text).map_err(|m| Error::parse(path, m))?;
        }
        Ok(Self {
            file,
            env: env.into_iter().collect(),
        })
    }

    /// `flag`, else the environment, else the config file, else `default`.
    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some((src, text)) => text
                .trim()
                .parse()
                .map_err(|e| Error::Param(format!("{key} from {src}: cannot parse {text:?}: {e}"))),
            None => Ok(default),
        }
    }

    pub fn flag(&self, key: &str, flag: bool) -> Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    fn raw(&self, key: &str) -> Option<(&'static str, &str)> {
        let key = normalize_key(key);
        self.env
            .get(&key)
            .map(|v| ("environment", v.as_str()))
            .or_else(|| self.file.get(&key).map(|v| ("config file", v.as_str())))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let k = normalize_key(k);
        if k.is_empty() {
            return Err(format!("line {}: empty key", i + 1));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

/// Parses the arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 64,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let quiet = cli.quiet;
    match &cli.command {
        Command::BuildGraph(a) => cmd_build_graph(a, &settings, quiet),
        Command::ExtractFeatures(a) => cmd_extract_features(a, &settings, quiet),
        Command::Synth(a) => cmd_synth(a, &settings, quiet),
        Command::Train(a) => cmd_train(a, &settings, quiet),
        Command::Impute(a) => cmd_impute(a, &settings, quiet),
        Command::Evaluate(a) => cmd_evaluate(a, &settings, quiet),
        Command::Baseline(a) => cmd_baseline(a, &settings, quiet),
    }
}

struct Tables {
    nodes: Vec<SensorNode>,
    distances: crate::netgraph::DistanceMatrix,
    adjacency: Option<PathBuf>,
    attributes: Option<PathBuf>,
    simulation: Option<PathBuf>,
    series: Option<PathBuf>,
}

impl DataArgs {
    fn path(&self, explicit: &Option<PathBuf>, name: &str, required: bool) -> Result<Option<PathBuf>> {
        let path = explicit.clone().or_else(|| self.data.as_ref().map(|d| d.join(name)));
        match path {
            Some(p) if p.exists() => Ok(Some(p)),
            Some(p) if required || explicit.is_some() => {
                Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")))
            }
            None if required => Err(Error::Input(format!("no path for {name}; pass --data or the file flag"))),
            _ => Ok(None),
        }
    }

    fn tables(&self) -> Result<Tables> {
        let nodes_path = self.path(&self.nodes, synth::NODES_FILE, true)?.expect("required");
        let dist_path = self.path(&self.distances, synth::DISTANCES_FILE, true)?.expect("required");
        let nodes = read_nodes_csv(&nodes_path)?;
        let distances = read_distance_csv(&dist_path, &nodes)?;
        Ok(Tables {
            adjacency: self.path(&self.adjacency, ADJACENCY_FILE, false)?.filter(|_| self.adjacency.is_some()),
            attributes: self.path(&self.attributes, synth::ATTRIBUTES_FILE, false)?,
            simulation: self.path(&self.simulation, synth::SIMULATION_FILE, false)?,
            series: self.path(&self.series, synth::SERIES_FILE, false)?,
            nodes,
            distances,
        })
    }
}

impl Tables {
    fn simulation(&self) -> Result<Option<Vec<SimulationProfile>>> {
        self.simulation.as_deref().map(read_simulation_csv).transpose()
    }

    fn series(&self) -> Result<SensorSeries> {
        let path = self
            .series
            .as_deref()
            .ok_or_else(|| Error::Input("no series table; pass --data or --series".into()))?;
        let order: Vec<String> = self.nodes.iter().map(|n| n.id.clone()).collect();
        read_series_csv(path, Some(&order))
    }

    fn study(&self, config: &StudyConfig) -> Result<Study> {
        let attr_path = self
            .attributes
            .as_deref()
            .ok_or_else(|| Error::Input("no attribute table; pass --data or --attributes".into()))?;
        let attributes = read_attributes_csv(attr_path)?;
        let simulation = self.simulation()?;
        let mut study = Study::from_parts(
            &self.nodes,
            &self.distances,
            &attributes,
            simulation.as_deref(),
            &self.series()?,
            config,
        )?;
        if let Some(path) = &self.adjacency {
            study.adjacency = read_adjacency_csv(path, &self.nodes, config.k)?;
        }
        Ok(study)
    }
}

fn parse_split(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Param(format!("split {text:?}: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Param(format!("split needs three fractions, got {text:?}"))),
    }
}

impl StudyArgs {
    fn resolve(&self, s: &Settings, k: Option<usize>) -> Result<StudyConfig> {
        let d = StudyConfig::default();
        let split = match s.get::<String>("split", self.split.clone(), String::new())? {
            t if t.is_empty() => d.split,
            t => parse_split(&t)?,
        };
        let kernel_sigma = match (self.kernel_sigma, s.raw("kernel_sigma")) {
            (Some(v), _) => Some(v),
            (None, Some(_)) => Some(s.get("kernel_sigma", None, 0.0)?),
            (None, None) => None,
        };
        Ok(StudyConfig {
            k: s.get("k", k, d.k)?,
            kernel_sigma,
            holdout_ratio: s.get("holdout_ratio", self.holdout_ratio, d.holdout_ratio)?,
            split,
            seed: s.get("seed", self.seed, d.seed)?,
            with_simulation: !s.flag("no_simulation", self.no_simulation)?,
            mape_floor: s.get("mape_floor", self.mape_floor, d.mape_floor)?,
        })
    }
}

impl TrainConfigArgs {
    fn resolve(&self, s: &Settings, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let precision = s.get::<String>("precision", self.precision.clone(), "f32".into())?;
        let max_epochs = match (self.epochs, s.raw("max_epochs")) {
            (None, Some(_)) => s.get("max_epochs", None, d.max_epochs)?,
            _ => s.get("epochs", self.epochs, d.max_epochs)?,
        };
        let cfg = TrainConfig {
            r_min: s.get("r_min", self.r_min, d.r_min)?,
            r_max: s.get("r_max", self.r_max, d.r_max)?,
            tau: s.get("tau", self.tau, d.tau)?,
            e_warm: s.get("e_warm", self.e_warm, d.e_warm)?,
            e_noise: s.get("e_noise", self.e_noise, d.e_noise)?,
            sigma: s.get("sigma", self.sigma, d.sigma)?,
            learning_rate: s.get("learning_rate", self.learning_rate, d.learning_rate)?,
            lr_floor: s.get("lr_floor", self.lr_floor, d.lr_floor)?,
            clip_norm: s.get("clip_norm", self.clip_norm, d.clip_norm)?,
            max_epochs,
            patience: s.get("patience", self.patience, d.patience)?,
            seed,
            epsilon: s.get("epsilon", self.epsilon, d.epsilon)?,
            gate_l1_weight: s.get("gate_l1_weight", self.gate_l1_weight, d.gate_l1_weight)?,
            window_length: s.get("window_length", self.window_length, d.window_length)?,
            batch_size: s.get("batch_size", self.batch_size, d.batch_size)?,
            precision: Precision::from_str(&precision)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelArgs {
    fn resolve(&self, s: &Settings) -> Result<ModelConfig> {
        let d = ModelConfig::default();
        let cfg = ModelConfig {
            hidden_dim: s.get("hidden_dim", self.hidden_dim, d.hidden_dim)?,
            attention_heads: s.get("attention_heads", self.attention_heads, d.attention_heads)?,
            transformer_layers: s.get("transformer_layers", self.transformer_layers, d.transformer_layers)?,
            gcn_layers: s.get("gcn_layers", self.gcn_layers, d.gcn_layers)?,
            diffusion_steps: s.get("diffusion_steps", self.diffusion_steps, d.diffusion_steps)?,
            dropout_rate: s.get("dropout_rate", self.dropout_rate, d.dropout_rate)?,
            gru_hidden: s.get("gru_hidden", self.gru_hidden, d.gru_hidden)?,
            time_dim: s.get("time_dim", self.time_dim, d.time_dim)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_build_graph(a: &BuildGraphArgs, s: &Settings, quiet: bool) -> Result<()> {
    let k = s.get("k", a.k, StudyConfig::default().k)?;
    let sigma = match (a.kernel_sigma, s.raw("kernel_sigma")) {
        (Some(v), _) => Some(v),
        (None, Some(_)) => Some(s.get("kernel_sigma", None, 0.0)?),
        _ => None,
    };
    let t = a.data.tables()?;
    let adj = build_adjacency(&t.distances, k, sigma)?;
    create_dir(&a.out)?;
    write_adjacency_csv(&a.out.join(ADJACENCY_FILE), &t.nodes, &adj)?;
    let key = adjacency_cache_key(&t.nodes, &t.distances, k, sigma);
    write_adjacency_cache(&a.out.join(format!("adjacency_{key}.cache")), &adj)?;
    if !quiet {
        println!("nodes {}  edges {}  k {}  cache {key}", adj.n, adj.edge_count(), k);
    }
    Ok(())
}

pub fn cmd_extract_features(a: &ExtractFeaturesArgs, s: &Settings, quiet: bool) -> Result<()> {
    let t = a.data.tables()?;
    let attr_path = t
        .attributes
        .as_deref()
        .ok_or_else(|| Error::Input("no attribute table; pass --data or --attributes".into()))?;
    let sim = t.simulation()?;
    let order: Vec<String> = t.nodes.iter().map(|n| n.id.clone()).collect();
    let mut x = align_rows(&encode_attributes(&read_attributes_csv(attr_path)?, sim.as_deref())?, &order)?;
    if s.flag("no_simulation", a.no_simulation)? && x.has_simulation() {
        x = drop_simulation_columns(&x)?;
    }
    create_dir(&a.out)?;
    write_feature_matrix(&a.out.join(FEATURES_FILE), &a.out.join(SCHEMA_FILE), &x)?;
    if !quiet {
        println!("nodes {}  columns {}  schema {}", x.n(), x.f(), x.schema_hash());
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs, s: &Settings, quiet: bool) -> Result<()> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        n_mainline: s.get("n_mainline", a.n_mainline, d.n_mainline)?,
        n_ramp: s.get("n_ramp", a.n_ramp, d.n_ramp)?,
        days: s.get("days", a.days, d.days)?,
        interval_minutes: s.get("interval_minutes", a.interval_minutes, d.interval_minutes)?,
        ramp_scale: s.get("ramp_scale", a.ramp_scale, d.ramp_scale)?,
        free_flow_speed: s.get("free_flow_speed", a.free_flow_speed, d.free_flow_speed)?,
        capacity_rate: s.get("capacity_rate", a.capacity_rate, d.capacity_rate)?,
        coupling: s.get("coupling", a.coupling, d.coupling)?,
        sim_noise: s.get("sim_noise", a.sim_noise, d.sim_noise)?,
        mean_flow: s.get("mean_flow", a.mean_flow, d.mean_flow)?,
        speed_noise: s.get("speed_noise", a.speed_noise, d.speed_noise)?,
        seed: s.get("seed", a.seed, d.seed)?,
    };
    let ds = synth::generate(&cfg)?;
    ds.write_to_dir(&a.out)?;
    if !quiet {
        let series = &ds.traffic.series;
        println!("nodes {}  steps {}  seed {}  -> {}", series.n(), series.t(), cfg.seed, a.out.display());
    }
    Ok(())
}

struct Progress {
    quiet: bool,
}

impl TrainHooks for Progress {
    fn on_epoch(&mut self, r: &EpochRecord) {
        if !self.quiet {
            println!(
                "epoch {:>4}  train {:.5}  val {:.5}  hold-out MAE {:.3}  lr {:.2e}{}",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.val_mae,
                r.learning_rate,
                if r.improved { "  *" } else { "" }
            );
        }
    }
}

pub fn cmd_train(a: &TrainArgs, s: &Settings, quiet: bool) -> Result<()> {
    let study_cfg = a.study.resolve(s, a.k)?;
    let train_cfg = a.train.resolve(s, study_cfg.seed)?;
    let model_cfg = a.model.resolve(s)?;
    let study = a.data.tables()?.study(&study_cfg)?;
    let out = study.train(&model_cfg, &train_cfg, &mut Progress { quiet })?;
    create_dir(&a.out)?;
    let meta = out.manifest.checkpoint_meta(&study.holdout);
    save_checkpoint(&a.out.join(CHECKPOINT_FILE), &out.model, &meta)?;
    out.manifest.write(&a.out.join(MANIFEST_FILE))?;
    if !quiet {
        let best = &out.manifest.epochs[out.manifest.best_epoch];
        println!(
            "best epoch {}  validation hold-out MAE {:.3}  stop: {}",
            best.epoch, best.val_mae, out.manifest.stop_reason
        );
    }
    Ok(())
}

fn load_model(path: &Path, precision: Option<Precision>) -> Result<(HintModel, CheckpointMeta)> {
    load_checkpoint(path, precision.unwrap_or(Precision::F32).dtype())
}

/// Rebuilds the data preparation recorded in the checkpoint and checks it matches.
fn study_for_checkpoint(data: &DataArgs, meta: &CheckpointMeta) -> Result<Study> {
    let cfg = Study::config_from_notes(&meta.extra)?;
    let study = data.tables()?.study(&cfg)?;
    meta.check_nodes(&study.test.node_ids)?;
    meta.check_schema(&study.features.schema_hash())?;
    if study.holdout != meta.holdout {
        return Err(Error::Compat("the hold-out set differs from the one used in training".into()));
    }
    Ok(study)
}

#[derive(Serialize)]
struct ReportInfo<'a> {
    label: &'a str,
    seed: u64,
    config_hash: &'a str,
    checkpoint_epoch: Option<usize>,
    segment: &'a str,
    test_start: String,
    test_steps: usize,
    holdout: Vec<String>,
    study: &'a StudyConfig,
}

fn write_report(
    out: &Path,
    study: &Study,
    pred: &ndarray::Array2<f64>,
    report: &MetricsReport,
    info: &ReportInfo,
    quiet: bool,
) -> Result<()> {
    create_dir(out)?;
    report.write_csv(&out.join(METRICS_FILE))?;
    report.write_per_node_csv(&out.join(PER_NODE_FILE))?;
    let (target, mask) = study.holdout_target();
    write_scatter_csv(&out.join(SCATTER_FILE), pred.view(), target.view(), mask.view(), &study.holdout_ids())?;
    write_json(&out.join(REPORT_FILE), info)?;
    if !quiet {
        print!("{}", report.to_table());
    }
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, s: &Settings, quiet: bool) -> Result<()> {
    let (model, meta) = load_model(&a.checkpoint, None)?;
    let study = study_for_checkpoint(&a.data, &meta)?;
    let batch = s.get("batch_size", a.batch_size, TrainConfig::default().batch_size)?;
    let pred = study.hint_predictions(&model, &meta, batch)?;
    let report = study.evaluate(&pred, "hint")?;
    let info = ReportInfo {
        label: "hint",
        seed: meta.seed,
        config_hash: &meta.config_hash,
        checkpoint_epoch: Some(meta.epoch),
        segment: "test",
        test_start: format_timestamp(&study.test.start),
        test_steps: study.test.t(),
        holdout: study.holdout_ids(),
        study: &study.config,
    };
    write_report(&a.out, &study, &pred, &report, &info, quiet)
}

pub fn cmd_baseline(a: &BaselineArgs, s: &Settings, quiet: bool) -> Result<()> {
    let (study_cfg, config_hash, seed) = match &a.checkpoint {
        Some(path) => {
            let (_, meta) = load_model(path, None)?;
            (Study::config_from_notes(&meta.extra)?, meta.config_hash, meta.seed)
        }
        None => {
            let cfg = a.study.resolve(s, None)?;
            let seed = cfg.seed;
            (cfg, "-".to_string(), seed)
        }
    };
    let study = a.data.tables()?.study(&study_cfg)?;
    let method = match a.method {
        Method::Knn => Baseline::Knn {
            k: s.get("knn_k", a.knn_k, 3)?,
        },
        Method::Mean => Baseline::Mean,
    };
    let label = method.label();
    let pred = study.baseline_predictions(method)?;
    let report = study.evaluate(&pred, &label)?;
    let info = ReportInfo {
        label: &label,
        seed,
        config_hash: &config_hash,
        checkpoint_epoch: None,
        segment: "test",
        test_start: format_timestamp(&study.test.start),
        test_steps: study.test.t(),
        holdout: study.holdout_ids(),
        study: &study.config,
    };
    write_report(&a.out, &study, &pred, &report, &info, quiet)
}

pub fn cmd_impute(a: &ImputeArgs, s: &Settings, quiet: bool) -> Result<()> {
    let (model, meta) = load_model(&a.checkpoint, None)?;
    let cfg = Study::config_from_notes(&meta.extra)?;
    let tables = a.data.tables()?;
    let study = tables.study(&cfg)?;
    meta.check_nodes(&study.test.node_ids)?;
    let full;
    let series = match a.segment {
        Segment::Train => &study.train,
        Segment::Validation => &study.validation,
        Segment::Test => &study.test,
        Segment::All => {
            full = tables.series()?;
            &full
        }
    };
    let targets: Vec<usize> = match &a.targets {
        None => meta.holdout.indices.clone(),
        Some(ids) => ids
            .iter()
            .map(|id| {
                series
                    .node_ids
                    .iter()
                    .position(|n| n == id)
                    .ok_or_else(|| Error::Input(format!("unknown target node {id:?}")))
            })
            .collect::<Result<_>>()?,
    };
    let batch = s.get("batch_size", a.batch_size, TrainConfig::default().batch_size)?;
    let est = trainer::impute(
        &model,
        &meta,
        series,
        &study.features,
        &study.adjacency,
        &targets,
        batch,
        &mut NoHooks,
    )?;
    write_imputed_csv(&a.out, series, &targets, &est)?;
    if !quiet {
        println!("{} nodes x {} steps -> {}", targets.len(), series.t(), a.out.display());
    }
    Ok(())
}

/// Long-format CSV `timestamp,node_id,flow`.
pub fn write_imputed_csv(path: &Path, series: &SensorSeries, targets: &[usize], est: &ndarray::Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["timestamp", "node_id", "flow"]).map_err(err)?;
    for t in 0..series.t() {
        let ts = format_timestamp(&series.timestamp(t));
        for (i, &v) in targets.iter().enumerate() {
            w.write_record([ts.as_str(), series.node_ids[v].as_str(), &est[[i, t]].to_string()])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_lines_parse_and_normalize_keys() {
        let m = parse_config("# comment\nlearning-rate = 3e-4\n\nK=7  # trailing\n").unwrap();
        assert_eq!(m["learning_rate"], "3e-4");
        assert_eq!(m["k"], "7");
        assert!(parse_config("no equals sign").is_err());
    }

    #[test]
    fn flags_beat_environment_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "patience = 5\ntau = 0.25\nseed = 9\n").unwrap();
        let s = Settings::from_sources(Some(&path), [("tau".to_string(), "0.75".to_string())]).unwrap();
        assert_eq!(s.get("patience", None, 20usize).unwrap(), 5);
        assert_eq!(s.get("patience", Some(3usize), 20).unwrap(), 3);
        assert_eq!(s.get("tau", None, 0.5).unwrap(), 0.75);
        assert_eq!(s.get("epsilon", None, 1e-8).unwrap(), 1e-8);
        let bad = Settings::from_sources(None, [("k".to_string(), "x".to_string())]).unwrap();
        assert!(matches!(bad.get("k", None, 5usize), Err(Error::Param(_))));
    }

    #[test]
    fn split_parsing() {
        assert_eq!(parse_split("0.7, 0.1,0.2").unwrap(), (0.7, 0.1, 0.2));
        assert!(parse_split("0.5,0.5").is_err());
        assert!(parse_split("a,b,c").is_err());
    }

    #[test]
    fn usage_errors_exit_64_and_help_exits_0() {
        assert_eq!(run(["hint", "build-graph", "--k", "0", "--out", "x", "--nodes", "/nonexistent"]), 2);
        assert_eq!(run(["hint", "frobnicate"]), 64);
        assert_eq!(run(["hint", "train", "--epochs", "many", "--out", "x"]), 64);
        assert_eq!(run(["hint", "--help"]), 0);
    }
}
