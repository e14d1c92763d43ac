//! Experiment plumbing behind the `adapos` command line.
//!
//! An [`ExperimentConfig`] (TOML) names the environment, metric, model size,
//! training schedule, and sweep. A single master seed fans out to every
//! stage through [`crate::derive_seed`], so each command is a pure function
//! of `(config, seed)`.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! data/train.bin, data/train.csv, data/test.bin, data/test.csv
//! metric_cache.bin
//! checkpoints/<arch>_<strategy>.ckpt
//! losses/<arch>_<strategy>.csv
//! sweep/<stem>.csv, sweep/<stem>_heatmap.svg, sweep/<stem>_heatmap_<arch>.svg
//!                                     (stem: `sweep` or `grid`)
//! manifest.json                       (replicate-grid only)
//! <command>.provenance.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{sweep, SweepEntry, SweepResult, TrainedModel, DEFAULT_EVAL_BATCH};
use crate::metrics::{cache_key, read_cache, write_cache, MetricConfig, PairwiseMatrix, PseudoDistanceProvider};
use crate::models::{AdaPosConfig, Architecture, BaselineConfig, ModelSpec, Network};
use crate::sim::{
    generate_dataset, generate_trajectory, read_dataset, write_csv, write_dataset, Dataset, Environment,
    Snapshot,
};
use crate::training::{train, write_loss_csv, Strategy, TrainConfig, TrainHooks};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Usage(_)
        | Error::Validation(_)
        | Error::Comparability(_)
        | Error::ExcludedSingleAntenna
        | Error::Unreachable { .. } => 2,
        Error::Divergence { .. } | Error::Numeric(_) | Error::Degenerate(_) | Error::DegenerateFit(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Shape { .. } | Error::AntennaId { .. } | Error::Oracle(_) => 1,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentPreset {
    /// 6 antennas on the perimeter of a 20 m square.
    Desk,
    /// 32 antennas in four 8-element arrays.
    DeskMimo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSpec {
    pub preset: EnvironmentPreset,
    /// Overrides the preset's receiver noise level.
    pub noise_std: Option<f64>,
    pub duration_s: f64,
    pub test_duration_s: f64,
    pub rate_hz: f64,
    pub max_speed: f64,
    /// Use this dataset file instead of simulating the training set.
    pub dataset: Option<PathBuf>,
    /// Use this dataset file instead of simulating the test set.
    pub test_dataset: Option<PathBuf>,
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self {
            preset: EnvironmentPreset::Desk,
            noise_std: None,
            duration_s: 600.0,
            test_duration_s: 100.0,
            rate_hz: 6.6,
            max_speed: 1.0,
            dataset: None,
            test_dataset: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Full,
    Desk,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Architecture for `train`; `replicate-grid` trains both.
    pub architecture: Architecture,
    pub size: ModelSize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: Architecture::AdaPos,
            size: ModelSize::Desk,
        }
    }
}

impl ModelSection {
    pub fn spec(&self, architecture: Architecture, a_max: usize) -> ModelSpec {
        match (architecture, self.size) {
            (Architecture::AdaPos, ModelSize::Full) => ModelSpec::AdaPos(AdaPosConfig::full(a_max)),
            (Architecture::AdaPos, ModelSize::Desk) => ModelSpec::AdaPos(AdaPosConfig::desk(a_max)),
            (Architecture::AdaPos, ModelSize::Test) => ModelSpec::AdaPos(AdaPosConfig::test(a_max)),
            (Architecture::Baseline, ModelSize::Full) => ModelSpec::Baseline(BaselineConfig::full(a_max)),
            (Architecture::Baseline, ModelSize::Desk) => ModelSpec::Baseline(BaselineConfig::desk(a_max)),
            (Architecture::Baseline, ModelSize::Test) => ModelSpec::Baseline(BaselineConfig::test(a_max)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// `fixed-n:<k>` or `random-n`; used by `train`.
    pub strategy: Strategy,
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub divergence_threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            strategy: t.strategy,
            batch_size: t.batch_size,
            epochs: t.epochs,
            pairs_per_epoch: t.pairs_per_epoch,
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            divergence_threshold: t.divergence_threshold,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, strategy: Strategy, seed: u64) -> TrainConfig {
        TrainConfig {
            strategy,
            batch_size: self.batch_size,
            epochs: self.epochs,
            pairs_per_epoch: self.pairs_per_epoch,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            seed,
            divergence_threshold: self.divergence_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    /// Evaluation antenna counts; defaults to `2..=a_max`.
    pub n_e: Option<Vec<usize>>,
    /// Snapshots per evaluation batch.
    pub batch_size: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            n_e: None,
            batch_size: DEFAULT_EVAL_BATCH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub environment: EnvironmentSpec,
    pub metric: MetricConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            environment: EnvironmentSpec::default(),
            metric: MetricConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML; syntax and type errors carry the line and key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads, applies overrides, resolves relative paths against the config
    /// file's directory, and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.out_dir = resolve(&cfg.out_dir);
        cfg.environment.dataset = cfg.environment.dataset.as_deref().map(resolve);
        cfg.environment.test_dataset = cfg.environment.test_dataset.as_deref().map(resolve);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(s) = overrides.seed {
            self.seed = s;
        }
        if let Some(o) = &overrides.out_dir {
            self.out_dir = o.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::Config(format!("field `{name}`: {msg}")));
        let e = &self.environment;
        if !(e.duration_s > 0.0) {
            return field("environment.duration_s", "must be positive");
        }
        if !(e.test_duration_s > 0.0) {
            return field("environment.test_duration_s", "must be positive");
        }
        if !(e.rate_hz > 0.0) {
            return field("environment.rate_hz", "must be positive");
        }
        if !(e.max_speed >= 0.0) {
            return field("environment.max_speed", "must be nonnegative");
        }
        if let Some(n) = e.noise_std {
            if !(n >= 0.0) {
                return field("environment.noise_std", "must be nonnegative");
            }
        }
        for (name, p) in [("environment.dataset", &e.dataset), ("environment.test_dataset", &e.test_dataset)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("field `{name}`: file {} does not exist", p.display())));
                }
            }
        }
        self.metric
            .validate()
            .map_err(|err| Error::Config(format!("section `metric`: {err}")))?;
        let t = &self.train;
        if t.batch_size < 1 {
            return field("train.batch_size", "must be at least 1");
        }
        if t.epochs < 1 {
            return field("train.epochs", "must be at least 1");
        }
        if t.pairs_per_epoch == Some(0) {
            return field("train.pairs_per_epoch", "must be at least 1");
        }
        if t.warmup_steps < 1 {
            return field("train.warmup_steps", "must be at least 1");
        }
        if !(t.base_lr >= 0.0) {
            return field("train.base_lr", "must be nonnegative");
        }
        if !(t.weight_decay >= 0.0) {
            return field("train.weight_decay", "must be nonnegative");
        }
        if !(t.divergence_threshold > 0.0) {
            return field("train.divergence_threshold", "must be positive");
        }
        if self.sweep.batch_size < 1 {
            return field("sweep.batch_size", "must be at least 1");
        }
        if let Some(v) = &self.sweep.n_e {
            if v.is_empty() {
                return field("sweep.n_e", "must list at least one antenna count");
            }
            if v.contains(&1) {
                return Err(Error::ExcludedSingleAntenna);
            }
        }
        Ok(())
    }

    /// Per-stage seed derived from the master seed.
    pub fn stage_seed(&self, label: &str) -> u64 {
        crate::derive_seed(self.seed, label, 0)
    }

    /// Hex SHA-256 of everything that determines results; the output
    /// directory is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Environment with scatterers drawn from the stage seed.
    pub fn build_environment(&self) -> Environment {
        let seed = self.stage_seed("environment");
        let mut env = match self.environment.preset {
            EnvironmentPreset::Desk => Environment::desk(seed),
            EnvironmentPreset::DeskMimo => Environment::desk_mimo(seed),
        };
        if let Some(n) = self.environment.noise_std {
            env.noise_std = n;
        }
        env
    }

    pub fn n_e_values(&self, a_max: usize) -> Vec<usize> {
        self.sweep.n_e.clone().unwrap_or_else(|| (2..=a_max).collect())
    }

    fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn train_dataset_path(&self) -> PathBuf {
        self.environment
            .dataset
            .clone()
            .unwrap_or_else(|| self.data_dir().join("train.bin"))
    }

    pub fn test_dataset_path(&self) -> PathBuf {
        self.environment
            .test_dataset
            .clone()
            .unwrap_or_else(|| self.data_dir().join("test.bin"))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes via a temporary sibling and a rename so readers never see a torn
/// file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Sidecar recording what produced a command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Output path (relative to `out_dir`) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

fn write_provenance(cfg: &ExperimentConfig, command: &str, outputs: &[PathBuf]) -> Result<PathBuf> {
    let mut map = BTreeMap::new();
    for p in outputs {
        let key = p.strip_prefix(&cfg.out_dir).unwrap_or(p).display().to_string();
        map.insert(key, file_sha256(p)?);
    }
    let prov = Provenance {
        tool: "adapos".into(),
        version: TOOL_VERSION.into(),
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        outputs: map,
    };
    let path = cfg.out_dir.join(format!("{command}.provenance.json"));
    let mut text = serde_json::to_string_pretty(&prov).expect("provenance serializes");
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Files written by `simulate`.
#[derive(Clone, Debug)]
pub struct SimulateReport {
    pub train: PathBuf,
    pub test: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub provenance: PathBuf,
}

/// Simulates the training and test trajectories, writing each as a binary
/// dataset with a CSV mirror.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateReport> {
    let env = cfg.build_environment();
    env.validate()?;
    let dir = cfg.data_dir();
    create_dir(&dir)?;
    let e = &cfg.environment;
    let mut outputs = Vec::new();
    for (name, duration) in [("train", e.duration_s), ("test", e.test_duration_s)] {
        let traj = generate_trajectory(
            &env,
            duration,
            e.rate_hz,
            e.max_speed,
            cfg.stage_seed(&format!("trajectory/{name}")),
        )?;
        let mut noise_env = env.clone();
        noise_env.seed = cfg.stage_seed(&format!("noise/{name}"));
        let ds = generate_dataset(&noise_env, &traj)?;
        let bin = dir.join(format!("{name}.bin"));
        let csv = dir.join(format!("{name}.csv"));
        write_dataset(&bin, &ds)?;
        write_csv(&csv, &ds)?;
        outputs.push(bin);
        outputs.push(csv);
    }
    let provenance = write_provenance(cfg, "simulate", &outputs)?;
    Ok(SimulateReport {
        train: outputs[0].clone(),
        test: outputs[2].clone(),
        outputs,
        provenance,
    })
}

fn load_dataset(path: &Path, role: &str) -> Result<Dataset> {
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{role} dataset not found; run `adapos simulate` first"),
            ),
        ));
    }
    read_dataset(path)
}

/// Training snapshots plus their pairwise pseudo-distances, read from the
/// metric cache when its key matches.
pub struct TrainingData {
    pub a_max: usize,
    pub snapshots: Vec<Snapshot>,
    pub distances: PairwiseMatrix,
}

pub fn load_training_data(cfg: &ExperimentConfig) -> Result<TrainingData> {
    let path = cfg.train_dataset_path();
    let ds = load_dataset(&path, "training")?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let key = cache_key(&bytes, &cfg.metric);
    let snapshots = ds.snapshots()?;
    create_dir(&cfg.out_dir)?;
    let cache = cfg.out_dir.join("metric_cache.bin");
    let distances = match read_cache(&cache, &key)? {
        Some(m) if m.len() == snapshots.len() => m,
        _ => {
            let provider = PseudoDistanceProvider::build(&cfg.metric, &snapshots)?;
            let m = provider.matrix();
            write_cache(&cache, &key, &m)?;
            m
        }
    };
    Ok(TrainingData {
        a_max: ds.a_max,
        snapshots,
        distances,
    })
}

/// File stem for a trained cell, e.g. `adapos_fixed-n-3`.
pub fn cell_name(arch: Architecture, strategy: Strategy) -> String {
    format!("{arch}_{}", strategy.to_string().replace(':', "-"))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub final_loss: f64,
    pub steps: usize,
}

fn train_cell(
    cfg: &ExperimentConfig,
    data: &TrainingData,
    arch: Architecture,
    strategy: Strategy,
) -> Result<TrainReport> {
    let spec = cfg.model.spec(arch, data.a_max);
    strategy.validate(data.a_max)?;
    let (network, init) = Network::init(&spec, cfg.stage_seed(&format!("init/{arch}")))?;
    let tc = cfg
        .train
        .to_config(strategy, cfg.stage_seed(&format!("train/{}", cell_name(arch, strategy))));
    let out = train(&network, &init, &data.snapshots, &data.distances, &tc, TrainHooks::default())?;
    let name = cell_name(arch, strategy);
    let ckpt_dir = cfg.out_dir.join("checkpoints");
    let loss_dir = cfg.out_dir.join("losses");
    create_dir(&ckpt_dir)?;
    create_dir(&loss_dir)?;
    let checkpoint = ckpt_dir.join(format!("{name}.ckpt"));
    let loss_csv = loss_dir.join(format!("{name}.csv"));
    Checkpoint {
        model: spec,
        strategy,
        params: out.params,
    }
    .save(&checkpoint)?;
    write_loss_csv(&loss_csv, &out.losses)?;
    Ok(TrainReport {
        checkpoint,
        loss_csv,
        final_loss: out.losses.last().map_or(f64::NAN, |r| r.loss),
        steps: out.losses.len(),
    })
}

/// Trains `model.architecture` with `train.strategy` (or `strategy`).
pub fn cmd_train(cfg: &ExperimentConfig, strategy: Option<Strategy>) -> Result<TrainReport> {
    let data = load_training_data(cfg)?;
    let strategy = strategy.unwrap_or(cfg.train.strategy);
    let report = train_cell(cfg, &data, cfg.model.architecture, strategy)?;
    write_provenance(cfg, "train", &[report.checkpoint.clone(), report.loss_csv.clone()])?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub result: SweepResult,
    pub csv: PathBuf,
    pub heatmap: PathBuf,
    /// One single-panel heatmap per architecture.
    pub panels: Vec<PathBuf>,
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<Checkpoint>> {
    if paths.is_empty() {
        return Err(Error::Usage("sweep needs at least one checkpoint".into()));
    }
    let ckpts = paths.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let a_max = ckpts[0].model.a_max();
    for (c, p) in ckpts.iter().zip(paths) {
        if c.model.a_max() != a_max {
            return Err(Error::Comparability(format!(
                "{} has a_max = {}, {} has a_max = {a_max}",
                p.display(),
                c.model.a_max(),
                paths[0].display()
            )));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &ckpts {
        if !seen.insert((c.model.architecture().to_string(), c.strategy.to_string())) {
            return Err(Error::Usage(format!(
                "two checkpoints share model {} and strategy {}",
                c.model.architecture(),
                c.strategy
            )));
        }
    }
    Ok(ckpts)
}

fn run_sweep(cfg: &ExperimentConfig, ckpts: &[Checkpoint], jobs: usize, stem: &str) -> Result<SweepReport> {
    let test = load_dataset(&cfg.test_dataset_path(), "test")?;
    let a_max = ckpts[0].model.a_max();
    if test.a_max != a_max {
        return Err(Error::Comparability(format!(
            "checkpoints expect a_max = {a_max}, test dataset has {}",
            test.a_max
        )));
    }
    let snapshots = test.snapshots()?;
    let models = ckpts
        .iter()
        .map(|c| {
            let (network, _) = Network::init(&c.model, 0)?;
            Ok(TrainedModel {
                network,
                params: c.params.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let entries: Vec<SweepEntry> = ckpts
        .iter()
        .zip(&models)
        .map(|(c, m)| SweepEntry {
            model: c.model.architecture().to_string(),
            n_t_strategy: c.strategy.to_string(),
            localizer: m,
        })
        .collect();
    let result = sweep(
        &entries,
        &snapshots,
        &cfg.n_e_values(a_max),
        cfg.stage_seed("eval"),
        cfg.sweep.batch_size,
        jobs,
    )?;
    let dir = cfg.out_dir.join("sweep");
    create_dir(&dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let heatmap = dir.join(format!("{stem}_heatmap.svg"));
    result.write_csv(&csv)?;
    result.write_svg(&heatmap)?;
    let mut panels = Vec::new();
    for model in result.models() {
        let p = dir.join(format!("{stem}_heatmap_{model}.svg"));
        fs::write(&p, result.panel_svg(&model)).map_err(|e| Error::io(&p, e))?;
        panels.push(p);
    }
    Ok(SweepReport {
        result,
        csv,
        heatmap,
        panels,
    })
}

/// Evaluates the given checkpoints on the test dataset across `n_e`.
pub fn cmd_sweep(cfg: &ExperimentConfig, checkpoints: &[PathBuf], jobs: usize) -> Result<SweepReport> {
    let ckpts = load_checkpoints(checkpoints)?;
    let report = run_sweep(cfg, &ckpts, jobs, "sweep")?;
    let mut outs = vec![report.csv.clone(), report.heatmap.clone()];
    outs.extend(report.panels.iter().cloned());
    write_provenance(cfg, "sweep", &outs)?;
    Ok(report)
}

/// Resumable progress record for `replicate-grid`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Dataset file name → SHA-256.
    pub data: BTreeMap<String, String>,
    /// Cell name → finished cell.
    pub cells: BTreeMap<String, CellRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub architecture: Architecture,
    pub strategy: Strategy,
    pub checkpoint_sha256: String,
    pub final_loss: f64,
    pub steps: usize,
}

impl Manifest {
    pub fn path(cfg: &ExperimentConfig) -> PathBuf {
        cfg.out_dir.join("manifest.json")
    }

    pub fn load(path: &Path) -> Result<Option<Self>> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::format(path, e.to_string())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Every strategy trained by the grid: Fixed-N for `n_t ∈ 2..=a_max`, then
/// Random-N.
pub fn grid_strategies(a_max: usize) -> Vec<Strategy> {
    (2..=a_max)
        .map(Strategy::FixedN)
        .chain(std::iter::once(Strategy::RandomN))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub checkpoints: Vec<PathBuf>,
    /// Cells trained by this invocation (the rest were resumed).
    pub trained: Vec<String>,
    pub sweep: SweepReport,
}

/// Simulates (if needed), trains both architectures under every grid
/// strategy, and sweeps all of them. Finished cells recorded in the
/// manifest are skipped; a manifest written under a different config hash
/// aborts the run.
pub fn cmd_replicate_grid(cfg: &ExperimentConfig, jobs: usize) -> Result<GridReport> {
    create_dir(&cfg.out_dir)?;
    let manifest_path = Manifest::path(cfg);
    let hash = cfg.hash();
    let mut manifest = match Manifest::load(&manifest_path)? {
        Some(m) if m.config_hash != hash => {
            return Err(Error::Config(format!(
                "{} was written for config hash {}, current config hashes to {hash}; \
                 use a fresh output directory",
                manifest_path.display(),
                m.config_hash
            )))
        }
        Some(m) => m,
        None => Manifest {
            config_hash: hash,
            seed: cfg.seed,
            ..Manifest::default()
        },
    };

    let data_ok = |m: &Manifest| -> Result<bool> {
        if m.data.is_empty() {
            return Ok(false);
        }
        for (name, sha) in &m.data {
            let p = cfg.data_dir().join(name);
            if !p.is_file() || &file_sha256(&p)? != sha {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let simulated = cfg.environment.dataset.is_none() || cfg.environment.test_dataset.is_none();
    if simulated && !data_ok(&manifest)? {
        let sim = cmd_simulate(cfg)?;
        manifest.data.clear();
        for p in &sim.outputs {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            manifest.data.insert(name, file_sha256(p)?);
        }
        manifest.cells.clear();
        manifest.save(&manifest_path)?;
    }

    let data = load_training_data(cfg)?;
    let mut cells = Vec::new();
    for arch in [Architecture::AdaPos, Architecture::Baseline] {
        for s in grid_strategies(data.a_max) {
            cells.push((arch, s));
        }
    }
    let ckpt_path = |arch, s| cfg.out_dir.join("checkpoints").join(format!("{}.ckpt", cell_name(arch, s)));
    let mut pending = Vec::new();
    for &(arch, s) in &cells {
        let done = match manifest.cells.get(&cell_name(arch, s)) {
            Some(rec) => {
                let p = ckpt_path(arch, s);
                p.is_file() && file_sha256(&p)? == rec.checkpoint_sha256
            }
            None => false,
        };
        if !done {
            pending.push((arch, s));
        }
    }

    let shared = Mutex::new((manifest, Vec::<(usize, Error)>::new()));
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(arch, s)) = pending.get(i) else { break };
        let outcome = train_cell(cfg, &data, arch, s).and_then(|r| {
            Ok(CellRecord {
                architecture: arch,
                strategy: s,
                checkpoint_sha256: file_sha256(&r.checkpoint)?,
                final_loss: r.final_loss,
                steps: r.steps,
            })
        });
        let mut guard = shared.lock().unwrap();
        match outcome {
            Ok(rec) => {
                guard.0.cells.insert(cell_name(arch, s), rec);
                if let Err(e) = guard.0.save(&manifest_path) {
                    guard.1.push((i, e));
                }
            }
            Err(e) => guard.1.push((i, e)),
        }
    };
    let jobs = jobs.clamp(1, pending.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|sc| {
            for _ in 0..jobs {
                sc.spawn(work);
            }
        });
    }
    let (_, mut errors) = shared.into_inner().unwrap();
    if !errors.is_empty() {
        errors.sort_by_key(|(i, _)| *i);
        return Err(errors.swap_remove(0).1);
    }

    let checkpoints: Vec<PathBuf> = cells.iter().map(|&(a, s)| ckpt_path(a, s)).collect();
    let ckpts = load_checkpoints(&checkpoints)?;
    let sweep = run_sweep(cfg, &ckpts, jobs, "grid")?;
    let mut outs = checkpoints.clone();
    outs.extend(cells.iter().map(|&(a, s)| cfg.out_dir.join("losses").join(format!("{}.csv", cell_name(a, s)))));
    outs.extend([sweep.csv.clone(), sweep.heatmap.clone()]);
    outs.extend(sweep.panels.iter().cloned());
    write_provenance(cfg, "replicate-grid", &outs)?;
    Ok(GridReport {
        checkpoints,
        trained: pending.iter().map(|&(a, s)| cell_name(a, s)).collect(),
        sweep,
    })
}
