//! Experiment orchestration behind the command-line verbs.
//!
//! Every command writes its outputs and a `manifest.json` into an output
//! directory. Timing columns are the only run-to-run differences; files that
//! must be reproducible byte for byte keep them out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_regressor, per_angle_bins, write_bins_csv, MetricReport, RotationMode};
use crate::gradcheck::{check_loss, GradCheckConfig, LossCheck};
use crate::hparam_search::{estimate_scales, random_search, SearchOutcome, SearchSpace, TrialMetrics, DEFAULT_BUDGET};
use crate::losses::LossKind;
use crate::morphable::template::synthetic_model;
use crate::morphable::{build_model, procrustes_align, MorphableModel};
use crate::geometry::Shape;
use crate::synthdata::{Dataset, DatasetConfig, Scene, Split};
use crate::training::{checkpoint, train, RegressorModel, TrainConfig, TrainingHistory};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const DATASET_FILE: &str = "dataset.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Load this model file instead of building one.
    pub path: Option<PathBuf>,
    /// Build from the `*.json` shapes in this directory instead of the
    /// synthetic template.
    pub shapes_dir: Option<PathBuf>,
    pub n_points: usize,
    pub population: usize,
    pub components: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            path: None,
            shapes_dir: None,
            n_points: 256,
            population: 200,
            components: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub budget: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self { budget: DEFAULT_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub views: Vec<usize>,
    /// Largest allowed `(max − min) / value at the first V` of test shape3d.
    pub max_spread: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            views: vec![2, 4, 8],
            max_spread: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlatteningSettings {
    /// Test views with `|yaw|` above this count as profile views.
    pub min_abs_yaw: f64,
    pub srl_max_ratio: f64,
    pub mrl_ratio_range: [f64; 2],
    pub min_shape_factor: f64,
}

impl Default for FlatteningSettings {
    fn default() -> Self {
        Self {
            min_abs_yaw: 60.0,
            srl_max_ratio: 0.5,
            mrl_ratio_range: [0.7, 1.3],
            min_shape_factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSettings,
    /// Read scenes from this file instead of generating them.
    pub dataset_path: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub losses: Vec<LossKind>,
    /// Multiplies every epoch budget (rounded, at least 1).
    pub epoch_scale: f64,
    /// Overrides applied to every loss's training configuration.
    pub train: toml::Table,
    /// Overrides for a single loss, applied after `train`.
    pub per_loss: BTreeMap<LossKind, toml::Table>,
    pub search: SearchSettings,
    pub sweep: SweepSettings,
    pub flattening: FlatteningSettings,
    pub grad_check: GradCheckConfig,
    pub rotation_mode: RotationMode,
    pub bin_width_deg: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            model: ModelSettings::default(),
            dataset_path: None,
            dataset: DatasetConfig::default(),
            losses: LossKind::ALL.to_vec(),
            epoch_scale: 1.0,
            train: toml::Table::new(),
            per_loss: BTreeMap::new(),
            search: SearchSettings::default(),
            sweep: SweepSettings::default(),
            flattening: FlatteningSettings::default(),
            grad_check: GradCheckConfig::default(),
            rotation_mode: RotationMode::default(),
            bin_width_deg: 15.0,
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epoch_scale.is_finite() && self.epoch_scale > 0.0) {
            return Err(Error::ConfigInvalid(format!("epoch_scale must be positive, got {}", self.epoch_scale)));
        }
        if self.losses.is_empty() {
            return Err(Error::ConfigInvalid("no losses selected".into()));
        }
        if self.search.budget == 0 {
            return Err(Error::ConfigInvalid("search budget must be at least 1".into()));
        }
        if self.sweep.views.is_empty() || self.sweep.views.contains(&0) {
            return Err(Error::ConfigInvalid("sweep views must be positive".into()));
        }
        if !(self.bin_width_deg.is_finite() && self.bin_width_deg > 0.0) {
            return Err(Error::ConfigInvalid("bin_width_deg must be positive".into()));
        }
        for p in [&self.model.path, &self.model.shapes_dir, &self.dataset_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::ConfigInvalid(format!("{} does not exist", p.display())));
            }
        }
        if self.model.path.is_none() && self.model.shapes_dir.is_none() && self.model.components == 0 {
            return Err(Error::ConfigInvalid("model needs at least one component".into()));
        }
        self.dataset.validate()?;
        for loss in LossKind::ALL {
            self.train_config(loss)?;
        }
        Ok(())
    }

    /// The training configuration of `loss`: per-loss defaults, then the
    /// `train` overrides, then the `per_loss` overrides, then `epoch_scale`.
    pub fn train_config(&self, loss: LossKind) -> Result<TrainConfig> {
        let mut base = toml::Table::try_from(TrainConfig {
            seed: self.seed,
            ..TrainConfig::for_loss(loss)
        })
        .expect("train config serializes");
        merge(&mut base, &self.train);
        if let Some(over) = self.per_loss.get(&loss) {
            merge(&mut base, over);
        }
        base.insert("loss".into(), toml::Value::String(loss.name().into()));
        let mut cfg: TrainConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| Error::ConfigInvalid(format!("{loss} training: {e}")))?;
        cfg.epochs = ((cfg.epochs as f64 * self.epoch_scale).round() as usize).max(1);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, cfg: &ExperimentConfig, files: &[&str]) -> Self {
        let seeds = ["model", "dataset", "train", "search"]
            .into_iter()
            .map(|k| (k.to_string(), cfg.seed))
            .collect();
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            seeds,
            files: files.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let probe = out.join(".write-test");
    std::fs::write(&probe, b"")
        .map_err(|e| Error::ConfigInvalid(format!("{} is not writable: {e}", out.display())))?;
    std::fs::remove_file(probe)?;
    Ok(())
}

fn write(out: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(out.join(name), bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(out, name, text)
}

fn finish(out: &Path, command: &str, cfg: &ExperimentConfig, files: &[&str]) -> Result<()> {
    write_json(out, MANIFEST_FILE, &Manifest::new(command, cfg, files))
}

fn read_shapes(dir: &Path) -> Result<Vec<Shape>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::format("shape file", format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Builds the model described by `cfg.model` (ignores `path`).
pub fn build_configured_model(cfg: &ExperimentConfig) -> Result<MorphableModel> {
    let m = &cfg.model;
    match &m.shapes_dir {
        Some(dir) => {
            let shapes = read_shapes(dir)?;
            build_model(&procrustes_align(&shapes)?, m.components)
        }
        None => Ok(synthetic_model(m.n_points, m.population, m.components, cfg.seed)?.1),
    }
}

pub fn load_or_build_model(cfg: &ExperimentConfig) -> Result<MorphableModel> {
    match &cfg.model.path {
        Some(p) => MorphableModel::from_json(&std::fs::read_to_string(p)?),
        None => build_configured_model(cfg),
    }
}

pub fn load_or_generate_dataset(cfg: &ExperimentConfig, model: &MorphableModel) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => {
            let ds = Dataset::read_jsonl(std::io::BufReader::new(std::fs::File::open(p)?))?;
            ds.check_model(model)?;
            Ok(ds)
        }
        None => Dataset::generate(model, &cfg.dataset, cfg.seed),
    }
}

pub fn cmd_build_model(cfg: &ExperimentConfig, out: &Path) -> Result<MorphableModel> {
    prepare_dir(out)?;
    let model = build_configured_model(cfg)?;
    write(out, MODEL_FILE, model.to_json())?;
    finish(out, "build-model", cfg, &[MODEL_FILE])?;
    Ok(model)
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = Dataset::generate(&model, &cfg.dataset, cfg.seed)?;
    write(out, MODEL_FILE, model.to_json())?;
    write(out, DATASET_FILE, ds.to_jsonl())?;
    finish(out, "gen-data", cfg, &[MODEL_FILE, DATASET_FILE])?;
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub regressor: RegressorModel,
    pub history: TrainingHistory,
}

pub fn checkpoint_file(loss: LossKind) -> String {
    format!("{loss}.ckpt")
}

pub fn history_file(loss: LossKind) -> String {
    format!("{loss}_history.json")
}

pub fn cmd_train(cfg: &ExperimentConfig, loss: LossKind, out: &Path) -> Result<TrainRun> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let config = cfg.train_config(loss)?;
    let (regressor, history) = train(&model, &ds, &config)?;
    let (ckpt, hist) = (checkpoint_file(loss), history_file(loss));
    checkpoint::save(&out.join(&ckpt), &regressor, Some(&config), Some(&history))?;
    write_json(out, &hist, &history)?;
    finish(out, "train", cfg, &[&ckpt, &hist])?;
    Ok(TrainRun {
        config,
        regressor,
        history,
    })
}

pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint_path: &Path, out: &Path) -> Result<MetricReport> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let (reg, _) = checkpoint::load(checkpoint_path, &model)?;
    let report = evaluate_regressor(&reg, ds.split(Split::Test), cfg.rotation_mode)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write(out, "metrics.csv", csv)?;
    write_json(out, "summary.json", &report.summary_json())?;
    let mut bins = Vec::new();
    write_bins_csv(&per_angle_bins(&report.samples, cfg.bin_width_deg)?, &mut bins)?;
    write(out, "angle_bins.csv", bins)?;
    finish(out, "eval", cfg, &["metrics.csv", "summary.json", "angle_bins.csv"])?;
    Ok(report)
}

/// One row of the loss comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub loss: LossKind,
    pub reprojection_px: f64,
    pub shape3d_mm: f64,
    pub translation_cm: f64,
    pub rotation_deg: f64,
    pub time_per_epoch_s: f64,
    pub epochs: usize,
    pub trainings: usize,
    pub total_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The deterministic part of a row.
#[derive(Debug, Clone, PartialEq, Serialize)]
struct CompareMetricsRow {
    loss: LossKind,
    reprojection_px: f64,
    shape3d_mm: f64,
    translation_cm: f64,
    rotation_deg: f64,
    epochs: usize,
    trainings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn row(&self, loss: LossKind) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.loss == loss && r.error.is_none())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "loss",
            "reprojection_px",
            "shape3d_mm",
            "translation_cm",
            "rotation_deg",
            "time_per_epoch_s",
            "epochs",
            "trainings",
            "total_time_s",
            "error",
        ])
        .map_err(|e| Error::format("csv", e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.loss.to_string(),
                r.reprojection_px.to_string(),
                r.shape3d_mm.to_string(),
                r.translation_cm.to_string(),
                r.rotation_deg.to_string(),
                r.time_per_epoch_s.to_string(),
                r.epochs.to_string(),
                r.trainings.to_string(),
                r.total_time_s.to_string(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| Error::format("csv", e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
    }

    /// The table without its timing columns; identical across runs with the same seed.
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CompareMetricsRow {
                loss: r.loss,
                reprojection_px: r.reprojection_px,
                shape3d_mm: r.shape3d_mm,
                translation_cm: r.translation_cm,
                rotation_deg: r.rotation_deg,
                epochs: r.epochs,
                trainings: r.trainings,
            })
            .map_err(|e| Error::format("csv", e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
    }
}

fn metric_row(loss: LossKind, report: &MetricReport, histories: &[TrainingHistory]) -> CompareRow {
    let epoch_times: Vec<f64> = histories
        .iter()
        .flat_map(|h| h.epochs.iter().map(|e| e.wall_time_s))
        .collect();
    CompareRow {
        loss,
        reprojection_px: report.reprojection_px,
        shape3d_mm: report.shape3d_mm,
        translation_cm: report.translation_cm,
        rotation_deg: report.rotation_deg,
        time_per_epoch_s: epoch_times.iter().sum::<f64>() / epoch_times.len().max(1) as f64,
        epochs: histories.first().map_or(0, |h| h.epochs.len()),
        trainings: histories.len(),
        total_time_s: histories.iter().map(|h| h.total_time_s).sum(),
        error: None,
    }
}

/// Trains `loss` as the comparison protocol prescribes and scores it on the
/// test split: once for the hyperparameter-free losses, through a full search
/// for the multiterm ones.
pub fn run_loss(
    cfg: &ExperimentConfig,
    model: &MorphableModel,
    ds: &Dataset,
    loss: LossKind,
) -> Result<(CompareRow, Option<SearchOutcome>)> {
    let base = cfg.train_config(loss)?;
    if !loss.is_multiterm() {
        let (reg, history) = train(model, ds, &base)?;
        let report = evaluate_regressor(&reg, ds.split(Split::Test), cfg.rotation_mode)?;
        return Ok((metric_row(loss, &report, &[history]), None));
    }
    if ds.split(Split::Val).next().is_none() {
        return Err(Error::ConfigInvalid(format!("{loss} selects its weights on the validation split, which is empty")));
    }
    let train_scenes: Vec<Scene> = ds.split(Split::Train).cloned().collect();
    let scales = estimate_scales(model, &train_scenes)?;
    let space = SearchSpace::for_loss(loss, &scales, cfg.search.budget)?;
    let mut histories = Vec::new();
    let mut regressors = BTreeMap::new();
    let outcome = random_search(
        &space,
        |trial, params| {
            let config = TrainConfig {
                weights: params.weights,
                lr: params.lr,
                seed: base.seed.wrapping_add(trial as u64),
                ..base.clone()
            };
            let (reg, history) = train(model, ds, &config)?;
            histories.push(history);
            let val = evaluate_regressor(&reg, ds.split(Split::Val), cfg.rotation_mode)?;
            regressors.insert(trial, reg);
            Ok(TrialMetrics {
                shape3d_mm: val.shape3d_mm,
                reprojection_px: val.reprojection_px,
                translation_cm: Some(val.translation_cm),
                rotation_deg: Some(val.rotation_deg),
            })
        },
        cfg.seed,
    )?;
    let best = &regressors[&outcome.best_trial().trial];
    let report = evaluate_regressor(best, ds.split(Split::Test), cfg.rotation_mode)?;
    let mut row = metric_row(loss, &report, &histories);
    row.trainings = outcome.trials.len();
    Ok((row, Some(outcome)))
}

pub fn compare(
    cfg: &ExperimentConfig,
    model: &MorphableModel,
    ds: &Dataset,
) -> Result<(CompareTable, Vec<(LossKind, SearchOutcome)>)> {
    let mut rows = Vec::new();
    let mut searches = Vec::new();
    for &loss in &cfg.losses {
        match run_loss(cfg, model, ds, loss) {
            Ok((row, search)) => {
                rows.push(row);
                searches.extend(search.map(|s| (loss, s)));
            }
            Err(e) => {
                log::error!("{loss} failed: {e}");
                rows.push(CompareRow {
                    loss,
                    reprojection_px: f64::NAN,
                    shape3d_mm: f64::NAN,
                    translation_cm: f64::NAN,
                    rotation_deg: f64::NAN,
                    time_per_epoch_s: f64::NAN,
                    epochs: 0,
                    trainings: 0,
                    total_time_s: f64::NAN,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok((CompareTable { rows }, searches))
}

pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<CompareTable> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let (table, searches) = compare(cfg, &model, &ds)?;
    write(out, "compare.csv", table.to_csv()?)?;
    write_json(out, "compare.json", &table)?;
    write(out, "compare_metrics.csv", table.metrics_csv()?)?;
    let mut files = vec!["compare.csv".to_string(), "compare.json".into(), "compare_metrics.csv".into()];
    for (loss, s) in &searches {
        let name = format!("{loss}_trials.jsonl");
        write(out, &name, s.to_log())?;
        files.push(name);
    }
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    finish(out, "compare", cfg, &names)?;
    Ok(table)
}

/// A named pass/fail check with the numbers behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub views: usize,
    pub shape3d_mm: f64,
    pub reprojection_px: f64,
    pub time_per_epoch_s: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub checks: Vec<Check>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn sweep_views(cfg: &ExperimentConfig, model: &MorphableModel, ds: &Dataset) -> Result<SweepReport> {
    let base = cfg.train_config(LossKind::Mrl)?;
    let mut rows = Vec::new();
    for &views in &cfg.sweep.views {
        let config = TrainConfig { views, ..base.clone() };
        let (reg, history) = train(model, ds, &config)?;
        let report = evaluate_regressor(&reg, ds.split(Split::Test), cfg.rotation_mode)?;
        rows.push(SweepRow {
            views,
            shape3d_mm: report.shape3d_mm,
            reprojection_px: report.reprojection_px,
            time_per_epoch_s: history.mean_epoch_time(),
            epochs: history.epochs.len(),
        });
    }
    let mut checks = Vec::new();
    if rows.len() > 1 {
        let increasing = rows.windows(2).all(|w| w[1].time_per_epoch_s > w[0].time_per_epoch_s);
        let times: Vec<String> = rows.iter().map(|r| format!("V={}: {:.4}s", r.views, r.time_per_epoch_s)).collect();
        checks.push(Check::new("time grows with views", increasing, times.join(", ")));
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.shape3d_mm), hi.max(r.shape3d_mm)));
        let spread = (hi - lo) / rows[0].shape3d_mm;
        checks.push(Check::new(
            "shape3d stable across views",
            spread <= cfg.sweep.max_spread,
            format!("spread {:.2}% of V={} value (limit {:.0}%)", 100.0 * spread, rows[0].views, 100.0 * cfg.sweep.max_spread),
        ));
    }
    Ok(SweepReport { rows, checks })
}

fn sweep_csv(report: &SweepReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format("csv", e.to_string()))
}

pub fn cmd_sweep_views(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let report = sweep_views(cfg, &model, &ds)?;
    write(out, "sweep_views.csv", sweep_csv(&report)?)?;
    write_json(out, "sweep_views.json", &report)?;
    finish(out, "sweep-views", cfg, &["sweep_views.csv", "sweep_views.json"])?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatteningArm {
    pub loss: LossKind,
    pub reprojection_px: f64,
    pub shape3d_mm: f64,
    /// Mean predicted/true camera-frame depth extent over profile test views.
    pub profile_depth_ratio: Option<f64>,
    pub profile_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatteningReport {
    pub srl: FlatteningArm,
    pub mrl: FlatteningArm,
    pub checks: Vec<Check>,
}

impl FlatteningReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn flattening_arm(cfg: &ExperimentConfig, model: &MorphableModel, ds: &Dataset, loss: LossKind) -> Result<FlatteningArm> {
    let (reg, _) = train(model, ds, &cfg.train_config(loss)?)?;
    let report = evaluate_regressor(&reg, ds.split(Split::Test), cfg.rotation_mode)?;
    Ok(FlatteningArm {
        loss,
        reprojection_px: report.reprojection_px,
        shape3d_mm: report.shape3d_mm,
        profile_depth_ratio: report.profile_depth_ratio(cfg.flattening.min_abs_yaw),
        profile_samples: report
            .samples
            .iter()
            .filter(|s| s.yaw.abs() > cfg.flattening.min_abs_yaw)
            .count(),
    })
}

pub fn flattening_demo(cfg: &ExperimentConfig, model: &MorphableModel, ds: &Dataset) -> Result<FlatteningReport> {
    let srl = flattening_arm(cfg, model, ds, LossKind::Srl)?;
    let mrl = flattening_arm(cfg, model, ds, LossKind::Mrl)?;
    let f = &cfg.flattening;
    let ratio = |a: &FlatteningArm| a.profile_depth_ratio.unwrap_or(f64::NAN);
    let (rs, rm) = (ratio(&srl), ratio(&mrl));
    let checks = vec![
        Check::new(
            "srl flattens profile views",
            rs < f.srl_max_ratio,
            format!("srl depth ratio {rs:.3} (< {})", f.srl_max_ratio),
        ),
        Check::new(
            "mrl keeps depth",
            f.mrl_ratio_range[0] <= rm && rm <= f.mrl_ratio_range[1],
            format!("mrl depth ratio {rm:.3} (in [{}, {}])", f.mrl_ratio_range[0], f.mrl_ratio_range[1]),
        ),
        Check::new(
            "srl reprojection not above mrl",
            srl.reprojection_px.is_finite() && mrl.reprojection_px.is_finite() && srl.reprojection_px <= mrl.reprojection_px,
            format!("srl {:.3} px, mrl {:.3} px", srl.reprojection_px, mrl.reprojection_px),
        ),
        Check::new(
            "srl shape error dominates",
            srl.shape3d_mm >= f.min_shape_factor * mrl.shape3d_mm,
            format!("srl {:.3} mm, mrl {:.3} mm (factor ≥ {})", srl.shape3d_mm, mrl.shape3d_mm, f.min_shape_factor),
        ),
    ];
    Ok(FlatteningReport { srl, mrl, checks })
}

pub fn cmd_flattening_demo(cfg: &ExperimentConfig, out: &Path) -> Result<FlatteningReport> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let report = flattening_demo(cfg, &model, &ds)?;
    write_json(out, "flattening.json", &report)?;
    finish(out, "flattening-demo", cfg, &["flattening.json"])?;
    Ok(report)
}

pub fn cmd_search_hparams(cfg: &ExperimentConfig, loss: LossKind, out: &Path) -> Result<(CompareRow, SearchOutcome)> {
    if !loss.is_multiterm() {
        return Err(Error::ConfigInvalid(format!("{loss} has no hyperparameters to search")));
    }
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let ds = load_or_generate_dataset(cfg, &model)?;
    let (row, outcome) = run_loss(cfg, &model, &ds, loss)?;
    let outcome = outcome.expect("multiterm losses search");
    let name = format!("{loss}_trials.jsonl");
    write(out, &name, outcome.to_log())?;
    write_json(out, "best.json", &row)?;
    finish(out, "search-hparams", cfg, &[&name, "best.json"])?;
    Ok((row, outcome))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checks: Vec<LossCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(LossCheck::passed)
    }
}

pub fn grad_check(cfg: &ExperimentConfig, model: &MorphableModel, losses: &[LossKind]) -> Result<GradCheckReport> {
    let checks = losses
        .iter()
        .map(|&loss| check_loss(loss, model, &cfg.dataset.calibration, &cfg.grad_check, cfg.seed))
        .collect::<Result<_>>()?;
    Ok(GradCheckReport { checks })
}

pub fn cmd_grad_check(cfg: &ExperimentConfig, losses: &[LossKind], out: &Path) -> Result<GradCheckReport> {
    prepare_dir(out)?;
    let model = load_or_build_model(cfg)?;
    let report = grad_check(cfg, &model, losses)?;
    write_json(out, "grad_check.json", &report)?;
    finish(out, "grad-check", cfg, &["grad_check.json"])?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            model: ModelSettings {
                n_points: 64,
                population: 30,
                components: 6,
                ..ModelSettings::default()
            },
            ..ExperimentConfig::default()
        };
        cfg.dataset.train_subjects = 20;
        cfg.dataset.val_subjects = 4;
        cfg.dataset.test_subjects = 4;
        cfg.dataset.landmarks = 8;
        cfg.train = toml::toml! {
            epochs = 2
            [arch]
            encoder = [8]
            head_hidden = 8
        };
        cfg.search.budget = 2;
        cfg
    }

    #[test]
    fn per_loss_overrides_apply_in_order() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            seed = 4
            epoch_scale = 0.5
            [train]
            lr = 0.001
            [per_loss.srl]
            epochs = 40
            [per_loss.mrl]
            views = 3
            "#,
        )
        .unwrap();
        let srl = cfg.train_config(LossKind::Srl).unwrap();
        assert_eq!((srl.epochs, srl.lr, srl.seed, srl.loss), (20, 1e-3, 4, LossKind::Srl));
        let gal = cfg.train_config(LossKind::Gal).unwrap();
        assert_eq!(gal.epochs, 60);
        assert_eq!(cfg.train_config(LossKind::Mrl).unwrap().views, 3);
        assert_eq!(ExperimentConfig::default().train_config(LossKind::Srl).unwrap().epochs, 500);
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(ExperimentConfig::from_toml("nonsense = 1").is_err());
        assert!(ExperimentConfig::from_toml("[train]\nbatch_size = 0").is_err());
        assert!(ExperimentConfig::from_toml("dataset_path = \"/no/such/file\"").is_err());
        assert!(ExperimentConfig::from_toml("losses = []").is_err());
        let text = ExperimentConfig::default().to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn default_dataset_has_290_scenes() {
        let cfg = ExperimentConfig::default();
        let model = build_configured_model(&ExperimentConfig {
            model: ModelSettings {
                n_points: 64,
                population: 30,
                components: 6,
                ..ModelSettings::default()
            },
            ..cfg.clone()
        })
        .unwrap();
        let ds = Dataset::generate(&model, &cfg.dataset, 0).unwrap();
        assert_eq!(ds.scenes.len(), 290);
    }

    #[test]
    fn gen_data_is_reproducible() {
        let mut cfg = small();
        cfg.seed = 7;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        cmd_gen_data(&cfg, a.path()).unwrap();
        cmd_gen_data(&cfg, b.path()).unwrap();
        for f in [DATASET_FILE, MODEL_FILE, MANIFEST_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let mut empty = small();
        empty.dataset.train_subjects = 0;
        empty.dataset.val_subjects = 0;
        empty.dataset.test_subjects = 0;
        assert!(matches!(cmd_gen_data(&empty, a.path()), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn build_model_round_trip() {
        let mut cfg = small();
        cfg.model.components = 5;
        let dir = tempfile::tempdir().unwrap();
        let model = cmd_build_model(&cfg, dir.path()).unwrap();
        assert_eq!(model.n_components(), 5);
        assert!(model.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        let back = MorphableModel::from_json(&std::fs::read_to_string(dir.path().join(MODEL_FILE)).unwrap()).unwrap();
        let alpha = model.zero_params();
        assert_eq!(back.synthesize(&alpha).unwrap(), model.synthesize(&alpha).unwrap());
        cfg.model.components = 500;
        assert!(matches!(build_configured_model(&cfg), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn single_loss_compare_has_one_training() {
        let mut cfg = small();
        cfg.losses = vec![LossKind::Gal];
        let dir = tempfile::tempdir().unwrap();
        let table = cmd_compare(&cfg, dir.path()).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].trainings, 1);
        let csv = String::from_utf8(std::fs::read(dir.path().join("compare.csv")).unwrap()).unwrap();
        assert!(csv.starts_with("loss,reprojection_px,shape3d_mm,translation_cm,rotation_deg,time_per_epoch_s,epochs,trainings,total_time_s"));
    }

    #[test]
    fn multiterm_compare_counts_budget() {
        let mut cfg = small();
        cfg.losses = vec![LossKind::Coarse];
        cfg.search.budget = 3;
        let dir = tempfile::tempdir().unwrap();
        let table = cmd_compare(&cfg, dir.path()).unwrap();
        assert_eq!(table.rows[0].trainings, 3);
        let text = std::fs::read_to_string(dir.path().join("coarse_trials.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn failing_loss_still_emits_table() {
        let mut cfg = small();
        cfg.losses = vec![LossKind::Gal, LossKind::Coarse];
        cfg.dataset.val_subjects = 0;
        let dir = tempfile::tempdir().unwrap();
        let table = cmd_compare(&cfg, dir.path()).unwrap();
        assert!(table.row(LossKind::Gal).is_some());
        assert!(table.rows[1].error.is_some());
    }

    #[test]
    fn grad_check_zero_trials_is_config_error() {
        let mut cfg = small();
        cfg.grad_check.trials = 0;
        let model = build_configured_model(&cfg).unwrap();
        assert!(matches!(grad_check(&cfg, &model, &[LossKind::Gal]), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn single_view_sweep_has_one_row() {
        let mut cfg = small();
        cfg.sweep.views = vec![1];
        let model = build_configured_model(&cfg).unwrap();
        let ds = Dataset::generate(&model, &cfg.dataset, 1).unwrap();
        let r = sweep_views(&cfg, &model, &ds).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.passed());
    }
}
