//! Experiment protocol and grid runner.
//!
//! A cell is one (dataset, scenario, strategy, selection, ratio, seed)
//! combination. Cells sharing a dataset, scenario and seed share their splits
//! and initial model, which [`prepare_group`] builds once.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ceil_fraction, load_csv, split, CsvOptions, Dataset};
use crate::error::{Error, Result};
use crate::gbdt::{train, Ensemble, TrainConfig};
use crate::inplace::{inplace_update, UpdateContext, UpdateMode, UpdateScope};
use crate::metrics::{
    candidate_resilience, effectiveness, general_accuracy, robustness, MetricsReport,
    ResilienceTarget,
};
use crate::model_io::{load_json, save_json};
use crate::watermark::{
    build_embedding_plan, candidates, embed, select, CandidatePool, Scenario, Selection, Strategy,
    WatermarkSet,
};

pub const THREADS_ENV: &str = "GBDTWM_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    /// Official test file; without one the main file is split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub csv: CsvOptions,
}

/// How a ratio turns into watermark and candidate counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioBase {
    /// `k = ceil(ratio * |D_train|)`, `n = 2k`.
    #[default]
    Watermark,
    /// `n = ceil(ratio * |D_train|)`, `k = ceil(n / 2)`.
    Candidate,
}

impl RatioBase {
    pub fn counts(self, ratio: f64, train_len: usize) -> (usize, usize) {
        match self {
            RatioBase::Watermark => {
                let k = ceil_fraction(ratio, train_len).max(1);
                (k, 2 * k)
            }
            RatioBase::Candidate => {
                let n = ceil_fraction(ratio, train_len).max(1);
                (n.div_ceil(2), n)
            }
        }
    }
}

fn default_scenarios() -> Vec<Scenario> {
    Scenario::ALL.to_vec()
}
fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}
fn default_selections() -> Vec<Selection> {
    Selection::ALL.to_vec()
}
fn default_ratios() -> Vec<f64> {
    vec![0.001, 0.01, 0.1]
}
fn default_dup() -> usize {
    5
}
fn default_neighbors() -> usize {
    2
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_split() -> f64 {
    0.8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_selections")]
    pub selections: Vec<Selection>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_dup")]
    pub dup_factor: usize,
    #[serde(default = "default_neighbors")]
    pub neighbors: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ratio_base: RatioBase,
    #[serde(default)]
    pub resilience_target: ResilienceTarget,
    /// Data basis of the post-deployment fine-tune.
    #[serde(default)]
    pub attack_mode: UpdateMode,
    /// Nodes an in-place update may change, for embedding and attack alike.
    #[serde(default)]
    pub update_scope: UpdateScope,
}

impl ExperimentConfig {
    pub fn new(datasets: Vec<DatasetSpec>) -> Self {
        Self {
            datasets,
            scenarios: default_scenarios(),
            strategies: default_strategies(),
            selections: default_selections(),
            ratios: default_ratios(),
            dup_factor: default_dup(),
            neighbors: default_neighbors(),
            seeds: default_seeds(),
            split_fraction: default_split(),
            train: TrainConfig::default(),
            ratio_base: RatioBase::default(),
            resilience_target: ResilienceTarget::default(),
            attack_mode: UpdateMode::default(),
            update_scope: UpdateScope::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.datasets.is_empty() {
            return Err(Error::invalid("no datasets configured"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::invalid(format!("ratio {r} outside (0, 1)")));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid("split_fraction must lie in (0, 1)"));
        }
        if self.dup_factor == 0 {
            return Err(Error::invalid("dup_factor must be positive"));
        }
        let mut names: Vec<&str> = self.datasets.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("dataset names must be unique"));
        }
        Ok(())
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for d in &mut self.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
            if let Some(t) = &mut d.test_path {
                if t.is_relative() {
                    *t = base.join(&*t);
                }
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg: Self = load_json(path)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub scenario: Scenario,
    pub strategy: Strategy,
    pub selection: Selection,
    pub ratio: f64,
    pub seed: u64,
}

/// Loaded train / test data for one dataset.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub name: String,
    pub train: Dataset,
    /// Present when the dataset ships an official test file.
    pub test: Option<Dataset>,
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<LoadedDataset> {
    let train = load_csv(&spec.path, &spec.csv)?;
    let test = match &spec.test_path {
        None => None,
        Some(p) => {
            let Some(k) = spec.csv.class_count else {
                return Err(Error::invalid(format!(
                    "dataset '{}' has a test file, so csv.class_count must be set to keep labels aligned",
                    spec.name
                )));
            };
            let t = load_csv(p, &spec.csv)?;
            if t.n_features() != train.n_features() || t.class_count() != k {
                return Err(Error::DimensionMismatch {
                    expected: train.n_features(),
                    actual: t.n_features(),
                });
            }
            Some(t)
        }
    };
    Ok(LoadedDataset {
        name: spec.name.clone(),
        train,
        test,
    })
}

/// Splits and initial model shared by every cell of a (dataset, scenario, seed).
#[derive(Clone, Debug)]
pub struct Group {
    pub dataset: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub d_train: Dataset,
    pub d_cand: Dataset,
    pub d_test: Dataset,
    pub d_fine: Dataset,
    pub model: Ensemble,
}

// Independent split streams per seed.
const TRAIN_TEST_STREAM: u64 = 0x5eed_0001;
const CAND_STREAM: u64 = 0x5eed_0002;
const FINE_STREAM: u64 = 0x5eed_0003;

/// Splits the data for one scenario and trains the initial model.
///
/// Without an official test file the data is split `split_fraction : rest`
/// into train and test first. The test part is split again into `D_test`
/// and `D_fine`. Under [`Scenario::CandSeparate`] the train part is split
/// into `D_train` and `D_cand`; otherwise `D_cand = D_train`.
pub fn prepare_group(
    data: &LoadedDataset,
    scenario: Scenario,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Group> {
    let f = cfg.split_fraction;
    let (train_all, test_all) = match &data.test {
        Some(t) => (data.train.clone(), t.clone()),
        None => split(&data.train, f, seed ^ TRAIN_TEST_STREAM)?,
    };
    let (d_train, d_cand) = match scenario {
        Scenario::CandSeparate => split(&train_all, f, seed ^ CAND_STREAM)?,
        Scenario::CandEqTrain => (train_all.clone(), train_all),
    };
    let (d_test, d_fine) = split(&test_all, f, seed ^ FINE_STREAM)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    tracing::info!(dataset = %data.name, %scenario, seed, rows = d_train.len(), "training initial model");
    let model = train(&d_train, &train_cfg)?;
    Ok(Group {
        dataset: data.name.clone(),
        scenario,
        seed,
        d_train,
        d_cand,
        d_test,
        d_fine,
        model,
    })
}

/// Everything a cell produced, for callers that want more than the metrics.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub report: MetricsReport,
    pub key: Option<WatermarkSet>,
    pub watermarked: Option<Ensemble>,
}

/// Runs candidates → selection → embedding → metrics → attack for one cell.
/// A strategy that cannot supply candidates yields a shortfall report with
/// undefined metrics instead of an error.
pub fn run_cell(
    group: &Group,
    strategy: Strategy,
    selection: Selection,
    ratio: f64,
    cfg: &ExperimentConfig,
) -> Result<CellOutcome> {
    let (k, n) = cfg.ratio_base.counts(ratio, group.d_train.len());
    let mut report = MetricsReport {
        dataset: group.dataset.clone(),
        scenario: group.scenario,
        strategy,
        selection,
        ratio,
        seed: group.seed,
        a_wm: None,
        a_model: None,
        a_model_adj: None,
        robustness: None,
        resilience: None,
        resilience_adj: None,
        k: 0,
        n: 0,
        shortfall: false,
    };
    let pool = CandidatePool::build(&group.model, &group.d_cand)?;
    let set = match candidates(strategy, &pool, n, cfg.neighbors, group.seed) {
        Ok(s) => s,
        Err(Error::InsufficientSamples(msg)) => {
            tracing::warn!(dataset = %group.dataset, %strategy, ratio, "shortfall: {msg}");
            report.shortfall = true;
            return Ok(CellOutcome {
                report,
                key: None,
                watermarked: None,
            });
        }
        Err(e) => return Err(e),
    };
    let k_eff = if set.shortfall { set.len() / 2 } else { k };
    report.shortfall = set.shortfall;
    report.n = set.len();
    report.k = k_eff;
    if k_eff == 0 {
        return Ok(CellOutcome {
            report,
            key: None,
            watermarked: None,
        });
    }
    let key = select(selection, &set, k_eff, group.seed)?;
    let plan = build_embedding_plan(
        &key,
        group.scenario,
        cfg.dup_factor,
        group.d_train.n_features(),
        group.model.class_count(),
    )?;
    let wm = embed(&group.model, &plan, &group.d_train, cfg.update_scope)?;
    report.a_wm = Some(effectiveness(&wm, &key.entries)?);
    report.a_model = Some(general_accuracy(&wm, &group.d_test)?);
    report.resilience =
        candidate_resilience(&group.model, &wm, &key.non_selected, cfg.resilience_target)?;
    let ctx = UpdateContext {
        context: &group.d_train,
        fine: &group.d_fine,
        mode: cfg.attack_mode,
        scope: cfg.update_scope,
    };
    let (attacked, _) = inplace_update(&wm, &ctx)?;
    report.robustness = robustness(&wm, &attacked, &key.entries)?;
    Ok(CellOutcome {
        report: report.with_adjusted(),
        key: Some(key),
        watermarked: Some(wm),
    })
}

/// Stable content hash of everything that determines a cell's result.
pub fn cell_hash(cfg: &ExperimentConfig, spec: &DatasetSpec, cell: &Cell) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        version: &'static str,
        dataset: &'a DatasetSpec,
        cell: &'a Cell,
        dup_factor: usize,
        neighbors: usize,
        split_fraction: f64,
        train: &'a TrainConfig,
        ratio_base: RatioBase,
        resilience_target: ResilienceTarget,
        attack_mode: UpdateMode,
        update_scope: UpdateScope,
    }
    let keyed = Keyed {
        version: crate::model_io::MODEL_FORMAT,
        dataset: spec,
        cell,
        dup_factor: cfg.dup_factor,
        neighbors: cfg.neighbors,
        split_fraction: cfg.split_fraction,
        train: &cfg.train,
        ratio_base: cfg.ratio_base,
        resilience_target: cfg.resilience_target,
        attack_mode: cfg.attack_mode,
        update_scope: cfg.update_scope,
    };
    let bytes = serde_json::to_vec(&keyed).expect("plain data serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Every cell in enumeration order: dataset, scenario, seed, ratio, strategy, selection.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for d in &cfg.datasets {
        for &scenario in &cfg.scenarios {
            for &seed in &cfg.seeds {
                for &ratio in &cfg.ratios {
                    for &strategy in &cfg.strategies {
                        for &selection in &cfg.selections {
                            out.push(Cell {
                                dataset: d.name.clone(),
                                scenario,
                                strategy,
                                selection,
                                ratio,
                                seed,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    pub reports: Vec<MetricsReport>,
    pub executed: usize,
    pub skipped: usize,
    pub failures: Vec<(Cell, String)>,
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        if n > 0 {
            b = b.num_threads(n);
        }
    }
    b.build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs every cell not already present under `out/cells`, then writes
/// `results.csv`, `results.json` and `tables.md`.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path) -> Result<GridOutcome> {
    cfg.validate()?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    let specs: BTreeMap<&str, &DatasetSpec> =
        cfg.datasets.iter().map(|d| (d.name.as_str(), d)).collect();

    let all = enumerate_cells(cfg);
    let mut done: Vec<Option<MetricsReport>> = Vec::with_capacity(all.len());
    let mut pending: BTreeMap<(String, Scenario, u64), Vec<usize>> = BTreeMap::new();
    for (i, cell) in all.iter().enumerate() {
        let path = cells_dir.join(format!(
            "{}.json",
            cell_hash(cfg, specs[cell.dataset.as_str()], cell)
        ));
        match path.exists().then(|| load_json::<MetricsReport>(&path)) {
            Some(Ok(r)) => done.push(Some(r)),
            _ => {
                done.push(None);
                pending
                    .entry((cell.dataset.clone(), cell.scenario, cell.seed))
                    .or_default()
                    .push(i);
            }
        }
    }
    let skipped = done.iter().filter(|d| d.is_some()).count();
    tracing::info!(total = all.len(), skipped, "grid start");

    let mut loaded: BTreeMap<String, LoadedDataset> = BTreeMap::new();
    for (name, _, _) in pending.keys() {
        if !loaded.contains_key(name) {
            loaded.insert(name.clone(), load_dataset(specs[name.as_str()])?);
        }
    }

    let pool = thread_pool()?;
    let groups: Vec<_> = pending.into_iter().collect();
    let results: Vec<Vec<(usize, std::result::Result<MetricsReport, String>)>> =
        pool.install(|| {
            groups
                .par_iter()
                .map(|((name, scenario, seed), idx)| {
                    let group = match prepare_group(&loaded[name], *scenario, *seed, cfg) {
                        Ok(g) => g,
                        Err(e) => return idx.iter().map(|&i| (i, Err(e.to_string()))).collect(),
                    };
                    idx.par_iter()
                        .map(|&i| {
                            let c = &all[i];
                            let r = run_cell(&group, c.strategy, c.selection, c.ratio, cfg)
                                .map(|o| o.report)
                                .map_err(|e| e.to_string());
                            if let Ok(rep) = &r {
                                let path = cells_dir.join(format!(
                                    "{}.json",
                                    cell_hash(cfg, specs[name.as_str()], c)
                                ));
                                if let Err(e) = save_json(rep, &path) {
                                    tracing::error!("could not store cell: {e}");
                                }
                            }
                            (i, r)
                        })
                        .collect()
                })
                .collect()
        });

    let mut outcome = GridOutcome {
        skipped,
        ..Default::default()
    };
    for (i, r) in results.into_iter().flatten() {
        match r {
            Ok(rep) => {
                outcome.executed += 1;
                done[i] = Some(rep);
            }
            Err(msg) => {
                tracing::error!(cell = ?all[i], "cell failed: {msg}");
                outcome.failures.push((all[i].clone(), msg));
            }
        }
    }
    outcome.reports = done.into_iter().flatten().collect();
    write_reports(cfg, &outcome.reports, out)?;
    Ok(outcome)
}

pub fn write_reports(cfg: &ExperimentConfig, reports: &[MetricsReport], out: &Path) -> Result<()> {
    let csv_path = out.join("results.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    crate::metrics::write_csv(file, reports)?;
    save_json(reports, out.join("results.json"))?;
    let md = out.join("tables.md");
    fs::write(&md, render_tables(cfg, reports)).map_err(|e| Error::io(&md, e))
}

const DASH: &str = "-";

/// Markdown tables, one per scenario and metric: rows are
/// (ratio, strategy, selection), columns are datasets plus their average.
/// Values are means over seeds; shortfall or undefined cells show a dash.
pub fn render_tables(cfg: &ExperimentConfig, reports: &[MetricsReport]) -> String {
    type Metric = (&'static str, fn(&MetricsReport) -> Option<f64>);
    let metrics: [Metric; 5] = [
        ("Watermark effectiveness (A_wm)", |r| r.a_wm),
        ("Adjusted model accuracy (A_model * A_wm)", |r| {
            r.a_model_adj
        }),
        ("Model accuracy (A_model)", |r| r.a_model),
        ("Fine-tuning robustness", |r| r.robustness),
        ("Adjusted candidate resilience (R_cand * A_wm)", |r| {
            r.resilience_adj
        }),
    ];
    let names: Vec<&str> = cfg.datasets.iter().map(|d| d.name.as_str()).collect();
    let mut s = String::new();
    for &scenario in &cfg.scenarios {
        for (title, get) in &metrics {
            let _ = writeln!(s, "## {title}, {scenario}\n");
            let _ = writeln!(
                s,
                "| Ratio | Strategy | Selection | {} | Avg |",
                names.join(" | ")
            );
            let _ = writeln!(s, "|---|---|---|{}---|", "---|".repeat(names.len()));
            for &ratio in &cfg.ratios {
                for &strategy in &cfg.strategies {
                    for &selection in &cfg.selections {
                        let mut cols = Vec::new();
                        let mut defined = Vec::new();
                        for name in &names {
                            let vals: Vec<&MetricsReport> = reports
                                .iter()
                                .filter(|r| {
                                    r.dataset == *name
                                        && r.scenario == scenario
                                        && r.strategy == strategy
                                        && r.selection == selection
                                        && r.ratio == ratio
                                })
                                .collect();
                            let v = cell_mean(&vals, *get);
                            cols.push(v.map_or(DASH.to_string(), |x| format!("{x:.3}")));
                            defined.extend(v);
                        }
                        let avg = if defined.is_empty() {
                            DASH.to_string()
                        } else {
                            format!("{:.3}", defined.iter().sum::<f64>() / defined.len() as f64)
                        };
                        let _ = writeln!(
                            s,
                            "| {ratio} | {strategy} | {selection} | {} | {avg} |",
                            cols.join(" | ")
                        );
                    }
                }
            }
            s.push('\n');
        }
    }
    s
}

fn cell_mean(vals: &[&MetricsReport], get: fn(&MetricsReport) -> Option<f64>) -> Option<f64> {
    if vals.is_empty() || vals.iter().any(|r| r.shortfall) {
        return None;
    }
    let xs: Vec<f64> = vals.iter().filter_map(|r| get(r)).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
