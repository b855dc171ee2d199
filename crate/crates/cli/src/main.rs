use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gbdtwm::data::{load_csv, CsvOptions, Dataset, LabelColumn};
use gbdtwm::gbdt::{train, TrainConfig};
use gbdtwm::harness::{run_grid, DatasetSpec, ExperimentConfig, RatioBase};
use gbdtwm::inplace::{inplace_update, UpdateContext, UpdateMode, UpdateScope};
use gbdtwm::metrics::{
    candidate_resilience, effectiveness, general_accuracy, robustness, ResilienceTarget,
};
use gbdtwm::model_io::{load_key, load_model, save_json, save_model};
use gbdtwm::watermark::{
    build_embedding_plan, candidates, embed, select, CandidatePool, Scenario, Selection, Strategy,
};

#[derive(Parser)]
#[command(
    name = "gbdtwm",
    version,
    about = "Watermark gradient-boosted tree ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV file.
    Train(TrainCmd),
    /// Embed a watermark and write the new model plus its key.
    Watermark(WatermarkCmd),
    /// Fine-tune a model in place on extra data.
    Finetune(FinetuneCmd),
    /// Print metrics for a model as JSON.
    Eval(EvalCmd),
    /// Run an experiment grid.
    Experiment(ExperimentCmd),
}

#[derive(Args, Clone)]
struct CsvArgs {
    /// Label column: `last`, `first`, a 0-based index or a header name.
    #[arg(long, default_value = "last")]
    label_column: LabelColumn,
    /// Declared number of classes; labels must then be integers in 0..K.
    #[arg(long)]
    class_count: Option<usize>,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

impl CsvArgs {
    fn options(&self) -> CsvOptions {
        CsvOptions {
            label_column: self.label_column.clone(),
            class_count: self.class_count,
            has_header: !self.no_header,
        }
    }

    fn load(&self, path: &Path) -> Result<Dataset> {
        load_csv(path, &self.options()).with_context(|| format!("loading {}", path.display()))
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 0.1)]
    shrinkage: f64,
    #[arg(long, default_value_t = 20)]
    max_leaves: usize,
    #[arg(long, default_value_t = 0.1)]
    feature_sampling: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            shrinkage: self.shrinkage,
            max_leaves: self.max_leaves,
            feature_sampling: self.feature_sampling,
            lambda: self.lambda,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WatermarkCmd {
    #[arg(long)]
    model: PathBuf,
    /// Candidate pool.
    #[arg(long)]
    dataset: PathBuf,
    /// Training data the model was fit on; defaults to `--dataset`.
    #[arg(long)]
    context: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long, default_value_t = Scenario::CandEqTrain)]
    scenario: Scenario,
    #[arg(long, default_value_t = Strategy::Confidence)]
    strategy: Strategy,
    #[arg(long, default_value_t = Selection::Conf)]
    selection: Selection,
    /// Watermark size as a fraction of the training data.
    #[arg(long, default_value_t = 0.01)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    dup_factor: usize,
    #[arg(long, default_value_t = 2)]
    neighbors: usize,
    #[arg(long, default_value_t = UpdateScope::All)]
    scope: UpdateScope,
    /// Output directory for `model.json` and `key.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneCmd {
    #[arg(long)]
    model: PathBuf,
    /// Fine-tuning data.
    #[arg(long)]
    dataset: PathBuf,
    /// Original training data.
    #[arg(long)]
    context: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// Refit on the fine-tuning data alone instead of the union.
    #[arg(long)]
    fine_only: bool,
    #[arg(long, default_value_t = UpdateScope::All)]
    scope: UpdateScope,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    model: PathBuf,
    /// Test data for general accuracy.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    /// Watermark key for effectiveness.
    #[arg(long)]
    key: Option<PathBuf>,
    /// Pre-watermark model; with `--key` reports candidate resilience.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Model after an attack; with `--key` reports robustness.
    #[arg(long)]
    attacked: Option<PathBuf>,
    #[arg(long, default_value_t = ResilienceTarget::InitialPrediction)]
    resilience_target: ResilienceTarget,
}

#[derive(Args)]
struct ExperimentCmd {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV, repeatable; the file stem names the dataset.
    #[arg(long)]
    dataset: Vec<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long)]
    scenario: Vec<Scenario>,
    #[arg(long)]
    strategy: Vec<Strategy>,
    #[arg(long)]
    selection: Vec<Selection>,
    #[arg(long)]
    ratio: Vec<f64>,
    #[arg(long)]
    seed: Vec<u64>,
    #[arg(long)]
    dup_factor: Option<usize>,
    #[arg(long)]
    neighbors: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    shrinkage: Option<f64>,
    #[arg(long)]
    max_leaves: Option<usize>,
    #[arg(long)]
    feature_sampling: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train(a: TrainCmd) -> Result<()> {
    let ds = a.csv.load(&a.dataset)?;
    let model = train(&ds, &a.train.config(a.seed))?;
    save_model(&model, &a.out)?;
    eprintln!(
        "trained {} trees on {} rows -> {}",
        model.trees().len(),
        ds.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_watermark(a: WatermarkCmd) -> Result<()> {
    let model = load_model(&a.model)?;
    let cand = a.csv.load(&a.dataset)?;
    let context = match &a.context {
        Some(p) => a.csv.load(p)?,
        None => cand.clone(),
    };
    let (k, n) = RatioBase::Watermark.counts(a.ratio, context.len());
    let pool = CandidatePool::build(&model, &cand)?;
    let set = candidates(a.strategy, &pool, n, a.neighbors, a.seed)?;
    let k = if set.shortfall { set.len() / 2 } else { k };
    if k == 0 {
        bail!("{} strategy found no usable candidates", a.strategy);
    }
    let key = select(a.selection, &set, k, a.seed)?;
    let plan = build_embedding_plan(
        &key,
        a.scenario,
        a.dup_factor,
        model.n_features(),
        model.class_count(),
    )?;
    let wm = embed(&model, &plan, &context, a.scope)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_model(&wm, a.out.join("model.json"))?;
    save_json(&key, a.out.join("key.json"))?;
    eprintln!(
        "embedded {} samples (A_wm {:.3}) -> {}",
        key.entries.len(),
        effectiveness(&wm, &key.entries)?,
        a.out.display()
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneCmd) -> Result<()> {
    let model = load_model(&a.model)?;
    let fine = a.csv.load(&a.dataset)?;
    let context = a.csv.load(&a.context)?;
    let ctx = UpdateContext {
        context: &context,
        fine: &fine,
        mode: if a.fine_only {
            UpdateMode::FineOnly
        } else {
            UpdateMode::Union
        },
        scope: a.scope,
    };
    let (out, report) = inplace_update(&model, &ctx)?;
    save_model(&out, &a.out)?;
    eprintln!(
        "rechecked {} nodes, retrained {} subtrees, refit {} leaves -> {}",
        report.total_rechecked(),
        report.total_retrained(),
        report.total_leaves_refit(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalCmd) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut out = serde_json::Map::new();
    if let Some(p) = &a.dataset {
        let ds = a.csv.load(p)?;
        out.insert("a_model".into(), general_accuracy(&model, &ds)?.into());
    }
    if a.key.is_none() && (a.reference.is_some() || a.attacked.is_some()) {
        bail!("--reference and --attacked need --key");
    }
    if let Some(p) = &a.key {
        let key = load_key(p)?;
        let a_wm = effectiveness(&model, &key.entries)?;
        out.insert("a_wm".into(), a_wm.into());
        if let Some(r) = &a.reference {
            let initial = load_model(r)?;
            let res =
                candidate_resilience(&initial, &model, &key.non_selected, a.resilience_target)?;
            out.insert("resilience".into(), res.into());
            out.insert("resilience_adj".into(), res.map(|v| v * a_wm).into());
        }
        if let Some(t) = &a.attacked {
            let attacked = load_model(t)?;
            out.insert(
                "robustness".into(),
                robustness(&model, &attacked, &key.entries)?.into(),
            );
        }
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn experiment_config(a: &ExperimentCmd) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(Vec::new()),
    };
    for path in &a.dataset {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .with_context(|| format!("cannot name dataset {}", path.display()))?;
        cfg.datasets.push(DatasetSpec {
            name: name.to_string(),
            path: path.clone(),
            test_path: None,
            csv: a.csv.options(),
        });
    }
    macro_rules! replace_list {
        ($($field:ident <- $flag:ident),*) => {$(
            if !a.$flag.is_empty() {
                cfg.$field = a.$flag.clone();
            }
        )*};
    }
    replace_list!(scenarios <- scenario, strategies <- strategy, selections <- selection, ratios <- ratio, seeds <- seed);
    macro_rules! replace {
        ($($target:expr => $flag:ident),*) => {$(
            if let Some(v) = a.$flag {
                $target = v;
            }
        )*};
    }
    replace!(
        cfg.dup_factor => dup_factor,
        cfg.neighbors => neighbors,
        cfg.train.iterations => iterations,
        cfg.train.shrinkage => shrinkage,
        cfg.train.max_leaves => max_leaves,
        cfg.train.feature_sampling => feature_sampling,
        cfg.train.lambda => lambda
    );
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_experiment(a: ExperimentCmd) -> Result<()> {
    let cfg = experiment_config(&a)?;
    let outcome = run_grid(&cfg, &a.out)?;
    eprintln!(
        "{} cells run, {} reused, {} failed -> {}",
        outcome.executed,
        outcome.skipped,
        outcome.failures.len(),
        a.out.display()
    );
    if !outcome.failures.is_empty() {
        bail!("{} cells failed", outcome.failures.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Watermark(a) => cmd_watermark(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
