//! `wildid`: simulate datasets, train identity and background models,
//! calibrate, run fused inference and tabulate results.
//!
//! Every command accepts `--config <json>` (a [`RunConfig`]) and `--seed`;
//! flags win over the config file, and the effective seed is written into
//! every output.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use wildid_core::calibration::{ece_from_confidences, fit_global_temperature, tempered_softmax};
use wildid_core::classifier::{
    self, BackgroundLocationModel, InputKind, LossKind, PitsModel, TrainConfig,
};
use wildid_core::data::{build_catalog, load_dataset, save_dataset, Dataset};
use wildid_core::evaluation::{
    background_accuracy, evaluate_records, format_table, run_suite, write_csv, ExperimentReport,
    RowSpec, SuiteConfig, SuiteReport,
};
use wildid_core::fusion::{read_predictions, sequential_infer, write_predictions};
use wildid_core::priors::{init_state, LocationSource, PriorConfig, PriorKind};
use wildid_core::simulator::{generate, SimConfig};

/// Configuration shared by all commands. Every field has a default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    /// Applied to simulation and training when set.
    seed: Option<u64>,
    /// Simulator preset used when `simulation` is absent.
    preset: String,
    simulation: Option<SimConfig>,
    train: TrainConfig,
    background: TrainConfig,
    prior: PriorConfig,
    holdout_fraction: f64,
    ece_bins: usize,
    /// Experiment rows; the preset's rows when absent.
    rows: Option<Vec<RowSpec>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        Self {
            seed: None,
            preset: "lynx-like".into(),
            simulation: None,
            train: suite.train,
            background: suite.background,
            prior: PriorConfig::default(),
            holdout_fraction: suite.holdout_fraction,
            ece_bins: suite.ece_bins,
            rows: None,
        }
    }
}

impl RunConfig {
    fn load(common: &Common) -> Result<Self> {
        let mut config: RunConfig = match &common.config {
            Some(path) => read_json(path)?,
            None => RunConfig::default(),
        };
        if common.seed.is_some() {
            config.seed = common.seed;
        }
        if let Some(seed) = config.seed {
            config.train.seed = seed;
            config.background.seed = seed;
            if let Some(sim) = config.simulation.as_mut() {
                sim.seed = seed;
            }
        }
        Ok(config)
    }

    fn sim_config(&self, preset: Option<&str>) -> Result<SimConfig> {
        let mut sim = match (preset, &self.simulation) {
            (Some(name), _) => preset_config(name)?,
            (None, Some(sim)) => sim.clone(),
            (None, None) => preset_config(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            sim.seed = seed;
        }
        Ok(sim)
    }

    fn suite(&self, rows: Vec<RowSpec>) -> SuiteConfig {
        SuiteConfig {
            train: self.train.clone(),
            background: self.background.clone(),
            holdout_fraction: self.holdout_fraction,
            ece_bins: self.ece_bins,
            rows,
        }
    }
}

fn preset_config(name: &str) -> Result<SimConfig> {
    SimConfig::preset(name).with_context(|| {
        format!(
            "unknown preset {name:?}; expected one of {:?}",
            SimConfig::PRESETS
        )
    })
}

fn preset_rows(name: &str) -> Vec<RowSpec> {
    match name {
        "turtle-like" => RowSpec::temporal_rows(),
        _ => RowSpec::location_rows(),
    }
}

#[derive(Parser)]
#[command(
    name = "wildid",
    version,
    about = "Individual animal identification with calibrated likelihoods and spatio-temporal priors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for all randomness; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Simulator preset (lynx-like, turtle-like); overrides the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an identity classifier, or the background-to-cell model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        input: Option<InputArg>,
        /// Train the background location model instead.
        #[arg(long)]
        background: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a post-hoc global temperature on validation data.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Validation dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Which split of the validation dataset to fit on.
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output path for the calibrated checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Optional path for the calibration summary JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run fused inference over the test split.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        prior: Option<PriorArg>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        /// Background location model, needed for `--source background`.
        #[arg(long)]
        bg_model: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        time_unit_days: Option<f64>,
        /// Output predictions JSONL.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset directory; enables new-location and unknown-identity counts.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint that produced the predictions, echoed into the report.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        ece_bins: Option<usize>,
        /// Output report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a comparison table from report files.
    Report {
        #[command(flatten)]
        common: Common,
        /// Experiment or suite report JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Also write the table to a file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a preset and run its whole results table.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Simulator preset (lynx-like, turtle-like); overrides the config file.
        #[arg(long)]
        preset: Option<String>,
        /// Output directory for dataset, report, table and CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    Pits,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Foreground,
    Background,
    Whole,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Uniform,
    HomeLocation,
    MigratingLocation,
    TimeDecay,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Metadata,
    Background,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let (dataset, _) =
        load_dataset(dir, None).with_context(|| format!("loading dataset {}", dir.display()))?;
    Ok(dataset)
}

fn cmd_simulate(common: &Common, preset: Option<&str>, out: &Path) -> Result<()> {
    let config = RunConfig::load(common)?;
    let sim = config.sim_config(preset)?;
    let dataset = generate(&sim)?;
    save_dataset(&dataset, &sim.meta_for(&dataset)?, out)?;
    println!(
        "wrote {}: {} identities, {} train / {} test sightings, seed {}",
        out.display(),
        dataset.n_identities,
        dataset.n_train(),
        dataset.n_test(),
        sim.seed
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &Common,
    data: &Path,
    loss: Option<LossArg>,
    input: Option<InputArg>,
    background: bool,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(common)?;
    let dataset = load_data(data)?;
    let mut train = if background {
        config.background
    } else {
        config.train
    };
    if let Some(loss) = loss {
        train.loss_kind = match loss {
            LossArg::Ce => LossKind::Ce,
            LossArg::Pits => LossKind::Pits,
        };
    }
    if let Some(input) = input {
        train.input = match input {
            InputArg::Foreground => InputKind::Foreground,
            InputArg::Background => InputKind::Background,
            InputArg::Whole => InputKind::Whole,
        };
    }
    if let Some(e) = epochs {
        train.epochs = e;
    }
    if let Some(lr) = learning_rate {
        train.learning_rate = lr;
    }
    if background {
        let model = classifier::train_background_model(&dataset, &train)?;
        write_json(out, &model)?;
        println!(
            "background model: test cell accuracy {:.4}, seed {}",
            background_accuracy(&model, &dataset)?,
            train.seed
        );
    } else {
        let catalog = build_catalog(&dataset)?;
        let model = classifier::train(&dataset, &catalog, &train)?;
        write_json(out, &model)?;
        println!(
            "{} + {} model: final train loss {:.6}, seed {}",
            train.input.label(),
            train.loss_kind.label(),
            model.final_train_loss().unwrap_or(f64::NAN),
            train.seed
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationSummary {
    temperature: f64,
    mean_nll: f64,
    flat_objective: bool,
    n_validation: usize,
    ece_before: f64,
    ece_after: f64,
    ece_bins: usize,
    seed: u64,
}

fn cmd_calibrate(
    common: &Common,
    model_path: &Path,
    data: &Path,
    split: SplitArg,
    out: &Path,
    report: Option<&Path>,
) -> Result<()> {
    let config = RunConfig::load(common)?;
    let mut model: PitsModel = read_json(model_path)?;
    let dataset = load_data(data)?;
    let observations: Vec<_> = match split {
        SplitArg::Train => dataset.train().collect(),
        SplitArg::Test => dataset.test().collect(),
    };
    // labels outside the model's label space have no logit to score
    let known: Vec<_> = observations
        .into_iter()
        .filter(|o| o.identity < model.n_classes)
        .collect();
    if known.is_empty() {
        bail!("no validation sightings with identities known to the model");
    }
    let labels: Vec<usize> = known.iter().map(|o| o.identity).collect();
    let outputs = known
        .iter()
        .map(|o| model.forward(&model.input.features(o)))
        .collect::<wildid_core::Result<Vec<_>>>()?;
    let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.z.clone()).collect();
    let fit = fit_global_temperature(&logits, &labels)?;

    let ece_of = |probs: Vec<Vec<f64>>| -> Result<f64> {
        let (conf, correct): (Vec<f64>, Vec<bool>) = probs
            .iter()
            .zip(&labels)
            .map(|(p, &y)| {
                let k = wildid_core::calibration::argmax(p);
                (p[k], k == y)
            })
            .unzip();
        Ok(ece_from_confidences(&conf, &correct, config.ece_bins)?.ece)
    };
    let before = outputs
        .iter()
        .map(|o| {
            let t = model.prediction_temperature(o);
            tempered_softmax(&o.z, t)
        })
        .collect::<wildid_core::Result<Vec<_>>>()?;
    let after = logits
        .iter()
        .map(|z| tempered_softmax(z, fit.temperature))
        .collect::<wildid_core::Result<Vec<_>>>()?;
    let summary = CalibrationSummary {
        temperature: fit.temperature,
        mean_nll: fit.mean_nll,
        flat_objective: fit.flat_objective,
        n_validation: labels.len(),
        ece_before: ece_of(before)?,
        ece_after: ece_of(after)?,
        ece_bins: config.ece_bins,
        seed: model.config.seed,
    };
    model.global_temperature = Some(fit.temperature);
    write_json(out, &model)?;
    if let Some(path) = report {
        write_json(path, &summary)?;
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    common: &Common,
    model_path: &Path,
    data: &Path,
    prior: Option<PriorArg>,
    source: Option<SourceArg>,
    bg_model_path: Option<&Path>,
    alpha: Option<f64>,
    beta: Option<f64>,
    time_unit_days: Option<f64>,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(common)?;
    let mut prior_config = config.prior;
    if let Some(p) = prior {
        prior_config.kind = match p {
            PriorArg::Uniform => PriorKind::Uniform,
            PriorArg::HomeLocation => PriorKind::HomeLocation,
            PriorArg::MigratingLocation => PriorKind::MigratingLocation,
            PriorArg::TimeDecay => PriorKind::TimeDecay,
        };
    }
    if let Some(s) = source {
        prior_config.location_source = match s {
            SourceArg::Metadata => LocationSource::Metadata,
            SourceArg::Background => LocationSource::BackgroundModel,
        };
    }
    if let Some(a) = alpha {
        prior_config.alpha = a;
    }
    if let Some(b) = beta {
        prior_config.beta = b;
    }
    if let Some(u) = time_unit_days {
        prior_config.time_unit_days = u;
    }
    prior_config.validate()?;

    let model: PitsModel = read_json(model_path)?;
    let bg_model: Option<BackgroundLocationModel> = bg_model_path.map(read_json).transpose()?;
    let dataset = load_data(data)?;
    let catalog = build_catalog(&dataset)?;
    let mut state = init_state(&catalog, &prior_config, &dataset.grid)?;
    let test: Vec<_> = dataset.test().collect();
    let predictions =
        sequential_infer(&model, bg_model.as_ref(), &mut state, &test, &dataset.grid)?;
    let label = prior_config.label();
    write_predictions(out, &predictions, &label, model.config.seed)?;
    println!(
        "wrote {} predictions ({label}) to {}",
        predictions.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    predictions: &Path,
    data: Option<&Path>,
    model_path: Option<&Path>,
    ece_bins: Option<usize>,
    out: &Path,
) -> Result<()> {
    let config = RunConfig::load(common)?;
    let records = read_predictions(predictions)?;
    let dataset = data.map(load_data).transpose()?;
    let model: Option<PitsModel> = model_path.map(read_json).transpose()?;
    let bins = ece_bins.unwrap_or(config.ece_bins);
    let metrics = evaluate_records(&records, dataset.as_ref(), bins)?;
    let prior = records
        .first()
        .map(|r| r.prior_kind.clone())
        .unwrap_or_default();
    let seed = records.first().map_or(config.train.seed, |r| r.seed);
    let row = match &model {
        Some(m) => format!("{} + {} + {}", m.input.label(), m.loss_kind.label(), prior),
        None => prior.clone(),
    };
    let report = ExperimentReport {
        row,
        input: model.as_ref().map(|m| m.input),
        loss: model.as_ref().map(|m| m.loss_kind),
        calibration: match &model {
            Some(m) if m.global_temperature.is_some() => "global T".into(),
            Some(m) if m.loss_kind == LossKind::Pits => "per-instance T".into(),
            Some(_) => "none".into(),
            None => "unknown".into(),
        },
        prior,
        global_temperature: model.as_ref().and_then(|m| m.global_temperature),
        final_train_loss: model.as_ref().and_then(PitsModel::final_train_loss),
        seed,
        config: serde_json::json!({
            "predictions": predictions,
            "train": model.as_ref().map(|m| &m.config),
            "ece_bins": bins,
        }),
        metrics,
    };
    write_json(out, &report)?;
    print!("{}", format_table(std::slice::from_ref(&report)));
    Ok(())
}

/// A report file holds either one row or a whole suite.
#[derive(Deserialize)]
#[serde(untagged)]
enum AnyReport {
    Suite(Box<SuiteReport>),
    Row(Box<ExperimentReport>),
}

fn cmd_report(paths: &[PathBuf], csv: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in paths {
        match read_json::<AnyReport>(path)? {
            AnyReport::Suite(s) => rows.extend(s.rows),
            AnyReport::Row(r) => rows.push(*r),
        }
    }
    let table = format_table(&rows);
    print!("{table}");
    if let Some(path) = out {
        fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = csv {
        write_csv(path, &rows)?;
    }
    Ok(())
}

fn cmd_experiment(common: &Common, preset: Option<&str>, out: &Path) -> Result<()> {
    let config = RunConfig::load(common)?;
    let name = preset.unwrap_or(&config.preset).to_string();
    let sim = config.sim_config(Some(&name))?;
    let dataset = generate(&sim)?;
    let data_dir = out.join("dataset");
    save_dataset(&dataset, &sim.meta_for(&dataset)?, &data_dir)?;
    let rows = config.rows.clone().unwrap_or_else(|| preset_rows(&name));
    let suite = config.suite(rows);
    info!("running {} rows on {name}", suite.rows.len());
    let report = run_suite(&dataset, &name, &suite)?;
    write_json(&out.join("report.json"), &report)?;
    let table = format_table(&report.rows);
    fs::write(out.join("table.txt"), &table)
        .with_context(|| format!("writing table under {}", out.display()))?;
    write_csv(out.join("results.csv"), &report.rows)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            preset,
            out,
        } => cmd_simulate(&common, preset.as_deref(), &out),
        Command::Train {
            common,
            data,
            loss,
            input,
            background,
            epochs,
            learning_rate,
            out,
        } => cmd_train(
            &common,
            &data,
            loss,
            input,
            background,
            epochs,
            learning_rate,
            &out,
        ),
        Command::Calibrate {
            common,
            model,
            data,
            split,
            out,
            report,
        } => cmd_calibrate(&common, &model, &data, split, &out, report.as_deref()),
        Command::Infer {
            common,
            model,
            data,
            prior,
            source,
            bg_model,
            alpha,
            beta,
            time_unit_days,
            out,
        } => cmd_infer(
            &common,
            &model,
            &data,
            prior,
            source,
            bg_model.as_deref(),
            alpha,
            beta,
            time_unit_days,
            &out,
        ),
        Command::Evaluate {
            common,
            predictions,
            data,
            model,
            ece_bins,
            out,
        } => cmd_evaluate(
            &common,
            &predictions,
            data.as_deref(),
            model.as_deref(),
            ece_bins,
            &out,
        ),
        Command::Report {
            reports, csv, out, ..
        } => cmd_report(&reports, csv.as_deref(), out.as_deref()),
        Command::Experiment {
            common,
            preset,
            out,
        } => cmd_experiment(&common, preset.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
