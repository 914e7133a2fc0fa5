//! Accuracy, calibration and the experiment-table driver.
//!
//! A row of the results table is one classifier (input block, loss, optional
//! post-hoc global temperature) paired with one prior. [`run_suite`] trains
//! each distinct classifier once and reuses it across priors.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{ece_from_confidences, fit_global_temperature, DEFAULT_ECE_BINS};
use crate::classifier::{
    train, train_background_model, train_on, BackgroundLocationModel, InputKind, LossKind,
    PitsModel, TrainConfig,
};
use crate::data::{build_catalog, Dataset, Observation};
use crate::error::{Error, Result};
use crate::fusion::{sequential_infer, PredictionRecord};
use crate::priors::{init_state, LocationSource, PriorConfig, PriorKind};

/// Scores over a set of labelled predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_test: usize,
    pub n_correct: usize,
    /// Unknown identities count as errors.
    pub overall_accuracy: f64,
    /// Test sightings whose identity has no training sighting.
    pub n_unknown_identity: usize,
    pub n_new_location: usize,
    pub n_new_location_correct: usize,
    /// `None` when no test sighting is at a new location, or no dataset was given.
    pub new_location_accuracy: Option<f64>,
    pub ece_fused: f64,
    pub ece_likelihood: f64,
    pub ece_bins: usize,
    /// Test counts per true identity, ascending.
    pub per_identity: Vec<IdentityScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityScore {
    pub identity: usize,
    pub n_test: usize,
    pub n_correct: usize,
}

/// Ids of test sightings whose `(identity, cell)` pair never occurs in training.
pub fn new_location_ids(dataset: &Dataset) -> Result<HashSet<String>> {
    let seen = dataset.train_identity_cells()?;
    let mut out = HashSet::new();
    for obs in dataset.test() {
        if !seen.contains(&(obs.identity, dataset.grid.cell_of(&obs.location)?)) {
            out.insert(obs.obs_id.clone());
        }
    }
    Ok(out)
}

/// Score prediction records. With a dataset, unknown identities and
/// new-location sightings are tallied too.
pub fn evaluate_records(
    records: &[PredictionRecord],
    dataset: Option<&Dataset>,
    ece_bins: usize,
) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::Contract("no predictions to evaluate".into()));
    }
    let truths: Vec<usize> = records
        .iter()
        .map(|r| {
            r.true_identity.ok_or_else(|| {
                Error::Domain(format!("prediction {} carries no true identity", r.obs_id))
            })
        })
        .collect::<Result<_>>()?;
    let correct: Vec<bool> = records
        .iter()
        .zip(&truths)
        .map(|(r, &y)| r.predicted == y)
        .collect();
    let n_correct = correct.iter().filter(|&&c| c).count();

    let confidences: Vec<f64> = records.iter().map(PredictionRecord::confidence).collect();
    let ece_fused = ece_from_confidences(&confidences, &correct, ece_bins)?.ece;
    let (lik_conf, lik_correct): (Vec<f64>, Vec<bool>) = records
        .iter()
        .zip(&truths)
        .map(|(r, &y)| {
            let (k, p) = r.likelihood_confidence();
            (p, k == y)
        })
        .unzip();
    let ece_likelihood = ece_from_confidences(&lik_conf, &lik_correct, ece_bins)?.ece;

    let mut per_identity: BTreeMap<usize, IdentityScore> = BTreeMap::new();
    for (&y, &ok) in truths.iter().zip(&correct) {
        let e = per_identity.entry(y).or_insert(IdentityScore {
            identity: y,
            n_test: 0,
            n_correct: 0,
        });
        e.n_test += 1;
        e.n_correct += usize::from(ok);
    }

    let (mut n_unknown, mut n_new, mut n_new_correct) = (0, 0, 0);
    if let Some(ds) = dataset {
        n_unknown = truths.iter().filter(|&&y| !ds.is_known(y)).count();
        let new_ids = new_location_ids(ds)?;
        for (r, &ok) in records.iter().zip(&correct) {
            if new_ids.contains(&r.obs_id) {
                n_new += 1;
                n_new_correct += usize::from(ok);
            }
        }
    }
    Ok(Metrics {
        n_test: records.len(),
        n_correct,
        overall_accuracy: n_correct as f64 / records.len() as f64,
        n_unknown_identity: n_unknown,
        n_new_location: n_new,
        n_new_location_correct: n_new_correct,
        new_location_accuracy: (n_new > 0).then(|| n_new_correct as f64 / n_new as f64),
        ece_fused,
        ece_likelihood,
        ece_bins,
        per_identity: per_identity.into_values().collect(),
    })
}

/// One row of the experiment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub input: InputKind,
    pub loss: LossKind,
    /// Replace per-instance temperatures with one global temperature fitted
    /// on the latest part of the training split.
    #[serde(default)]
    pub global_temperature: bool,
    /// `None` means the uniform prior.
    #[serde(default)]
    pub prior: Option<PriorConfig>,
}

impl RowSpec {
    pub fn new(input: InputKind, loss: LossKind) -> Self {
        Self {
            input,
            loss,
            global_temperature: false,
            prior: None,
        }
    }

    pub fn with_prior(mut self, kind: PriorKind, source: LocationSource) -> Self {
        self.prior = Some(PriorConfig::new(kind).with_source(source));
        self
    }

    pub fn with_global_temperature(mut self) -> Self {
        self.global_temperature = true;
        self
    }

    pub fn prior_config(&self) -> PriorConfig {
        self.prior
            .clone()
            .unwrap_or_else(|| PriorConfig::new(PriorKind::Uniform))
    }

    pub fn calibration_label(&self) -> &'static str {
        if self.global_temperature {
            "global T"
        } else {
            match self.loss {
                LossKind::Ce => "none",
                LossKind::Pits => "per-instance T",
            }
        }
    }

    /// e.g. `Foreground + PITS + ML_θ`.
    pub fn label(&self) -> String {
        let mut s = format!("{} + {}", self.input.label(), self.loss.label());
        if self.global_temperature {
            s.push_str(" + TS");
        }
        if let Some(p) = &self.prior {
            if p.kind != PriorKind::Uniform || !p.compose.is_empty() {
                let _ = write!(s, " + {}", p.label());
            }
        }
        s
    }

    fn model_key(&self) -> (InputKind, LossKind, bool) {
        (self.input, self.loss, self.global_temperature)
    }

    /// Rows for data with informative, slowly drifting locations.
    pub fn location_rows() -> Vec<Self> {
        use InputKind::*;
        use LocationSource::*;
        use PriorKind::*;
        let fg_pits = Self::new(Foreground, LossKind::Pits);
        let fg_ce = Self::new(Foreground, LossKind::Ce);
        vec![
            Self::new(Whole, LossKind::Ce),
            Self::new(Background, LossKind::Ce),
            fg_ce.clone(),
            fg_pits.clone(),
            fg_pits.clone().with_prior(HomeLocation, BackgroundModel),
            fg_pits.clone().with_prior(HomeLocation, Metadata),
            fg_pits
                .clone()
                .with_prior(MigratingLocation, BackgroundModel),
            fg_pits.with_prior(MigratingLocation, Metadata),
            fg_ce.clone().with_prior(MigratingLocation, Metadata),
            fg_ce
                .with_global_temperature()
                .with_prior(MigratingLocation, Metadata),
        ]
    }

    /// Rows for data where identities recur in seasonal bursts.
    pub fn temporal_rows() -> Vec<Self> {
        use InputKind::*;
        use LocationSource::*;
        use PriorKind::*;
        let fg_pits = Self::new(Foreground, LossKind::Pits);
        vec![
            Self::new(Whole, LossKind::Ce),
            Self::new(Background, LossKind::Ce),
            Self::new(Foreground, LossKind::Ce),
            fg_pits.clone(),
            fg_pits.clone().with_prior(TimeDecay, Metadata),
            fg_pits.clone().with_prior(HomeLocation, Metadata),
            fg_pits.with_prior(MigratingLocation, Metadata),
        ]
    }
}

/// Settings shared by every row of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    /// Base training settings; each row overrides `input` and `loss_kind`.
    pub train: TrainConfig,
    /// Settings for the background-to-cell model.
    pub background: TrainConfig,
    /// Fraction of the training split, latest first, held out to fit global temperatures.
    pub holdout_fraction: f64,
    pub ece_bins: usize,
    pub rows: Vec<RowSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 400,
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        Self {
            background: TrainConfig {
                loss_kind: LossKind::Ce,
                input: InputKind::Background,
                ..train.clone()
            },
            train,
            holdout_fraction: 0.2,
            ece_bins: DEFAULT_ECE_BINS,
            rows: RowSpec::location_rows(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.background.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Config(format!(
                "holdout_fraction must lie in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be >= 1".into()));
        }
        for row in &self.rows {
            row.prior_config().validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub row: String,
    /// Unknown when a report is built from predictions alone.
    pub input: Option<InputKind>,
    pub loss: Option<LossKind>,
    pub calibration: String,
    pub prior: String,
    pub global_temperature: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub seed: u64,
    /// Effective configuration that produced the row.
    pub config: serde_json::Value,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub dataset: String,
    pub seed: u64,
    pub n_identities: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Cell accuracy of the background model on the test split, when one was trained.
    pub background_cell_accuracy: Option<f64>,
    pub config: SuiteConfig,
    pub rows: Vec<ExperimentReport>,
}

impl SuiteReport {
    pub fn row(&self, label: &str) -> Option<&ExperimentReport> {
        self.rows.iter().find(|r| r.row == label)
    }
}

/// Train the classifier for `row`. With a global temperature the latest
/// `holdout_fraction` of the training split is held out to fit it.
pub fn train_row_model(
    dataset: &Dataset,
    row: &RowSpec,
    config: &SuiteConfig,
) -> Result<PitsModel> {
    let train_config = TrainConfig {
        loss_kind: row.loss,
        input: row.input,
        ..config.train.clone()
    };
    let catalog = build_catalog(dataset)?;
    if !row.global_temperature {
        return train(dataset, &catalog, &train_config);
    }
    let mut train_obs: Vec<&Observation> = dataset.train().collect();
    train_obs.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.obs_id.cmp(&b.obs_id))
    });
    let n_fit = ((1.0 - config.holdout_fraction) * train_obs.len() as f64).round() as usize;
    if n_fit == 0 || n_fit == train_obs.len() {
        return Err(Error::Split(
            "training split too small to hold out a calibration set".into(),
        ));
    }
    let (fit_part, held_out) = train_obs.split_at(n_fit);
    let xs: Vec<Vec<f64>> = fit_part
        .iter()
        .map(|o| row.input.features(o).into_owned())
        .collect();
    let labels: Vec<usize> = fit_part.iter().map(|o| o.identity).collect();
    let targets: Option<Vec<f64>> = (row.loss == LossKind::Pits).then(|| {
        labels
            .iter()
            .map(|&y| catalog.target_temperatures[y])
            .collect()
    });
    let mut model = train_on(
        &xs,
        &labels,
        targets.as_deref(),
        dataset.n_identities,
        &train_config,
    )?;
    let logits: Vec<Vec<f64>> = held_out
        .iter()
        .map(|o| model.forward(&row.input.features(o)).map(|out| out.z))
        .collect::<Result<_>>()?;
    let held_labels: Vec<usize> = held_out.iter().map(|o| o.identity).collect();
    model.global_temperature = Some(fit_global_temperature(&logits, &held_labels)?.temperature);
    Ok(model)
}

/// Run one row with an already trained classifier.
pub fn run_row(
    dataset: &Dataset,
    row: &RowSpec,
    model: &PitsModel,
    bg_model: Option<&BackgroundLocationModel>,
    ece_bins: usize,
) -> Result<(ExperimentReport, Vec<PredictionRecord>)> {
    let prior = row.prior_config();
    let catalog = build_catalog(dataset)?;
    let mut state = init_state(&catalog, &prior, &dataset.grid)?;
    let test: Vec<&Observation> = dataset.test().collect();
    let predictions = sequential_infer(model, bg_model, &mut state, &test, &dataset.grid)?;
    let prior_label = prior.label();
    let seed = model.config.seed;
    let records: Vec<PredictionRecord> = predictions
        .iter()
        .map(|p| PredictionRecord::from_prediction(p, &prior_label, seed))
        .collect();
    let metrics = evaluate_records(&records, Some(dataset), ece_bins)?;
    let report = ExperimentReport {
        row: row.label(),
        input: Some(row.input),
        loss: Some(row.loss),
        calibration: row.calibration_label().to_string(),
        prior: prior_label,
        global_temperature: model.global_temperature,
        final_train_loss: model.final_train_loss(),
        seed,
        config: serde_json::json!({ "train": model.config, "prior": prior }),
        metrics,
    };
    Ok((report, records))
}

/// Train what `row` needs and run it.
pub fn run_experiment(
    dataset: &Dataset,
    row: &RowSpec,
    config: &SuiteConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let bg_model = train_background_if_needed(dataset, std::slice::from_ref(row), config)?;
    let model = train_row_model(dataset, row, config)?;
    Ok(run_row(dataset, row, &model, bg_model.as_ref(), config.ece_bins)?.0)
}

fn train_background_if_needed(
    dataset: &Dataset,
    rows: &[RowSpec],
    config: &SuiteConfig,
) -> Result<Option<BackgroundLocationModel>> {
    let needed = rows.iter().any(|r| {
        let p = r.prior_config();
        p.uses_location() && p.location_source == LocationSource::BackgroundModel
    });
    if !needed {
        return Ok(None);
    }
    let bg_config = TrainConfig {
        input: InputKind::Background,
        loss_kind: LossKind::Ce,
        ..config.background.clone()
    };
    train_background_model(dataset, &bg_config).map(Some)
}

/// Run every row of `config` on `dataset`.
pub fn run_suite(
    dataset: &Dataset,
    dataset_name: &str,
    config: &SuiteConfig,
) -> Result<SuiteReport> {
    config.validate()?;
    if config.rows.is_empty() {
        return Err(Error::Config("suite has no rows".into()));
    }
    let bg_model = train_background_if_needed(dataset, &config.rows, config)?;
    let background_cell_accuracy = match &bg_model {
        Some(m) => Some(background_accuracy(m, dataset)?),
        None => None,
    };

    let mut models: HashMap<(InputKind, LossKind, bool), PitsModel> = HashMap::new();
    let mut rows = Vec::with_capacity(config.rows.len());
    for row in &config.rows {
        let model = match models.entry(row.model_key()) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(train_row_model(dataset, row, config)?),
        };
        let (report, _) = run_row(dataset, row, model, bg_model.as_ref(), config.ece_bins)?;
        log::info!(
            "{}: accuracy {:.4}",
            report.row,
            report.metrics.overall_accuracy
        );
        rows.push(report);
    }
    Ok(SuiteReport {
        dataset: dataset_name.to_string(),
        seed: config.train.seed,
        n_identities: dataset.n_identities,
        n_train: dataset.n_train(),
        n_test: dataset.n_test(),
        background_cell_accuracy,
        config: config.clone(),
        rows,
    })
}

/// Fraction of test sightings whose cell the background model recovers.
pub fn background_accuracy(model: &BackgroundLocationModel, dataset: &Dataset) -> Result<f64> {
    let mut hits = 0usize;
    for obs in dataset.test() {
        hits += usize::from(
            model.predict_cell(&obs.bg_features)? == dataset.grid.cell_of(&obs.location)?,
        );
    }
    Ok(hits as f64 / dataset.n_test().max(1) as f64)
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Plain-text table of accuracies and calibration errors, in percent.
pub fn format_table(rows: &[ExperimentReport]) -> String {
    let header = [
        "Setting",
        "Calibration",
        "Prior",
        "Overall",
        "New loc.",
        "ECE",
        "ECE (lik.)",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.row.clone(),
                r.calibration.clone(),
                r.prior.clone(),
                pct(r.metrics.overall_accuracy),
                r.metrics
                    .new_location_accuracy
                    .map_or_else(|| "-".to_string(), pct),
                pct(r.metrics.ece_fused),
                pct(r.metrics.ece_likelihood),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for line in &body {
        for (w, cell) in widths.iter_mut().zip(line) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let render = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            let pad = w - cell.chars().count();
            if i < 3 {
                s.push_str(cell);
                s.push_str(&" ".repeat(pad));
            } else {
                s.push_str(&" ".repeat(pad));
                s.push_str(cell);
            }
            s.push_str(if i + 1 < cells.len() { "  " } else { "\n" });
        }
        s
    };
    let mut out = render(&header.map(String::from));
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for line in &body {
        out.push_str(&render(line));
    }
    out
}

/// Flat CSV row; nested fields are spelled out.
#[derive(Serialize)]
struct CsvRow<'a> {
    row: &'a str,
    calibration: &'a str,
    prior: &'a str,
    global_temperature: Option<f64>,
    seed: u64,
    n_test: usize,
    n_correct: usize,
    overall_accuracy: f64,
    n_unknown_identity: usize,
    n_new_location: usize,
    new_location_accuracy: Option<f64>,
    ece_fused: f64,
    ece_likelihood: f64,
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[ExperimentReport]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(CsvRow {
            row: &r.row,
            calibration: &r.calibration,
            prior: &r.prior,
            global_temperature: r.global_temperature,
            seed: r.seed,
            n_test: r.metrics.n_test,
            n_correct: r.metrics.n_correct,
            overall_accuracy: r.metrics.overall_accuracy,
            n_unknown_identity: r.metrics.n_unknown_identity,
            n_new_location: r.metrics.n_new_location,
            new_location_accuracy: r.metrics.new_location_accuracy,
            ece_fused: r.metrics.ece_fused,
            ece_likelihood: r.metrics.ece_likelihood,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
