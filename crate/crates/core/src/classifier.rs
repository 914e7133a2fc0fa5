//! Linear identity classifier with a per-instance temperature head, and the
//! background location classifier used by the `*_BG` prior variants.
//!
//! Both models are multinomial logistic regressions trained by mini-batch
//! gradient descent with a cosine-annealed learning rate. The identity model
//! adds a scalar head `T = 1 + softplus(w_T . x + b_T)` so that `T >= 1` holds
//! for every input without clamping.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    argmax, cross_entropy, per_instance_softmax, pits_loss, pits_loss_grad, tempered_softmax,
    LogitsOutput, DEFAULT_LAMBDA,
};
use crate::data::{Dataset, GridSpec, IdentityCatalog, Location, Observation};
use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Cross-entropy with the temperature pinned to 1.
    Ce,
    Pits,
}

impl LossKind {
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Ce => "CE",
            LossKind::Pits => "PITS",
        }
    }
}

/// Which feature block the identity classifier reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Foreground,
    Background,
    /// Foreground and background concatenated.
    Whole,
}

impl InputKind {
    pub fn features<'a>(&self, obs: &'a Observation) -> Cow<'a, [f64]> {
        match self {
            InputKind::Foreground => Cow::Borrowed(&obs.fg_features),
            InputKind::Background => Cow::Borrowed(&obs.bg_features),
            InputKind::Whole => {
                let mut v = Vec::with_capacity(obs.fg_features.len() + obs.bg_features.len());
                v.extend_from_slice(&obs.fg_features);
                v.extend_from_slice(&obs.bg_features);
                Cow::Owned(v)
            }
        }
    }

    pub fn dim(&self, (d_fg, d_bg): (usize, usize)) -> usize {
        match self {
            InputKind::Foreground => d_fg,
            InputKind::Background => d_bg,
            InputKind::Whole => d_fg + d_bg,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InputKind::Foreground => "Foreground",
            InputKind::Background => "Background",
            InputKind::Whole => "Whole features",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub input: InputKind,
    pub lambda: f64,
    pub epochs: usize,
    /// Initial rate; annealed to zero along a cosine over the epochs.
    pub learning_rate: f64,
    /// Batches larger than the training set run full-batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Std of Gaussian noise added to inputs each epoch; 0 disables it.
    pub augment_noise_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Pits,
            input: InputKind::Foreground,
            lambda: DEFAULT_LAMBDA,
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 0,
            augment_noise_std: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.augment_noise_std.is_finite() && self.augment_noise_std >= 0.0) {
            return Err(Error::Config("augment_noise_std must be >= 0".into()));
        }
        Ok(())
    }

    /// Cosine-annealed rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let progress = epoch as f64 / self.epochs as f64;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub(crate) fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense `classes x dim` linear layer, optionally with a temperature head.
#[derive(Debug, Clone, PartialEq)]
struct Linear {
    classes: usize,
    dim: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    temp_weights: Vec<f64>,
    temp_bias: f64,
}

impl Linear {
    fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, Domain::Init, 0);
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let weights = (0..classes * dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        let temp_weights = (0..dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self {
            classes,
            dim,
            weights,
            biases: vec![0.0; classes],
            temp_weights,
            temp_bias: 0.0,
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.biases
            .iter()
            .zip(self.weights.chunks_exact(self.dim))
            .map(|(b, row)| b + dot(row, x))
            .collect()
    }

    fn temperature_score(&self, x: &[f64]) -> f64 {
        self.temp_bias + dot(&self.temp_weights, x)
    }

    fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .chain(&self.temp_weights)
            .all(|v| v.is_finite())
            && self.temp_bias.is_finite()
    }
}

/// Gradient buffers matching [`Linear`].
struct Grad {
    weights: Vec<f64>,
    biases: Vec<f64>,
    temp_weights: Vec<f64>,
    temp_bias: f64,
}

impl Grad {
    fn zeros(l: &Linear) -> Self {
        Self {
            weights: vec![0.0; l.weights.len()],
            biases: vec![0.0; l.biases.len()],
            temp_weights: vec![0.0; l.temp_weights.len()],
            temp_bias: 0.0,
        }
    }

    fn clear(&mut self) {
        self.weights.fill(0.0);
        self.biases.fill(0.0);
        self.temp_weights.fill(0.0);
        self.temp_bias = 0.0;
    }
}

struct Sample<'a> {
    x: &'a [f64],
    label: usize,
    /// Per-sample temperature target; `None` trains plain CE.
    target: Option<f64>,
}

/// Loss of one sample and its gradient accumulated into `grad`.
fn accumulate(
    model: &Linear,
    x: &[f64],
    label: usize,
    target: Option<f64>,
    lambda: f64,
    grad: &mut Grad,
) -> Result<f64> {
    let z = model.logits(x);
    let (loss, d_logits) = match target {
        None => {
            let loss = cross_entropy(&z, label)?;
            let mut d = tempered_softmax(&z, 1.0)?;
            d[label] -= 1.0;
            (loss, d)
        }
        Some(target) => {
            let s = model.temperature_score(x);
            let out = LogitsOutput::new(z, 1.0 + softplus(s));
            let loss = pits_loss(&out, label, target, lambda)?;
            let g = pits_loss_grad(&out, label, target, lambda)?;
            let d_s = g.d_temperature * sigmoid(s);
            grad.temp_bias += d_s;
            grad.temp_weights
                .iter_mut()
                .zip(x)
                .for_each(|(gw, xi)| *gw += d_s * xi);
            (loss, g.d_logits)
        }
    };
    for (c, &dz) in d_logits.iter().enumerate() {
        grad.biases[c] += dz;
        let row = &mut grad.weights[c * model.dim..(c + 1) * model.dim];
        row.iter_mut().zip(x).for_each(|(gw, xi)| *gw += dz * xi);
    }
    Ok(loss)
}

/// Mini-batch gradient descent on the batch-mean loss. Returns the trained
/// layer and the mean training loss of each epoch (measured on the fly).
fn fit(
    samples: &[Sample<'_>],
    classes: usize,
    dim: usize,
    config: &TrainConfig,
) -> Result<(Linear, Vec<f64>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut model = Linear::init(classes, dim, config.seed);
    let mut grad = Grad::zeros(&model);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut noisy = vec![0.0; dim];

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut shuffle_rng = substream(config.seed, Domain::Shuffle, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = substream(config.seed, Domain::Augment, epoch as u64);
        let mut epoch_loss = 0.0;

        for batch in order.chunks(config.batch_size) {
            grad.clear();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &samples[i];
                let x = if config.augment_noise_std > 0.0 {
                    for (n, &xi) in noisy.iter_mut().zip(s.x) {
                        let e: f64 = noise_rng.sample(StandardNormal);
                        *n = xi + config.augment_noise_std * e;
                    }
                    &noisy[..]
                } else {
                    s.x
                };
                batch_loss += accumulate(&model, x, s.label, s.target, config.lambda, &mut grad)
                    .map_err(|e| match e {
                        Error::Domain(message) => Error::Training {
                            epoch,
                            learning_rate: lr,
                            message,
                        },
                        other => other,
                    })?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    learning_rate: lr,
                    message: format!("batch loss became {batch_loss}"),
                });
            }
            epoch_loss += batch_loss;
            let step = lr / batch.len() as f64;
            model
                .weights
                .iter_mut()
                .zip(&grad.weights)
                .for_each(|(w, g)| *w -= step * g);
            model
                .biases
                .iter_mut()
                .zip(&grad.biases)
                .for_each(|(w, g)| *w -= step * g);
            model
                .temp_weights
                .iter_mut()
                .zip(&grad.temp_weights)
                .for_each(|(w, g)| *w -= step * g);
            model.temp_bias -= step * grad.temp_bias;
        }
        if !model.is_finite() {
            return Err(Error::Training {
                epoch,
                learning_rate: lr,
                message: "parameters became non-finite".into(),
            });
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok((model, history))
}

/// Identity classifier: logits `z = W x + b` plus a temperature head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelCheckpoint", into = "ModelCheckpoint")]
pub struct PitsModel {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `n_classes x dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub temp_weights: Vec<f64>,
    pub temp_bias: f64,
    pub loss_kind: LossKind,
    pub input: InputKind,
    /// Post-hoc temperature replacing the model's own at prediction time.
    pub global_temperature: Option<f64>,
    pub config: TrainConfig,
    pub loss_history: Vec<f64>,
}

/// On-disk layout of [`PitsModel`].
#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(rename = "w_T")]
    w_t: Vec<f64>,
    #[serde(rename = "b_T")]
    b_t: f64,
    loss_kind: LossKind,
    input: InputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    global_temperature: Option<f64>,
    seed: u64,
    config: TrainConfig,
    #[serde(default)]
    loss_history: Vec<f64>,
}

impl From<PitsModel> for ModelCheckpoint {
    fn from(m: PitsModel) -> Self {
        Self {
            k: m.n_classes,
            d: m.dim,
            w: m.weights
                .chunks(m.dim.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
            b: m.biases,
            w_t: m.temp_weights,
            b_t: m.temp_bias,
            loss_kind: m.loss_kind,
            input: m.input,
            global_temperature: m.global_temperature,
            seed: m.config.seed,
            config: m.config,
            loss_history: m.loss_history,
        }
    }
}

impl TryFrom<ModelCheckpoint> for PitsModel {
    type Error = String;

    fn try_from(c: ModelCheckpoint) -> std::result::Result<Self, String> {
        if c.w.len() != c.k
            || c.w.iter().any(|row| row.len() != c.d)
            || c.b.len() != c.k
            || c.w_t.len() != c.d
        {
            return Err(format!(
                "checkpoint shapes disagree with K = {} and d = {}",
                c.k, c.d
            ));
        }
        let mut config = c.config;
        config.seed = c.seed;
        Ok(Self {
            n_classes: c.k,
            dim: c.d,
            weights: c.w.into_iter().flatten().collect(),
            biases: c.b,
            temp_weights: c.w_t,
            temp_bias: c.b_t,
            loss_kind: c.loss_kind,
            input: c.input,
            global_temperature: c.global_temperature,
            config,
            loss_history: c.loss_history,
        })
    }
}

impl PitsModel {
    /// All-zero parameters.
    pub fn zeros(n_classes: usize, dim: usize, loss_kind: LossKind) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            biases: vec![0.0; n_classes],
            temp_weights: vec![0.0; dim],
            temp_bias: 0.0,
            loss_kind,
            input: InputKind::Foreground,
            global_temperature: None,
            config: TrainConfig {
                loss_kind,
                ..TrainConfig::default()
            },
            loss_history: Vec::new(),
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Domain(format!(
                "feature vector has length {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<LogitsOutput> {
        self.check_dim(x)?;
        let z: Vec<f64> = self
            .biases
            .iter()
            .zip(self.weights.chunks_exact(self.dim.max(1)))
            .map(|(b, row)| b + dot(row, x))
            .collect();
        let temperature = match self.loss_kind {
            LossKind::Ce => 1.0,
            LossKind::Pits => 1.0 + softplus(self.temp_bias + dot(&self.temp_weights, x)),
        };
        Ok(LogitsOutput::new(z, temperature))
    }

    /// Temperature applied to a forward output at prediction time.
    pub fn prediction_temperature(&self, out: &LogitsOutput) -> f64 {
        self.global_temperature.unwrap_or(out.temperature)
    }

    /// Calibrated class probabilities, read as the likelihood `p(x | k)`.
    pub fn predict_likelihood(&self, x: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(x)?;
        match self.global_temperature {
            Some(t) => tempered_softmax(&out.z, t),
            None => per_instance_softmax(&out),
        }
    }

    /// Likelihood for an observation, reading the model's input block.
    pub fn likelihood_for(&self, obs: &Observation) -> Result<(Vec<f64>, f64)> {
        let x = self.input.features(obs);
        let out = self.forward(&x)?;
        let t = self.prediction_temperature(&out);
        Ok((tempered_softmax(&out.z, t)?, t))
    }

    /// Mean training loss of the final epoch.
    pub fn final_train_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Train the identity classifier on the training split.
///
/// In PITS mode every sample is pulled towards its identity's target
/// temperature from `catalog`; in CE mode the temperature head is unused.
pub fn train(
    dataset: &Dataset,
    catalog: &IdentityCatalog,
    config: &TrainConfig,
) -> Result<PitsModel> {
    if catalog.n_identities() != dataset.n_identities {
        return Err(Error::Contract(format!(
            "catalog covers {} identities, dataset has {}",
            catalog.n_identities(),
            dataset.n_identities
        )));
    }
    let features: Vec<(Cow<'_, [f64]>, usize)> = dataset
        .train()
        .map(|o| (config.input.features(o), o.identity))
        .collect();
    let samples: Vec<Sample<'_>> = features
        .iter()
        .map(|(x, y)| Sample {
            x,
            label: *y,
            target: match config.loss_kind {
                LossKind::Ce => None,
                LossKind::Pits => Some(catalog.target_temperatures[*y]),
            },
        })
        .collect();
    let dim = config.input.dim(dataset.feature_dims);
    let (layer, loss_history) = fit(&samples, dataset.n_identities, dim, config)?;
    Ok(PitsModel {
        n_classes: layer.classes,
        dim,
        weights: layer.weights,
        biases: layer.biases,
        temp_weights: layer.temp_weights,
        temp_bias: layer.temp_bias,
        loss_kind: config.loss_kind,
        input: config.input,
        global_temperature: None,
        config: config.clone(),
        loss_history,
    })
}

/// Raw training on explicit samples, for tests and tools that do not go
/// through a [`Dataset`].
pub fn train_on(
    xs: &[Vec<f64>],
    labels: &[usize],
    targets: Option<&[f64]>,
    n_classes: usize,
    config: &TrainConfig,
) -> Result<PitsModel> {
    let dim = xs.first().map_or(0, Vec::len);
    if xs.len() != labels.len() || targets.is_some_and(|t| t.len() != xs.len()) {
        return Err(Error::Domain(
            "sample, label and target counts differ".into(),
        ));
    }
    if xs.iter().any(|x| x.len() != dim) || labels.iter().any(|&y| y >= n_classes) {
        return Err(Error::Domain(
            "inconsistent feature dims or labels out of range".into(),
        ));
    }
    let loss_kind = if targets.is_some() {
        LossKind::Pits
    } else {
        LossKind::Ce
    };
    let samples: Vec<Sample<'_>> = xs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (x, &label))| Sample {
            x,
            label,
            target: targets.map(|t| t[i]),
        })
        .collect();
    let (layer, loss_history) = fit(&samples, n_classes, dim, config)?;
    Ok(PitsModel {
        n_classes,
        dim,
        weights: layer.weights,
        biases: layer.biases,
        temp_weights: layer.temp_weights,
        temp_bias: layer.temp_bias,
        loss_kind,
        input: config.input,
        global_temperature: None,
        config: TrainConfig {
            loss_kind,
            ..config.clone()
        },
        loss_history,
    })
}

/// Classifier from background features to grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BackgroundCheckpoint", into = "BackgroundCheckpoint")]
pub struct BackgroundLocationModel {
    pub n_cells: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct BackgroundCheckpoint {
    #[serde(rename = "C")]
    c: usize,
    d: usize,
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    seed: u64,
    config: TrainConfig,
}

impl From<BackgroundLocationModel> for BackgroundCheckpoint {
    fn from(m: BackgroundLocationModel) -> Self {
        Self {
            c: m.n_cells,
            d: m.dim,
            w: m.weights
                .chunks(m.dim.max(1))
                .map(<[f64]>::to_vec)
                .collect(),
            b: m.biases,
            seed: m.config.seed,
            config: m.config,
        }
    }
}

impl TryFrom<BackgroundCheckpoint> for BackgroundLocationModel {
    type Error = String;

    fn try_from(c: BackgroundCheckpoint) -> std::result::Result<Self, String> {
        if c.w.len() != c.c || c.w.iter().any(|row| row.len() != c.d) || c.b.len() != c.c {
            return Err(format!(
                "checkpoint shapes disagree with C = {} and d = {}",
                c.c, c.d
            ));
        }
        let mut config = c.config;
        config.seed = c.seed;
        Ok(Self {
            n_cells: c.c,
            dim: c.d,
            weights: c.w.into_iter().flatten().collect(),
            biases: c.b,
            config,
        })
    }
}

impl BackgroundLocationModel {
    pub fn cell_scores(&self, x_bg: &[f64]) -> Result<Vec<f64>> {
        if x_bg.len() != self.dim {
            return Err(Error::Domain(format!(
                "background vector has length {}, model expects {}",
                x_bg.len(),
                self.dim
            )));
        }
        Ok(self
            .biases
            .iter()
            .zip(self.weights.chunks_exact(self.dim.max(1)))
            .map(|(b, row)| b + dot(row, x_bg))
            .collect())
    }

    pub fn predict_cell(&self, x_bg: &[f64]) -> Result<usize> {
        Ok(argmax(&self.cell_scores(x_bg)?))
    }

    /// Center of the most likely cell.
    pub fn predict_location(&self, x_bg: &[f64], grid: &GridSpec) -> Result<Location> {
        if grid.n_cells() != self.n_cells {
            return Err(Error::Contract(format!(
                "model predicts {} cells, grid has {}",
                self.n_cells,
                grid.n_cells()
            )));
        }
        Ok(grid.center_of(self.predict_cell(x_bg)?))
    }
}

/// CE-train a cell classifier from background features on the training split.
/// `config.loss_kind` and `config.input` are ignored.
pub fn train_background_model(
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<BackgroundLocationModel> {
    let grid = &dataset.grid;
    let labelled: Vec<(&[f64], usize)> = dataset
        .train()
        .map(|o| Ok((o.bg_features.as_slice(), grid.cell_of(&o.location)?)))
        .collect::<Result<_>>()?;
    let samples: Vec<Sample<'_>> = labelled
        .iter()
        .map(|&(x, label)| Sample {
            x,
            label,
            target: None,
        })
        .collect();
    let (layer, _) = fit(&samples, grid.n_cells(), dataset.feature_dims.1, config)?;
    Ok(BackgroundLocationModel {
        n_cells: layer.classes,
        dim: layer.dim,
        weights: layer.weights,
        biases: layer.biases,
        config: TrainConfig {
            loss_kind: LossKind::Ce,
            input: InputKind::Background,
            ..config.clone()
        },
    })
}
