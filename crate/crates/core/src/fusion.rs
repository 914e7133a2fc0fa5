//! Posterior fusion and the timestamp-ordered inference loop.
//!
//! The posterior is the likelihood from the foreground classifier times the
//! identity prior, renormalized. Stateful priors are updated after every
//! observation with the identity that won the fused posterior.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::calibration::argmax;
use crate::classifier::{BackgroundLocationModel, PitsModel};
use crate::data::{GridSpec, Location, Observation};
use crate::error::{Error, Result};
use crate::priors::{resolve_location, PriorState};

/// Above this many identities the product is accumulated in log space.
pub const LOG_SPACE_THRESHOLD: usize = 64;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Domain(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    Ok(())
}

/// Elementwise `likelihood * prior`, renormalized.
///
/// If the product underflows to all zeros the likelihood is returned
/// unchanged and a warning is logged.
pub fn fuse(likelihood: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    if likelihood.len() != prior.len() {
        return Err(Error::Domain(format!(
            "likelihood has {} entries, prior has {}",
            likelihood.len(),
            prior.len()
        )));
    }
    if likelihood.is_empty() {
        return Err(Error::Domain("cannot fuse empty distributions".into()));
    }
    check_distribution(likelihood, "likelihood")?;
    check_distribution(prior, "prior")?;

    let fused = if likelihood.len() > LOG_SPACE_THRESHOLD {
        let logs: Vec<f64> = likelihood
            .iter()
            .zip(prior)
            .map(|(l, p)| l.ln() + p.ln())
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            None
        } else {
            let mut w: Vec<f64> = logs.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= z);
            Some(w)
        }
    } else {
        let mut w: Vec<f64> = likelihood.iter().zip(prior).map(|(l, p)| l * p).collect();
        let z: f64 = w.iter().sum();
        if z > 0.0 {
            w.iter_mut().for_each(|v| *v /= z);
            Some(w)
        } else {
            None
        }
    };
    Ok(fused.unwrap_or_else(|| {
        warn!("likelihood x prior underflowed to zero; falling back to the likelihood");
        likelihood.to_vec()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub obs_id: String,
    pub posterior: Vec<f64>,
    /// Argmax of the posterior, ties to the lowest identity.
    pub predicted: usize,
    pub likelihood: Vec<f64>,
    pub prior: Vec<f64>,
    pub resolved_location: Option<Location>,
    pub temperature_used: f64,
    /// Ground-truth label carried over from the observation.
    pub true_identity: Option<usize>,
}

/// Indices of `obs` in processing order: timestamp, then `obs_id`, then input order.
pub fn processing_order(obs: &[&Observation]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| {
        obs[a]
            .timestamp
            .total_cmp(&obs[b].timestamp)
            .then_with(|| obs[a].obs_id.cmp(&obs[b].obs_id))
    });
    order
}

/// Run fused inference over `observations` in timestamp order, updating
/// `state` after each step with the predicted (never the true) identity.
pub fn sequential_infer(
    model: &PitsModel,
    bg_model: Option<&BackgroundLocationModel>,
    state: &mut PriorState,
    observations: &[&Observation],
    grid: &GridSpec,
) -> Result<Vec<Prediction>> {
    if state.n_identities() != model.n_classes || state.n_identities() == 0 {
        return Err(Error::Contract(format!(
            "prior state covers {} identities, model predicts {}",
            state.n_identities(),
            model.n_classes
        )));
    }
    if observations.is_empty() {
        return Err(Error::Contract("no observations to infer".into()));
    }
    let needs_location = state.config.uses_location();
    let mut out = Vec::with_capacity(observations.len());
    for i in processing_order(observations) {
        let obs = observations[i];
        let location = if needs_location {
            Some(resolve_location(obs, &state.config, bg_model, grid)?)
        } else {
            None
        };
        let prior = state.evaluate(location.as_ref(), obs.timestamp)?;
        let (likelihood, temperature_used) = model.likelihood_for(obs)?;
        let posterior = fuse(&likelihood, &prior)?;
        let predicted = argmax(&posterior);
        state.observe(predicted, location, obs.timestamp)?;
        out.push(Prediction {
            obs_id: obs.obs_id.clone(),
            posterior,
            predicted,
            likelihood,
            prior,
            resolved_location: location,
            temperature_used,
            true_identity: Some(obs.identity),
        });
    }
    Ok(out)
}

/// `(identity, probability)` pairs of the `n` largest entries, ties to the lower identity.
pub fn top_n(p: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|k| (k, p[k])).collect()
}

/// One line of the predictions JSONL stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub obs_id: String,
    pub predicted: usize,
    #[serde(rename = "true", default, skip_serializing_if = "Option::is_none")]
    pub true_identity: Option<usize>,
    pub posterior_top5: Vec<(usize, f64)>,
    pub likelihood_top5: Vec<(usize, f64)>,
    pub prior_kind: String,
    pub resolved_loc: Option<Location>,
    #[serde(rename = "T_i")]
    pub temperature: f64,
    pub seed: u64,
}

impl PredictionRecord {
    pub fn from_prediction(p: &Prediction, prior_kind: &str, seed: u64) -> Self {
        Self {
            obs_id: p.obs_id.clone(),
            predicted: p.predicted,
            true_identity: p.true_identity,
            posterior_top5: top_n(&p.posterior, 5),
            likelihood_top5: top_n(&p.likelihood, 5),
            prior_kind: prior_kind.to_string(),
            resolved_loc: p.resolved_location,
            temperature: p.temperature_used,
            seed,
        }
    }

    /// Top-1 posterior probability.
    pub fn confidence(&self) -> f64 {
        self.posterior_top5.first().map_or(0.0, |&(_, p)| p)
    }

    pub fn likelihood_confidence(&self) -> (usize, f64) {
        self.likelihood_top5.first().copied().unwrap_or((0, 0.0))
    }
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[Prediction],
    prior_kind: &str,
    seed: u64,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in predictions {
        serde_json::to_writer(
            &mut w,
            &PredictionRecord::from_prediction(p, prior_kind, seed),
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
