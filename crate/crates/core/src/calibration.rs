//! Softmax variants, the per-instance temperature scaling (PITS) loss and
//! its gradient, post-hoc global temperature fitting, and expected
//! calibration error.
//!
//! PITS lets the model emit a temperature `T_i >= 1` next to its logits and
//! trains both with
//!
//! ```text
//! loss_i = -ln softmax(z_i / T_i)[y_i] + lambda * (T_i - target(y_i))^2
//! ```
//!
//! where `target(k) = 1 - ln(N_k / N_max)` is high for rare identities.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default weight of the temperature regularizer.
pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_ECE_BINS: usize = 15;

/// Search interval for [`fit_global_temperature`], in temperature units.
pub const GLOBAL_TEMPERATURE_BOUNDS: (f64, f64) = (0.05, 50.0);
const LN_T_TOLERANCE: f64 = 1e-4;

/// Raw classifier output for one sample: logits and the per-instance temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsOutput {
    pub z: Vec<f64>,
    pub temperature: f64,
}

impl LogitsOutput {
    pub fn new(z: Vec<f64>, temperature: f64) -> Self {
        Self { z, temperature }
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_logits(z: &[f64], temperature: f64) -> Result<()> {
    if z.is_empty() {
        return Err(Error::Domain("empty logit vector".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {bad}")));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Domain(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

/// `softmax(z / T)`, max-shifted so large logits cannot overflow.
pub fn tempered_softmax(z: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_logits(z, temperature)?;
    Ok(softmax_unchecked(z, temperature))
}

fn softmax_unchecked(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `-ln softmax(z / T)[label]` via log-sum-exp.
fn nll_unchecked(z: &[f64], temperature: f64, label: usize) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = z
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    lse - (z[label] - max) / temperature
}

fn check_label(label: usize, k: usize) -> Result<()> {
    if label >= k {
        return Err(Error::Domain(format!("label {label} outside [0, {k})")));
    }
    Ok(())
}

fn check_unit_temperature(out: &LogitsOutput) -> Result<()> {
    if out.temperature < 1.0 {
        return Err(Error::Contract(format!(
            "per-instance temperature must be >= 1, got {}",
            out.temperature
        )));
    }
    Ok(())
}

/// Softmax at the sample's own temperature, which must be at least 1.
pub fn per_instance_softmax(out: &LogitsOutput) -> Result<Vec<f64>> {
    check_unit_temperature(out)?;
    tempered_softmax(&out.z, out.temperature)
}

/// Standard cross-entropy `-ln softmax(z)[label]`.
pub fn cross_entropy(z: &[f64], label: usize) -> Result<f64> {
    check_logits(z, 1.0)?;
    check_label(label, z.len())?;
    Ok(nll_unchecked(z, 1.0, label))
}

/// Per-sample PITS loss. The batch loss is the sum of these.
pub fn pits_loss(out: &LogitsOutput, label: usize, target_temp: f64, lambda: f64) -> Result<f64> {
    check_pits_inputs(out, label, target_temp, lambda)?;
    let gap = out.temperature - target_temp;
    Ok(nll_unchecked(&out.z, out.temperature, label) + lambda * gap * gap)
}

fn check_pits_inputs(
    out: &LogitsOutput,
    label: usize,
    target_temp: f64,
    lambda: f64,
) -> Result<()> {
    check_logits(&out.z, out.temperature)?;
    check_unit_temperature(out)?;
    check_label(label, out.z.len())?;
    if !(target_temp.is_finite() && target_temp >= 1.0) {
        return Err(Error::Domain(format!(
            "target temperature must be >= 1, got {target_temp}"
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
    }
    Ok(())
}

/// Gradient of [`pits_loss`] with respect to the logits and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PitsGradient {
    pub d_logits: Vec<f64>,
    pub d_temperature: f64,
}

/// Analytic gradient of [`pits_loss`].
///
/// With `p = softmax(z / T)`:
///
/// ```text
/// d/dz_j = (p_j - [j = y]) / T
/// d/dT   = (z_y - z.p) / T^2 + 2 lambda (T - target)
/// ```
pub fn pits_loss_grad(
    out: &LogitsOutput,
    label: usize,
    target_temp: f64,
    lambda: f64,
) -> Result<PitsGradient> {
    check_pits_inputs(out, label, target_temp, lambda)?;
    let t = out.temperature;
    let p = softmax_unchecked(&out.z, t);
    let z_y = out.z[label];
    let mut d_logits: Vec<f64> = p.iter().map(|&pj| pj / t).collect();
    d_logits[label] -= 1.0 / t;
    // sum_j p_j (z_y - z_j) equals z_y - z.p but avoids cancellation on large logits
    let spread: f64 = p.iter().zip(&out.z).map(|(&pj, &zj)| pj * (z_y - zj)).sum();
    Ok(PitsGradient {
        d_logits,
        d_temperature: spread / (t * t) + 2.0 * lambda * (t - target_temp),
    })
}

/// Summed PITS loss over a batch with per-sample temperature targets.
pub fn pits_batch_loss(
    outputs: &[LogitsOutput],
    labels: &[usize],
    targets: &[f64],
    lambda: f64,
) -> Result<f64> {
    if outputs.len() != labels.len() || outputs.len() != targets.len() {
        return Err(Error::Domain("batch length mismatch".into()));
    }
    outputs
        .iter()
        .zip(labels)
        .zip(targets)
        .map(|((out, &y), &tt)| pits_loss(out, y, tt, lambda))
        .sum()
}

/// Summed cross-entropy over a batch.
pub fn ce_batch_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Domain("batch length mismatch".into()));
    }
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| cross_entropy(z, y))
        .sum()
}

/// Result of a post-hoc global temperature fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// Mean validation NLL at the fitted temperature.
    pub mean_nll: f64,
    /// The objective did not depend on the temperature (all logits tied).
    pub flat_objective: bool,
}

fn mean_nll(logits: &[Vec<f64>], labels: &[usize], temperature: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| nll_unchecked(z, temperature, y))
        .sum();
    total / logits.len() as f64
}

/// Fit one temperature to held-out logits by minimizing mean NLL.
///
/// Golden-section search over `ln T` in `[ln 0.05, ln 50]`; the NLL is
/// convex in `1/T`, hence unimodal in `ln T`.
pub fn fit_global_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<TemperatureFit> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Domain(format!(
            "need matching non-empty logits and labels, got {} and {}",
            logits.len(),
            labels.len()
        )));
    }
    for (z, &y) in logits.iter().zip(labels) {
        check_logits(z, 1.0)?;
        check_label(y, z.len())?;
    }
    let flat = logits.iter().all(|z| z.iter().all(|&v| v == z[0]));
    if flat {
        warn!("global temperature objective is flat (all logits tied); returning T = 1");
        return Ok(TemperatureFit {
            temperature: 1.0,
            mean_nll: mean_nll(logits, labels, 1.0),
            flat_objective: true,
        });
    }

    let f = |u: f64| mean_nll(logits, labels, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (
        GLOBAL_TEMPERATURE_BOUNDS.0.ln(),
        GLOBAL_TEMPERATURE_BOUNDS.1.ln(),
    );
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > LN_T_TOLERANCE {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    let u = 0.5 * (lo + hi);
    Ok(TemperatureFit {
        temperature: u.exp(),
        mean_nll: f(u),
        flat_objective: false,
    })
}

/// Reliability-diagram bins and the resulting top-label ECE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub bin_confidences: Vec<f64>,
    pub bin_accuracies: Vec<f64>,
    pub bin_counts: Vec<usize>,
}

/// Top-label ECE over `n_bins` equal-width bins on `(0, 1]`.
pub fn expected_calibration_error(
    probs: &[Vec<f64>],
    labels: &[usize],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if probs.len() != labels.len() {
        return Err(Error::Domain("probs and labels differ in length".into()));
    }
    let mut confidences = Vec::with_capacity(probs.len());
    let mut correct = Vec::with_capacity(probs.len());
    for (row, &y) in probs.iter().zip(labels) {
        let sum: f64 = row.iter().sum();
        if row.is_empty()
            || (sum - 1.0).abs() > 1e-6
            || row.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::Domain(format!(
                "probability row is not normalized (sum {sum})"
            )));
        }
        let pred = argmax(row);
        confidences.push(row[pred]);
        correct.push(pred == y);
    }
    ece_from_confidences(&confidences, &correct, n_bins)
}

/// ECE from top-label confidences and correctness flags.
pub fn ece_from_confidences(
    confidences: &[f64],
    correct: &[bool],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if n_bins == 0 {
        return Err(Error::Domain("ECE needs at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Domain(
            "confidences and correctness differ in length".into(),
        ));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut counts = vec![0usize; n_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
        }
        // bin b covers (b/n, (b+1)/n]
        let bin = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        conf_sum[bin] += c;
        hits[bin] += usize::from(ok);
        counts[bin] += 1;
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    let mut bin_confidences = vec![0.0; n_bins];
    let mut bin_accuracies = vec![0.0; n_bins];
    for b in 0..n_bins {
        if counts[b] == 0 {
            continue;
        }
        let m = counts[b] as f64;
        bin_confidences[b] = conf_sum[b] / m;
        bin_accuracies[b] = hits[b] as f64 / m;
        ece += (m / n) * (bin_accuracies[b] - bin_confidences[b]).abs();
    }
    Ok(CalibrationReport {
        ece,
        bin_confidences,
        bin_accuracies,
        bin_counts: counts,
    })
}
