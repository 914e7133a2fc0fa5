//! Identity priors from where and when an observation was made.
//!
//! * Home location: `p(k) ∝ exp(-alpha * |H_k - l|)` with `H_k` the modal
//!   training cell of identity `k`.
//! * Migrating location: same form around the last known location `L_k`,
//!   which moves to `l` whenever `k` is the predicted identity.
//! * Time decay: `p(k) ∝ exp(-beta * |tau_k - t|)` with `tau_k` the time `k`
//!   was last (predicted to be) seen.
//!
//! Distances are measured in grid cells and time gaps in units of
//! `time_unit_days`, so `alpha` and `beta` do not depend on the grid scale.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::BackgroundLocationModel;
use crate::data::{GridSpec, IdentityCatalog, Location, Observation};
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 2.5;
pub const DEFAULT_BETA: f64 = 3.0;
pub const DEFAULT_TIME_UNIT_DAYS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    HomeLocation,
    MigratingLocation,
    TimeDecay,
}

impl PriorKind {
    pub fn uses_location(&self) -> bool {
        matches!(self, PriorKind::HomeLocation | PriorKind::MigratingLocation)
    }

    fn short(&self) -> &'static str {
        match self {
            PriorKind::Uniform => "Uniform",
            PriorKind::HomeLocation => "HL",
            PriorKind::MigratingLocation => "ML",
            PriorKind::TimeDecay => "TD",
        }
    }
}

/// Where the observation location `l_i` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationSource {
    /// Camera coordinates from image metadata (the θ variants).
    Metadata,
    /// Cell predicted from background features (the BG variants).
    BackgroundModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceUnit {
    Cells,
    Kilometers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub location_source: LocationSource,
    pub alpha: f64,
    pub beta: f64,
    pub time_unit_days: f64,
    pub distance_unit: DistanceUnit,
    /// Experimental: extra prior kinds multiplied into `kind` and renormalized.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub compose: Vec<PriorKind>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Uniform,
            location_source: LocationSource::Metadata,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            time_unit_days: DEFAULT_TIME_UNIT_DAYS,
            distance_unit: DistanceUnit::Cells,
            compose: Vec::new(),
        }
    }
}

impl PriorConfig {
    pub fn new(kind: PriorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_source(mut self, source: LocationSource) -> Self {
        self.location_source = source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        if !(self.time_unit_days.is_finite() && self.time_unit_days > 0.0) {
            return Err(Error::Config(format!(
                "time_unit_days must be > 0, got {}",
                self.time_unit_days
            )));
        }
        Ok(())
    }

    /// The primary kind followed by any composed kinds.
    pub fn kinds(&self) -> impl Iterator<Item = PriorKind> + '_ {
        std::iter::once(self.kind).chain(self.compose.iter().copied())
    }

    pub fn uses_location(&self) -> bool {
        self.kinds().any(|k| k.uses_location())
    }

    /// Short table label such as `ML_θ`, `HL_BG` or `TD`.
    pub fn label(&self) -> String {
        let suffix = match self.location_source {
            LocationSource::Metadata => "θ",
            LocationSource::BackgroundModel => "BG",
        };
        self.kinds()
            .map(|k| {
                if k.uses_location() {
                    format!("{}_{}", k.short(), suffix)
                } else {
                    k.short().to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("×")
    }
}

impl fmt::Display for PriorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Mutable inference-time prior state, one entry per identity.
/// Serializes to a JSON snapshot for resumable inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorState {
    pub home: Vec<Location>,
    pub last_loc: Vec<Location>,
    /// Days.
    pub last_seen: Vec<f64>,
    pub config: PriorConfig,
    /// Kilometres per distance unit.
    pub distance_scale_km: f64,
}

/// `L_k <- H_k` and `tau_k <-` the last training sighting of `k`.
pub fn init_state(
    catalog: &IdentityCatalog,
    config: &PriorConfig,
    grid: &GridSpec,
) -> Result<PriorState> {
    config.validate()?;
    grid.validate()?;
    Ok(PriorState {
        home: catalog.home_locations.clone(),
        last_loc: catalog.home_locations.clone(),
        last_seen: catalog.last_train_time.clone(),
        config: config.clone(),
        distance_scale_km: match config.distance_unit {
            DistanceUnit::Cells => grid.cell_size_km,
            DistanceUnit::Kilometers => 1.0,
        },
    })
}

/// Normalize `exp(exponents)` by explicit summation, shifted by the max exponent.
fn normalized_exp(exponents: impl Iterator<Item = f64>) -> Vec<f64> {
    let exps: Vec<f64> = exponents.collect();
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = exps.iter().map(|e| (e - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    w
}

fn distance_prior(anchors: &[Location], l: &Location, alpha: f64, scale_km: f64) -> Vec<f64> {
    normalized_exp(anchors.iter().map(|a| -alpha * a.distance_km(l) / scale_km))
}

impl PriorState {
    pub fn n_identities(&self) -> usize {
        self.home.len()
    }

    fn check_identity(&self, k: usize) -> Result<()> {
        if k >= self.n_identities() {
            return Err(Error::Contract(format!(
                "identity {k} outside [0, {})",
                self.n_identities()
            )));
        }
        Ok(())
    }

    pub fn uniform_prior(&self) -> Vec<f64> {
        let k = self.n_identities();
        vec![1.0 / k as f64; k]
    }

    pub fn home_location_prior(&self, l: &Location) -> Vec<f64> {
        distance_prior(&self.home, l, self.config.alpha, self.distance_scale_km)
    }

    pub fn migrating_location_prior(&self, l: &Location) -> Vec<f64> {
        distance_prior(&self.last_loc, l, self.config.alpha, self.distance_scale_km)
    }

    pub fn time_decay_prior(&self, t: f64) -> Vec<f64> {
        let rate = self.config.beta / self.config.time_unit_days;
        normalized_exp(self.last_seen.iter().map(|tau| -rate * (tau - t).abs()))
    }

    fn single(&self, kind: PriorKind, l: Option<&Location>, t: f64) -> Result<Vec<f64>> {
        let need_loc = || {
            l.ok_or_else(|| {
                Error::Contract(format!("{kind:?} prior needs an observation location"))
            })
        };
        Ok(match kind {
            PriorKind::Uniform => self.uniform_prior(),
            PriorKind::HomeLocation => self.home_location_prior(need_loc()?),
            PriorKind::MigratingLocation => self.migrating_location_prior(need_loc()?),
            PriorKind::TimeDecay => self.time_decay_prior(t),
        })
    }

    /// Prior for an observation at `l` (when needed) and time `t`, combining
    /// composed kinds by renormalized product.
    pub fn evaluate(&self, l: Option<&Location>, t: f64) -> Result<Vec<f64>> {
        if let Some(l) = l {
            if !l.is_finite() {
                return Err(Error::Domain("observation location is not finite".into()));
            }
        }
        let mut prior = self.single(self.config.kind, l, t)?;
        if self.config.compose.is_empty() {
            return Ok(prior);
        }
        // experimental product; work in logs so tiny factors cannot underflow
        let mut logp: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
        for kind in &self.config.compose {
            let factor = self.single(*kind, l, t)?;
            logp.iter_mut().zip(&factor).for_each(|(a, b)| *a += b.ln());
        }
        prior = normalized_exp(logp.into_iter());
        Ok(prior)
    }

    pub fn update_location(&mut self, k: usize, l: Location) -> Result<()> {
        self.check_identity(k)?;
        self.last_loc[k] = l;
        Ok(())
    }

    /// Stores `t` as given; out-of-order clocks are not rejected.
    pub fn update_last_seen(&mut self, k: usize, t: f64) -> Result<()> {
        self.check_identity(k)?;
        self.last_seen[k] = t;
        Ok(())
    }

    /// State updates implied by the configured kinds after predicting `k`.
    pub fn observe(&mut self, k: usize, l: Option<Location>, t: f64) -> Result<()> {
        let kinds: Vec<PriorKind> = self.config.kinds().collect();
        for kind in kinds {
            match kind {
                PriorKind::MigratingLocation => {
                    let l = l.ok_or_else(|| {
                        Error::Contract("migrating update needs a location".into())
                    })?;
                    self.update_location(k, l)?;
                }
                PriorKind::TimeDecay => self.update_last_seen(k, t)?,
                PriorKind::Uniform | PriorKind::HomeLocation => {}
            }
        }
        Ok(())
    }
}

/// The location `l_i` a prior sees for an observation.
pub fn resolve_location(
    obs: &Observation,
    config: &PriorConfig,
    bg_model: Option<&BackgroundLocationModel>,
    grid: &GridSpec,
) -> Result<Location> {
    match config.location_source {
        LocationSource::Metadata => Ok(obs.location),
        LocationSource::BackgroundModel => {
            let model = bg_model.ok_or_else(|| {
                Error::Config("background location source requires a background model".into())
            })?;
            model.predict_location(&obs.bg_features, grid)
        }
    }
}
