//! Seeded synthetic wildlife-monitoring datasets.
//!
//! Each identity has an appearance prototype, a home cell that may drift one
//! cell at a time, and a long-tailed number of sightings spread over the
//! monitoring period (uniformly, or in seasonal bursts). Foreground features
//! are the prototype plus Gaussian noise; background features encode the cell
//! of the sighting with strength `bg_cell_signal` on top of Gaussian noise.
//!
//! All draws for identity `k` come from its own random stream, so the
//! appearance, home and movement of `k` do not depend on how many other
//! identities are simulated.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    quantile_cutoff, temporal_split, Dataset, DatasetMeta, GridSpec, Location, Observation,
};
use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

const MAX_TIME_RETRIES: usize = 50;

/// Seasonal activity: each identity is active in a random subset of
/// yearly windows and is only sighted inside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seasonality {
    pub period_days: f64,
    pub season_length_days: f64,
    /// Probability that an identity is active in a given season.
    pub active_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_identities: usize,
    pub feature_dim: usize,
    pub bg_feature_dim: usize,
    pub grid: GridSpec,
    /// Zipf exponent of the expected sighting counts; 0 gives uniform counts.
    pub longtail_exponent: f64,
    /// Std of a sighting around the current home cell center, in cells.
    pub home_range_cells: f64,
    /// Per-sighting probability that the home cell moves to a neighbour.
    pub migration_prob: f64,
    /// Per-dimension foreground noise std; prototypes are one unit apart on average.
    pub fg_noise: f64,
    pub bg_cell_signal: f64,
    /// Mean sightings per identity.
    pub obs_rate: f64,
    pub duration_days: f64,
    pub cutoff_quantile: f64,
    /// Length of each identity's residence in the study area. `None` keeps
    /// every identity present for the whole period. With seasons, an identity
    /// is only active in seasons overlapping its residence.
    pub residence_days: Option<f64>,
    pub seasonality: Option<Seasonality>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::lynx_like()
    }
}

impl SimConfig {
    /// Strong location structure with slow home-range drift: the location
    /// priors should help most here.
    pub fn lynx_like() -> Self {
        Self {
            n_identities: 60,
            feature_dim: 128,
            bg_feature_dim: 100,
            grid: GridSpec::new(Location::new(0.0, 0.0), 5.0, 10, 10).expect("valid grid"),
            longtail_exponent: 1.2,
            home_range_cells: 0.5,
            migration_prob: 0.05,
            fg_noise: 0.3,
            bg_cell_signal: 0.75,
            obs_rate: 40.0,
            duration_days: 15.0 * 365.0,
            cutoff_quantile: 0.7,
            residence_days: None,
            seasonality: None,
            seed: 7,
        }
    }

    /// No usable location signal, identities recur within seasons: only the
    /// time-decay prior should help.
    pub fn turtle_like() -> Self {
        Self {
            n_identities: 80,
            feature_dim: 128,
            bg_feature_dim: 16,
            grid: GridSpec::new(Location::new(0.0, 0.0), 5.0, 10, 10).expect("valid grid"),
            longtail_exponent: 1.0,
            home_range_cells: 100.0,
            migration_prob: 0.0,
            fg_noise: 0.3,
            bg_cell_signal: 0.0,
            obs_rate: 30.0,
            duration_days: 6.0 * 365.0,
            cutoff_quantile: 0.8,
            residence_days: Some(730.0),
            seasonality: Some(Seasonality {
                period_days: 365.0,
                season_length_days: 120.0,
                active_prob: 0.8,
            }),
            seed: 11,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "lynx-like" => Some(Self::lynx_like()),
            "turtle-like" => Some(Self::turtle_like()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 2] = ["lynx-like", "turtle-like"];

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.grid.validate()?;
        if self.n_identities < 2 {
            return bad("n_identities must be >= 2".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1".into());
        }
        if self.bg_cell_signal > 0.0 && self.bg_feature_dim < self.grid.n_cells() {
            return bad(format!(
                "bg_feature_dim {} cannot embed {} cells one-hot",
                self.bg_feature_dim,
                self.grid.n_cells()
            ));
        }
        let non_negative = [
            ("longtail_exponent", self.longtail_exponent),
            ("home_range_cells", self.home_range_cells),
            ("fg_noise", self.fg_noise),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.migration_prob) {
            return bad(format!(
                "migration_prob must lie in [0, 1], got {}",
                self.migration_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.bg_cell_signal) {
            return bad(format!(
                "bg_cell_signal must lie in [0, 1], got {}",
                self.bg_cell_signal
            ));
        }
        if !(self.obs_rate.is_finite() && self.obs_rate > 0.0) {
            return bad("obs_rate must be > 0".into());
        }
        if !(self.duration_days.is_finite() && self.duration_days > 0.0) {
            return bad("duration_days must be > 0".into());
        }
        if !(self.cutoff_quantile > 0.0 && self.cutoff_quantile < 1.0) {
            return bad(format!(
                "cutoff_quantile must lie in (0, 1), got {}",
                self.cutoff_quantile
            ));
        }
        if let Some(r) = self.residence_days {
            if !(r.is_finite() && r > 0.0) {
                return bad(format!("residence_days must be > 0, got {r}"));
            }
        }
        if let Some(s) = &self.seasonality {
            if !(s.period_days > 0.0
                && s.season_length_days > 0.0
                && s.season_length_days <= s.period_days)
            {
                return bad("seasons need 0 < season_length_days <= period_days".into());
            }
            if s.period_days > self.duration_days {
                return bad("duration must cover at least one seasonal period".into());
            }
            if !(s.active_prob > 0.0 && s.active_prob <= 1.0) {
                return bad("active_prob must lie in (0, 1]".into());
            }
        }
        Ok(())
    }

    /// Expected sighting count per identity; identity 0 is the most frequent.
    pub fn expected_counts(&self) -> Vec<f64> {
        let weights: Vec<f64> = (0..self.n_identities)
            .map(|k| ((k + 1) as f64).powf(-self.longtail_exponent))
            .collect();
        let total: f64 = weights.iter().sum();
        let budget = self.obs_rate * self.n_identities as f64;
        weights.iter().map(|w| budget * w / total).collect()
    }

    /// Sidecar metadata with this configuration echoed for provenance.
    pub fn meta_for(&self, dataset: &Dataset) -> Result<DatasetMeta> {
        let mut meta = DatasetMeta::for_dataset(dataset);
        meta.seed = Some(self.seed);
        meta.sim_config = Some(serde_json::to_value(self)?);
        Ok(meta)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fold `v` back into `[lo, hi]` by mirroring at the edges.
fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let m = (v - lo).rem_euclid(2.0 * w);
    lo + if m > w { 2.0 * w - m } else { m }
}

struct IdentityDraw {
    prototype: Vec<f64>,
    home_cell: usize,
    count: usize,
}

fn draw_identity(config: &SimConfig, rng: &mut ChaCha8Rng, expected_count: f64) -> IdentityDraw {
    let proto_std = 1.0 / (2.0 * config.feature_dim as f64).sqrt();
    let prototype = (0..config.feature_dim)
        .map(|_| proto_std * gaussian(rng))
        .collect();
    let home_cell = rng.random_range(0..config.grid.n_cells());
    let count = Poisson::new(expected_count)
        .map(|p| p.sample(rng) as usize)
        .unwrap_or(0)
        .max(2);
    IdentityDraw {
        prototype,
        home_cell,
        count,
    }
}

fn draw_times(config: &SimConfig, rng: &mut ChaCha8Rng, count: usize) -> Vec<f64> {
    let mut times: Vec<f64> = match &config.seasonality {
        None => {
            let (lo, hi) = match config.residence_days {
                None => (0.0, config.duration_days),
                Some(r) => {
                    let start = -r + (config.duration_days + r) * rng.random::<f64>();
                    (start.max(0.0), (start + r).min(config.duration_days))
                }
            };
            (0..count)
                .map(|_| hi - (hi - lo) * rng.random::<f64>())
                .collect()
        }
        Some(s) => {
            let n_seasons = ((config.duration_days / s.period_days).floor() as usize).max(1);
            // seasons the identity could be present in: all of them, or those
            // overlapping its residence window
            let present: Vec<usize> = match config.residence_days {
                None => (0..n_seasons).collect(),
                Some(r) => {
                    let span = n_seasons as f64 * s.period_days;
                    let start = -r + (span + r) * rng.random::<f64>();
                    let overlapping: Vec<usize> = (0..n_seasons)
                        .filter(|&i| {
                            let open = i as f64 * s.period_days;
                            open < start + r && start < open + s.season_length_days
                        })
                        .collect();
                    if overlapping.is_empty() {
                        // residence fell between two seasons; keep the next one
                        let next = (start.max(0.0) / s.period_days).ceil() as usize;
                        vec![next.min(n_seasons - 1)]
                    } else {
                        overlapping
                    }
                }
            };
            let mut active: Vec<usize> = present
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < s.active_prob)
                .collect();
            if active.is_empty() {
                active.push(present[rng.random_range(0..present.len())]);
            }
            (0..count)
                .map(|_| {
                    let season = active[rng.random_range(0..active.len())];
                    season as f64 * s.period_days
                        + s.season_length_days * (1.0 - rng.random::<f64>())
                })
                .collect()
        }
    };
    times.sort_by(f64::total_cmp);
    times
}

fn neighbour(grid: &GridSpec, cell: usize, rng: &mut ChaCha8Rng) -> usize {
    let (ix, iy) = grid.cell_coords(cell);
    let (dx, dy) = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)][rng.random_range(0..4)];
    let nx = (ix as i64 + dx).clamp(0, grid.n_cells_x as i64 - 1) as usize;
    let ny = (iy as i64 + dy).clamp(0, grid.n_cells_y as i64 - 1) as usize;
    ny * grid.n_cells_x + nx
}

/// Generate a split dataset. Identical configurations give identical datasets.
pub fn generate(config: &SimConfig) -> Result<Dataset> {
    config.validate()?;
    let grid = config.grid;
    let expected = config.expected_counts();
    let mut rngs: Vec<ChaCha8Rng> = (0..config.n_identities)
        .map(|k| substream(config.seed, Domain::SimIdentity, k as u64))
        .collect();
    let draws: Vec<IdentityDraw> = rngs
        .iter_mut()
        .zip(&expected)
        .map(|(rng, &lambda)| draw_identity(config, rng, lambda))
        .collect();
    let mut times: Vec<Vec<f64>> = rngs
        .iter_mut()
        .zip(&draws)
        .map(|(rng, d)| draw_times(config, rng, d.count))
        .collect();

    // every identity needs a sighting before the cutoff; redraw the times of
    // those that have none and re-place the cutoff until it settles
    let mut cutoff = cutoff_of(&times, config.cutoff_quantile)?;
    let mut retries = 0;
    loop {
        let late: Vec<usize> = (0..times.len())
            .filter(|&k| times[k][0] >= cutoff)
            .collect();
        if late.is_empty() {
            break;
        }
        retries += 1;
        if retries > MAX_TIME_RETRIES {
            return Err(Error::Config(format!(
                "identities {late:?} have no sightings before the cutoff after {MAX_TIME_RETRIES} redraws"
            )));
        }
        for k in late {
            times[k] = draw_times(config, &mut rngs[k], draws[k].count);
        }
        cutoff = cutoff_of(&times, config.cutoff_quantile)?;
    }

    let mut observations = Vec::with_capacity(times.iter().map(Vec::len).sum());
    let spread_km = config.home_range_cells * grid.cell_size_km;
    for (k, ((rng, draw), ts)) in rngs.iter_mut().zip(&draws).zip(&times).enumerate() {
        let mut home = draw.home_cell;
        for &t in ts {
            if config.migration_prob > 0.0 && rng.random::<f64>() < config.migration_prob {
                home = neighbour(&grid, home, rng);
            }
            let center = grid.center_of(home);
            let location = Location::new(
                reflect(
                    center.x + spread_km * gaussian(rng),
                    grid.origin.x,
                    grid.origin.x + grid.width_km(),
                ),
                reflect(
                    center.y + spread_km * gaussian(rng),
                    grid.origin.y,
                    grid.origin.y + grid.height_km(),
                ),
            );
            let cell = grid.cell_of(&location)?;
            let fg_features = draw
                .prototype
                .iter()
                .map(|mu| mu + config.fg_noise * gaussian(rng))
                .collect();
            let bg_features = (0..config.bg_feature_dim)
                .map(|j| {
                    let signal = if j == cell {
                        config.bg_cell_signal
                    } else {
                        0.0
                    };
                    signal + (1.0 - config.bg_cell_signal) * gaussian(rng)
                })
                .collect();
            observations.push(Observation {
                obs_id: String::new(),
                identity: k,
                fg_features,
                bg_features,
                location,
                timestamp: t,
                split: None,
            });
        }
    }
    observations.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then(a.identity.cmp(&b.identity))
    });
    for (i, obs) in observations.iter_mut().enumerate() {
        obs.obs_id = format!("obs-{i:06}");
    }
    temporal_split(observations, grid, cutoff)
}

fn cutoff_of(times: &[Vec<f64>], quantile: f64) -> Result<f64> {
    let stub: Vec<Observation> = times
        .iter()
        .flatten()
        .map(|&t| Observation {
            obs_id: String::new(),
            identity: 0,
            fg_features: Vec::new(),
            bg_features: Vec::new(),
            location: Location::new(0.0, 0.0),
            timestamp: t,
            split: None,
        })
        .collect();
    quantile_cutoff(&stub, quantile)
}
