//! Observations, the geospatial grid, temporal splitting and per-identity
//! training statistics.
//!
//! On disk a dataset is a directory holding `observations.jsonl` (one JSON
//! record per sighting) and a `dataset.json` sidecar with the grid geometry
//! and the size of the identity label space.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OBSERVATIONS_FILE: &str = "observations.jsonl";
pub const SIDECAR_FILE: &str = "dataset.json";

/// A point on the monitoring grid, in kilometres east (`x`) and north (`y`)
/// of the grid origin frame. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_km(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Location {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Location> for [f64; 2] {
    fn from(l: Location) -> Self {
        [l.x, l.y]
    }
}

/// Regular grid of square cells covering the region of interest.
///
/// Cells are indexed row-major from the origin corner:
/// `index = iy * n_cells_x + ix`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Location,
    pub cell_size_km: f64,
    pub n_cells_x: usize,
    pub n_cells_y: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin: Location::new(0.0, 0.0),
            cell_size_km: 5.0,
            n_cells_x: 10,
            n_cells_y: 10,
        }
    }
}

impl GridSpec {
    pub fn new(
        origin: Location,
        cell_size_km: f64,
        n_cells_x: usize,
        n_cells_y: usize,
    ) -> Result<Self> {
        let grid = Self {
            origin,
            cell_size_km,
            n_cells_x,
            n_cells_y,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size_km.is_finite() && self.cell_size_km > 0.0) {
            return Err(Error::Schema(format!(
                "cell_size_km must be positive and finite, got {}",
                self.cell_size_km
            )));
        }
        if self.n_cells_x == 0 || self.n_cells_y == 0 {
            return Err(Error::Schema(
                "grid needs at least one cell along each axis".into(),
            ));
        }
        if !self.origin.is_finite() {
            return Err(Error::Schema("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells_x * self.n_cells_y
    }

    pub fn width_km(&self) -> f64 {
        self.n_cells_x as f64 * self.cell_size_km
    }

    pub fn height_km(&self) -> f64 {
        self.n_cells_y as f64 * self.cell_size_km
    }

    pub fn diagonal_km(&self) -> f64 {
        self.cell_size_km * std::f64::consts::SQRT_2
    }

    /// Closed bounds: points on the far edges belong to the last row/column.
    pub fn contains(&self, loc: &Location) -> bool {
        let dx = loc.x - self.origin.x;
        let dy = loc.y - self.origin.y;
        loc.is_finite() && dx >= 0.0 && dy >= 0.0 && dx <= self.width_km() && dy <= self.height_km()
    }

    pub fn cell_of(&self, loc: &Location) -> Result<usize> {
        if !self.contains(loc) {
            return Err(Error::Domain(format!(
                "location ({}, {}) lies outside the grid",
                loc.x, loc.y
            )));
        }
        let ix = (((loc.x - self.origin.x) / self.cell_size_km).floor() as usize)
            .min(self.n_cells_x - 1);
        let iy = (((loc.y - self.origin.y) / self.cell_size_km).floor() as usize)
            .min(self.n_cells_y - 1);
        Ok(iy * self.n_cells_x + ix)
    }

    pub fn cell_coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.n_cells_x, cell / self.n_cells_x)
    }

    pub fn center_of(&self, cell: usize) -> Location {
        debug_assert!(cell < self.n_cells());
        let (ix, iy) = self.cell_coords(cell);
        Location::new(
            self.origin.x + (ix as f64 + 0.5) * self.cell_size_km,
            self.origin.y + (iy as f64 + 0.5) * self.cell_size_km,
        )
    }

    /// Pull a location back inside the grid by clamping each coordinate.
    pub fn clamp(&self, loc: Location) -> Location {
        Location::new(
            loc.x.clamp(self.origin.x, self.origin.x + self.width_km()),
            loc.y.clamp(self.origin.y, self.origin.y + self.height_km()),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One sighting. Serialized as a single JSONL record with the keys
/// `obs_id`, `identity`, `fg`, `bg`, `loc`, `t` and optionally `split`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub obs_id: String,
    pub identity: usize,
    #[serde(rename = "fg")]
    pub fg_features: Vec<f64>,
    #[serde(rename = "bg")]
    pub bg_features: Vec<f64>,
    #[serde(rename = "loc")]
    pub location: Location,
    /// Days since epoch.
    #[serde(rename = "t")]
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl Observation {
    pub fn is_train(&self) -> bool {
        self.split == Some(Split::Train)
    }

    pub fn is_test(&self) -> bool {
        self.split == Some(Split::Test)
    }

    fn check_values(&self) -> std::result::Result<(), String> {
        if !self
            .fg_features
            .iter()
            .chain(&self.bg_features)
            .all(|v| v.is_finite())
        {
            return Err(format!(
                "observation {} has non-finite features",
                self.obs_id
            ));
        }
        if !self.location.is_finite() {
            return Err(format!(
                "observation {} has a non-finite location",
                self.obs_id
            ));
        }
        if !(self.timestamp.is_finite() && self.timestamp > 0.0) {
            return Err(format!(
                "observation {} has non-positive timestamp {}",
                self.obs_id, self.timestamp
            ));
        }
        Ok(())
    }
}

/// A split dataset over a closed identity label space `[0, n_identities)`.
///
/// Every label in the space has at least one training sighting. Test
/// sightings may carry labels at or above `n_identities`: those are
/// individuals never seen in training, kept so that accuracy denominators
/// stay honest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observations: Vec<Observation>,
    pub grid: GridSpec,
    pub n_identities: usize,
    /// `(d, d_bg)`.
    pub feature_dims: (usize, usize),
}

impl Dataset {
    pub fn new(
        observations: Vec<Observation>,
        grid: GridSpec,
        n_identities: usize,
    ) -> Result<Self> {
        grid.validate()?;
        let first = observations
            .first()
            .ok_or_else(|| Error::Dataset("dataset has no observations".into()))?;
        let feature_dims = (first.fg_features.len(), first.bg_features.len());
        let mut ids = HashSet::with_capacity(observations.len());
        let mut seen_in_train = vec![false; n_identities];
        for obs in &observations {
            obs.check_values().map_err(Error::Dataset)?;
            if (obs.fg_features.len(), obs.bg_features.len()) != feature_dims {
                return Err(Error::Schema(format!(
                    "observation {} has feature dims ({}, {}), expected {:?}",
                    obs.obs_id,
                    obs.fg_features.len(),
                    obs.bg_features.len(),
                    feature_dims
                )));
            }
            if !ids.insert(obs.obs_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate obs_id {}", obs.obs_id)));
            }
            if !grid.contains(&obs.location) {
                return Err(Error::Dataset(format!(
                    "observation {} at ({}, {}) lies outside the grid",
                    obs.obs_id, obs.location.x, obs.location.y
                )));
            }
            match obs.split {
                None => {
                    return Err(Error::Dataset(format!(
                        "observation {} has no split tag",
                        obs.obs_id
                    )))
                }
                Some(Split::Train) => {
                    if obs.identity >= n_identities {
                        return Err(Error::Dataset(format!(
                            "train observation {} has identity {} outside [0, {})",
                            obs.obs_id, obs.identity, n_identities
                        )));
                    }
                    seen_in_train[obs.identity] = true;
                }
                Some(Split::Test) => {}
            }
        }
        if let Some(k) = seen_in_train.iter().position(|seen| !seen) {
            return Err(Error::Dataset(format!(
                "identity {k} has no training sightings"
            )));
        }
        Ok(Self {
            observations,
            grid,
            n_identities,
            feature_dims,
        })
    }

    pub fn train(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(|o| o.is_train())
    }

    pub fn test(&self) -> impl Iterator<Item = &Observation> {
        self.observations.iter().filter(|o| o.is_test())
    }

    pub fn n_train(&self) -> usize {
        self.train().count()
    }

    pub fn n_test(&self) -> usize {
        self.test().count()
    }

    /// Whether the label lies in the classifier's label space.
    pub fn is_known(&self, identity: usize) -> bool {
        identity < self.n_identities
    }

    /// Identities that only appear in the test split.
    pub fn unknown_test_identities(&self) -> BTreeSet<usize> {
        self.test()
            .map(|o| o.identity)
            .filter(|&k| !self.is_known(k))
            .collect()
    }

    /// `(identity, cell)` pairs observed in the training split.
    pub fn train_identity_cells(&self) -> Result<HashSet<(usize, usize)>> {
        self.train()
            .map(|o| Ok((o.identity, self.grid.cell_of(&o.location)?)))
            .collect()
    }
}

/// Tag observations with `timestamp < cutoff` as train and the rest as test.
///
/// The label space becomes `[0, K)` with `K` one past the largest training
/// label; every label in it must have a training sighting.
pub fn temporal_split(
    mut observations: Vec<Observation>,
    grid: GridSpec,
    cutoff: f64,
) -> Result<Dataset> {
    for obs in &mut observations {
        obs.split = Some(if obs.timestamp < cutoff {
            Split::Train
        } else {
            Split::Test
        });
    }
    let n_train = observations.iter().filter(|o| o.is_train()).count();
    if n_train == 0 {
        return Err(Error::Split(format!(
            "no observations before cutoff {cutoff}"
        )));
    }
    if n_train == observations.len() {
        return Err(Error::Split(format!(
            "no observations at or after cutoff {cutoff}"
        )));
    }
    let n_identities = observations
        .iter()
        .filter(|o| o.is_train())
        .map(|o| o.identity)
        .max()
        .map_or(0, |k| k + 1);
    Dataset::new(observations, grid, n_identities)
}

/// The timestamp below which `quantile` of the observations fall.
pub fn quantile_cutoff(observations: &[Observation], quantile: f64) -> Result<f64> {
    if observations.is_empty() || !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Split(format!(
            "cannot place a {quantile} quantile cutoff over {} observations",
            observations.len()
        )));
    }
    let mut times: Vec<f64> = observations.iter().map(|o| o.timestamp).collect();
    times.sort_by(f64::total_cmp);
    let idx = ((quantile * times.len() as f64).round() as usize).clamp(1, times.len() - 1);
    Ok(times[idx])
}

/// Per-identity statistics of the training split, indexed by identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityCatalog {
    pub counts: Vec<usize>,
    pub home_cells: Vec<usize>,
    pub home_locations: Vec<Location>,
    pub target_temperatures: Vec<f64>,
    pub last_train_time: Vec<f64>,
}

impl IdentityCatalog {
    pub fn n_identities(&self) -> usize {
        self.counts.len()
    }

    pub fn max_count(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Class-count temperature target `1 - ln(count / max_count)`.
pub fn target_temperature(count: f64, max_count: f64) -> f64 {
    1.0 - (count / max_count).ln()
}

pub fn build_catalog(dataset: &Dataset) -> Result<IdentityCatalog> {
    let k = dataset.n_identities;
    let mut counts = vec![0usize; k];
    let mut cell_counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); k];
    let mut last_train_time = vec![f64::NEG_INFINITY; k];
    for obs in dataset.train() {
        let id = obs.identity;
        counts[id] += 1;
        *cell_counts[id]
            .entry(dataset.grid.cell_of(&obs.location)?)
            .or_default() += 1;
        last_train_time[id] = last_train_time[id].max(obs.timestamp);
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!(
            "identity {missing} has no training sightings"
        )));
    }
    let n_max = counts.iter().copied().max().unwrap_or(0) as f64;
    // BTreeMap iterates cells in ascending order, so keeping only strictly
    // larger counts resolves ties to the lowest cell index.
    let home_cells: Vec<usize> = cell_counts
        .iter()
        .map(|cells| {
            cells
                .iter()
                .fold((usize::MAX, 0usize), |best, (&cell, &n)| {
                    if n > best.1 {
                        (cell, n)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    Ok(IdentityCatalog {
        home_locations: home_cells
            .iter()
            .map(|&c| dataset.grid.center_of(c))
            .collect(),
        target_temperatures: counts
            .iter()
            .map(|&n| target_temperature(n as f64, n_max))
            .collect(),
        counts,
        home_cells,
        last_train_time,
    })
}

/// Read one observation per non-empty line.
pub fn load_observations(path: impl AsRef<Path>) -> Result<Vec<Observation>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let obs: Observation = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        obs.check_values().map_err(parse_err)?;
        let these = (obs.fg_features.len(), obs.bg_features.len());
        match dims {
            None => dims = Some(these),
            Some(expected) if expected != these => {
                return Err(Error::Schema(format!(
                    "{}:{}: feature dims {:?} differ from {:?} on earlier records",
                    path.display(),
                    i + 1,
                    these,
                    expected
                )))
            }
            Some(_) => {}
        }
        out.push(obs);
    }
    Ok(out)
}

pub fn save_observations(observations: &[Observation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for obs in observations {
        serde_json::to_writer(&mut w, obs)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The `dataset.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub origin: Location,
    pub cell_size_km: f64,
    pub n_cells_x: usize,
    pub n_cells_y: usize,
    pub n_identities: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Generator configuration echo, present for simulated datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_config: Option<serde_json::Value>,
}

impl DatasetMeta {
    pub fn for_dataset(dataset: &Dataset) -> Self {
        Self {
            origin: dataset.grid.origin,
            cell_size_km: dataset.grid.cell_size_km,
            n_cells_x: dataset.grid.n_cells_x,
            n_cells_y: dataset.grid.n_cells_y,
            n_identities: dataset.n_identities,
            seed: None,
            sim_config: None,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            origin: self.origin,
            cell_size_km: self.cell_size_km,
            n_cells_x: self.n_cells_x,
            n_cells_y: self.n_cells_y,
        }
    }
}

pub fn save_dataset(dataset: &Dataset, meta: &DatasetMeta, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_observations(&dataset.observations, dir.join(OBSERVATIONS_FILE))?;
    let sidecar = dir.join(SIDECAR_FILE);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))
}

/// Load a dataset directory. Records without split tags are split at
/// `cutoff`, which is then required.
pub fn load_dataset(dir: impl AsRef<Path>, cutoff: Option<f64>) -> Result<(Dataset, DatasetMeta)> {
    let dir = dir.as_ref();
    let sidecar = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    let grid = meta.grid();
    grid.validate()?;
    let observations = load_observations(dir.join(OBSERVATIONS_FILE))?;
    let tagged = observations.iter().filter(|o| o.split.is_some()).count();
    let dataset = match (cutoff, tagged) {
        (Some(cutoff), _) => temporal_split(observations, grid, cutoff)?,
        (None, n) if n == observations.len() => {
            Dataset::new(observations, grid, meta.n_identities)?
        }
        (None, 0) => {
            return Err(Error::Config(format!(
                "{} has no split tags; a cutoff is required",
                dir.display()
            )))
        }
        (None, _) => {
            return Err(Error::Schema(format!(
                "{} mixes tagged and untagged records",
                dir.display()
            )))
        }
    };
    Ok((dataset, meta))
}
