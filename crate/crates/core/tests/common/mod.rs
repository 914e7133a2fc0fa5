//! Helpers and independent oracles shared by the integration tests.
//!
//! The oracles here deliberately avoid calling into the crate's math so
//! that agreement means something.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use wildid_core::calibration::{pits_loss, LogitsOutput};
use wildid_core::classifier::PitsModel;
use wildid_core::data::{Dataset, GridSpec, Location, Observation, Split};
use wildid_core::priors::PriorKind;
use wildid_core::rng::{substream, Domain};

pub fn rng(seed: u64) -> ChaCha8Rng {
    substream(seed, Domain::Test, 0)
}

pub fn obs(
    id: &str,
    identity: usize,
    fg: Vec<f64>,
    loc: (f64, f64),
    t: f64,
    split: Split,
) -> Observation {
    Observation {
        obs_id: id.to_string(),
        identity,
        fg_features: fg,
        bg_features: vec![0.0],
        location: Location::new(loc.0, loc.1),
        timestamp: t,
        split: Some(split),
    }
}

pub fn grid(n: usize) -> GridSpec {
    GridSpec::new(Location::new(0.0, 0.0), 5.0, n, n).unwrap()
}

/// Largest relative error between the analytic PITS gradient and central
/// differences of the loss, ignoring components below `floor` in magnitude.
pub fn fd_max_relative_error(
    z: &[f64],
    t: f64,
    label: usize,
    target: f64,
    lambda: f64,
    h: f64,
    floor: f64,
) -> f64 {
    let loss = |z: &[f64], t: f64| {
        pits_loss(&LogitsOutput::new(z.to_vec(), t), label, target, lambda).unwrap()
    };
    let g = wildid_core::calibration::pits_loss_grad(
        &LogitsOutput::new(z.to_vec(), t),
        label,
        target,
        lambda,
    )
    .unwrap();
    let rel = |analytic: f64, numeric: f64| {
        if analytic.abs() < floor {
            0.0
        } else {
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
        }
    };
    let mut worst = 0.0f64;
    for j in 0..z.len() {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[j] += h;
        down[j] -= h;
        let numeric = (loss(&up, t) - loss(&down, t)) / (2.0 * h);
        worst = worst.max(rel(g.d_logits[j], numeric));
    }
    let numeric = (loss(z, t + h) - loss(z, t - h)) / (2.0 * h);
    worst.max(rel(g.d_temperature, numeric))
}

/// A random PITS-loss instance: logits, temperature, label, target.
pub fn random_pits_instance(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, f64, usize, f64) {
    let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let t = rng.random_range(1.0..5.0);
    let label = rng.random_range(0..k);
    let target = rng.random_range(1.0..6.0);
    (z, t, label, target)
}

/// Straight-line reimplementation of timestamp-ordered fused inference with
/// metadata locations. Returns `(obs_id, posterior)` in processing order.
#[allow(clippy::needless_range_loop)]
pub fn brute_force_infer(
    model: &PitsModel,
    dataset: &Dataset,
    kind: PriorKind,
    alpha: f64,
    beta: f64,
    time_unit_days: f64,
) -> Vec<(String, Vec<f64>)> {
    let k = dataset.n_identities;
    let g = &dataset.grid;

    // catalog: modal cell (lowest index on ties) and last train sighting
    let n_cells = g.n_cells_x * g.n_cells_y;
    let mut cell_counts = vec![vec![0usize; n_cells]; k];
    let mut last_seen = vec![f64::MIN; k];
    for o in dataset
        .observations
        .iter()
        .filter(|o| o.split == Some(Split::Train))
    {
        let ix = (((o.location.x - g.origin.x) / g.cell_size_km) as usize).min(g.n_cells_x - 1);
        let iy = (((o.location.y - g.origin.y) / g.cell_size_km) as usize).min(g.n_cells_y - 1);
        cell_counts[o.identity][iy * g.n_cells_x + ix] += 1;
        if o.timestamp > last_seen[o.identity] {
            last_seen[o.identity] = o.timestamp;
        }
    }
    let mut home = Vec::new();
    for counts in &cell_counts {
        let mut best = 0;
        for c in 1..n_cells {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        let (ix, iy) = (best % g.n_cells_x, best / g.n_cells_x);
        home.push((
            g.origin.x + (ix as f64 + 0.5) * g.cell_size_km,
            g.origin.y + (iy as f64 + 0.5) * g.cell_size_km,
        ));
    }
    let mut last_loc = home.clone();

    let mut test: Vec<(usize, &Observation)> = dataset
        .observations
        .iter()
        .filter(|o| o.split == Some(Split::Test))
        .enumerate()
        .collect();
    test.sort_by(|(ia, a), (ib, b)| {
        a.timestamp
            .partial_cmp(&b.timestamp)
            .unwrap()
            .then(a.obs_id.cmp(&b.obs_id))
            .then(ia.cmp(ib))
    });

    let mut out = Vec::new();
    for (_, o) in test {
        let x = &o.fg_features;
        let d = x.len();
        let mut z = vec![0.0; k];
        for c in 0..k {
            z[c] = model.biases[c];
            for j in 0..d {
                z[c] += model.weights[c * d + j] * x[j];
            }
        }
        let mut s = model.temp_bias;
        for j in 0..d {
            s += model.temp_weights[j] * x[j];
        }
        let temp = match model.loss_kind {
            wildid_core::classifier::LossKind::Ce => 1.0,
            wildid_core::classifier::LossKind::Pits => 1.0 + (1.0 + s.exp()).ln(),
        };
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - zmax) / temp).exp()).collect();
        let esum: f64 = e.iter().sum();
        let lik: Vec<f64> = e.iter().map(|v| v / esum).collect();

        let (lx, ly) = (o.location.x, o.location.y);
        let dist =
            |a: (f64, f64)| ((a.0 - lx).powi(2) + (a.1 - ly).powi(2)).sqrt() / g.cell_size_km;
        let raw: Vec<f64> = match kind {
            PriorKind::Uniform => vec![1.0; k],
            PriorKind::HomeLocation => home
                .iter()
                .map(|&h| -alpha * dist(h))
                .map(f64::exp)
                .collect(),
            PriorKind::MigratingLocation => last_loc
                .iter()
                .map(|&h| -alpha * dist(h))
                .map(f64::exp)
                .collect(),
            PriorKind::TimeDecay => last_seen
                .iter()
                .map(|&tau| (-beta * (tau - o.timestamp).abs() / time_unit_days).exp())
                .collect(),
        };
        let rsum: f64 = raw.iter().sum();
        let prior: Vec<f64> = raw.iter().map(|v| v / rsum).collect();
        let prod: Vec<f64> = lik.iter().zip(&prior).map(|(a, b)| a * b).collect();
        let psum: f64 = prod.iter().sum();
        let post: Vec<f64> = prod.iter().map(|v| v / psum).collect();
        let mut pred = 0;
        for c in 1..k {
            if post[c] > post[pred] {
                pred = c;
            }
        }
        match kind {
            PriorKind::MigratingLocation => last_loc[pred] = (lx, ly),
            PriorKind::TimeDecay => last_seen[pred] = o.timestamp,
            _ => {}
        }
        out.push((o.obs_id.clone(), post));
    }
    out
}

/// A random small instance for the fusion oracle: a PITS model with random
/// weights and a dataset with at most 20 test sightings on a 4x4 grid.
/// Integer timestamps make ties common so the tie-break path is exercised.
pub fn random_fusion_instance(seed: u64) -> (PitsModel, Dataset) {
    let mut r = substream(seed, Domain::Test, 1);
    let k = r.random_range(2..=5);
    let d = 3;
    let g = grid(4);
    let mut observations = Vec::new();
    let rand_obs = |r: &mut ChaCha8Rng, identity: usize, t: f64, split: Split, n: usize| {
        let fg = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let loc = (r.random_range(0.0..20.0), r.random_range(0.0..20.0));
        let id = format!("o{:03}", r.random_range(0..1000) * 100 + n);
        obs(&id, identity, fg, loc, t, split)
    };
    for identity in 0..k {
        for _ in 0..r.random_range(1..=4) {
            let t = r.random_range(1..100) as f64;
            let n = observations.len();
            observations.push(rand_obs(&mut r, identity, t, Split::Train, n));
        }
    }
    for _ in 0..r.random_range(1..=20) {
        let identity = r.random_range(0..k);
        let t = r.random_range(100..110) as f64;
        let n = observations.len();
        observations.push(rand_obs(&mut r, identity, t, Split::Test, n));
    }
    let dataset = Dataset::new(observations, g, k).unwrap();

    let mut model = PitsModel::zeros(k, d, wildid_core::classifier::LossKind::Pits);
    model
        .weights
        .iter_mut()
        .for_each(|w| *w = r.random_range(-3.0..3.0));
    model
        .biases
        .iter_mut()
        .for_each(|b| *b = r.random_range(-1.0..1.0));
    model
        .temp_weights
        .iter_mut()
        .for_each(|w| *w = r.random_range(-1.0..1.0));
    model.temp_bias = r.random_range(-1.0..1.0);
    (model, dataset)
}
