//! Wasserstein distances between users and bootstrap significance.
//!
//! Multivariate samples are compared dimension by dimension: the distance is
//! the mean over features of the 1-D Wasserstein-1 distance between the two
//! marginals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::FeatureVector;
use crate::error::{Error, Result};
use crate::nn::Vector;

/// 1-D Wasserstein-1 distance between two empirical distributions.
///
/// Integrates `|F_a^{-1}(q) - F_b^{-1}(q)|` over `q` in `[0, 1]`, which handles
/// unequal sample counts exactly.
pub fn w1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("W1 needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("W1 inputs must be finite".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        // sorted order statistics pair up one to one
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / na as f64);
    }
    // merge the two quantile grids k/na and l/nb
    let (mut i, mut j) = (0, 0);
    let mut q = 0.0;
    let mut total = 0.0;
    while i < na && j < nb {
        let qa = (i + 1) as f64 / na as f64;
        let qb = (j + 1) as f64 / nb as f64;
        let next = qa.min(qb);
        total += (next - q) * (a[i] - b[j]).abs();
        q = next;
        // exact rational comparison avoids float drift at shared grid points
        let ka = (i + 1) * nb;
        let kb = (j + 1) * na;
        if ka <= kb {
            i += 1;
        }
        if kb <= ka {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean over dimensions of the per-dimension W1.
pub fn w1_distance(a: &[Vector], b: &[Vector]) -> Result<f64> {
    let dim = a
        .first()
        .ok_or_else(|| Error::InsufficientData("first sample set is empty".into()))?
        .len();
    if b.is_empty() {
        return Err(Error::InsufficientData("second sample set is empty".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("zero-dimensional samples".into()));
    }
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::dim("W1 sample", dim, v.len()));
        }
    }
    let mut total = 0.0;
    for k in 0..dim {
        let col_a: Vec<f64> = a.iter().map(|v| v[k]).collect();
        let col_b: Vec<f64> = b.iter().map(|v| v[k]).collect();
        total += w1_1d(&col_a, &col_b)?;
    }
    Ok(total / dim as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub activity: usize,
    pub observed_distance: f64,
    pub bootstrap_distances: Vec<f64>,
    /// Fraction of bootstrap distances that are `<= observed_distance`.
    pub proportion: f64,
}

/// RNG for bootstrap iteration `index`: stream `index` of a ChaCha generator
/// seeded with `seed`. Results do not depend on thread count.
pub fn iteration_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn resample<R: Rng + ?Sized>(set: &[Vector], n: usize, rng: &mut R) -> Vec<Vector> {
    (0..n).map(|_| set[rng.random_range(0..set.len())].clone()).collect()
}

/// Compares the observed cross-user distance with the distances between
/// bootstrap resamples of the two sets.
///
/// Each iteration resamples `a` and `b` with replacement to their original
/// sizes and records the W1 between the resamples. The proportion is
/// `#(d <= observed) / n_boot`; ties count as below.
pub fn bootstrap(a: &[Vector], b: &[Vector], n_boot: usize, seed: u64, activity: usize) -> Result<BootstrapReport> {
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be at least 1".into()));
    }
    let observed = w1_distance(a, b)?;
    let distances = (0..n_boot)
        .into_par_iter()
        .map(|i| {
            let mut rng = iteration_rng(seed, i);
            let ra = resample(a, a.len(), &mut rng);
            let rb = resample(b, b.len(), &mut rng);
            w1_distance(&ra, &rb)
        })
        .collect::<Result<Vec<f64>>>()?;
    let below = distances.iter().filter(|&&d| d <= observed).count();
    Ok(BootstrapReport {
        activity,
        observed_distance: observed,
        proportion: below as f64 / n_boot as f64,
        bootstrap_distances: distances,
    })
}

/// Per-activity reports for a source/target pair plus their averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub per_activity: Vec<BootstrapReport>,
    pub mean_distance: f64,
    pub mean_proportion: f64,
    /// Activities present for only one of the users.
    pub skipped: Vec<usize>,
}

/// Runs [`bootstrap`] for every activity both users performed.
///
/// Activity `k` uses seed `seed + k` so reports are stable when the set of
/// shared activities changes.
pub fn dataset_report(a: &[FeatureVector], b: &[FeatureVector], n_boot: usize, seed: u64) -> Result<DatasetReport> {
    let group = |s: &[FeatureVector]| -> Result<BTreeMap<usize, Vec<Vector>>> {
        let mut m: BTreeMap<usize, Vec<Vector>> = BTreeMap::new();
        for f in s {
            let label = f
                .activity
                .ok_or_else(|| Error::InvalidArgument("distribution analysis needs activity labels".into()))?;
            m.entry(label).or_default().push(f.x0.clone());
        }
        Ok(m)
    };
    let ga = group(a)?;
    let gb = group(b)?;
    let mut per_activity = Vec::new();
    let mut skipped = Vec::new();
    for k in ga.keys().chain(gb.keys()).copied().collect::<std::collections::BTreeSet<_>>() {
        match (ga.get(&k), gb.get(&k)) {
            (Some(xa), Some(xb)) => {
                per_activity.push(bootstrap(xa, xb, n_boot, seed.wrapping_add(k as u64), k)?)
            }
            _ => skipped.push(k),
        }
    }
    if per_activity.is_empty() {
        return Err(Error::InsufficientData("the two users share no activity".into()));
    }
    let n = per_activity.len() as f64;
    Ok(DatasetReport {
        mean_distance: per_activity.iter().map(|r| r.observed_distance).sum::<f64>() / n,
        mean_proportion: per_activity.iter().map(|r| r.proportion).sum::<f64>() / n,
        per_activity,
        skipped,
    })
}
