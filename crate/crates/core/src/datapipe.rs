//! Sensor ingestion, windowing, feature extraction, pseudo-labels and splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::nn::{Matrix, Vector};

pub const FEATURES_PER_CHANNEL: usize = 9;
pub const FEATURE_NAMES: [&str; FEATURES_PER_CHANNEL] =
    ["mean", "std", "min", "max", "range", "median", "rms", "mad", "iqr"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source = 0,
    Target = 1,
}

impl Domain {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub x0: Vector,
    /// Source label, target pseudo-label, or (for evaluation sets) target ground truth.
    pub activity: Option<usize>,
    pub domain: Domain,
    /// Present only on source samples.
    pub source_activity: Option<usize>,
}

impl FeatureVector {
    pub fn source(x0: Vector, label: usize) -> Self {
        FeatureVector {
            x0,
            activity: Some(label),
            domain: Domain::Source,
            source_activity: Some(label),
        }
    }

    pub fn target(x0: Vector, label: Option<usize>) -> Self {
        FeatureVector {
            x0,
            activity: label,
            domain: Domain::Target,
            source_activity: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Copy with every label removed, as the adaptation stage sees target data.
    pub fn unlabeled(&self) -> Self {
        FeatureVector {
            x0: self.x0.clone(),
            activity: None,
            domain: self.domain,
            source_activity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("feature vector has non-finite entries".into()));
        }
        match self.domain {
            Domain::Source if self.activity.is_none() || self.source_activity != self.activity => Err(
                Error::InvalidArgument("source samples need matching activity and source_activity".into()),
            ),
            Domain::Target if self.source_activity.is_some() => Err(Error::InvalidArgument(
                "target samples cannot carry a source activity".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// One timestamped reading of every channel.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorRow {
    pub timestamp: f64,
    pub values: Vec<f64>,
    pub activity: Option<usize>,
}

/// Which CSV columns carry what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_timestamp")]
    pub timestamp: String,
    pub channels: Vec<String>,
    #[serde(default)]
    pub activity: Option<String>,
}

fn default_timestamp() -> String {
    "timestamp".into()
}

impl CsvSchema {
    pub fn new(channels: &[&str], activity: Option<&str>) -> Self {
        CsvSchema {
            timestamp: default_timestamp(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
            activity: activity.map(str::to_string),
        }
    }
}

/// Reads a sensor CSV. Rows must have strictly increasing timestamps.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<SensorRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema {
            path: path.into(),
            message: e.to_string(),
        })?
        .clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema {
                path: path.into(),
                message: format!(
                    "column `{name}` not found; header has {} columns: {}",
                    headers.len(),
                    headers.iter().collect::<Vec<_>>().join(",")
                ),
            })
    };
    let ts_col = find(&schema.timestamp)?;
    let ch_cols = schema.channels.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let act_col = schema.activity.as_deref().map(find).transpose()?;

    let mut rows = Vec::new();
    let mut last_ts = f64::NEG_INFINITY;
    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| Error::MalformedRow {
            path: path.into(),
            line,
            message,
        };
        let cell = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(format!("column {} holds non-numeric value `{raw}`", col + 1)))
        };
        let timestamp = cell(ts_col)?;
        if timestamp <= last_ts {
            return Err(malformed(format!(
                "timestamp {timestamp} does not increase (previous {last_ts})"
            )));
        }
        last_ts = timestamp;
        let values = ch_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        let activity = match act_col {
            Some(c) => {
                let raw = record.get(c).unwrap_or("").trim();
                Some(
                    raw.parse::<usize>()
                        .map_err(|_| malformed(format!("activity `{raw}` is not a class index")))?,
                )
            }
            None => None,
        };
        rows.push(SensorRow {
            timestamp,
            values,
            activity,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    /// Rows are time steps, columns are channels.
    pub samples: Matrix,
    pub sample_rate_hz: f64,
    pub activity_label: Option<usize>,
    pub user_id: String,
}

/// Number of samples in a window of `window_seconds` at `sample_rate_hz`.
pub fn window_len(window_seconds: f64, sample_rate_hz: f64) -> usize {
    (window_seconds * sample_rate_hz).round() as usize
}

/// Slices rows into fixed-length windows. Windows whose rows carry more than
/// one activity label are dropped.
pub fn make_windows(
    rows: &[SensorRow],
    window_seconds: f64,
    overlap: f64,
    sample_rate_hz: f64,
    user_id: &str,
) -> Result<Vec<SensorWindow>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if !(sample_rate_hz > 0.0 && window_seconds > 0.0) {
        return Err(Error::InvalidArgument(
            "window length and sample rate must be positive".into(),
        ));
    }
    let len = window_len(window_seconds, sample_rate_hz);
    if len < 2 {
        return Err(Error::InvalidArgument(format!("window of {len} samples is too short")));
    }
    if rows.len() < len {
        return Err(Error::InsufficientData(format!(
            "{} rows cannot fill one window of {len}",
            rows.len()
        )));
    }
    let channels = rows[0].values.len();
    for r in rows {
        ensure_dim("sensor row", channels, r.values.len())?;
    }
    let stride = ((len as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut windows = Vec::new();
    let mut start = 0;
    while start + len <= rows.len() {
        let span = &rows[start..start + len];
        let label = span[0].activity;
        if span.iter().all(|r| r.activity == label) {
            let samples = Array2::from_shape_fn((len, channels), |(i, j)| span[i].values[j]);
            windows.push(SensorWindow {
                samples,
                sample_rate_hz,
                activity_label: label,
                user_id: user_id.to_string(),
            });
        }
        start += stride;
    }
    Ok(windows)
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn channel_stats(values: &[f64]) -> [f64; FEATURES_PER_CHANNEL] {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let rms = (values.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    let mad = values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    [
        mean,
        var.sqrt(),
        min,
        max,
        max - min,
        quantile(&sorted, 0.5),
        rms,
        mad,
        quantile(&sorted, 0.75) - quantile(&sorted, 0.25),
    ]
}

/// Nine time-domain statistics per channel, in [`FEATURE_NAMES`] order.
pub fn extract_features(w: &SensorWindow, domain: Domain) -> FeatureVector {
    let channels = w.samples.ncols();
    let mut x0 = Vector::zeros(channels * FEATURES_PER_CHANNEL);
    for (c, column) in w.samples.axis_iter(Axis(1)).enumerate() {
        let stats = channel_stats(&column.to_vec());
        x0.slice_mut(ndarray::s![c * FEATURES_PER_CHANNEL..(c + 1) * FEATURES_PER_CHANNEL])
            .assign(&Vector::from_vec(stats.to_vec()));
    }
    match domain {
        Domain::Source => FeatureVector {
            x0,
            activity: w.activity_label,
            domain,
            source_activity: w.activity_label,
        },
        Domain::Target => FeatureVector::target(x0, w.activity_label),
    }
}

pub fn extract_all(windows: &[SensorWindow], domain: Domain) -> Vec<FeatureVector> {
    windows.par_iter().map(|w| extract_features(w, domain)).collect()
}

/// Per-dimension z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vector,
    pub std: Vector,
}

impl Standardizer {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a Vector>) -> Result<Self> {
        let samples: Vec<&Vector> = samples.into_iter().collect();
        let first = samples
            .first()
            .ok_or_else(|| Error::InsufficientData("cannot standardize an empty set".into()))?;
        let dim = first.len();
        let n = samples.len() as f64;
        let mut mean = Vector::zeros(dim);
        for s in &samples {
            ensure_dim("standardizer input", dim, s.len())?;
            mean += *s;
        }
        mean /= n;
        let mut var = Vector::zeros(dim);
        for s in &samples {
            var += &(*s - &mean).mapv(|d| d * d);
        }
        let std = (var / n).mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        Ok(Standardizer { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: Vector::zeros(dim),
            std: Vector::ones(dim),
        }
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        (x - &self.mean) / &self.std
    }
}

/// k-means++ seeding followed by Lloyd iterations, on z-scored copies of `points`.
/// Returns the cluster index of every point.
pub fn kmeans(points: &[Vector], k: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::InsufficientData("k-means on an empty set".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let scaler = Standardizer::fit(points)?;
    let pts: Vec<Vector> = points.iter().map(|p| scaler.apply(p)).collect();
    let dist2 = |a: &Vector, b: &Vector| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..pts.len())];
    let mut nearest: Vec<f64> = pts.iter().map(|p| dist2(p, &pts[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = pts.len() - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            // every remaining point coincides with a centre; take the first unchosen one
            (0..pts.len()).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(&pts) {
            *d = d.min(dist2(p, &pts[next]));
        }
    }
    let mut centers: Vec<Vector> = chosen.iter().map(|&i| pts[i].clone()).collect();
    let mut assign = vec![usize::MAX; pts.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| dist2(p, &centers[a]).total_cmp(&dist2(p, &centers[b])))
                .expect("k >= 1");
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vector> = pts.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let mut m = Vector::zeros(center.len());
                for p in &members {
                    m += *p;
                }
                *center = m / members.len() as f64;
            }
        }
    }
    Ok(assign)
}

/// Assigns k-means pseudo-labels to unlabeled target samples. Cluster `j`
/// becomes activity `source_classes + j`, so pseudo ids never collide with
/// source ids.
pub fn cluster_pseudo_labels(
    target: &[FeatureVector],
    k: usize,
    source_classes: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    let points: Vec<Vector> = target.iter().map(|f| f.x0.clone()).collect();
    let assign = kmeans(&points, k, seed)?;
    Ok(target
        .iter()
        .zip(assign)
        .map(|(f, c)| FeatureVector {
            activity: Some(source_classes + c),
            source_activity: None,
            ..f.clone()
        })
        .collect())
}

/// Chronological split: the first `ceil(n/2)` samples validate, the rest test.
pub fn split_target(target: &[FeatureVector]) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    if target.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 target samples to split, got {}",
            target.len()
        )));
    }
    let cut = target.len().div_ceil(2);
    Ok((target[..cut].to_vec(), target[cut..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_source: Vec<FeatureVector>,
    /// Unlabeled (later pseudo-labeled) copies of the validation half.
    pub train_target: Vec<FeatureVector>,
    pub val_target: Vec<FeatureVector>,
    pub test_target: Vec<FeatureVector>,
}

impl DatasetSplit {
    /// `target` must be in chronological order and carry ground-truth labels
    /// for validation and test scoring.
    pub fn new(source: Vec<FeatureVector>, target: &[FeatureVector]) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::InsufficientData("no source samples".into()));
        }
        let (val_target, test_target) = split_target(target)?;
        let dim = source[0].dim();
        for f in source.iter().chain(target) {
            ensure_dim("dataset feature", dim, f.dim())?;
            f.validate()?;
        }
        let train_target = val_target.iter().map(FeatureVector::unlabeled).collect();
        Ok(DatasetSplit {
            train_source: source,
            train_target,
            val_target,
            test_target,
        })
    }

    pub fn dim(&self) -> usize {
        self.train_source[0].dim()
    }

    pub fn source_classes(&self) -> usize {
        self.train_source
            .iter()
            .filter_map(|f| f.activity)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Replaces target training labels with k-means pseudo-labels, one cluster
    /// per source class.
    pub fn assign_pseudo_labels(&mut self, seed: u64) -> Result<()> {
        let k = self.source_classes();
        let k = k.min(self.train_target.len());
        self.train_target = cluster_pseudo_labels(&self.train_target, k, self.source_classes(), seed)?;
        Ok(())
    }
}

/// Two-domain Gaussian fixture.
///
/// Source class `k` is a unit-variance Gaussian centred at
/// `4 * (k - (classes - 1) / 2)` along a random class axis. The target copies
/// every class, rotates it by 0.15 rad in a random plane through the origin,
/// and translates it by `shift` along a random unit vector that
/// makes a 45 degree angle with the class axis, so part of the shift pushes
/// classes across the source decision boundary.
///
/// Samples within each domain are interleaved by class, so a chronological
/// split keeps every class on both sides.
pub fn synth_domains(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    shift: f64,
    seed: u64,
) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    if n_per_class == 0 || classes == 0 || dim < 2 {
        return Err(Error::InvalidArgument(
            "synthetic fixture needs n_per_class, classes >= 1 and dim >= 2".into(),
        ));
    }
    const SEPARATION: f64 = 4.0;
    const ROTATION: f64 = 0.15;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng, orth: &[&Vector]| -> Vector {
        loop {
            let mut v = Vector::from_shape_simple_fn(dim, || StandardNormal.sample(rng));
            for o in orth {
                let p = o.dot(&v);
                v.scaled_add(-p, *o);
            }
            let n = v.dot(&v).sqrt();
            if n > 1e-6 {
                return v / n;
            }
        }
    };
    let axis = unit(&mut rng, &[]);
    let side = unit(&mut rng, &[&axis]);
    let shift_dir = (&axis + &side) / 2f64.sqrt();
    // random rotation plane, independent of the class axis
    let p1 = unit(&mut rng, &[]);
    let p2 = unit(&mut rng, &[&p1]);

    let rotate = |v: &Vector| -> Vector {
        let (a, b) = (p1.dot(v), p2.dot(v));
        let (s, c) = ROTATION.sin_cos();
        let mut out = v.clone();
        out.scaled_add(a * (c - 1.0) + b * s, &p1);
        out.scaled_add(-a * s + b * (c - 1.0), &p2);
        out
    };

    let centre = |k: usize| -> Vector { &axis * (SEPARATION * (k as f64 - (classes as f64 - 1.0) / 2.0)) };
    let mut source = Vec::with_capacity(n_per_class * classes);
    let mut target = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for k in 0..classes {
            let noise = Vector::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
            source.push(FeatureVector::source(&centre(k) + &noise, k));
        }
    }
    for _ in 0..n_per_class {
        for k in 0..classes {
            let noise = Vector::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
            let x = rotate(&(&centre(k) + &noise)) + &shift_dir * shift;
            target.push(FeatureVector::target(x, Some(k)));
        }
    }
    // interleave classes in a random but fixed order within each block of `classes`
    for set in [&mut source, &mut target] {
        for block in set.chunks_mut(classes) {
            block.shuffle(&mut rng);
        }
    }
    Ok((source, target))
}

/// Dataset manifest: user id -> CSV path and sample rate, plus the shared schema.
///
/// ```toml
/// channels = ["acc_x", "acc_y", "acc_z", "gyr_x", "gyr_y", "gyr_z"]
/// activity = "activity"
///
/// [users.1]
/// path = "subject101.csv"
/// sample_rate_hz = 100.0
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub schema: CsvSchema,
    #[serde(default = "default_window")]
    pub window_seconds: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    pub users: BTreeMap<String, UserEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_window() -> f64 {
    3.0
}

fn default_overlap() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserEntry {
    pub path: PathBuf,
    pub sample_rate_hz: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Schema {
            path: path.into(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn user(&self, id: &str) -> Result<&UserEntry> {
        self.users.get(id).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown user `{id}`; manifest has {}",
                self.users.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Loads, windows and featurizes one user's recording.
    pub fn user_features(&self, id: &str, domain: Domain) -> Result<Vec<FeatureVector>> {
        let entry = self.user(id)?;
        let path = self.base_dir.join(&entry.path);
        let rows = load_csv(&path, &self.schema)?;
        let windows = make_windows(&rows, self.window_seconds, self.overlap, entry.sample_rate_hz, id)?;
        if windows.iter().any(|w| w.activity_label.is_none()) {
            return Err(Error::Schema {
                path,
                message: "an activity column is required".into(),
            });
        }
        Ok(extract_all(&windows, domain))
    }
}
