//! Feature standardization and K-means.
//!
//! `kmeans` seeds with k-means++ from a ChaCha8 stream and runs Lloyd
//! iterations until the centroids stop moving (or `max_iter`), then tries
//! single-row moves that lower the distortion and reruns Lloyd if any row
//! moved. Centroid sums are accumulated in ascending row order, so a fit is
//! bit-reproducible for a given seed whatever the rayon pool size.
//!
//! `elbow_scan` keeps one chain of runs per restart across increasing k: at
//! each k a chain tries a fresh k-means++ run and a warm start from its own
//! k−1 solution split at the worst-fitting row, and keeps the better. This
//! makes each chain, and hence the best-of-restarts curve, non-increasing in
//! k, while a larger restart count only ever adds candidates.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvio::{self, CsvError, CsvSink};
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("standardization needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("k = {k} exceeds the {distinct} distinct rows")]
    KExceedsDistinctRows { k: usize, distinct: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid k range {k_min}..={k_max}")]
    BadRange { k_min: usize, k_max: usize },
    #[error("invalid parameter: {0}")]
    BadParams(String),
    #[error("cluster id {id} out of range for k = {k}")]
    BadClusterId { id: usize, k: usize },
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-feature z-score parameters. Columns with zero spread are marked
/// constant and pass through unscaled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Standardizer {
    /// A transform that leaves every value unchanged.
    pub fn identity(cols: usize) -> Self {
        Self {
            mean: vec![0.0; cols],
            std: vec![1.0; cols],
            constant: vec![false; cols],
        }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &x)| {
                if self.constant[j] {
                    x
                } else {
                    (x - self.mean[j]) / self.std[j]
                }
            })
            .collect()
    }

    pub fn inverse_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, &z)| {
                if self.constant[j] {
                    z
                } else {
                    z * self.std[j] + self.mean[j]
                }
            })
            .collect()
    }

    pub fn transform(&self, m: &Matrix) -> Matrix {
        let data = m.iter_rows().flat_map(|r| self.transform_row(r)).collect();
        Matrix::new(m.rows(), m.cols(), data)
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        let data = m.iter_rows().flat_map(|r| self.inverse_row(r)).collect();
        Matrix::new(m.rows(), m.cols(), data)
    }
}

/// Fits a population z-score per column and applies it.
pub fn standardize(m: &Matrix) -> Result<(Matrix, Standardizer), ClusterError> {
    if m.rows() < 2 {
        return Err(ClusterError::TooFewRows(m.rows()));
    }
    let n = m.rows() as f64;
    let mut s = Standardizer::identity(m.cols());
    for j in 0..m.cols() {
        let col = m.column(j);
        let origin = col[0];
        let mean = origin + col.iter().map(|x| x - origin).sum::<f64>() / n;
        let std = (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        s.mean[j] = mean;
        s.std[j] = std;
        s.constant[j] = std == 0.0;
    }
    Ok((s.transform(m), s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Largest centroid displacement (Euclidean, scaled units) that counts as
    /// converged.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// A fitted K-means partition in scaled space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster id per matrix row.
    pub assignments: Vec<usize>,
    /// Sum of squared Euclidean distances of rows to their centroids.
    pub distortion: f64,
    pub seed: u64,
    /// Restart chain the model came from (see `elbow_scan`).
    pub restart: usize,
    /// Whether the run started from the k−1 solution rather than k-means++.
    pub warm_start: bool,
    pub iterations: usize,
    pub converged: bool,
    /// Distortion after every assignment step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Nearest-centroid labels for `sm` under this model's centroids.
    pub fn assign(&self, sm: &Matrix) -> Vec<usize> {
        assign(sm, &self.centroids).0
    }
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(sm: &Matrix, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..sm.rows())
        .into_par_iter()
        .map(|i| nearest(sm.row(i), centroids))
        .unzip()
}

/// Gives every empty cluster the row farthest from its current centroid.
fn repair_empty(sm: &Matrix, centroids: &mut [Vec<f64>], labels: &mut [usize], dists: &mut [f64]) -> bool {
    let k = centroids.len();
    let mut repaired = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return repaired;
        };
        let mut pick: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] > 1 && pick.is_none_or(|p| dists[i] > dists[p]) {
                pick = Some(i);
            }
        }
        let i = pick.expect("n >= k guarantees a donor cluster");
        labels[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = sm.row(i).to_vec();
        repaired = true;
    }
}

fn update_centroids(sm: &Matrix, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; sm.cols()]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(sm.row(i)) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

struct LloydFit {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    distortion: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Single-row moves (Hartigan): moves a row whenever doing so lowers the total
/// within-cluster sum of squares, counting the shift of both centroids. Returns
/// whether anything moved. Stable partitions are also Lloyd fixed points, and
/// this escapes many Lloyd optima that are not global.
fn hartigan_moves(sm: &Matrix, labels: &mut [usize], k: usize) -> bool {
    let mut centroids = update_centroids(sm, labels, k);
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut moved = false;
    let mut settled = false;
    while !settled {
        settled = true;
        for (i, x) in sm.iter_rows().enumerate() {
            let from = labels[i];
            if counts[from] < 2 {
                continue;
            }
            let nf = counts[from] as f64;
            let removal = nf / (nf - 1.0) * squared_distance(x, &centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for (to, c) in centroids.iter().enumerate() {
                if to == from {
                    continue;
                }
                let nt = counts[to] as f64;
                let add = nt / (nt + 1.0) * squared_distance(x, c);
                if best.is_none_or(|(_, b)| add < b) {
                    best = Some((to, add));
                }
            }
            // relative margin keeps rounding noise from cycling rows back and forth
            let Some((to, _)) = best.filter(|&(_, add)| add < removal * (1.0 - 1e-12)) else {
                continue;
            };
            let nt = counts[to] as f64;
            for (c, v) in centroids[from].iter_mut().zip(x) {
                *c = (*c * nf - v) / (nf - 1.0);
            }
            for (c, v) in centroids[to].iter_mut().zip(x) {
                *c = (*c * nt + v) / (nt + 1.0);
            }
            counts[from] -= 1;
            counts[to] += 1;
            labels[i] = to;
            moved = true;
            settled = false;
        }
    }
    moved
}

/// Lloyd iterations, then single-row refinement, repeated until neither changes
/// the partition. Shares one iteration budget.
fn lloyd(sm: &Matrix, centroids: Vec<Vec<f64>>, params: &KMeansParams) -> LloydFit {
    let k = centroids.len();
    let mut fit = lloyd_pass(sm, centroids, params);
    while fit.converged && fit.iterations < params.max_iter {
        let mut labels = fit.labels.clone();
        if !hartigan_moves(sm, &mut labels, k) {
            break;
        }
        let budget = KMeansParams {
            max_iter: params.max_iter - fit.iterations,
            ..*params
        };
        let next = lloyd_pass(sm, update_centroids(sm, &labels, k), &budget);
        fit = LloydFit {
            iterations: fit.iterations + next.iterations,
            trace: fit.trace.into_iter().chain(next.trace).collect(),
            ..next
        };
    }
    fit
}

fn lloyd_pass(sm: &Matrix, mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> LloydFit {
    let k = centroids.len();
    let (mut labels, mut dists) = assign(sm, &centroids);
    repair_empty(sm, &mut centroids, &mut labels, &mut dists);
    let mut trace = vec![ordered_sum(&dists)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iter {
        iterations += 1;
        let updated = update_centroids(sm, &labels, k);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;

        let (mut next, mut next_dists) = assign(sm, &centroids);
        let repaired = repair_empty(sm, &mut centroids, &mut next, &mut next_dists);
        let stable = !repaired && next == labels;
        labels = next;
        dists = next_dists;
        trace.push(ordered_sum(&dists));
        if stable || (!repaired && shift <= params.tol) {
            converged = true;
            break;
        }
    }

    LloydFit {
        centroids,
        labels,
        distortion: ordered_sum(&dists),
        iterations,
        converged,
        trace,
    }
}

fn kmeans_pp(sm: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = sm.rows();
    let first = rng.random_range(0..n);
    let mut centroids = vec![sm.row(first).to_vec()];
    let mut d2: Vec<f64> = sm.iter_rows().map(|r| squared_distance(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total = ordered_sum(&d2);
        let target = rng.random::<f64>() * total;
        let mut cum = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 {
                cum += w;
                pick = Some(i);
                if cum > target {
                    break;
                }
            }
        }
        let pick = pick.expect("k <= distinct rows leaves a row off every centroid");
        let c = sm.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(sm.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn check_params(sm: &Matrix, k: usize, params: &KMeansParams) -> Result<(), ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    if params.max_iter == 0 {
        return Err(ClusterError::BadParams("max_iter must be at least 1".into()));
    }
    if params.tol.is_nan() || params.tol < 0.0 {
        return Err(ClusterError::BadParams(format!("tol {} must be >= 0", params.tol)));
    }
    let distinct = sm.distinct_rows();
    if k > distinct {
        return Err(ClusterError::KExceedsDistinctRows { k, distinct });
    }
    Ok(())
}

/// One seeded k-means++ / Lloyd run.
pub fn kmeans(sm: &Matrix, k: usize, seed: u64, params: &KMeansParams) -> Result<ClusterModel, ClusterError> {
    check_params(sm, k, params)?;
    Ok(kmeans_unchecked(sm, k, seed, params))
}

fn kmeans_unchecked(sm: &Matrix, k: usize, seed: u64, params: &KMeansParams) -> ClusterModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_pp(sm, k, &mut rng);
    into_model(lloyd(sm, init, params), k, seed, 0, false)
}

fn into_model(fit: LloydFit, k: usize, seed: u64, restart: usize, warm_start: bool) -> ClusterModel {
    ClusterModel {
        k,
        centroids: fit.centroids,
        assignments: fit.labels,
        distortion: fit.distortion,
        seed,
        restart,
        warm_start,
        iterations: fit.iterations,
        converged: fit.converged,
        trace: fit.trace,
    }
}

/// Lloyd run seeded with `prev`'s centroids plus the row farthest from its
/// assigned centroid.
fn warm_split(sm: &Matrix, prev: &ClusterModel, params: &KMeansParams) -> LloydFit {
    let mut far = (0, -1.0);
    for (i, &l) in prev.assignments.iter().enumerate() {
        let d = squared_distance(sm.row(i), &prev.centroids[l]);
        if d > far.1 {
            far = (i, d);
        }
    }
    let mut init = prev.centroids.clone();
    init.push(sm.row(far.0).to_vec());
    lloyd(sm, init, params)
}

/// Deterministic per-(k, restart) seed derived from the base seed.
pub fn derive_seed(seed: u64, k: usize, restart: usize) -> u64 {
    let mut z =
        seed ^ (k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ (restart as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7);
    // splitmix64 finalizer
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowEntry {
    pub k: usize,
    pub distortion: f64,
    pub iterations: usize,
    /// Best model for this k.
    #[serde(skip)]
    pub model: Option<ClusterModel>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub entries: Vec<ElbowEntry>,
}

impl ElbowCurve {
    pub fn model(&self, k: usize) -> Option<&ClusterModel> {
        self.entries.iter().find(|e| e.k == k).and_then(|e| e.model.as_ref())
    }

    pub fn distortion(&self, k: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.k == k).map(|e| e.distortion)
    }
}

/// Best-of-`restarts` distortion for every k in `k_min..=k_max`.
pub fn elbow_scan(
    sm: &Matrix,
    k_min: usize,
    k_max: usize,
    seed: u64,
    restarts: usize,
    params: &KMeansParams,
) -> Result<ElbowCurve, ClusterError> {
    if k_min == 0 || k_min > k_max {
        return Err(ClusterError::BadRange { k_min, k_max });
    }
    if restarts == 0 {
        return Err(ClusterError::BadParams("restarts must be at least 1".into()));
    }
    check_params(sm, k_max, params)?;

    let chains: Vec<Vec<ClusterModel>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut chain: Vec<ClusterModel> = Vec::with_capacity(k_max - k_min + 1);
            for k in k_min..=k_max {
                let run_seed = derive_seed(seed, k, r);
                let mut fresh = kmeans_unchecked(sm, k, run_seed, params);
                fresh.restart = r;
                let best = match chain.last() {
                    Some(prev) => {
                        let warm = into_model(warm_split(sm, prev, params), k, run_seed, r, true);
                        if warm.distortion < fresh.distortion {
                            warm
                        } else {
                            fresh
                        }
                    }
                    None => fresh,
                };
                chain.push(best);
            }
            chain
        })
        .collect();

    let mut entries = Vec::new();
    for (slot, k) in (k_min..=k_max).enumerate() {
        let best = chains
            .iter()
            .map(|c| &c[slot])
            .reduce(|a, b| if b.distortion < a.distortion { b } else { a })
            .expect("restarts >= 1")
            .clone();
        entries.push(ElbowEntry {
            k,
            distortion: best.distortion,
            iterations: best.iterations,
            model: Some(best),
        });
    }
    Ok(ElbowCurve { entries })
}

/// Best of `restarts` independent k-means++ runs at a single k.
pub fn best_of_restarts(
    sm: &Matrix,
    k: usize,
    seed: u64,
    restarts: usize,
    params: &KMeansParams,
) -> Result<ClusterModel, ClusterError> {
    let curve = elbow_scan(sm, k, k, seed, restarts, params)?;
    Ok(curve
        .entries
        .into_iter()
        .next()
        .and_then(|e| e.model)
        .expect("one entry"))
}

/// Centroid `cluster_id` mapped back to raw feature units.
pub fn centroid_in_raw_units(cm: &ClusterModel, s: &Standardizer, cluster_id: usize) -> Result<Vec<f64>, ClusterError> {
    let c = cm.centroids.get(cluster_id).ok_or(ClusterError::BadClusterId {
        id: cluster_id,
        k: cm.k,
    })?;
    Ok(s.inverse_row(c))
}

pub const ELBOW_HEADER: [&str; 3] = ["k", "distortion", "iterations"];

pub fn write_elbow(path: &Path, curve: &ElbowCurve) -> Result<(), CsvError> {
    let mut sink = CsvSink::create(path, &ELBOW_HEADER)?;
    for e in &curve.entries {
        sink.row([e.k.to_string(), csvio::fmt_f64(e.distortion), e.iterations.to_string()])?;
    }
    sink.finish()
}

pub fn read_elbow(path: &Path) -> Result<ElbowCurve, CsvError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let (kc, dc, ic) = (
        header.require("k")?,
        header.require("distortion")?,
        header.require("iterations")?,
    );
    let mut entries = Vec::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        entries.push(ElbowEntry {
            k: csvio::parse_field(&header, &record, kc, "k")?,
            distortion: csvio::parse_field(&header, &record, dc, "distortion")?,
            iterations: csvio::parse_field(&header, &record, ic, "iterations")?,
            model: None,
        });
    }
    Ok(ElbowCurve { entries })
}

/// Contents of `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDump {
    pub k: usize,
    pub seed: u64,
    pub restart: usize,
    pub warm_start: bool,
    pub scaled_centroids: Vec<Vec<f64>>,
    pub raw_centroids: Vec<Vec<f64>>,
    pub distortion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cluster_sizes: Vec<usize>,
    pub assignments: Vec<usize>,
    pub standardizer: Standardizer,
}

impl ModelDump {
    pub fn new(cm: &ClusterModel, s: &Standardizer) -> Self {
        Self {
            k: cm.k,
            seed: cm.seed,
            restart: cm.restart,
            warm_start: cm.warm_start,
            scaled_centroids: cm.centroids.clone(),
            raw_centroids: cm.centroids.iter().map(|c| s.inverse_row(c)).collect(),
            distortion: cm.distortion,
            iterations: cm.iterations,
            converged: cm.converged,
            cluster_sizes: cm.cluster_sizes(),
            assignments: cm.assignments.clone(),
            standardizer: s.clone(),
        }
    }

    pub fn model(&self) -> ClusterModel {
        ClusterModel {
            k: self.k,
            centroids: self.scaled_centroids.clone(),
            assignments: self.assignments.clone(),
            distortion: self.distortion,
            seed: self.seed,
            restart: self.restart,
            warm_start: self.warm_start,
            iterations: self.iterations,
            converged: self.converged,
            trace: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), ClusterError> {
        let text = crate::report::to_sorted_json(self).map_err(|source| ClusterError::Json {
            path: path.display().to_string(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ClusterError> {
        let text = std::fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| ClusterError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}
