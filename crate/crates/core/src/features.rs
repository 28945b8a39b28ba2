//! The thirteen volatility measures computed per driver.
//!
//! Measures, with `S` the speed series, `A` the signed longitudinal
//! acceleration, `A+` its strictly positive samples and `A-` its strictly
//! negative samples (all statistics population, divide-by-N):
//!
//! | idx | measure                                   |
//! |-----|-------------------------------------------|
//! | 1   | std(S)                                    |
//! | 2   | std(A)                                    |
//! | 3   | 100·std(S)/mean(S)                        |
//! | 4   | 100·std(A+)/mean(A+)                      |
//! | 5   | 100·std(A-)/mean(A-)  (negative)          |
//! | 6   | mean absolute deviation of S              |
//! | 7   | mean absolute deviation of A (or A+)      |
//! | 8   | 100·(Q3−Q1)/(Q3+Q1) of S                  |
//! | 9   | same on A+                                |
//! | 10  | same on A-  (negative)                    |
//! | 11  | % of S at or above mean(S) + 2·DV1        |
//! | 12  | % of A+ at or above mean(A+) + 2·DV2      |
//! | 13  | % of A- at or above mean(A-) + 2·DV2      |
//!
//! A measure whose series has fewer than two samples, or whose denominator is
//! zero, is flagged invalid instead of producing a number.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvio::{self, CsvError, CsvSink};
use crate::ingest::{Recording, TrackSeries};
use crate::matrix::Matrix;

pub const NUM_MEASURES: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dv7Series {
    /// Full signed acceleration series, parallel to DV2.
    #[default]
    Full,
    /// Acceleration events only.
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExceedanceAlpha {
    /// DV12 and DV13 both use DV2 as their dispersion.
    #[default]
    Dv2,
    /// DV12 uses std(A+), DV13 uses std(A-).
    Subseries,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub dv7_series: Dv7Series,
    pub exceedance_alpha: ExceedanceAlpha,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("percentile of an empty sample")]
    EmptySample,
    #[error("percentile fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("no driver has all thirteen measures valid")]
    EmptyMatrix,
    #[error("recording {recording_id}, track {track_id}: DV{measure} is invalid")]
    InvalidRow {
        recording_id: u32,
        track_id: u32,
        measure: usize,
    },
}

/// A driver's speed and acceleration samples, with the acceleration split by
/// sign. Exact zeros belong to neither subseries.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicSeries {
    pub recording_id: u32,
    pub track_id: u32,
    pub speed: Vec<f64>,
    pub acc: Vec<f64>,
    pub acc_pos: Vec<f64>,
    pub acc_neg: Vec<f64>,
}

pub fn split_series(t: &TrackSeries) -> KinematicSeries {
    KinematicSeries {
        recording_id: t.recording_id,
        track_id: t.track_id,
        speed: t.speed.clone(),
        acc: t.lon_acc.clone(),
        acc_pos: t.lon_acc.iter().copied().filter(|&a| a > 0.0).collect(),
        acc_neg: t.lon_acc.iter().copied().filter(|&a| a < 0.0).collect(),
    }
}

/// Linear-interpolation percentile with zero-based rank `(N−1)·p`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, FeatureError> {
    if samples.is_empty() {
        return Err(FeatureError::EmptySample);
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(FeatureError::BadFraction(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(&next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

/// Moments and quartiles of one series, computed on its ascending sort so the
/// result does not depend on sample order.
struct Summary {
    sorted: Vec<f64>,
    mean: f64,
    std: f64,
    mad: f64,
    q1: f64,
    q3: f64,
}

impl Summary {
    fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        // shifting by the minimum makes a constant series come out exact
        let origin = sorted[0];
        let mean = origin + sorted.iter().map(|x| x - origin).sum::<f64>() / n;
        let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let mad = sorted.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
        let q1 = percentile_sorted(&sorted, 0.25);
        let q3 = percentile_sorted(&sorted, 0.75);
        Some(Self {
            sorted,
            mean,
            std: var.sqrt(),
            mad,
            q1,
            q3,
        })
    }

    fn len(&self) -> usize {
        self.sorted.len()
    }

    /// Percentage of samples at or above `mean + 2·alpha`; zero dispersion
    /// counts as no exceedance.
    fn exceedance(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            return 0.0;
        }
        let threshold = self.mean + 2.0 * alpha;
        let below = self.sorted.partition_point(|&x| x < threshold);
        100.0 * (self.len() - below) as f64 / self.len() as f64
    }
}

/// The thirteen measures of one driver. `dv[i]` is 0 whenever `valid[i]` is
/// false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub recording_id: u32,
    pub track_id: u32,
    pub dv: [f64; NUM_MEASURES],
    pub valid: [bool; NUM_MEASURES],
}

impl FeatureVector {
    /// One-based index of the first invalid measure.
    pub fn first_invalid(&self) -> Option<usize> {
        self.valid.iter().position(|v| !v).map(|i| i + 1)
    }

    pub fn is_complete(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn key(&self) -> (u32, u32) {
        (self.recording_id, self.track_id)
    }
}

fn usable(x: &Option<Summary>) -> Option<&Summary> {
    x.as_ref().filter(|x| x.len() >= 2)
}

pub fn compute_volatility(ks: &KinematicSeries, opts: &FeatureOptions) -> FeatureVector {
    let s = Summary::of(&ks.speed);
    let a = Summary::of(&ks.acc);
    let ap = Summary::of(&ks.acc_pos);
    let an = Summary::of(&ks.acc_neg);

    let (s, a, ap, an) = (usable(&s), usable(&a), usable(&ap), usable(&an));

    let cv = |x: Option<&Summary>| x.filter(|x| x.mean != 0.0).map(|x| 100.0 * x.std / x.mean);
    let qcv = |x: Option<&Summary>| {
        x.filter(|x| x.q3 + x.q1 != 0.0)
            .map(|x| 100.0 * (x.q3 - x.q1) / (x.q3 + x.q1))
    };
    let dv2 = a.map(|a| a.std);
    let alpha = |sub: &Summary| match opts.exceedance_alpha {
        ExceedanceAlpha::Dv2 => dv2,
        ExceedanceAlpha::Subseries => Some(sub.std),
    };
    let dv7_source = match opts.dv7_series {
        Dv7Series::Full => a,
        Dv7Series::Positive => ap,
    };

    let measures: [Option<f64>; NUM_MEASURES] = [
        s.map(|s| s.std),
        dv2,
        cv(s),
        cv(ap),
        cv(an),
        s.map(|s| s.mad),
        dv7_source.map(|x| x.mad),
        qcv(s),
        qcv(ap),
        qcv(an),
        s.map(|s| s.exceedance(s.std)),
        ap.and_then(|x| alpha(x).map(|al| x.exceedance(al))),
        an.and_then(|x| alpha(x).map(|al| x.exceedance(al))),
    ];

    let mut fv = FeatureVector {
        recording_id: ks.recording_id,
        track_id: ks.track_id,
        dv: [0.0; NUM_MEASURES],
        valid: [false; NUM_MEASURES],
    };
    for (i, m) in measures.into_iter().enumerate() {
        if let Some(v) = m.filter(|v| v.is_finite()) {
            fv.dv[i] = v;
            fv.valid[i] = true;
        }
    }
    fv
}

/// Feature vectors for every vehicle track of `rec`, in track order. VRU
/// tracks are not drivers and are skipped.
pub fn extract_features(rec: &Recording, opts: &FeatureOptions) -> Vec<FeatureVector> {
    rec.tracks
        .par_iter()
        .filter(|t| !t.class.is_vru())
        .map(|t| compute_volatility(&split_series(t), opts))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixPolicy {
    /// Move incomplete rows to the exclusion list instead of failing.
    pub drop_invalid: bool,
}

impl Default for MatrixPolicy {
    fn default() -> Self {
        Self { drop_invalid: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub recording_id: u32,
    pub track_id: u32,
    /// One-based index of the first invalid measure.
    pub measure: usize,
}

/// Complete feature rows ready for clustering, ordered by
/// (recording id, track id).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<FeatureVector>,
    pub excluded: Vec<Exclusion>,
}

impl FeatureMatrix {
    pub fn to_matrix(&self) -> Matrix {
        let data = self.rows.iter().flat_map(|r| r.dv).collect();
        Matrix::new(self.rows.len(), NUM_MEASURES, data)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn build_matrix(mut fvs: Vec<FeatureVector>, policy: MatrixPolicy) -> Result<FeatureMatrix, FeatureError> {
    fvs.sort_by_key(FeatureVector::key);
    let mut rows = Vec::with_capacity(fvs.len());
    let mut excluded = Vec::new();
    for fv in fvs {
        match fv.first_invalid() {
            None => rows.push(fv),
            Some(measure) if policy.drop_invalid => excluded.push(Exclusion {
                recording_id: fv.recording_id,
                track_id: fv.track_id,
                measure,
            }),
            Some(measure) => {
                return Err(FeatureError::InvalidRow {
                    recording_id: fv.recording_id,
                    track_id: fv.track_id,
                    measure,
                })
            }
        }
    }
    if rows.is_empty() {
        return Err(FeatureError::EmptyMatrix);
    }
    Ok(FeatureMatrix { rows, excluded })
}

pub fn features_header() -> Vec<String> {
    let mut h = vec!["trackId".to_string(), "recordingId".to_string()];
    h.extend((1..=NUM_MEASURES).map(|i| format!("dv{i}")));
    h.extend((1..=NUM_MEASURES).map(|i| format!("valid{i}")));
    h
}

/// Writes `features.csv`; invalid measures are written as empty cells.
pub fn write_features(path: &Path, fvs: &[FeatureVector]) -> Result<(), CsvError> {
    let header = features_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut sink = CsvSink::create(path, &header)?;
    for fv in fvs {
        let mut cells = vec![fv.track_id.to_string(), fv.recording_id.to_string()];
        cells.extend(
            fv.dv
                .iter()
                .zip(&fv.valid)
                .map(|(v, ok)| if *ok { csvio::fmt_f64(*v) } else { String::new() }),
        );
        cells.extend(fv.valid.iter().map(|&ok| if ok { "1" } else { "0" }.to_string()));
        sink.row(cells)?;
    }
    sink.finish()
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureVector>, CsvError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let track_col = header.require("trackId")?;
    let rec_col = header.require("recordingId")?;
    let mut dv_cols = [0usize; NUM_MEASURES];
    let mut valid_cols = [0usize; NUM_MEASURES];
    for i in 0..NUM_MEASURES {
        dv_cols[i] = header.require(&format!("dv{}", i + 1))?;
        valid_cols[i] = header.require(&format!("valid{}", i + 1))?;
    }
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        let mut fv = FeatureVector {
            recording_id: csvio::parse_field(&header, &record, rec_col, "recordingId")?,
            track_id: csvio::parse_field(&header, &record, track_col, "trackId")?,
            dv: [0.0; NUM_MEASURES],
            valid: [false; NUM_MEASURES],
        };
        for i in 0..NUM_MEASURES {
            let flag: u8 = csvio::parse_field(&header, &record, valid_cols[i], &format!("valid{}", i + 1))?;
            fv.valid[i] = flag == 1;
            if fv.valid[i] {
                fv.dv[i] = csvio::parse_field(&header, &record, dv_cols[i], &format!("dv{}", i + 1))?;
            }
        }
        out.push(fv);
    }
    Ok(out)
}
