//! Mapping clusters to driving styles.
//!
//! The automatic map ranks clusters by a volatility score: the mean of the
//! scaled centroid coordinates after flipping the measures whose raw values
//! get more negative as deceleration gets more erratic (DV5, DV10, DV13).
//! Lowest score is conservative, highest is aggressive (k = 3) or normal
//! (k = 2). A manual map read from JSON replaces the ranking entirely.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterModel;
use crate::csvio::{self, CsvError, CsvSink};
use crate::features::{Exclusion, FeatureMatrix, NUM_MEASURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    Conservative,
    Normal,
    Aggressive,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::Conservative, Style::Normal, Style::Aggressive];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Conservative => "conservative",
            Style::Normal => "normal",
            Style::Aggressive => "aggressive",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == lower)
            .ok_or_else(|| LabelError::UnknownStyle(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("automatic style mapping supports k = 2 or 3, got {0}")]
    UnsupportedK(usize),
    #[error("style map does not cover cluster {0}")]
    IncompleteMap(usize),
    #[error("invalid style map: {0}")]
    InvalidMap(String),
    #[error("unknown style `{0}`")]
    UnknownStyle(String),
    #[error("centroids have {found} coordinates, expected {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("model has {model} assignments but the feature matrix has {matrix} rows")]
    RowMismatch { model: usize, matrix: usize },
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

/// +1 where a larger value means more volatile, −1 for DV5, DV10, DV13.
pub const ORIENTATION: [f64; NUM_MEASURES] = [1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0];

pub fn score_clusters(cm: &ClusterModel) -> Result<Vec<f64>, LabelError> {
    cm.centroids
        .iter()
        .map(|c| {
            if c.len() != NUM_MEASURES {
                return Err(LabelError::DimensionMismatch {
                    found: c.len(),
                    expected: NUM_MEASURES,
                });
            }
            Ok(c.iter().zip(ORIENTATION).map(|(x, o)| x * o).sum::<f64>() / NUM_MEASURES as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MapMethod {
    AutoScore,
    Manual,
}

/// Style per cluster id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleMap {
    pub styles: Vec<Style>,
    pub scores: Vec<f64>,
    pub method: MapMethod,
}

impl StyleMap {
    pub fn style_of(&self, cluster: usize) -> Option<Style> {
        self.styles.get(cluster).copied()
    }

    /// Cluster ids ordered conservative → aggressive.
    pub fn clusters_by_style(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.styles.len()).collect();
        ids.sort_by_key(|&c| (self.styles[c], c));
        ids
    }

    pub fn write(&self, path: &Path) -> Result<(), LabelError> {
        let text = crate::report::to_sorted_json(self).map_err(|e| LabelError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| LabelError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabelError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| LabelError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// User-supplied `{clusterId: style}` override.
pub type ManualStyleMap = BTreeMap<usize, Style>;

pub fn read_manual_map(path: &Path) -> Result<ManualStyleMap, LabelError> {
    let text = std::fs::read_to_string(path).map_err(|e| LabelError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let raw: BTreeMap<String, String> = serde_json::from_str(&text).map_err(|e| LabelError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .map(|(k, v)| {
            let id = k
                .trim()
                .parse::<usize>()
                .map_err(|_| LabelError::InvalidMap(format!("cluster id `{k}` is not an integer")))?;
            Ok((id, v.parse()?))
        })
        .collect()
}

fn styles_for(k: usize) -> Option<&'static [Style]> {
    match k {
        2 => Some(&[Style::Conservative, Style::Normal]),
        3 => Some(&Style::ALL),
        _ => None,
    }
}

pub fn assign_styles(
    cm: &ClusterModel,
    scores: &[f64],
    manual: Option<&ManualStyleMap>,
) -> Result<StyleMap, LabelError> {
    let k = cm.k;
    if let Some(manual) = manual {
        return manual_map(k, scores, manual);
    }
    let ladder = styles_for(k).ok_or(LabelError::UnsupportedK(k))?;
    if scores.len() != k {
        return Err(LabelError::InvalidMap(format!("{} scores for k = {k}", scores.len())));
    }

    let sizes = cm.cluster_sizes();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // within a score tie the smaller cluster takes the rank farther from normal
    let normal_rank = 1usize;
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        if end - start > 1 {
            let mut members = order[start..end].to_vec();
            members.sort_by_key(|&c| (sizes[c], c));
            let mut slots: Vec<usize> = (start..end).collect();
            slots.sort_by_key(|&s| (std::cmp::Reverse(s.abs_diff(normal_rank)), s));
            for (c, s) in members.into_iter().zip(slots) {
                order[s] = c;
            }
        }
        start = end;
    }

    let mut styles = vec![Style::Normal; k];
    for (rank, &cluster) in order.iter().enumerate() {
        styles[cluster] = ladder[rank];
    }
    Ok(StyleMap {
        styles,
        scores: scores.to_vec(),
        method: MapMethod::AutoScore,
    })
}

fn manual_map(k: usize, scores: &[f64], manual: &ManualStyleMap) -> Result<StyleMap, LabelError> {
    if let Some(&bad) = manual.keys().find(|&&id| id >= k) {
        return Err(LabelError::InvalidMap(format!(
            "cluster {bad} does not exist for k = {k}"
        )));
    }
    let mut styles = Vec::with_capacity(k);
    for id in 0..k {
        styles.push(*manual.get(&id).ok_or(LabelError::IncompleteMap(id))?);
    }
    let mut seen = styles.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != styles.len() {
        return Err(LabelError::InvalidMap(
            "a style is assigned to more than one cluster".into(),
        ));
    }
    Ok(StyleMap {
        styles,
        scores: scores.to_vec(),
        method: MapMethod::Manual,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverLabel {
    pub recording_id: u32,
    pub track_id: u32,
    pub cluster_id: usize,
    pub style: Style,
}

/// Per-style driver counts, indexed conservative, normal, aggressive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StyleCounts(pub [usize; 3]);

impl StyleCounts {
    pub fn get(&self, style: Style) -> usize {
        self.0[style.index()]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn percent(&self, style: Style) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 100.0 * self.get(style) as f64 / t as f64,
        }
    }

    /// Percentage in hundredths, rounded half away from zero.
    pub fn percent_hundredths(&self, style: Style) -> u64 {
        percent_hundredths(self.get(style), self.total())
    }
}

/// `round_half_away(100·count/total, 2 decimals)` as an integer number of
/// hundredths; 0 for an empty total.
pub fn percent_hundredths(count: usize, total: usize) -> u64 {
    if total == 0 {
        return 0;
    }
    let (count, total) = (count as u128, total as u128);
    ((2 * count * 10_000 + total) / (2 * total)) as u64
}

/// Labels of every clustered driver plus the drivers left out of clustering.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StyleAssignment {
    pub labels: Vec<DriverLabel>,
    pub excluded: Vec<Exclusion>,
}

impl StyleAssignment {
    pub fn counts(&self) -> StyleCounts {
        let mut c = StyleCounts::default();
        for l in &self.labels {
            c.0[l.style.index()] += 1;
        }
        c
    }
}

pub fn label_drivers(cm: &ClusterModel, map: &StyleMap, matrix: &FeatureMatrix) -> Result<StyleAssignment, LabelError> {
    if cm.assignments.len() != matrix.rows.len() {
        return Err(LabelError::RowMismatch {
            model: cm.assignments.len(),
            matrix: matrix.rows.len(),
        });
    }
    if map.styles.len() < cm.k {
        return Err(LabelError::IncompleteMap(map.styles.len()));
    }
    let labels = matrix
        .rows
        .iter()
        .zip(&cm.assignments)
        .map(|(row, &cluster_id)| DriverLabel {
            recording_id: row.recording_id,
            track_id: row.track_id,
            cluster_id,
            style: map.styles[cluster_id],
        })
        .collect();
    Ok(StyleAssignment {
        labels,
        excluded: matrix.excluded.clone(),
    })
}

pub const ASSIGNMENTS_HEADER: [&str; 4] = ["trackId", "recordingId", "clusterId", "style"];

pub fn write_assignments(path: &Path, labels: &[DriverLabel]) -> Result<(), CsvError> {
    let mut sink = CsvSink::create(path, &ASSIGNMENTS_HEADER)?;
    for l in labels {
        sink.row([
            l.track_id.to_string(),
            l.recording_id.to_string(),
            l.cluster_id.to_string(),
            l.style.as_str().to_string(),
        ])?;
    }
    sink.finish()
}

pub fn read_assignments(path: &Path) -> Result<Vec<DriverLabel>, LabelError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let (tc, rc, cc, sc) = (
        header.require("trackId")?,
        header.require("recordingId")?,
        header.require("clusterId")?,
        header.require("style")?,
    );
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        out.push(DriverLabel {
            recording_id: csvio::parse_field(&header, &record, rc, "recordingId")?,
            track_id: csvio::parse_field(&header, &record, tc, "trackId")?,
            cluster_id: csvio::parse_field(&header, &record, cc, "clusterId")?,
            style: csvio::field(&record, sc).parse()?,
        });
    }
    Ok(out)
}
