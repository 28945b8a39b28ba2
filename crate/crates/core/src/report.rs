//! Run summary and the two published table layouts: cluster centres per
//! style (scaled and raw units) and the style distribution for all drivers,
//! drivers without interaction and drivers with interaction.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ElbowCurve, ModelDump, Standardizer};
use crate::csvio::{self, CsvError, CsvSink};
use crate::features::{Exclusion, NUM_MEASURES};
use crate::ingest::{TrackVerdict, ValidationVerdict};
use crate::interact::{InteractionRecord, Partition};
use crate::label::{percent_hundredths, Style, StyleCounts, StyleMap};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pretty JSON with object keys in lexicographic order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    // serde_json::Value keeps keys in a BTreeMap, which sorts them
    let v = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    Ok(text)
}

/// `51.58` style rendering of a percentage held in hundredths.
pub fn format_hundredths(h: u64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Scaled,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterColumn {
    pub cluster_id: usize,
    pub style: Style,
    /// e.g. `cluster_1_conservative`; numbered in style order.
    pub header: String,
    /// One value per measure, DV1 first.
    pub values: Vec<f64>,
    pub sample_size: usize,
}

/// Cluster centres, one column per cluster, ordered conservative first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentersTable {
    pub units: Units,
    pub columns: Vec<CenterColumn>,
}

impl CentersTable {
    pub fn header(&self) -> Vec<String> {
        std::iter::once("measure".to_string())
            .chain(self.columns.iter().map(|c| c.header.clone()))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CsvError> {
        let header = self.header();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let mut sink = CsvSink::create(path, &header)?;
        for m in 0..NUM_MEASURES {
            sink.row(
                std::iter::once(format!("dv{}", m + 1)).chain(self.columns.iter().map(|c| csvio::fmt_f64(c.values[m]))),
            )?;
        }
        sink.row(
            std::iter::once("sample_size".to_string()).chain(self.columns.iter().map(|c| c.sample_size.to_string())),
        )?;
        sink.finish()
    }
}

pub fn render_centers_table(
    model: &ModelDump,
    standardizer: &Standardizer,
    map: &StyleMap,
    units: Units,
) -> CentersTable {
    let sizes = &model.cluster_sizes;
    let columns = map
        .clusters_by_style()
        .into_iter()
        .enumerate()
        .map(|(pos, id)| {
            let scaled = &model.scaled_centroids[id];
            let values = match units {
                Units::Scaled => scaled.clone(),
                Units::Raw => standardizer.inverse_row(scaled),
            };
            CenterColumn {
                cluster_id: id,
                style: map.styles[id],
                header: format!("cluster_{}_{}", pos + 1, map.styles[id].as_str()),
                values,
                sample_size: sizes[id],
            }
        })
        .collect();
    CentersTable { units, columns }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionCell {
    pub count: usize,
    /// Hundredths of a percent, rounded half away from zero.
    pub percent_hundredths: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionRow {
    /// A style name or `total`.
    pub label: String,
    pub all: DistributionCell,
    pub no_interaction: DistributionCell,
    pub interaction: DistributionCell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub rows: Vec<DistributionRow>,
}

pub const DISTRIBUTION_HEADER: [&str; 7] = [
    "style",
    "all_count",
    "all_percent",
    "no_interaction_count",
    "no_interaction_percent",
    "interaction_count",
    "interaction_percent",
];

impl DistributionTable {
    pub fn write_csv(&self, path: &Path) -> Result<(), CsvError> {
        let mut sink = CsvSink::create(path, &DISTRIBUTION_HEADER)?;
        for r in &self.rows {
            let mut cells = vec![r.label.clone()];
            for c in [r.all, r.no_interaction, r.interaction] {
                cells.push(c.count.to_string());
                cells.push(format_hundredths(c.percent_hundredths));
            }
            sink.row(cells)?;
        }
        sink.finish()
    }
}

pub fn render_distribution_table(
    all: &StyleCounts,
    no_interaction: &StyleCounts,
    interaction: &StyleCounts,
) -> DistributionTable {
    let cell = |c: &StyleCounts, count: usize| DistributionCell {
        count,
        percent_hundredths: percent_hundredths(count, c.total()),
    };
    let mut rows: Vec<DistributionRow> = Style::ALL
        .iter()
        .map(|&s| DistributionRow {
            label: s.as_str().to_string(),
            all: cell(all, all.get(s)),
            no_interaction: cell(no_interaction, no_interaction.get(s)),
            interaction: cell(interaction, interaction.get(s)),
        })
        .collect();
    rows.push(DistributionRow {
        label: "total".into(),
        all: cell(all, all.total()),
        no_interaction: cell(no_interaction, no_interaction.total()),
        interaction: cell(interaction, interaction.total()),
    });
    DistributionTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub k: usize,
    pub seed: u64,
    pub restart: usize,
    pub warm_start: bool,
    pub distortion: f64,
    pub iterations: usize,
    pub converged: bool,
    pub cluster_sizes: Vec<usize>,
    pub style_map: StyleMap,
    pub centers_scaled: CentersTable,
    pub centers_raw: CentersTable,
    pub distribution: DistributionTable,
}

impl ModelSummary {
    pub fn new(model: &ModelDump, map: &StyleMap, partition: &Partition) -> Self {
        let (inside, outside) = partition.counts();
        let mut all = inside;
        for (a, b) in all.0.iter_mut().zip(outside.0) {
            *a += b;
        }
        Self {
            k: model.k,
            seed: model.seed,
            restart: model.restart,
            warm_start: model.warm_start,
            distortion: model.distortion,
            iterations: model.iterations,
            converged: model.converged,
            cluster_sizes: model.cluster_sizes.clone(),
            style_map: map.clone(),
            centers_scaled: render_centers_table(model, &model.standardizer, map, Units::Scaled),
            centers_raw: render_centers_table(model, &model.standardizer, map, Units::Raw),
            distribution: render_distribution_table(&all, &outside, &inside),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub distortion: f64,
    pub iterations: usize,
}

/// Which tracks were dropped before clustering, and why.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExclusionAudit {
    pub tracks_total: usize,
    pub tracks_accepted: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub vehicles_accepted: usize,
    pub vrus_accepted: usize,
    pub feature_exclusions: Vec<Exclusion>,
    /// Keyed `dv<n>` by the first invalid measure.
    pub feature_exclusions_by_measure: BTreeMap<String, usize>,
}

impl ExclusionAudit {
    pub fn new(verdicts: &[TrackVerdict], feature_exclusions: &[Exclusion]) -> Self {
        let mut audit = ExclusionAudit {
            tracks_total: verdicts.len(),
            feature_exclusions: feature_exclusions.to_vec(),
            ..Default::default()
        };
        for v in verdicts {
            match v.verdict {
                ValidationVerdict::Accepted => {
                    audit.tracks_accepted += 1;
                    if v.class.is_vru() {
                        audit.vrus_accepted += 1;
                    } else {
                        audit.vehicles_accepted += 1;
                    }
                }
                ValidationVerdict::Rejected(r) => {
                    *audit.rejected_by_reason.entry(r.as_str().to_string()).or_default() += 1;
                }
            }
        }
        for e in feature_exclusions {
            *audit
                .feature_exclusions_by_measure
                .entry(format!("dv{}", e.measure))
                .or_default() += 1;
        }
        audit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSummary {
    pub pairs: usize,
    pub interacting_drivers: usize,
}

impl InteractionSummary {
    pub fn new(records: &[InteractionRecord]) -> Self {
        Self {
            pairs: records.len(),
            interacting_drivers: crate::interact::interacting_drivers(records).len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Effective configuration, defaults included.
    pub config: serde_json::Value,
    pub elbow: Vec<ElbowPoint>,
    pub models: Vec<ModelSummary>,
    pub interactions: InteractionSummary,
    pub exclusions: ExclusionAudit,
}

impl RunReport {
    pub fn elbow_points(curve: &ElbowCurve) -> Vec<ElbowPoint> {
        curve
            .entries
            .iter()
            .map(|e| ElbowPoint {
                k: e.k,
                distortion: e.distortion,
                iterations: e.iterations,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

pub fn model_dir(out_dir: &Path, k: usize) -> PathBuf {
    out_dir.join(format!("k{k}"))
}

fn io_failure(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_failure(e: CsvError) -> ReportError {
    match e {
        CsvError::Io { path, source } => ReportError::IoFailure { path, source },
        other => ReportError::Csv(other),
    }
}

/// Writes `report.json` and, per model, `k<k>/centers_scaled.csv`,
/// `k<k>/centers_raw.csv` and `k<k>/distribution.csv`, plus `elbow.csv`.
/// Returns the paths written, in write order.
pub fn emit(report: &RunReport, out_dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, ReportError> {
    std::fs::create_dir_all(out_dir).map_err(io_failure(out_dir))?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        let path = out_dir.join("elbow.csv");
        let mut sink = CsvSink::create(&path, &crate::cluster::ELBOW_HEADER).map_err(csv_failure)?;
        for p in &report.elbow {
            sink.row([p.k.to_string(), csvio::fmt_f64(p.distortion), p.iterations.to_string()])
                .map_err(csv_failure)?;
        }
        sink.finish().map_err(csv_failure)?;
        written.push(path);

        for m in &report.models {
            let dir = model_dir(out_dir, m.k);
            std::fs::create_dir_all(&dir).map_err(io_failure(&dir))?;
            for (name, table) in [
                ("centers_scaled.csv", &m.centers_scaled),
                ("centers_raw.csv", &m.centers_raw),
            ] {
                let path = dir.join(name);
                table.write_csv(&path).map_err(csv_failure)?;
                written.push(path);
            }
            let path = dir.join("distribution.csv");
            m.distribution.write_csv(&path).map_err(csv_failure)?;
            written.push(path);
        }
    }
    if formats.contains(&Format::Json) {
        let path = out_dir.join("report.json");
        std::fs::write(&path, to_sorted_json(report)?).map_err(io_failure(&path))?;
        written.push(path);
    }
    Ok(written)
}
