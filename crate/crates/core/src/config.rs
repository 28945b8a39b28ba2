//! Pipeline configuration: a TOML file whose every key has a default.
//!
//! ```toml
//! inputs = ["data/rounD/*_tracks.csv"]
//! output_dir = "out"
//!
//! [cluster]
//! k = [2, 3]
//! seed = 7
//!
//! [interaction]
//! radius = 12.5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::KMeansParams;
use crate::features::{Dv7Series, ExceedanceAlpha, FeatureOptions, MatrixPolicy};
use crate::ingest::{discover_recordings, IngestError, RecordingPaths, ValidationParams};
use crate::interact::{CalibrationGrid, InteractionParams};
use crate::report::Format;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub dv7_series: Dv7Series,
    pub exceedance_alpha: ExceedanceAlpha,
    /// Drop drivers with an undefined measure instead of failing.
    pub drop_invalid: bool,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            dv7_series: Dv7Series::default(),
            exceedance_alpha: ExceedanceAlpha::default(),
            drop_invalid: true,
        }
    }
}

impl FeatureSection {
    pub fn options(&self) -> FeatureOptions {
        FeatureOptions {
            dv7_series: self.dv7_series,
            exceedance_alpha: self.exceedance_alpha,
        }
    }

    pub fn policy(&self) -> MatrixPolicy {
        MatrixPolicy {
            drop_invalid: self.drop_invalid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Cluster counts to fit, label and report.
    pub k: Vec<usize>,
    /// z-score the features before clustering.
    pub scaling: bool,
    pub elbow_k_min: usize,
    /// Clamped to the number of distinct feature rows.
    pub elbow_k_max: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let p = KMeansParams::default();
        Self {
            k: vec![2, 3],
            scaling: true,
            elbow_k_min: 1,
            elbow_k_max: 8,
            seed: 42,
            restarts: 16,
            max_iter: p.max_iter,
            tol: p.tol,
        }
    }
}

impl ClusterSection {
    pub fn params(&self) -> KMeansParams {
        KMeansParams {
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    /// JSON `{"<cluster id>": "<style>"}` used instead of the volatility-score
    /// ranking for the k equal to its entry count. Other k keep the ranking.
    pub style_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub step: f64,
    pub max_radius: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let g = CalibrationGrid::default();
        Self {
            step: g.step,
            max_radius: g.max_radius,
        }
    }
}

impl CalibrationSection {
    pub fn grid(&self) -> CalibrationGrid {
        CalibrationGrid {
            step: self.step,
            max_radius: self.max_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directories, `*_tracks.csv` files or glob patterns over either.
    pub inputs: Vec<String>,
    pub output_dir: PathBuf,
    pub formats: Vec<Format>,
    /// Worker cap; results do not depend on it, so it is not echoed.
    #[serde(skip)]
    pub threads: Option<usize>,
    pub validation: ValidationParams,
    pub features: FeatureSection,
    pub cluster: ClusterSection,
    pub label: LabelSection,
    pub interaction: InteractionParams,
    pub calibration: CalibrationSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            output_dir: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json],
            threads: None,
            validation: ValidationParams::default(),
            features: FeatureSection::default(),
            cluster: ClusterSection::default(),
            label: LabelSection::default(),
            interaction: InteractionParams::default(),
            calibration: CalibrationSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_path_buf(),
            source,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// The effective configuration as written into `report.json`.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Range checks that do not touch the filesystem.
    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let c = &self.cluster;
        if c.k.is_empty() {
            return bad("cluster.k must list at least one cluster count".into());
        }
        if c.k.contains(&0) {
            return bad("cluster.k entries must be at least 1".into());
        }
        if c.elbow_k_min == 0 || c.elbow_k_min > c.elbow_k_max {
            return bad(format!(
                "elbow range {}..={} is empty or starts at 0",
                c.elbow_k_min, c.elbow_k_max
            ));
        }
        if c.restarts == 0 || c.max_iter == 0 {
            return bad("cluster.restarts and cluster.max_iter must be at least 1".into());
        }
        if !(c.tol.is_finite() && c.tol >= 0.0) {
            return bad(format!("cluster.tol {} must be finite and non-negative", c.tol));
        }
        if !(self.interaction.radius.is_finite() && self.interaction.radius > 0.0) {
            return bad(format!(
                "interaction.radius {} must be positive",
                self.interaction.radius
            ));
        }
        if self.interaction.min_overlap_frames == 0 {
            return bad("interaction.min_overlap_frames must be at least 1".into());
        }
        let g = &self.calibration;
        if !(g.step.is_finite() && g.step > 0.0 && g.max_radius.is_finite() && g.max_radius >= g.step) {
            return bad(format!("calibration grid step {} / max {}", g.step, g.max_radius));
        }
        if !(self.validation.min_mean_speed.is_finite() && self.validation.min_mean_speed >= 0.0) {
            return bad("validation.min_mean_speed must be finite and non-negative".into());
        }
        if self.formats.is_empty() {
            return bad("formats must name at least one of csv, json".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if let Some(p) = &self.label.style_map {
            if !p.is_file() {
                return bad(format!("style map {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Cluster counts to fit, sorted and de-duplicated.
    pub fn k_list(&self) -> Vec<usize> {
        let mut k = self.cluster.k.clone();
        k.sort_unstable();
        k.dedup();
        k
    }
}

/// Expands `inputs` into recordings, sorted and de-duplicated. A pattern
/// that matches nothing is an error, as is a path that does not exist.
pub fn resolve_inputs(inputs: &[String]) -> Result<Vec<RecordingPaths>, IngestError> {
    let missing = |what: &str, detail: &str| {
        IngestError::Csv(crate::csvio::CsvError::Io {
            path: PathBuf::from(what),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, detail.to_string()),
        })
    };
    if inputs.is_empty() {
        return Err(missing("<inputs>", "no input recordings configured"));
    }
    let mut found = Vec::new();
    for entry in inputs {
        if entry.contains(['*', '?', '[']) {
            let paths = glob::glob(entry).map_err(|e| missing(entry, &e.to_string()))?;
            let mut any = false;
            for p in paths {
                let p = p.map_err(|e| missing(entry, &e.to_string()))?;
                found.extend(discover_recordings(&p)?);
                any = true;
            }
            if !any {
                return Err(missing(entry, "pattern matches no files"));
            }
        } else {
            found.extend(discover_recordings(Path::new(entry))?);
        }
    }
    found.sort();
    found.dedup();
    if found.is_empty() {
        return Err(missing(&inputs.join(", "), "no `*_tracks.csv` recordings found"));
    }
    Ok(found)
}
