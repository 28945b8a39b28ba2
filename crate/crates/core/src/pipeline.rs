//! Stage functions over an output directory, and the full pipeline that
//! chains them.
//!
//! Every stage reads what earlier stages wrote into the output directory and
//! writes its own files there, so running the stages one by one gives the same
//! bytes as [`run_pipeline`]. The only in-memory shortcut is the loaded
//! recordings, which `run_pipeline` keeps between stages instead of parsing
//! the inputs three times.
//!
//! | stage    | reads                                   | writes |
//! |----------|-----------------------------------------|--------|
//! | ingest   | inputs                                  | `validation.csv` |
//! | features | inputs, `validation.csv`                | `features.csv` |
//! | cluster  | `features.csv`                          | `elbow.csv`, `k<k>/model.json` |
//! | label    | `features.csv`, `k<k>/model.json`       | `k<k>/styles.json`, `k<k>/assignments.csv` |
//! | interact | inputs, `validation.csv`                | `interactions.csv` |
//! | report   | all of the above                        | `report.json`, `k<k>/centers_*.csv`, `k<k>/distribution.csv` |

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::cluster::{self, ClusterError, ModelDump, Standardizer};
use crate::config::{resolve_inputs, ConfigError, PipelineConfig};
use crate::csvio::CsvError;
use crate::features::{self, FeatureError, FeatureMatrix, FeatureVector, NUM_MEASURES};
use crate::ingest::{self, load_recording, IngestError, Recording, TrackVerdict};
use crate::interact::{self, Calibration, InteractError, InteractionRecord};
use crate::label::{self, LabelError, StyleAssignment, StyleMap};
use crate::matrix::Matrix;
use crate::report::{self, model_dir, ExclusionAudit, InteractionSummary, ModelSummary, ReportError, RunReport};
use crate::synthgen::SynthError;

pub const VALIDATION_FILE: &str = "validation.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const ELBOW_FILE: &str = "elbow.csv";
pub const INTERACTIONS_FILE: &str = "interactions.csv";
pub const MODEL_FILE: &str = "model.json";
pub const STYLES_FILE: &str = "styles.json";
pub const ASSIGNMENTS_FILE: &str = "assignments.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Features,
    Cluster,
    Label,
    Interact,
    Report,
    Synth,
    Calibrate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Features => "features",
            Stage::Cluster => "cluster",
            Stage::Label => "label",
            Stage::Interact => "interact",
            Stage::Report => "report",
            Stage::Synth => "synth",
            Stage::Calibrate => "calibrate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Bad flags or configuration.
    Usage,
    /// Input files missing, unreadable or inconsistent.
    Data,
    /// The numbers cannot support the computation (e.g. nothing to cluster).
    Numeric,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Usage => 1,
            FailureKind::Data => 2,
            FailureKind::Numeric => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: FailureKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Maps a module error onto an exit-code class.
pub trait Classify {
    fn kind(&self) -> FailureKind;
}

impl Classify for ConfigError {
    fn kind(&self) -> FailureKind {
        FailureKind::Usage
    }
}

impl Classify for CsvError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for IngestError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for FeatureError {
    fn kind(&self) -> FailureKind {
        match self {
            FeatureError::EmptyMatrix | FeatureError::EmptySample => FailureKind::Numeric,
            FeatureError::BadFraction(_) => FailureKind::Usage,
            FeatureError::InvalidRow { .. } => FailureKind::Data,
        }
    }
}

impl Classify for ClusterError {
    fn kind(&self) -> FailureKind {
        match self {
            ClusterError::TooFewRows(_) | ClusterError::KExceedsDistinctRows { .. } => FailureKind::Numeric,
            ClusterError::ZeroK | ClusterError::BadRange { .. } | ClusterError::BadParams(_) => FailureKind::Usage,
            ClusterError::BadClusterId { .. }
            | ClusterError::Csv(_)
            | ClusterError::Json { .. }
            | ClusterError::Io { .. } => FailureKind::Data,
        }
    }
}

impl Classify for LabelError {
    fn kind(&self) -> FailureKind {
        match self {
            LabelError::UnsupportedK(_)
            | LabelError::IncompleteMap(_)
            | LabelError::InvalidMap(_)
            | LabelError::UnknownStyle(_) => FailureKind::Usage,
            LabelError::DimensionMismatch { .. }
            | LabelError::RowMismatch { .. }
            | LabelError::Csv(_)
            | LabelError::File { .. } => FailureKind::Data,
        }
    }
}

impl Classify for InteractError {
    fn kind(&self) -> FailureKind {
        match self {
            InteractError::BadRadius(_) | InteractError::BadOverlap | InteractError::BadGrid(_) => FailureKind::Usage,
            InteractError::UnknownTrackId { .. } | InteractError::Csv(_) => FailureKind::Data,
            InteractError::TargetUnreachable { .. } => FailureKind::Numeric,
        }
    }
}

impl Classify for ReportError {
    fn kind(&self) -> FailureKind {
        match self {
            ReportError::Json(_) => FailureKind::Numeric,
            ReportError::IoFailure { .. } | ReportError::Csv(_) => FailureKind::Data,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> FailureKind {
        match self {
            SynthError::BadProfile(_) | SynthError::BadConfig(_) => FailureKind::Usage,
            SynthError::Ingest(_) | SynthError::Csv(_) | SynthError::Label(_) => FailureKind::Data,
        }
    }
}

/// Attaches a stage to any module error.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Classify + fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e.kind(), e))
    }
}

fn io_error(stage: Stage, path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::new(stage, FailureKind::Data, format!("{}: {e}", path.display()))
}

/// Files a stage has created, removed again if the stage fails.
#[derive(Debug, Default)]
struct Written(Vec<PathBuf>);

impl Written {
    fn add(&mut self, path: PathBuf) -> PathBuf {
        self.0.push(path.clone());
        path
    }

    fn remove_all(&self) {
        for p in self.0.iter().rev() {
            let _ = std::fs::remove_file(p);
            if let Some(dir) = p.parent() {
                // only succeeds when the stage left the directory empty
                let _ = std::fs::remove_dir(dir);
            }
        }
    }
}

/// Accepted recordings carried between stages of one run.
#[derive(Debug, Default)]
pub struct Cache {
    recordings: Option<Vec<Recording>>,
}

fn load_all(cfg: &PipelineConfig) -> Result<Vec<Recording>, PipelineError> {
    let paths = resolve_inputs(&cfg.inputs).at(Stage::Ingest)?;
    paths
        .par_iter()
        .map(load_recording)
        .collect::<Result<Vec<_>, _>>()
        .at(Stage::Ingest)
}

/// Accepted recordings: from the cache, or re-loaded and filtered by
/// `validation.csv`.
fn accepted_recordings<'c>(
    cfg: &PipelineConfig,
    out: &Path,
    cache: &'c mut Cache,
    stage: Stage,
) -> Result<&'c [Recording], PipelineError> {
    if cache.recordings.is_none() {
        let path = out.join(VALIDATION_FILE);
        if !path.is_file() {
            return Err(PipelineError::new(
                stage,
                FailureKind::Data,
                format!("{} not found; run the ingest stage first", path.display()),
            ));
        }
        let verdicts = ingest::read_verdicts(&path).at(stage)?;
        let keep: BTreeSet<(u32, u32)> = verdicts
            .iter()
            .filter(|v| v.verdict.is_accepted())
            .map(|v| (v.recording_id, v.track_id))
            .collect();
        let mut recs = load_all(cfg)?;
        for r in &mut recs {
            r.tracks.retain(|t| keep.contains(&(t.recording_id, t.track_id)));
        }
        cache.recordings = Some(recs);
    }
    Ok(cache.recordings.as_deref().unwrap_or_default())
}

fn stage_ingest(cfg: &PipelineConfig, out: &Path, cache: &mut Cache, w: &mut Written) -> Result<String, PipelineError> {
    let recs = load_all(cfg)?;
    let mut verdicts: Vec<TrackVerdict> = Vec::new();
    let mut accepted = Vec::with_capacity(recs.len());
    for r in &recs {
        let (kept, v) = r.accepted(&cfg.validation);
        verdicts.extend(v);
        accepted.push(kept);
    }
    verdicts.sort_by_key(|v| (v.recording_id, v.track_id));
    ingest::write_verdicts(&w.add(out.join(VALIDATION_FILE)), &verdicts).at(Stage::Ingest)?;
    let n_accepted = verdicts.iter().filter(|v| v.verdict.is_accepted()).count();
    cache.recordings = Some(accepted);
    Ok(format!(
        "{} recordings, {} tracks, {} accepted",
        recs.len(),
        verdicts.len(),
        n_accepted
    ))
}

fn stage_features(
    cfg: &PipelineConfig,
    out: &Path,
    cache: &mut Cache,
    w: &mut Written,
) -> Result<String, PipelineError> {
    let opts = cfg.features.options();
    let recs = accepted_recordings(cfg, out, cache, Stage::Features)?;
    let mut fvs: Vec<FeatureVector> = recs.iter().flat_map(|r| features::extract_features(r, &opts)).collect();
    fvs.sort_by_key(FeatureVector::key);
    features::write_features(&w.add(out.join(FEATURES_FILE)), &fvs).at(Stage::Features)?;
    let complete = fvs.iter().filter(|f| f.is_complete()).count();
    Ok(format!(
        "{} drivers, {} with all {NUM_MEASURES} measures",
        fvs.len(),
        complete
    ))
}

fn read_matrix(cfg: &PipelineConfig, out: &Path, stage: Stage) -> Result<FeatureMatrix, PipelineError> {
    let path = out.join(FEATURES_FILE);
    if !path.is_file() {
        return Err(PipelineError::new(
            stage,
            FailureKind::Data,
            format!("{} not found; run the features stage first", path.display()),
        ));
    }
    let fvs = features::read_features(&path).at(stage)?;
    features::build_matrix(fvs, cfg.features.policy()).at(stage)
}

fn scaled(cfg: &PipelineConfig, m: &Matrix) -> Result<(Matrix, Standardizer), ClusterError> {
    if cfg.cluster.scaling {
        cluster::standardize(m)
    } else {
        Ok((m.clone(), Standardizer::identity(m.cols())))
    }
}

fn stage_cluster(cfg: &PipelineConfig, out: &Path, w: &mut Written) -> Result<String, PipelineError> {
    let s = Stage::Cluster;
    let fm = read_matrix(cfg, out, s)?;
    let (sm, standardizer) = scaled(cfg, &fm.to_matrix()).at(s)?;
    let ks = cfg.k_list();
    let distinct = sm.distinct_rows();
    let k_top = *ks.last().expect("k list checked non-empty");
    if k_top > distinct {
        return Err(ClusterError::KExceedsDistinctRows { k: k_top, distinct }).at(s);
    }
    let lo = cfg.cluster.elbow_k_min.min(ks[0]);
    let hi = cfg.cluster.elbow_k_max.max(k_top).min(distinct);
    let curve = cluster::elbow_scan(
        &sm,
        lo,
        hi,
        cfg.cluster.seed,
        cfg.cluster.restarts,
        &cfg.cluster.params(),
    )
    .at(s)?;
    cluster::write_elbow(&w.add(out.join(ELBOW_FILE)), &curve).at(s)?;
    for &k in &ks {
        let model = curve.model(k).expect("elbow range covers every requested k");
        let dir = model_dir(out, k);
        std::fs::create_dir_all(&dir).map_err(|e| io_error(s, &dir, e))?;
        ModelDump::new(model, &standardizer)
            .write(&w.add(dir.join(MODEL_FILE)))
            .at(s)?;
    }
    Ok(format!(
        "{} drivers clustered for k = {:?}, elbow over {lo}..={hi}",
        fm.len(),
        ks
    ))
}

fn read_model(out: &Path, k: usize, stage: Stage) -> Result<ModelDump, PipelineError> {
    let path = model_dir(out, k).join(MODEL_FILE);
    if !path.is_file() {
        return Err(PipelineError::new(
            stage,
            FailureKind::Data,
            format!("{} not found; run the cluster stage first", path.display()),
        ));
    }
    let dump = ModelDump::read(&path).at(stage)?;
    if dump.k != k {
        return Err(PipelineError::new(
            stage,
            FailureKind::Data,
            format!("{} holds a k = {} model", path.display(), dump.k),
        ));
    }
    Ok(dump)
}

fn stage_label(cfg: &PipelineConfig, out: &Path, w: &mut Written) -> Result<String, PipelineError> {
    let s = Stage::Label;
    let fm = read_matrix(cfg, out, s)?;
    let manual = match &cfg.label.style_map {
        Some(p) => Some(label::read_manual_map(p).at(s)?),
        None => None,
    };
    let mut parts = Vec::new();
    for k in cfg.k_list() {
        let cm = read_model(out, k, s)?.model();
        let scores = label::score_clusters(&cm).at(s)?;
        // a manual map covers the k with as many clusters as it has entries
        let map = label::assign_styles(&cm, &scores, manual.as_ref().filter(|m| m.len() == k)).at(s)?;
        let sa = label::label_drivers(&cm, &map, &fm).at(s)?;
        let dir = model_dir(out, k);
        map.write(&w.add(dir.join(STYLES_FILE))).at(s)?;
        label::write_assignments(&w.add(dir.join(ASSIGNMENTS_FILE)), &sa.labels).at(s)?;
        let c = sa.counts();
        parts.push(format!("k = {k}: {}/{}/{}", c.0[0], c.0[1], c.0[2]));
    }
    Ok(format!("conservative/normal/aggressive {}", parts.join(", ")))
}

fn stage_interact(
    cfg: &PipelineConfig,
    out: &Path,
    cache: &mut Cache,
    w: &mut Written,
) -> Result<String, PipelineError> {
    let s = Stage::Interact;
    cfg.interaction.check().at(s)?;
    let params = cfg.interaction;
    let recs = accepted_recordings(cfg, out, cache, s)?;
    let per_rec: Vec<Vec<InteractionRecord>> = recs
        .par_iter()
        .map(|r| interact::find_interactions(r, &params))
        .collect::<Result<_, _>>()
        .at(s)?;
    let mut records: Vec<InteractionRecord> = per_rec.into_iter().flatten().collect();
    records.sort_by_key(|r| (r.recording_id, r.vehicle_track_id, r.vru_track_id));
    interact::write_interactions(&w.add(out.join(INTERACTIONS_FILE)), &records).at(s)?;
    Ok(format!(
        "{} vehicle-VRU pairs, {} interacting drivers at {} m",
        records.len(),
        interact::interacting_drivers(&records).len(),
        params.radius
    ))
}

/// Builds the run report from the files of the earlier stages.
pub fn build_report(cfg: &PipelineConfig, out: &Path) -> Result<RunReport, PipelineError> {
    let s = Stage::Report;
    let need = |name: &str, producer: &str| -> Result<PathBuf, PipelineError> {
        let p = out.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::new(
                s,
                FailureKind::Data,
                format!("{} not found; run the {producer} stage first", p.display()),
            ))
        }
    };
    let verdicts = ingest::read_verdicts(&need(VALIDATION_FILE, "ingest")?).at(s)?;
    let fm = read_matrix(cfg, out, s)?;
    let elbow = cluster::read_elbow(&need(ELBOW_FILE, "cluster")?).at(s)?;
    let records = interact::read_interactions(&need(INTERACTIONS_FILE, "interact")?).at(s)?;

    let mut models = Vec::new();
    for k in cfg.k_list() {
        let dump = read_model(out, k, s)?;
        let dir = model_dir(out, k);
        let styles_path = dir.join(STYLES_FILE);
        let assignments_path = dir.join(ASSIGNMENTS_FILE);
        if !styles_path.is_file() || !assignments_path.is_file() {
            return Err(PipelineError::new(
                s,
                FailureKind::Data,
                format!(
                    "labels for k = {k} not found in {}; run the label stage first",
                    dir.display()
                ),
            ));
        }
        let map = StyleMap::read(&styles_path).at(s)?;
        let mut labels = label::read_assignments(&assignments_path).at(s)?;
        labels.sort_by_key(|l| (l.recording_id, l.track_id));
        let sa = StyleAssignment {
            labels,
            excluded: fm.excluded.clone(),
        };
        let partition = interact::partition_drivers(&sa, &records).at(s)?;
        models.push(ModelSummary::new(&dump, &map, &partition));
    }

    Ok(RunReport {
        config: cfg.echo(),
        elbow: RunReport::elbow_points(&elbow),
        models,
        interactions: InteractionSummary::new(&records),
        exclusions: ExclusionAudit::new(&verdicts, &fm.excluded),
    })
}

fn stage_report(cfg: &PipelineConfig, out: &Path, w: &mut Written) -> Result<String, PipelineError> {
    let report = build_report(cfg, out)?;
    let files = report::emit(&report, out, &cfg.formats).at(Stage::Report)?;
    let n = files.len();
    for f in files {
        w.add(f);
    }
    Ok(format!("{n} report files"))
}

fn run_one(
    stage: Stage,
    cfg: &PipelineConfig,
    out: &Path,
    cache: &mut Cache,
    w: &mut Written,
) -> Result<String, PipelineError> {
    match stage {
        Stage::Ingest => stage_ingest(cfg, out, cache, w),
        Stage::Features => stage_features(cfg, out, cache, w),
        Stage::Cluster => stage_cluster(cfg, out, w),
        Stage::Label => stage_label(cfg, out, w),
        Stage::Interact => stage_interact(cfg, out, cache, w),
        Stage::Report => stage_report(cfg, out, w),
        Stage::Config | Stage::Synth | Stage::Calibrate => {
            Err(PipelineError::new(stage, FailureKind::Usage, "not a pipeline stage"))
        }
    }
}

pub const PIPELINE_STAGES: [Stage; 6] = [
    Stage::Ingest,
    Stage::Features,
    Stage::Cluster,
    Stage::Label,
    Stage::Interact,
    Stage::Report,
];

fn check_config(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    cfg.check().at(Stage::Config)
}

/// Runs one stage against `cfg.output_dir`. Files the stage wrote are
/// removed again if it fails. Returns a one-line summary.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<String, PipelineError> {
    check_config(cfg)?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| io_error(stage, out, e))?;
    let mut w = Written::default();
    let result = run_one(stage, cfg, out, &mut Cache::default(), &mut w);
    if result.is_err() {
        w.remove_all();
    }
    result
}

/// Runs every stage in a scratch directory next to `cfg.output_dir` and moves
/// the results into place only when all of them succeed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<(Stage, String)>, PipelineError> {
    check_config(cfg)?;
    let out = &cfg.output_dir;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    std::fs::create_dir_all(&parent).map_err(|e| io_error(Stage::Config, &parent, e))?;
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    std::fs::create_dir_all(&staging).map_err(|e| io_error(Stage::Config, &staging, e))?;

    let mut cache = Cache::default();
    let mut summaries = Vec::new();
    for stage in PIPELINE_STAGES {
        let mut w = Written::default();
        match run_one(stage, cfg, &staging, &mut cache, &mut w) {
            Ok(msg) => summaries.push((stage, msg)),
            Err(e) => {
                let _ = std::fs::remove_dir_all(&staging);
                return Err(e);
            }
        }
    }

    let publish = || -> std::io::Result<()> {
        std::fs::create_dir_all(out)?;
        let mut entries: Vec<_> = std::fs::read_dir(&staging)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let target = out.join(entry.file_name());
            if target.is_dir() {
                std::fs::remove_dir_all(&target)?;
            } else if target.exists() {
                std::fs::remove_file(&target)?;
            }
            std::fs::rename(entry.path(), &target)?;
        }
        std::fs::remove_dir(&staging)
    };
    if let Err(e) = publish() {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(io_error(Stage::Report, out, e));
    }
    Ok(summaries)
}

/// Smallest calibration-grid radius at which at least `target` drivers
/// interact. Drivers are the complete rows of `features.csv` when it exists
/// in the output directory, otherwise every accepted vehicle.
pub fn calibrate(cfg: &PipelineConfig, target: usize) -> Result<Calibration, PipelineError> {
    let s = Stage::Calibrate;
    check_config(cfg)?;
    let out = &cfg.output_dir;
    let recs: Vec<Recording> = if out.join(VALIDATION_FILE).is_file() {
        accepted_recordings(cfg, out, &mut Cache::default(), s)?.to_vec()
    } else {
        load_all(cfg)?.iter().map(|r| r.accepted(&cfg.validation).0).collect()
    };
    let eligible: BTreeSet<(u32, u32)> = if out.join(FEATURES_FILE).is_file() {
        read_matrix(cfg, out, s)?.rows.iter().map(FeatureVector::key).collect()
    } else {
        recs.iter()
            .flat_map(|r| r.tracks.iter())
            .filter(|t| !t.class.is_vru())
            .map(|t| (t.recording_id, t.track_id))
            .collect()
    };
    interact::calibrate(
        &recs,
        &eligible,
        target,
        cfg.interaction.min_overlap_frames,
        &cfg.calibration.grid(),
    )
    .at(s)
}
