//! Reading rounD-style recordings (`<id>_recordingMeta.csv`,
//! `<id>_tracksMeta.csv`, `<id>_tracks.csv`) into per-track kinematic series,
//! and the validation gate that decides which tracks reach feature extraction.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvio::{self, CsvError, CsvSink, HeaderIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadUserClass {
    Car,
    Truck,
    Trailer,
    Van,
    Bus,
    Motorcycle,
    Pedestrian,
    Bicycle,
}

impl RoadUserClass {
    pub const ALL: [RoadUserClass; 8] = [
        RoadUserClass::Car,
        RoadUserClass::Truck,
        RoadUserClass::Trailer,
        RoadUserClass::Van,
        RoadUserClass::Bus,
        RoadUserClass::Motorcycle,
        RoadUserClass::Pedestrian,
        RoadUserClass::Bicycle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoadUserClass::Car => "car",
            RoadUserClass::Truck => "truck",
            RoadUserClass::Trailer => "trailer",
            RoadUserClass::Van => "van",
            RoadUserClass::Bus => "bus",
            RoadUserClass::Motorcycle => "motorcycle",
            RoadUserClass::Pedestrian => "pedestrian",
            RoadUserClass::Bicycle => "bicycle",
        }
    }

    /// Pedestrians and bicyclists.
    pub fn is_vru(self) -> bool {
        matches!(self, RoadUserClass::Pedestrian | RoadUserClass::Bicycle)
    }
}

impl fmt::Display for RoadUserClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown road user class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for RoadUserClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        RoadUserClass::ALL
            .into_iter()
            .find(|c| c.as_str() == lower)
            // inD/highD publish a merged heavy-vehicle class
            .or_else(|| (lower == "truck_bus").then_some(RoadUserClass::Truck))
            .ok_or(UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub recording_id: u32,
    /// Samples per second.
    pub frame_rate: f64,
    pub location_id: u32,
    pub duration_frames: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackMeta {
    pub recording_id: u32,
    pub track_id: u32,
    pub class: RoadUserClass,
    pub initial_frame: i64,
    pub final_frame: i64,
}

/// One road user's time-indexed kinematics. Positions are metres in the
/// site-local frame, `speed` is m/s, `lon_acc` is signed m/s² along the
/// direction of travel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSeries {
    pub recording_id: u32,
    pub track_id: u32,
    pub class: RoadUserClass,
    pub frames: Vec<i64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub speed: Vec<f64>,
    pub lon_acc: Vec<f64>,
}

impl TrackSeries {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn mean_speed(&self) -> f64 {
        if self.speed.is_empty() {
            return 0.0;
        }
        self.speed.iter().sum::<f64>() / self.speed.len() as f64
    }
}

/// A loaded recording; tracks are sorted by ascending track id.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    pub tracks: Vec<TrackSeries>,
}

impl Recording {
    /// Keeps only the tracks whose verdict is accepted.
    pub fn accepted(&self, params: &ValidationParams) -> (Recording, Vec<TrackVerdict>) {
        let verdicts: Vec<TrackVerdict> = self
            .tracks
            .iter()
            .map(|t| TrackVerdict {
                recording_id: t.recording_id,
                track_id: t.track_id,
                class: t.class,
                verdict: validate_track(t, params),
            })
            .collect();
        let tracks = self
            .tracks
            .iter()
            .zip(&verdicts)
            .filter(|(_, v)| v.verdict.is_accepted())
            .map(|(t, _)| t.clone())
            .collect();
        (
            Recording {
                meta: self.meta.clone(),
                tracks,
            },
            verdicts,
        )
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error("{path}: no data rows")]
    EmptyFile { path: PathBuf },
    #[error("{path}: frame rate {value} must be positive")]
    BadFrameRate { path: PathBuf, value: f64 },
    #[error("{path}: line {line}: {source}")]
    UnknownClass {
        path: PathBuf,
        line: u64,
        #[source]
        source: UnknownClass,
    },
    #[error("track {track_id}, line {line}: frame {frame} does not follow frame {previous}")]
    NonMonotonicFrames {
        track_id: u32,
        line: u64,
        frame: i64,
        previous: i64,
    },
    #[error("track {track_id}, line {line}: non-finite value in `{column}`")]
    NonFiniteValue { track_id: u32, line: u64, column: String },
    #[error(
        "track {track_id}, line {line}: no acceleration columns (need lonAcceleration or xAcceleration/yAcceleration)"
    )]
    MissingAcceleration { track_id: u32, line: u64 },
    #[error("track {track_id}, line {line}: track id absent from the tracks metadata")]
    MissingMeta { track_id: u32, line: u64 },
    #[error("track {track_id} is listed in the tracks metadata but has no rows")]
    MissingRows { track_id: u32 },
    #[error("track {track_id}: rows span frames {first}..={last}, metadata says {initial}..={last_meta}")]
    FrameRangeMismatch {
        track_id: u32,
        first: i64,
        last: i64,
        initial: i64,
        last_meta: i64,
    },
    #[error("{path}: line {line}: recording id {found} differs from {expected}")]
    RecordingMismatch {
        path: PathBuf,
        line: u64,
        found: u32,
        expected: u32,
    },
    #[error("{path}: initialFrame {initial} exceeds finalFrame {last} for track {track_id}")]
    BadFrameSpan {
        path: PathBuf,
        track_id: u32,
        initial: i64,
        last: i64,
    },
}

/// The three files that make up one recording.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RecordingPaths {
    pub tracks: PathBuf,
    pub tracks_meta: PathBuf,
    pub recording_meta: PathBuf,
}

impl RecordingPaths {
    /// Paths for `<dir>/<prefix>_tracks.csv` and its siblings.
    pub fn with_prefix(dir: &Path, prefix: &str) -> Self {
        Self {
            tracks: dir.join(format!("{prefix}_tracks.csv")),
            tracks_meta: dir.join(format!("{prefix}_tracksMeta.csv")),
            recording_meta: dir.join(format!("{prefix}_recordingMeta.csv")),
        }
    }

    /// Derives the metadata paths from a `*_tracks.csv` path.
    pub fn from_tracks_file(tracks: &Path) -> Option<Self> {
        let name = tracks.file_name()?.to_str()?;
        let prefix = name.strip_suffix("_tracks.csv")?;
        let dir = tracks.parent().unwrap_or_else(|| Path::new(""));
        Some(Self::with_prefix(dir, prefix))
    }
}

/// Finds every recording under `path`: either a single `*_tracks.csv` file or
/// a directory containing them. Results are sorted by file name.
pub fn discover_recordings(path: &Path) -> Result<Vec<RecordingPaths>, IngestError> {
    if path.is_file() {
        return RecordingPaths::from_tracks_file(path).map(|p| vec![p]).ok_or_else(|| {
            IngestError::Csv(CsvError::Io {
                path: path.to_path_buf(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    "expected a `<id>_tracks.csv` file or a directory",
                ),
            })
        });
    }
    let entries = std::fs::read_dir(path).map_err(|source| {
        IngestError::Csv(CsvError::Io {
            path: path.to_path_buf(),
            source,
        })
    })?;
    let mut found = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| {
            IngestError::Csv(CsvError::Io {
                path: path.to_path_buf(),
                source,
            })
        })?;
        if let Some(p) = RecordingPaths::from_tracks_file(&entry.path()) {
            found.push(p);
        }
    }
    found.sort();
    Ok(found)
}

/// Speed and signed longitudinal acceleration for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub speed: f64,
    pub lon_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum KinematicsError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("neither lonAcceleration nor xAcceleration/yAcceleration present")]
    MissingAcceleration,
}

/// Speed is the planar velocity norm. The published longitudinal acceleration
/// is used when present; otherwise the acceleration vector is projected onto
/// the unit velocity vector, with 0 for a standing vehicle.
pub fn derive_kinematics(
    x_velocity: f64,
    y_velocity: f64,
    lon_acceleration: Option<f64>,
    acceleration: Option<(f64, f64)>,
) -> Result<Kinematics, KinematicsError> {
    if !x_velocity.is_finite() {
        return Err(KinematicsError::NonFinite("xVelocity"));
    }
    if !y_velocity.is_finite() {
        return Err(KinematicsError::NonFinite("yVelocity"));
    }
    let speed = x_velocity.hypot(y_velocity);
    let lon_acc = match (lon_acceleration, acceleration) {
        (Some(a), _) => {
            if !a.is_finite() {
                return Err(KinematicsError::NonFinite("lonAcceleration"));
            }
            a
        }
        (None, Some((ax, ay))) => {
            if !ax.is_finite() {
                return Err(KinematicsError::NonFinite("xAcceleration"));
            }
            if !ay.is_finite() {
                return Err(KinematicsError::NonFinite("yAcceleration"));
            }
            if speed == 0.0 {
                0.0
            } else {
                (ax * x_velocity + ay * y_velocity) / speed
            }
        }
        (None, None) => return Err(KinematicsError::MissingAcceleration),
    };
    Ok(Kinematics { speed, lon_acc })
}

pub fn load_recording(paths: &RecordingPaths) -> Result<Recording, IngestError> {
    let meta = read_recording_meta(&paths.recording_meta)?;
    let track_meta = read_tracks_meta(&paths.tracks_meta, meta.recording_id)?;
    let mut tracks = read_tracks(&paths.tracks, meta.recording_id, &track_meta)?;

    for (id, tm) in &track_meta {
        let Some(t) = tracks.get_mut(id) else {
            return Err(IngestError::MissingRows { track_id: *id });
        };
        t.class = tm.class;
        let (first, last) = (t.frames[0], t.frames[t.frames.len() - 1]);
        if first != tm.initial_frame || last != tm.final_frame {
            return Err(IngestError::FrameRangeMismatch {
                track_id: *id,
                first,
                last,
                initial: tm.initial_frame,
                last_meta: tm.final_frame,
            });
        }
    }

    let duration_frames = track_meta.values().map(|m| m.final_frame + 1).max().unwrap_or(0).max(0) as u64;
    Ok(Recording {
        meta: RecordingMeta {
            duration_frames,
            ..meta
        },
        tracks: tracks.into_values().collect(),
    })
}

fn read_recording_meta(path: &Path) -> Result<RecordingMeta, IngestError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let rec_col = header.require("recordingId")?;
    let rate_col = header.require("frameRate")?;
    let loc_col = header.require("locationId")?;
    let mut record = csv::StringRecord::new();
    if !csvio::next_record(&mut reader, &mut record, path)? {
        return Err(IngestError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    let frame_rate: f64 = csvio::parse_field(&header, &record, rate_col, "frameRate")?;
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(IngestError::BadFrameRate {
            path: path.to_path_buf(),
            value: frame_rate,
        });
    }
    Ok(RecordingMeta {
        recording_id: csvio::parse_field(&header, &record, rec_col, "recordingId")?,
        frame_rate,
        location_id: csvio::parse_field(&header, &record, loc_col, "locationId")?,
        duration_frames: 0,
    })
}

fn read_tracks_meta(path: &Path, recording_id: u32) -> Result<BTreeMap<u32, TrackMeta>, IngestError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let rec_col = header.require("recordingId")?;
    let id_col = header.require("trackId")?;
    let init_col = header.require("initialFrame")?;
    let final_col = header.require("finalFrame")?;
    let class_col = header.require("class")?;

    let mut out = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        let line = csvio::line_of(&record);
        let rec: u32 = csvio::parse_field(&header, &record, rec_col, "recordingId")?;
        if rec != recording_id {
            return Err(IngestError::RecordingMismatch {
                path: path.to_path_buf(),
                line,
                found: rec,
                expected: recording_id,
            });
        }
        let track_id: u32 = csvio::parse_field(&header, &record, id_col, "trackId")?;
        let initial_frame: i64 = csvio::parse_field(&header, &record, init_col, "initialFrame")?;
        let final_frame: i64 = csvio::parse_field(&header, &record, final_col, "finalFrame")?;
        if initial_frame > final_frame {
            return Err(IngestError::BadFrameSpan {
                path: path.to_path_buf(),
                track_id,
                initial: initial_frame,
                last: final_frame,
            });
        }
        let class = csvio::field(&record, class_col)
            .parse()
            .map_err(|source| IngestError::UnknownClass {
                path: path.to_path_buf(),
                line,
                source,
            })?;
        out.insert(
            track_id,
            TrackMeta {
                recording_id,
                track_id,
                class,
                initial_frame,
                final_frame,
            },
        );
    }
    Ok(out)
}

struct TrackColumns {
    recording: usize,
    track: usize,
    frame: usize,
    x: usize,
    y: usize,
    vx: usize,
    vy: usize,
    ax: Option<usize>,
    ay: Option<usize>,
    lon_acc: Option<usize>,
}

impl TrackColumns {
    fn resolve(header: &HeaderIndex) -> Result<Self, CsvError> {
        let lon_acc = header.optional("lonAcceleration");
        let (ax, ay) = match lon_acc {
            Some(_) => (header.optional("xAcceleration"), header.optional("yAcceleration")),
            None => (
                Some(header.require("xAcceleration")?),
                Some(header.require("yAcceleration")?),
            ),
        };
        Ok(Self {
            recording: header.require("recordingId")?,
            track: header.require("trackId")?,
            frame: header.require("frame")?,
            x: header.require("xCenter")?,
            y: header.require("yCenter")?,
            vx: header.require("xVelocity")?,
            vy: header.require("yVelocity")?,
            ax,
            ay,
            lon_acc,
        })
    }
}

fn read_tracks(
    path: &Path,
    recording_id: u32,
    meta: &BTreeMap<u32, TrackMeta>,
) -> Result<BTreeMap<u32, TrackSeries>, IngestError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let cols = TrackColumns::resolve(&header)?;

    let mut tracks: BTreeMap<u32, TrackSeries> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        let line = csvio::line_of(&record);
        let rec: u32 = csvio::parse_field(&header, &record, cols.recording, "recordingId")?;
        if rec != recording_id {
            return Err(IngestError::RecordingMismatch {
                path: path.to_path_buf(),
                line,
                found: rec,
                expected: recording_id,
            });
        }
        let track_id: u32 = csvio::parse_field(&header, &record, cols.track, "trackId")?;
        let Some(tm) = meta.get(&track_id) else {
            return Err(IngestError::MissingMeta { track_id, line });
        };
        let frame: i64 = csvio::parse_field(&header, &record, cols.frame, "frame")?;

        let finite = |column: &'static str, idx: usize| -> Result<f64, IngestError> {
            let v: f64 = csvio::parse_field(&header, &record, idx, column)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(IngestError::NonFiniteValue {
                    track_id,
                    line,
                    column: column.to_string(),
                })
            }
        };
        let optional = |column: &'static str, idx: Option<usize>| -> Result<Option<f64>, IngestError> {
            match idx {
                Some(i) if !csvio::field(&record, i).is_empty() => finite(column, i).map(Some),
                _ => Ok(None),
            }
        };

        let x = finite("xCenter", cols.x)?;
        let y = finite("yCenter", cols.y)?;
        let vx = finite("xVelocity", cols.vx)?;
        let vy = finite("yVelocity", cols.vy)?;
        let lon = optional("lonAcceleration", cols.lon_acc)?;
        let acc = match lon {
            Some(_) => None,
            None => match (optional("xAcceleration", cols.ax)?, optional("yAcceleration", cols.ay)?) {
                (Some(ax), Some(ay)) => Some((ax, ay)),
                _ => None,
            },
        };
        let kin = derive_kinematics(vx, vy, lon, acc).map_err(|e| match e {
            KinematicsError::NonFinite(column) => IngestError::NonFiniteValue {
                track_id,
                line,
                column: column.to_string(),
            },
            KinematicsError::MissingAcceleration => IngestError::MissingAcceleration { track_id, line },
        })?;

        let t = tracks.entry(track_id).or_insert_with(|| TrackSeries {
            recording_id,
            track_id,
            class: tm.class,
            frames: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
            speed: Vec::new(),
            lon_acc: Vec::new(),
        });
        if let Some(&previous) = t.frames.last() {
            if frame <= previous {
                return Err(IngestError::NonMonotonicFrames {
                    track_id,
                    line,
                    frame,
                    previous,
                });
            }
        }
        t.frames.push(frame);
        t.x.push(x);
        t.y.push(y);
        t.speed.push(kin.speed);
        t.lon_acc.push(kin.lon_acc);
    }
    Ok(tracks)
}

pub const RECORDING_META_HEADER: [&str; 4] = ["recordingId", "locationId", "frameRate", "duration"];
pub const TRACKS_META_HEADER: [&str; 6] = [
    "recordingId",
    "trackId",
    "initialFrame",
    "finalFrame",
    "numFrames",
    "class",
];
pub const TRACKS_HEADER: [&str; 11] = [
    "recordingId",
    "trackId",
    "frame",
    "xCenter",
    "yCenter",
    "xVelocity",
    "yVelocity",
    "xAcceleration",
    "yAcceleration",
    "lonVelocity",
    "lonAcceleration",
];

/// Writes `rec` as `<dir>/<prefix>_*.csv`. Velocity is written along the x
/// axis so that re-loading reproduces speed and longitudinal acceleration
/// bit for bit.
pub fn write_recording(rec: &Recording, dir: &Path, prefix: &str) -> Result<RecordingPaths, IngestError> {
    let paths = RecordingPaths::with_prefix(dir, prefix);
    let fmt = csvio::fmt_f64;
    let rid = rec.meta.recording_id.to_string();

    let mut meta = CsvSink::create(&paths.recording_meta, &RECORDING_META_HEADER)?;
    meta.row([
        rid.clone(),
        rec.meta.location_id.to_string(),
        fmt(rec.meta.frame_rate),
        fmt(rec.meta.duration_frames as f64 / rec.meta.frame_rate),
    ])?;
    meta.finish()?;

    let mut tmeta = CsvSink::create(&paths.tracks_meta, &TRACKS_META_HEADER)?;
    for t in &rec.tracks {
        let (first, last) = match (t.frames.first(), t.frames.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => continue,
        };
        tmeta.row([
            rid.clone(),
            t.track_id.to_string(),
            first.to_string(),
            last.to_string(),
            t.len().to_string(),
            t.class.as_str().to_string(),
        ])?;
    }
    tmeta.finish()?;

    let mut tracks = CsvSink::create(&paths.tracks, &TRACKS_HEADER)?;
    for t in &rec.tracks {
        let tid = t.track_id.to_string();
        for i in 0..t.len() {
            let speed = fmt(t.speed[i]);
            let acc = fmt(t.lon_acc[i]);
            tracks.row([
                rid.as_str(),
                tid.as_str(),
                &t.frames[i].to_string(),
                &fmt(t.x[i]),
                &fmt(t.y[i]),
                &speed,
                "0",
                &acc,
                "0",
                &speed,
                &acc,
            ])?;
        }
    }
    tracks.finish()?;
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationParams {
    pub min_frames: usize,
    /// Applied to vehicle tracks only.
    pub min_mean_speed: f64,
}

impl Default for ValidationParams {
    fn default() -> Self {
        Self {
            min_frames: 25,
            min_mean_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    Empty,
    LengthMismatch,
    NonMonotonicFrames,
    FrameGap,
    NonFinite,
    NegativeSpeed,
    TooShort,
    Stationary,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Empty => "Empty",
            RejectReason::LengthMismatch => "LengthMismatch",
            RejectReason::NonMonotonicFrames => "NonMonotonicFrames",
            RejectReason::FrameGap => "FrameGap",
            RejectReason::NonFinite => "NonFinite",
            RejectReason::NegativeSpeed => "NegativeSpeed",
            RejectReason::TooShort => "TooShort",
            RejectReason::Stationary => "Stationary",
        }
    }
}

impl FromStr for RejectReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            RejectReason::Empty,
            RejectReason::LengthMismatch,
            RejectReason::NonMonotonicFrames,
            RejectReason::FrameGap,
            RejectReason::NonFinite,
            RejectReason::NegativeSpeed,
            RejectReason::TooShort,
            RejectReason::Stationary,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
        .ok_or_else(|| format!("unknown reject reason `{s}`"))
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationVerdict {
    Accepted,
    Rejected(RejectReason),
}

impl ValidationVerdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, ValidationVerdict::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackVerdict {
    pub recording_id: u32,
    pub track_id: u32,
    pub class: RoadUserClass,
    pub verdict: ValidationVerdict,
}

/// Structural invariants first, then the length and stationarity gates.
pub fn validate_track(t: &TrackSeries, params: &ValidationParams) -> ValidationVerdict {
    use ValidationVerdict::Rejected;

    let n = t.frames.len();
    if n == 0 {
        return Rejected(RejectReason::Empty);
    }
    if [t.x.len(), t.y.len(), t.speed.len(), t.lon_acc.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Rejected(RejectReason::LengthMismatch);
    }
    for w in t.frames.windows(2) {
        if w[1] <= w[0] {
            return Rejected(RejectReason::NonMonotonicFrames);
        }
        if w[1] != w[0] + 1 {
            return Rejected(RejectReason::FrameGap);
        }
    }
    let all_finite = [&t.x, &t.y, &t.speed, &t.lon_acc]
        .iter()
        .all(|s| s.iter().all(|v| v.is_finite()));
    if !all_finite {
        return Rejected(RejectReason::NonFinite);
    }
    if t.speed.iter().any(|&v| v < 0.0) {
        return Rejected(RejectReason::NegativeSpeed);
    }
    if n < params.min_frames {
        return Rejected(RejectReason::TooShort);
    }
    if !t.class.is_vru() && t.mean_speed() < params.min_mean_speed {
        return Rejected(RejectReason::Stationary);
    }
    ValidationVerdict::Accepted
}

pub const VALIDATION_HEADER: [&str; 4] = ["recordingId", "trackId", "class", "verdict"];

/// Writes one row per track; the verdict cell is `accepted` or the reject
/// reason.
pub fn write_verdicts(path: &Path, verdicts: &[TrackVerdict]) -> Result<(), CsvError> {
    let mut sink = CsvSink::create(path, &VALIDATION_HEADER)?;
    for v in verdicts {
        let verdict = match v.verdict {
            ValidationVerdict::Accepted => "accepted",
            ValidationVerdict::Rejected(r) => r.as_str(),
        };
        sink.row([
            v.recording_id.to_string().as_str(),
            v.track_id.to_string().as_str(),
            v.class.as_str(),
            verdict,
        ])?;
    }
    sink.finish()
}

pub fn read_verdicts(path: &Path) -> Result<Vec<TrackVerdict>, CsvError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    csvio::expect_header(path, &header, &VALIDATION_HEADER)?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        let raw = csvio::field(&record, 3);
        let verdict = if raw == "accepted" {
            ValidationVerdict::Accepted
        } else {
            ValidationVerdict::Rejected(raw.parse().map_err(|_| CsvError::Parse {
                path: path.to_path_buf(),
                line: csvio::line_of(&record),
                column: "verdict".into(),
                value: raw.to_string(),
            })?)
        };
        out.push(TrackVerdict {
            recording_id: csvio::parse_field(&header, &record, 0, "recordingId")?,
            track_id: csvio::parse_field(&header, &record, 1, "trackId")?,
            class: csvio::parse_field(&header, &record, 2, "class")?,
            verdict,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::fs;

    fn track(n: usize, speed: f64) -> TrackSeries {
        TrackSeries {
            recording_id: 0,
            track_id: 1,
            class: RoadUserClass::Car,
            frames: (0..n as i64).collect(),
            x: (0..n).map(|i| i as f64 * speed / 25.0).collect(),
            y: vec![0.0; n],
            speed: vec![speed; n],
            lon_acc: vec![0.0; n],
        }
    }

    fn write_files(dir: &Path, tracks: &str, tracks_meta: &str) -> RecordingPaths {
        let paths = RecordingPaths::with_prefix(dir, "00");
        fs::write(
            &paths.recording_meta,
            "recordingId,locationId,frameRate,speedLimit\n0,2,25.0,13.89\n",
        )
        .unwrap();
        fs::write(&paths.tracks_meta, tracks_meta).unwrap();
        fs::write(&paths.tracks, tracks).unwrap();
        paths
    }

    const META_ONE: &str =
        "recordingId,trackId,initialFrame,finalFrame,numFrames,width,length,class\n0,7,0,2,3,1.8,4.5,car\n";

    #[test]
    fn kinematics_from_lon_column() {
        let k = derive_kinematics(3.0, 4.0, Some(1.5), None).unwrap();
        assert_eq!(
            k,
            Kinematics {
                speed: 5.0,
                lon_acc: 1.5
            }
        );
    }

    #[test]
    fn kinematics_projection_fallback() {
        let k = derive_kinematics(1.0, 0.0, None, Some((-2.0, 0.0))).unwrap();
        assert_eq!(
            k,
            Kinematics {
                speed: 1.0,
                lon_acc: -2.0
            }
        );
        let k = derive_kinematics(0.0, 0.0, None, Some((1.0, 1.0))).unwrap();
        assert_eq!(
            k,
            Kinematics {
                speed: 0.0,
                lon_acc: 0.0
            }
        );
    }

    #[test]
    fn kinematics_rejects_nan_and_missing() {
        assert_eq!(
            derive_kinematics(f64::NAN, 0.0, Some(0.0), None),
            Err(KinematicsError::NonFinite("xVelocity"))
        );
        assert_eq!(
            derive_kinematics(1.0, 0.0, None, None),
            Err(KinematicsError::MissingAcceleration)
        );
    }

    #[test]
    fn speed_is_rotation_invariant() {
        let (vx, vy) = (7.3, -2.1);
        let reference = derive_kinematics(vx, vy, Some(0.0), None).unwrap().speed;
        for i in 0..8 {
            let a = i as f64 * std::f64::consts::FRAC_PI_4 + 0.1;
            let (s, c) = a.sin_cos();
            let r = derive_kinematics(c * vx - s * vy, s * vx + c * vy, Some(0.0), None)
                .unwrap()
                .speed;
            assert!(
                (r - reference).abs() <= 1e-9 * reference,
                "angle {a}: {r} vs {reference}"
            );
        }
    }

    #[test]
    fn loads_three_row_track() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = "recordingId,trackId,frame,trackLifetime,xCenter,yCenter,heading,xVelocity,yVelocity,xAcceleration,yAcceleration,lonVelocity,lonAcceleration\n\
            0,7,0,0,1.0,2.0,0,3.0,4.0,0.1,0.0,5.0,0.5\n\
            0,7,1,1,1.2,2.1,0,3.0,4.0,0.1,0.0,5.0,-0.5\n\
            0,7,2,2,1.4,2.2,0,3.0,4.0,0.1,0.0,5.0,0\n";
        let paths = write_files(dir.path(), tracks, META_ONE);
        let rec = load_recording(&paths).unwrap();
        assert_eq!(rec.meta.recording_id, 0);
        assert_eq!(rec.meta.location_id, 2);
        assert_eq!(rec.meta.duration_frames, 3);
        assert_eq!(rec.tracks.len(), 1);
        let t = &rec.tracks[0];
        assert_eq!(t.track_id, 7);
        assert_eq!(t.frames, vec![0, 1, 2]);
        assert_eq!(t.speed, vec![5.0; 3]);
        assert_eq!(t.lon_acc, vec![0.5, -0.5, 0.0]);
    }

    #[test]
    fn unknown_track_is_missing_meta() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = "recordingId,trackId,frame,xCenter,yCenter,xVelocity,yVelocity,xAcceleration,yAcceleration\n\
            0,8,0,0,0,1,0,0,0\n";
        let paths = write_files(dir.path(), tracks, META_ONE);
        assert!(matches!(
            load_recording(&paths),
            Err(IngestError::MissingMeta { track_id: 8, line: 2 })
        ));
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let tracks =
            "recordingId,trackId,frame,xCenter,yCenter,xVelocity,xAcceleration,yAcceleration\n0,7,0,0,0,1,0,0\n";
        let paths = write_files(dir.path(), tracks, META_ONE);
        match load_recording(&paths) {
            Err(IngestError::Csv(CsvError::MissingColumn { column, .. })) => assert_eq!(column, "yVelocity"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backwards_frames_and_nan_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let head = "recordingId,trackId,frame,xCenter,yCenter,xVelocity,yVelocity,xAcceleration,yAcceleration\n";
        let paths = write_files(
            dir.path(),
            &format!("{head}0,7,1,0,0,1,0,0,0\n0,7,0,0,0,1,0,0,0\n"),
            META_ONE,
        );
        assert!(matches!(
            load_recording(&paths),
            Err(IngestError::NonMonotonicFrames {
                track_id: 7,
                line: 3,
                ..
            })
        ));
        let paths = write_files(dir.path(), &format!("{head}0,7,0,0,NaN,1,0,0,0\n"), META_ONE);
        match load_recording(&paths) {
            Err(IngestError::NonFiniteValue {
                track_id: 7,
                line: 2,
                column,
            }) => assert_eq!(column, "yCenter"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_parsing_is_closed() {
        for c in RoadUserClass::ALL {
            assert_eq!(c.as_str().parse::<RoadUserClass>().unwrap(), c);
        }
        assert!("tram".parse::<RoadUserClass>().is_err());
        assert_eq!("Truck_Bus".parse::<RoadUserClass>().unwrap(), RoadUserClass::Truck);
    }

    #[test]
    fn validation_verdicts() {
        let p = ValidationParams {
            min_frames: 50,
            min_mean_speed: 0.1,
        };
        assert_eq!(validate_track(&track(100, 8.0), &p), ValidationVerdict::Accepted);
        assert_eq!(
            validate_track(&track(10, 8.0), &p),
            ValidationVerdict::Rejected(RejectReason::TooShort)
        );
        assert_eq!(
            validate_track(&track(100, 0.01), &p),
            ValidationVerdict::Rejected(RejectReason::Stationary)
        );
        let mut walker = track(100, 0.01);
        walker.class = RoadUserClass::Pedestrian;
        assert_eq!(validate_track(&walker, &p), ValidationVerdict::Accepted);
    }

    proptest! {
        #[test]
        fn corrupted_tracks_are_rejected(n in 30usize..120, at in 0usize..30, kind in 0u8..4) {
            let params = ValidationParams::default();
            let mut t = track(n, 6.0);
            prop_assert!(validate_track(&t, &params).is_accepted());
            let at = at.min(n - 2) + 1;
            match kind {
                0 => t.speed[at] = f64::NAN,
                1 => t.x[at] = f64::INFINITY,
                2 => for f in &mut t.frames[at..] { *f += 1 },
                _ => t.speed[at] = -0.5,
            }
            prop_assert!(!validate_track(&t, &params).is_accepted());
        }

        #[test]
        fn write_then_load_is_bit_exact(
            tracks in proptest::collection::vec(
                (1usize..40, -1000i64..1000, 0.0f64..60.0, -8.0f64..8.0, -500.0f64..500.0),
                1..6,
            ),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let series: Vec<TrackSeries> = tracks
                .iter()
                .enumerate()
                .map(|(i, &(n, start, v, a, x0))| TrackSeries {
                    recording_id: 3,
                    track_id: i as u32 * 2,
                    class: RoadUserClass::ALL[i % 8],
                    frames: (start..start + n as i64).collect(),
                    x: (0..n).map(|j| x0 + j as f64 * 0.37).collect(),
                    y: (0..n).map(|j| -x0 / 3.0 + j as f64 / 7.0).collect(),
                    speed: (0..n).map(|j| v * (1.0 + (j as f64).sin() / 3.0)).collect(),
                    lon_acc: (0..n).map(|j| a * (j as f64 * 0.3).cos()).collect(),
                })
                .collect();
            let rec = Recording {
                meta: RecordingMeta { recording_id: 3, frame_rate: 25.0, location_id: 1, duration_frames: 0 },
                tracks: series,
            };
            let paths = write_recording(&rec, dir.path(), "03").unwrap();
            let back = load_recording(&paths).unwrap();
            prop_assert_eq!(back.tracks.len(), rec.tracks.len());
            for (a, b) in rec.tracks.iter().zip(&back.tracks) {
                prop_assert_eq!(&a.frames, &b.frames);
                prop_assert_eq!(a.class, b.class);
                for (s, r) in [(&a.x, &b.x), (&a.y, &b.y), (&a.speed, &b.speed), (&a.lon_acc, &b.lon_acc)] {
                    let sb: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
                    let rb: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(sb, rb);
                }
            }
        }
    }
}
