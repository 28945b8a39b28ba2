//! Vehicle-VRU proximity detection and the interacting / non-interacting
//! split of labeled drivers.
//!
//! A vehicle and a VRU interact when, within one recording, they are both
//! present and at most `radius` metres apart (planar Euclidean between track
//! centres) on at least `min_overlap_frames` frames.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::csvio::{self, CsvError, CsvSink};
use crate::ingest::Recording;
use crate::label::{StyleAssignment, StyleCounts};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionParams {
    /// Metres.
    pub radius: f64,
    pub min_overlap_frames: usize,
}

impl Default for InteractionParams {
    fn default() -> Self {
        Self {
            radius: 10.0,
            min_overlap_frames: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum InteractError {
    #[error("radius must be positive and finite, got {0}")]
    BadRadius(f64),
    #[error("min_overlap_frames must be at least 1")]
    BadOverlap,
    #[error("interaction names recording {recording_id}, track {track_id}, which is neither labeled nor excluded")]
    UnknownTrackId { recording_id: u32, track_id: u32 },
    #[error("no radius up to {max_radius} m reaches {target} interacting drivers (best {best})")]
    TargetUnreachable {
        target: usize,
        max_radius: f64,
        best: usize,
    },
    #[error("invalid calibration grid: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

impl InteractionParams {
    pub fn check(&self) -> Result<(), InteractError> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(InteractError::BadRadius(self.radius));
        }
        if self.min_overlap_frames == 0 {
            return Err(InteractError::BadOverlap);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub recording_id: u32,
    pub vehicle_track_id: u32,
    pub vru_track_id: u32,
    /// First and last frame on which the pair was within the radius.
    pub first_frame: i64,
    pub last_frame: i64,
    pub min_distance: f64,
}

#[derive(Default)]
struct PairAcc {
    frames: usize,
    first: i64,
    last: i64,
    min_distance: f64,
}

impl PairAcc {
    fn add(&mut self, frame: i64, d: f64) {
        if self.frames == 0 {
            self.first = frame;
            self.min_distance = d;
        }
        self.frames += 1;
        self.first = self.first.min(frame);
        self.last = self.last.max(frame);
        self.min_distance = self.min_distance.min(d);
    }
}

struct Position {
    track_id: u32,
    x: f64,
    y: f64,
}

/// Vehicle and VRU positions present on each frame.
fn positions_by_frame(rec: &Recording) -> BTreeMap<i64, (Vec<Position>, Vec<Position>)> {
    let mut frames: BTreeMap<i64, (Vec<Position>, Vec<Position>)> = BTreeMap::new();
    for t in &rec.tracks {
        for i in 0..t.len() {
            let slot = frames.entry(t.frames[i]).or_default();
            let p = Position {
                track_id: t.track_id,
                x: t.x[i],
                y: t.y[i],
            };
            if t.class.is_vru() {
                slot.1.push(p);
            } else {
                slot.0.push(p);
            }
        }
    }
    frames
}

/// Interactions in one recording, ordered by (vehicle, VRU) track id.
///
/// VRUs are bucketed per frame into a uniform grid of cell size `radius`;
/// each vehicle only examines the 3×3 block of cells around it.
pub fn find_interactions(rec: &Recording, params: &InteractionParams) -> Result<Vec<InteractionRecord>, InteractError> {
    params.check()?;
    // a hair wider than the radius so rounding in x / cell can never push a
    // pair at distance <= radius two cells apart
    let cell = params.radius * (1.0 + 1e-9);
    let cell_of = |x: f64, y: f64| ((x / cell).floor() as i64, (y / cell).floor() as i64);

    let mut pairs: BTreeMap<(u32, u32), PairAcc> = BTreeMap::new();
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (&frame, (vehicles, vrus)) in &positions_by_frame(rec) {
        if vehicles.is_empty() || vrus.is_empty() {
            continue;
        }
        grid.clear();
        for (j, u) in vrus.iter().enumerate() {
            grid.entry(cell_of(u.x, u.y)).or_default().push(j);
        }
        for v in vehicles {
            let (cx, cy) = cell_of(v.x, v.y);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    let Some(members) = grid.get(&(cx + dx, cy + dy)) else {
                        continue;
                    };
                    for &j in members {
                        let u = &vrus[j];
                        let d = (v.x - u.x).hypot(v.y - u.y);
                        if d <= params.radius {
                            pairs.entry((v.track_id, u.track_id)).or_default().add(frame, d);
                        }
                    }
                }
            }
        }
    }

    Ok(pairs
        .into_iter()
        .filter(|(_, acc)| acc.frames >= params.min_overlap_frames)
        .map(|((vehicle, vru), acc)| InteractionRecord {
            recording_id: rec.meta.recording_id,
            vehicle_track_id: vehicle,
            vru_track_id: vru,
            first_frame: acc.first,
            last_frame: acc.last,
            min_distance: acc.min_distance,
        })
        .collect())
}

/// Distinct (recording, vehicle track) keys that interacted.
pub fn interacting_drivers(records: &[InteractionRecord]) -> BTreeSet<(u32, u32)> {
    records.iter().map(|r| (r.recording_id, r.vehicle_track_id)).collect()
}

/// Style assignment split by interaction. Each side keeps its own counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub interacting: StyleAssignment,
    pub non_interacting: StyleAssignment,
}

impl Partition {
    pub fn counts(&self) -> (StyleCounts, StyleCounts) {
        (self.interacting.counts(), self.non_interacting.counts())
    }
}

pub fn partition_drivers(sa: &StyleAssignment, records: &[InteractionRecord]) -> Result<Partition, InteractError> {
    let labeled: BTreeSet<(u32, u32)> = sa.labels.iter().map(|l| (l.recording_id, l.track_id)).collect();
    let excluded: BTreeSet<(u32, u32)> = sa.excluded.iter().map(|e| (e.recording_id, e.track_id)).collect();
    let interacting = interacting_drivers(records);
    if let Some(&(recording_id, track_id)) = interacting
        .iter()
        .find(|k| !labeled.contains(k) && !excluded.contains(k))
    {
        return Err(InteractError::UnknownTrackId { recording_id, track_id });
    }

    let (inside, outside): (Vec<_>, Vec<_>) = sa
        .labels
        .iter()
        .cloned()
        .partition(|l| interacting.contains(&(l.recording_id, l.track_id)));
    let split_excluded = |want: bool| {
        sa.excluded
            .iter()
            .filter(|e| interacting.contains(&(e.recording_id, e.track_id)) == want)
            .cloned()
            .collect()
    };
    Ok(Partition {
        interacting: StyleAssignment {
            labels: inside,
            excluded: split_excluded(true),
        },
        non_interacting: StyleAssignment {
            labels: outside,
            excluded: split_excluded(false),
        },
    })
}

/// Search grid for `calibrate`: radii `step, 2·step, …, max_radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub step: f64,
    pub max_radius: f64,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_radius: 50.0,
        }
    }
}

impl CalibrationGrid {
    pub fn len(&self) -> usize {
        (self.max_radius / self.step + 1e-9).floor() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn radius(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub radius: f64,
    pub interacting: usize,
}

/// Number of `eligible` drivers that interact at `radius` across `recordings`.
pub fn interacting_count(
    recordings: &[Recording],
    eligible: &BTreeSet<(u32, u32)>,
    radius: f64,
    min_overlap_frames: usize,
) -> Result<usize, InteractError> {
    let params = InteractionParams {
        radius,
        min_overlap_frames,
    };
    let mut drivers = BTreeSet::new();
    for rec in recordings {
        for r in find_interactions(rec, &params)? {
            let key = (r.recording_id, r.vehicle_track_id);
            if eligible.contains(&key) {
                drivers.insert(key);
            }
        }
    }
    Ok(drivers.len())
}

/// Smallest grid radius whose interacting-driver count reaches `target`.
/// The count is monotone in the radius, so a binary search over the grid is
/// exact.
pub fn calibrate(
    recordings: &[Recording],
    eligible: &BTreeSet<(u32, u32)>,
    target: usize,
    min_overlap_frames: usize,
    grid: &CalibrationGrid,
) -> Result<Calibration, InteractError> {
    if !(grid.step > 0.0 && grid.step.is_finite() && grid.max_radius.is_finite()) || grid.is_empty() {
        return Err(InteractError::BadGrid(format!(
            "step {} / max radius {}",
            grid.step, grid.max_radius
        )));
    }
    let count = |i: usize| interacting_count(recordings, eligible, grid.radius(i), min_overlap_frames);
    let last = grid.len() - 1;
    let best = count(last)?;
    if best < target {
        return Err(InteractError::TargetUnreachable {
            target,
            max_radius: grid.radius(last),
            best,
        });
    }
    // invariant: count(hi) >= target, every index below lo misses it
    let (mut lo, mut hi, mut hi_count) = (0usize, last, best);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        let c = count(mid)?;
        if c >= target {
            hi = mid;
            hi_count = c;
        } else {
            lo = mid + 1;
        }
    }
    Ok(Calibration {
        radius: grid.radius(hi),
        interacting: hi_count,
    })
}

pub const INTERACTIONS_HEADER: [&str; 6] = [
    "recordingId",
    "vehicleTrackId",
    "vruTrackId",
    "firstFrame",
    "lastFrame",
    "minDistance",
];

pub fn write_interactions(path: &Path, records: &[InteractionRecord]) -> Result<(), CsvError> {
    let mut sink = CsvSink::create(path, &INTERACTIONS_HEADER)?;
    for r in records {
        sink.row([
            r.recording_id.to_string(),
            r.vehicle_track_id.to_string(),
            r.vru_track_id.to_string(),
            r.first_frame.to_string(),
            r.last_frame.to_string(),
            csvio::fmt_f64(r.min_distance),
        ])?;
    }
    sink.finish()
}

pub fn read_interactions(path: &Path) -> Result<Vec<InteractionRecord>, CsvError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    let cols: Vec<usize> = INTERACTIONS_HEADER
        .iter()
        .map(|c| header.require(c))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        out.push(InteractionRecord {
            recording_id: csvio::parse_field(&header, &record, cols[0], INTERACTIONS_HEADER[0])?,
            vehicle_track_id: csvio::parse_field(&header, &record, cols[1], INTERACTIONS_HEADER[1])?,
            vru_track_id: csvio::parse_field(&header, &record, cols[2], INTERACTIONS_HEADER[2])?,
            first_frame: csvio::parse_field(&header, &record, cols[3], INTERACTIONS_HEADER[3])?,
            last_frame: csvio::parse_field(&header, &record, cols[4], INTERACTIONS_HEADER[4])?,
            min_distance: csvio::parse_field(&header, &record, cols[5], INTERACTIONS_HEADER[5])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Exclusion;
    use crate::ingest::{RecordingMeta, RoadUserClass, TrackSeries};
    use crate::label::{DriverLabel, Style};

    fn stationary(
        track_id: u32,
        class: RoadUserClass,
        frames: std::ops::RangeInclusive<i64>,
        x: f64,
        y: f64,
    ) -> TrackSeries {
        let frames: Vec<i64> = frames.collect();
        let n = frames.len();
        TrackSeries {
            recording_id: 1,
            track_id,
            class,
            frames,
            x: vec![x; n],
            y: vec![y; n],
            speed: vec![1.0; n],
            lon_acc: vec![0.0; n],
        }
    }

    fn recording(tracks: Vec<TrackSeries>) -> Recording {
        Recording {
            meta: RecordingMeta {
                recording_id: 1,
                frame_rate: 25.0,
                location_id: 0,
                duration_frames: 100,
            },
            tracks,
        }
    }

    #[test]
    fn no_vrus_no_interactions() {
        let rec = recording(vec![stationary(1, RoadUserClass::Car, 0..=10, 0.0, 0.0)]);
        assert!(find_interactions(&rec, &InteractionParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn pedestrian_three_metres_away() {
        let rec = recording(vec![
            stationary(1, RoadUserClass::Car, 10..=20, 0.0, 0.0),
            stationary(2, RoadUserClass::Pedestrian, 15..=18, 3.0, 0.0),
        ]);
        let p = InteractionParams {
            radius: 5.0,
            min_overlap_frames: 1,
        };
        let found = find_interactions(&rec, &p).unwrap();
        assert_eq!(
            found,
            vec![InteractionRecord {
                recording_id: 1,
                vehicle_track_id: 1,
                vru_track_id: 2,
                first_frame: 15,
                last_frame: 18,
                min_distance: 3.0,
            }]
        );
        let tight = InteractionParams { radius: 2.0, ..p };
        assert!(find_interactions(&rec, &tight).unwrap().is_empty());
        let long = InteractionParams {
            min_overlap_frames: 5,
            ..p
        };
        assert!(find_interactions(&rec, &long).unwrap().is_empty());
        assert!(matches!(
            find_interactions(&rec, &InteractionParams { radius: 0.0, ..p }),
            Err(InteractError::BadRadius(_))
        ));
    }

    fn label(track_id: u32, style: Style) -> DriverLabel {
        DriverLabel {
            recording_id: 1,
            track_id,
            cluster_id: style.index(),
            style,
        }
    }

    fn record(vehicle: u32) -> InteractionRecord {
        InteractionRecord {
            recording_id: 1,
            vehicle_track_id: vehicle,
            vru_track_id: 99,
            first_frame: 0,
            last_frame: 0,
            min_distance: 1.0,
        }
    }

    #[test]
    fn partition_cases() {
        let sa = StyleAssignment {
            labels: vec![
                label(1, Style::Conservative),
                label(2, Style::Normal),
                label(3, Style::Normal),
            ],
            excluded: vec![Exclusion {
                recording_id: 1,
                track_id: 4,
                measure: 5,
            }],
        };
        let p = partition_drivers(&sa, &[]).unwrap();
        assert!(p.interacting.labels.is_empty());
        assert_eq!(p.non_interacting.labels, sa.labels);

        let all: Vec<_> = [1, 2, 3, 1].into_iter().map(record).collect();
        let p = partition_drivers(&sa, &all).unwrap();
        assert_eq!(p.interacting.labels, sa.labels);
        assert!(p.non_interacting.labels.is_empty());

        let p = partition_drivers(&sa, &[record(2), record(4)]).unwrap();
        let (inside, outside) = p.counts();
        assert_eq!(inside.get(Style::Normal), 1);
        assert_eq!(outside.total(), 2);
        assert_eq!(p.interacting.excluded.len(), 1);

        assert!(matches!(
            partition_drivers(&sa, &[record(7)]),
            Err(InteractError::UnknownTrackId { track_id: 7, .. })
        ));
    }

    #[test]
    fn calibration_finds_smallest_radius() {
        let rec = recording(vec![
            stationary(1, RoadUserClass::Car, 0..=5, 0.0, 0.0),
            stationary(2, RoadUserClass::Car, 0..=5, 100.0, 0.0),
            stationary(3, RoadUserClass::Car, 0..=5, 200.0, 0.0),
            stationary(10, RoadUserClass::Bicycle, 0..=5, 0.0, 2.35),
            stationary(11, RoadUserClass::Pedestrian, 0..=5, 100.0, 7.0),
        ]);
        let eligible: BTreeSet<(u32, u32)> = [(1, 1), (1, 2), (1, 3)].into();
        let grid = CalibrationGrid {
            step: 0.1,
            max_radius: 20.0,
        };
        let recs = [rec];
        let c = calibrate(&recs, &eligible, 1, 1, &grid).unwrap();
        assert!((c.radius - 2.4).abs() < 1e-9, "{c:?}");
        let c = calibrate(&recs, &eligible, 2, 1, &grid).unwrap();
        assert!((c.radius - 7.0).abs() < 1e-9, "{c:?}");
        assert_eq!(c.interacting, 2);
        assert!(matches!(
            calibrate(&recs, &eligible, 3, 1, &grid),
            Err(InteractError::TargetUnreachable { best: 2, .. })
        ));
    }

    #[test]
    fn interactions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("interactions.csv");
        let recs = vec![
            record(3),
            InteractionRecord {
                min_distance: 0.1 + 0.2,
                ..record(5)
            },
        ];
        write_interactions(&path, &recs).unwrap();
        assert_eq!(read_interactions(&path).unwrap(), recs);
    }
}
