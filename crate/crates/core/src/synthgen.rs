//! Synthetic trajectories with known styles.
//!
//! Speed follows `base + amplitude·sin(2π·0.1·t + φ) + noise`; the
//! longitudinal acceleration is the forward difference of that speed plus
//! sparse ±magnitude spikes. Vehicles drive one after another along the x
//! axis, so at most one vehicle is on scene per frame. Pedestrians stand
//! beside the vehicles they are meant to meet.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::derive_seed;
use crate::csvio::{self, CsvError, CsvSink};
use crate::ingest::{
    write_recording, IngestError, Recording, RecordingMeta, RecordingPaths, RoadUserClass, TrackSeries,
};
use crate::label::{LabelError, Style};

const SINE_HZ: f64 = 0.1;
/// Lateral offset of a pedestrian from the vehicle it meets, metres.
const MEET_OFFSET: f64 = 4.0;
const VRU_SPEED: f64 = 1.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleProfile {
    /// m/s
    pub base_speed: f64,
    /// m/s
    pub speed_amplitude: f64,
    /// Events per second.
    pub accel_spike_rate: f64,
    /// m/s²
    pub accel_spike_magnitude: f64,
    /// m/s
    pub noise_std: f64,
}

impl StyleProfile {
    pub fn for_style(style: Style) -> Self {
        match style {
            Style::Conservative => Self {
                base_speed: 8.0,
                speed_amplitude: 0.5,
                accel_spike_rate: 0.05,
                accel_spike_magnitude: 1.0,
                noise_std: 0.002,
            },
            Style::Normal => Self {
                base_speed: 10.0,
                speed_amplitude: 1.5,
                accel_spike_rate: 0.2,
                accel_spike_magnitude: 2.0,
                noise_std: 0.02,
            },
            Style::Aggressive => Self {
                base_speed: 12.0,
                speed_amplitude: 3.0,
                accel_spike_rate: 0.5,
                accel_spike_magnitude: 3.5,
                noise_std: 0.1,
            },
        }
    }

    pub fn check(&self) -> Result<(), SynthError> {
        let fields = [
            self.base_speed,
            self.speed_amplitude,
            self.accel_spike_rate,
            self.accel_spike_magnitude,
            self.noise_std,
        ];
        if fields.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SynthError::BadProfile(
                "all fields must be finite and non-negative".into(),
            ));
        }
        if self.base_speed <= self.speed_amplitude {
            return Err(SynthError::BadProfile("base speed must exceed the amplitude".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid style profile: {0}")]
    BadProfile(String),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Csv(#[from] CsvError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub per_style_count: BTreeMap<Style, usize>,
    pub frame_rate: f64,
    /// Length of every vehicle track.
    pub duration_frames: usize,
    pub seed: u64,
    pub vru_count: usize,
    /// Fraction of vehicle tracks that pass within the interaction radius of
    /// a pedestrian.
    pub vru_placement: f64,
    pub profiles: BTreeMap<Style, StyleProfile>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            per_style_count: Style::ALL.iter().map(|&s| (s, 100)).collect(),
            frame_rate: 25.0,
            duration_frames: 1000,
            seed: 42,
            vru_count: 10,
            vru_placement: 0.3,
            profiles: Style::ALL.iter().map(|&s| (s, StyleProfile::for_style(s))).collect(),
        }
    }
}

impl GenConfig {
    pub fn check(&self) -> Result<(), SynthError> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(SynthError::BadConfig(format!("frame rate {}", self.frame_rate)));
        }
        if self.duration_frames < 2 {
            return Err(SynthError::BadConfig("tracks need at least two frames".into()));
        }
        if self.total_vehicles() == 0 {
            return Err(SynthError::BadConfig("no tracks requested".into()));
        }
        if !(0.0..=1.0).contains(&self.vru_placement) {
            return Err(SynthError::BadConfig(format!("vru placement {}", self.vru_placement)));
        }
        for s in Style::ALL {
            if self.count(s) > 0 {
                self.profile(s).check()?;
            }
        }
        Ok(())
    }

    pub fn count(&self, style: Style) -> usize {
        self.per_style_count.get(&style).copied().unwrap_or(0)
    }

    pub fn profile(&self, style: Style) -> StyleProfile {
        self.profiles
            .get(&style)
            .copied()
            .unwrap_or_else(|| StyleProfile::for_style(style))
    }

    pub fn total_vehicles(&self) -> usize {
        Style::ALL.iter().map(|&s| self.count(s)).sum()
    }
}

/// One car track with frames `0..frames`, starting at the origin and heading
/// along +x.
pub fn generate_track(p: &StyleProfile, seed: u64, frames: usize, frame_rate: f64) -> TrackSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let noise = Normal::new(0.0, p.noise_std).expect("noise std is finite and non-negative");
    let dt = 1.0 / frame_rate;

    let speed: Vec<f64> = (0..frames)
        .map(|i| {
            let t = i as f64 * dt;
            let v = p.base_speed + p.speed_amplitude * (2.0 * PI * SINE_HZ * t + phase).sin() + noise.sample(&mut rng);
            v.max(0.0)
        })
        .collect();

    let spike_p = (p.accel_spike_rate * dt).min(1.0);
    let lon_acc: Vec<f64> = (0..frames)
        .map(|i| {
            let j = if i + 1 < frames { i } else { i.saturating_sub(1) };
            let derivative = if frames > 1 {
                (speed[j + 1] - speed[j]) * frame_rate
            } else {
                0.0
            };
            let spike = if rng.random_bool(spike_p) {
                if rng.random_bool(0.5) {
                    p.accel_spike_magnitude
                } else {
                    -p.accel_spike_magnitude
                }
            } else {
                0.0
            };
            derivative + spike
        })
        .collect();

    let mut x = Vec::with_capacity(frames);
    let mut pos = 0.0;
    for v in &speed {
        x.push(pos);
        pos += v * dt;
    }

    TrackSeries {
        recording_id: 0,
        track_id: 0,
        class: RoadUserClass::Car,
        frames: (0..frames as i64).collect(),
        x,
        y: vec![0.0; frames],
        speed,
        lon_acc,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub recording: Recording,
    /// Vehicle track id → generating style.
    pub ground_truth: BTreeMap<u32, Style>,
}

/// Vehicles get track ids `1..=n` in a seeded random style order and drive in
/// consecutive windows of `duration_frames`. Pedestrians follow with ids
/// `n+1..`.
pub fn generate_dataset(c: &GenConfig) -> Result<SynthDataset, SynthError> {
    c.check()?;
    let mut styles: Vec<Style> = Style::ALL
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, c.count(s)))
        .collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, 0, usize::MAX));
    styles.shuffle(&mut order_rng);

    let n = styles.len();
    let len = c.duration_frames;
    let vehicles: Vec<TrackSeries> = styles
        .par_iter()
        .enumerate()
        .map(|(i, &style)| {
            let mut t = generate_track(&c.profile(style), derive_seed(c.seed, 1, i), len, c.frame_rate);
            t.track_id = i as u32 + 1;
            let offset = (i * len) as i64;
            t.frames.iter_mut().for_each(|f| *f += offset);
            t
        })
        .collect();

    // the first round(placement·n) vehicles of the shuffled order meet a
    // pedestrian; pedestrian j covers a contiguous block of them and is
    // present only for that block's windows
    let met = if c.vru_count == 0 {
        0
    } else {
        (c.vru_placement * n as f64).round() as usize
    };
    let block = met.div_ceil(c.vru_count.max(1));
    let vrus: Vec<TrackSeries> = (0..c.vru_count)
        .map(|j| {
            let first = (j * block).min(met);
            let last = ((j + 1) * block).min(met);
            let (start, end) = if first < last {
                (first * len, last * len)
            } else {
                (0, len)
            };
            let frames = end - start;
            let mut t = TrackSeries {
                recording_id: 0,
                track_id: (n + 1 + j) as u32,
                class: RoadUserClass::Pedestrian,
                frames: (start as i64..end as i64).collect(),
                x: vec![-500.0; frames],
                y: vec![500.0 + 50.0 * j as f64; frames],
                speed: vec![VRU_SPEED; frames],
                lon_acc: vec![0.0; frames],
            };
            for (i, v) in vehicles.iter().enumerate().take(last).skip(first) {
                let mid_x = v.x[len / 2];
                for f in i * len - start..(i + 1) * len - start {
                    t.x[f] = mid_x;
                    t.y[f] = MEET_OFFSET;
                }
            }
            t
        })
        .collect();

    let duration_frames = (n * len) as u64;
    let ground_truth = vehicles.iter().zip(&styles).map(|(t, &s)| (t.track_id, s)).collect();
    let mut tracks = vehicles;
    tracks.extend(vrus);
    Ok(SynthDataset {
        recording: Recording {
            meta: RecordingMeta {
                recording_id: 0,
                frame_rate: c.frame_rate,
                location_id: 0,
                duration_frames,
            },
            tracks,
        },
        ground_truth,
    })
}

pub const GROUND_TRUTH_HEADER: [&str; 2] = ["trackId", "style"];

/// Writes the recording as `<dir>/00_*.csv` plus `<dir>/ground_truth.csv`.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<RecordingPaths, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| CsvError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = write_recording(&ds.recording, dir, "00")?;
    write_ground_truth(&dir.join("ground_truth.csv"), &ds.ground_truth)?;
    Ok(paths)
}

pub fn write_ground_truth(path: &Path, truth: &BTreeMap<u32, Style>) -> Result<(), CsvError> {
    let mut sink = CsvSink::create(path, &GROUND_TRUTH_HEADER)?;
    for (id, style) in truth {
        sink.row([id.to_string().as_str(), style.as_str()])?;
    }
    sink.finish()
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<u32, Style>, SynthError> {
    let mut reader = csvio::open_reader(path)?;
    let header = csvio::headers(&mut reader, path)?;
    csvio::expect_header(path, &header, &GROUND_TRUTH_HEADER)?;
    let mut out = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    while csvio::next_record(&mut reader, &mut record, path)? {
        let id: u32 = csvio::parse_field(&header, &record, 0, "trackId")?;
        out.insert(id, csvio::field(&record, 1).parse()?);
    }
    Ok(out)
}
