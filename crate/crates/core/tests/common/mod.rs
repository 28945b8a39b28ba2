//! Reference implementations used as test oracles. They favour the plainest
//! possible code over speed.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roundstyle::ingest::{Recording, RecordingMeta, RoadUserClass, TrackSeries};
use roundstyle::interact::InteractionRecord;
use roundstyle::label::Style;
use roundstyle::matrix::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

fn pop_std(x: &[f64]) -> f64 {
    let m = mean(x);
    let mut s = 0.0;
    for v in x {
        s += (v - m) * (v - m);
    }
    (s / x.len() as f64).sqrt()
}

fn mean_abs_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    let mut s = 0.0;
    for v in x {
        s += (v - m).abs();
    }
    s / x.len() as f64
}

fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (s.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

fn exceed_pct(x: &[f64], m: f64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        return 0.0;
    }
    let n = x.iter().filter(|&&v| v >= m + 2.0 * alpha).count();
    100.0 * n as f64 / x.len() as f64
}

/// Table 1 measures written straight from their definitions; `None` where a
/// measure is undefined (fewer than two samples or a zero denominator).
pub fn naive_dv(speed: &[f64], acc: &[f64]) -> [Option<f64>; 13] {
    let pos: Vec<f64> = acc.iter().copied().filter(|&a| a > 0.0).collect();
    let neg: Vec<f64> = acc.iter().copied().filter(|&a| a < 0.0).collect();
    let ok = |x: &[f64]| x.len() >= 2;
    let cv = |x: &[f64]| (ok(x) && mean(x) != 0.0).then(|| 100.0 * pop_std(x) / mean(x));
    let qcv = |x: &[f64]| {
        if !ok(x) {
            return None;
        }
        let (q1, q3) = (quantile(x, 0.25), quantile(x, 0.75));
        (q1 + q3 != 0.0).then(|| 100.0 * (q3 - q1) / (q3 + q1))
    };
    let dv2 = ok(acc).then(|| pop_std(acc));
    [
        ok(speed).then(|| pop_std(speed)),
        dv2,
        cv(speed),
        cv(&pos),
        cv(&neg),
        ok(speed).then(|| mean_abs_dev(speed)),
        ok(acc).then(|| mean_abs_dev(acc)),
        qcv(speed),
        qcv(&pos),
        qcv(&neg),
        ok(speed).then(|| exceed_pct(speed, mean(speed), pop_std(speed))),
        (ok(&pos) && dv2.is_some()).then(|| exceed_pct(&pos, mean(&pos), dv2.unwrap())),
        (ok(&neg) && dv2.is_some()).then(|| exceed_pct(&neg, mean(&neg), dv2.unwrap())),
    ]
}

/// Minimum k-means distortion over every partition of the rows into at most
/// `k` groups, by enumerating restricted growth strings.
pub fn brute_force_distortion(m: &Matrix, k: usize) -> f64 {
    let n = m.rows();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    fn rec(i: usize, used: usize, k: usize, labels: &mut Vec<usize>, m: &Matrix, best: &mut f64) {
        if i == labels.len() {
            *best = best.min(partition_cost(m, labels, used));
            return;
        }
        for c in 0..(used + 1).min(k) {
            labels[i] = c;
            rec(i + 1, used.max(c + 1), k, labels, m, best);
        }
    }
    rec(0, 0, k, &mut labels, m, &mut best);
    best
}

pub fn partition_cost(m: &Matrix, labels: &[usize], groups: usize) -> f64 {
    let d = m.cols();
    let mut total = 0.0;
    for g in 0..groups {
        let members: Vec<&[f64]> = (0..m.rows()).filter(|&i| labels[i] == g).map(|i| m.row(i)).collect();
        if members.is_empty() {
            continue;
        }
        for j in 0..d {
            let mu = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
            total += members.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>();
        }
    }
    total
}

/// Every vehicle/VRU pair on every frame, no pruning.
pub fn brute_force_interactions(rec: &Recording, radius: f64, min_overlap: usize) -> Vec<InteractionRecord> {
    let mut out = Vec::new();
    for v in rec.tracks.iter().filter(|t| !t.class.is_vru()) {
        for u in rec.tracks.iter().filter(|t| t.class.is_vru()) {
            let mut hits: Vec<(i64, f64)> = Vec::new();
            for (i, f) in v.frames.iter().enumerate() {
                if let Some(j) = u.frames.iter().position(|g| g == f) {
                    let d = (v.x[i] - u.x[j]).hypot(v.y[i] - u.y[j]);
                    if d <= radius {
                        hits.push((*f, d));
                    }
                }
            }
            if !hits.is_empty() && hits.len() >= min_overlap {
                out.push(InteractionRecord {
                    recording_id: rec.meta.recording_id,
                    vehicle_track_id: v.track_id,
                    vru_track_id: u.track_id,
                    first_frame: hits.iter().map(|h| h.0).min().unwrap(),
                    last_frame: hits.iter().map(|h| h.0).max().unwrap(),
                    min_distance: hits.iter().map(|h| h.1).fold(f64::INFINITY, f64::min),
                });
            }
        }
    }
    out.sort_by_key(|r| (r.vehicle_track_id, r.vru_track_id));
    out
}

/// A small recording of randomly walking vehicles and VRUs inside a
/// `extent` × `extent` square.
pub fn random_recording(seed: u64, extent: f64) -> Recording {
    let mut r = rng(seed);
    let n_tracks = r.random_range(2..12);
    let span = 60i64;
    let mut tracks = Vec::new();
    for id in 0..n_tracks {
        let class = if r.random_bool(0.4) {
            [RoadUserClass::Pedestrian, RoadUserClass::Bicycle][r.random_range(0..2)]
        } else {
            [RoadUserClass::Car, RoadUserClass::Truck, RoadUserClass::Van][r.random_range(0..3)]
        };
        let start = r.random_range(0..span - 5);
        let len = r.random_range(1..=(span - start) as usize);
        let mut x = r.random_range(0.0..extent);
        let mut y = r.random_range(0.0..extent);
        let mut t = TrackSeries {
            recording_id: seed as u32,
            track_id: id as u32 + 1,
            class,
            frames: (start..start + len as i64).collect(),
            x: Vec::new(),
            y: Vec::new(),
            speed: vec![1.0; len],
            lon_acc: vec![0.0; len],
        };
        for _ in 0..len {
            t.x.push(x);
            t.y.push(y);
            x += r.random_range(-2.0..2.0);
            y += r.random_range(-2.0..2.0);
        }
        tracks.push(t);
    }
    Recording {
        meta: RecordingMeta {
            recording_id: seed as u32,
            frame_rate: 25.0,
            location_id: 0,
            duration_frames: span as u64,
        },
        tracks,
    }
}

/// Best agreement between predicted and true styles over all relabelings.
pub fn purity(truth: &BTreeMap<u32, Style>, predicted: &[(u32, Style)]) -> f64 {
    let perms: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let best = perms
        .iter()
        .map(|p| {
            predicted
                .iter()
                .filter(|(id, s)| p[s.index()] == truth[id].index())
                .count()
        })
        .max()
        .unwrap_or(0);
    best as f64 / predicted.len().max(1) as f64
}
