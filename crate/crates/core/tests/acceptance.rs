//! Acceptance gate. Prints one PASS / FAIL / SKIP line per criterion and exits
//! non-zero if any criterion fails. Every tolerance and time limit is a
//! constant below.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use roundstyle::cluster::{best_of_restarts, kmeans, KMeansParams};
use roundstyle::config::PipelineConfig;
use roundstyle::features::{compute_volatility, FeatureOptions, KinematicSeries, NUM_MEASURES};
use roundstyle::ingest::ValidationVerdict;
use roundstyle::interact::{find_interactions, interacting_drivers, InteractionParams};
use roundstyle::label::{read_assignments, Style};
use roundstyle::matrix::Matrix;
use roundstyle::pipeline::{self, run_pipeline, Stage};
use roundstyle::synthgen::{generate_dataset, read_ground_truth, write_dataset, GenConfig};

const DV_REL_TOL: f64 = 1e-9;
/// Floor for measures whose exact value is zero (constant series), where the
/// naive formulas leave rounding residue.
const DV_ABS_TOL: f64 = 1e-12;
const DV_SERIES: usize = 1000;
const DV_TIME: Duration = Duration::from_secs(10);

const KMEANS_INSTANCES: u64 = 100;
const KMEANS_MAX_ROWS: usize = 12;
const KMEANS_RESTARTS: usize = 32;
const KMEANS_REL_TOL: f64 = 1e-9;
const KMEANS_TIME: Duration = Duration::from_secs(60);

const LLOYD_INSTANCES: u64 = 200;
const LLOYD_REL_SLACK: f64 = 1e-12;

const SYNTH_PER_STYLE: usize = 100;
const SYNTH_MIN_PURITY: f64 = 0.95;
const SYNTH_MIN_ELBOW_RATIO: f64 = 5.0;
const SYNTH_TIME: Duration = Duration::from_secs(30);

const INTERACT_RECORDINGS: u64 = 200;
const INTERACT_RADII: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

const ROUND_VEHICLES: f64 = 13_507.0;
const ROUND_VEHICLE_TOL: f64 = 0.05;
const ROUND_VRUS: f64 = 113.0;
const ROUND_VRU_TOL: f64 = 0.10;
const ROUND_TINY_SHARE: f64 = 0.005;
const ROUND_MAJOR_SHARE: (f64, f64) = (0.35, 0.65);
const ROUND_TARGET_INTERACTING: usize = 3681;
const ROUND_MIN_GAP_PP: f64 = 15.0;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn timed(limit: Duration, f: impl FnOnce() -> Result<String, String>) -> Outcome {
    let start = Instant::now();
    let r = f();
    let took = start.elapsed();
    match r {
        Ok(msg) if took <= limit => Outcome::Pass(format!(
            "{msg}; {:.2}s (limit {}s)",
            took.as_secs_f64(),
            limit.as_secs()
        )),
        Ok(msg) => Outcome::Fail(format!(
            "{msg}; {:.2}s exceeds {}s",
            took.as_secs_f64(),
            limit.as_secs()
        )),
        Err(e) => Outcome::Fail(e),
    }
}

fn random_series(seed: u64) -> KinematicSeries {
    let mut r = common::rng(seed);
    let n = r.random_range(2..=500);
    let base = r.random_range(0.5..15.0);
    let spread = r.random_range(0.0..4.0);
    // every fifth series is quantized so ties and repeated quartiles occur
    let quantize = seed.is_multiple_of(5);
    let acc_sd = r.random_range(0.05..3.0);
    let normal = Normal::new(0.0, acc_sd).unwrap();
    let mut speed = Vec::with_capacity(n);
    let mut acc = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s: f64 = base + spread * r.random_range(-1.0..1.0);
        let mut a: f64 = normal.sample(&mut r);
        if quantize {
            s = (s * 10.0).round() / 10.0;
            a = (a * 10.0).round() / 10.0;
        }
        speed.push(s.max(0.01));
        acc.push(a);
    }
    KinematicSeries {
        recording_id: 0,
        track_id: seed as u32,
        acc_pos: acc.iter().copied().filter(|&a| a > 0.0).collect(),
        acc_neg: acc.iter().copied().filter(|&a| a < 0.0).collect(),
        speed,
        acc,
    }
}

fn criterion_1() -> Outcome {
    timed(DV_TIME, || {
        let opts = FeatureOptions::default();
        let mut compared = 0usize;
        for seed in 0..DV_SERIES as u64 {
            let ks = random_series(seed);
            let fv = compute_volatility(&ks, &opts);
            let oracle = common::naive_dv(&ks.speed, &ks.acc);
            for (m, &want) in oracle.iter().enumerate().take(NUM_MEASURES) {
                match want {
                    Some(v)
                        if fv.valid[m]
                            && (common::rel_close(fv.dv[m], v, DV_REL_TOL) || (fv.dv[m] - v).abs() <= DV_ABS_TOL) =>
                    {
                        compared += 1
                    }
                    None if !fv.valid[m] => {}
                    _ => {
                        return Err(format!(
                            "series {seed} DV{}: got {} (valid {}), oracle {:?}",
                            m + 1,
                            fv.dv[m],
                            fv.valid[m],
                            want
                        ))
                    }
                }
            }
        }
        Ok(format!(
            "{DV_SERIES} series, {compared} defined measures within {DV_REL_TOL:e} relative or {DV_ABS_TOL:e} absolute"
        ))
    })
}

fn random_points(seed: u64, max_rows: usize) -> Matrix {
    let mut r = common::rng(seed);
    let n = r.random_range(4..=max_rows);
    let d = r.random_range(1..=3);
    let data = (0..n * d).map(|_| r.random_range(-10.0..10.0)).collect();
    Matrix::new(n, d, data)
}

fn criterion_2() -> Outcome {
    timed(KMEANS_TIME, || {
        let params = KMeansParams::default();
        for inst in 0..KMEANS_INSTANCES {
            let m = random_points(1000 + inst, KMEANS_MAX_ROWS);
            let k = 2 + (inst % 2) as usize;
            let cm = best_of_restarts(&m, k, inst, KMEANS_RESTARTS, &params).map_err(|e| e.to_string())?;
            let opt = common::brute_force_distortion(&m, k);
            if !common::rel_close(cm.distortion, opt, KMEANS_REL_TOL) {
                return Err(format!(
                    "instance {inst} ({} rows, k = {k}): best of {KMEANS_RESTARTS} = {}, optimum = {opt}",
                    m.rows(),
                    cm.distortion
                ));
            }
        }
        Ok(format!(
            "{KMEANS_INSTANCES} instances of <= {KMEANS_MAX_ROWS} rows match the exhaustive optimum within {KMEANS_REL_TOL:e}"
        ))
    })
}

fn criterion_3() -> Outcome {
    let params = KMeansParams::default();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for inst in 0..LLOYD_INSTANCES {
        let m = random_points(5000 + inst, 60);
        let k = 1 + (inst % 4) as usize;
        let cm = match kmeans(&m, k, inst, &params) {
            Ok(cm) => cm,
            Err(e) => return Outcome::Fail(format!("instance {inst}: {e}")),
        };
        if let Some(w) = cm.trace.windows(2).find(|w| w[1] > w[0] * (1.0 + LLOYD_REL_SLACK)) {
            return Outcome::Fail(format!("instance {inst}: distortion rose {} -> {}", w[0], w[1]));
        }
        if cm.converged && cm.assign(&m) != cm.assignments {
            return Outcome::Fail(format!("instance {inst}: assignments are not a fixed point"));
        }
        let again = kmeans(&m, k, inst, &params).unwrap();
        let serial = single.install(|| kmeans(&m, k, inst, &params).unwrap());
        if again != cm || serial != cm {
            return Outcome::Fail(format!("instance {inst}: rerun differs"));
        }
    }
    Outcome::Pass(format!(
        "{LLOYD_INSTANCES} runs: per-iteration distortion non-increasing (slack {LLOYD_REL_SLACK:e}), fixed-point labels, bit-identical reruns on 1 and N threads"
    ))
}

fn elbow_ratio(out: &Path) -> Result<f64, String> {
    let curve = roundstyle::cluster::read_elbow(&out.join(pipeline::ELBOW_FILE)).map_err(|e| e.to_string())?;
    let d = |k| curve.distortion(k).ok_or(format!("elbow.csv has no k = {k}"));
    Ok((d(2)? - d(3)?) / (d(3)? - d(4)?))
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    timed(SYNTH_TIME, || {
        let gen = GenConfig {
            per_style_count: Style::ALL.iter().map(|&s| (s, SYNTH_PER_STYLE)).collect(),
            ..Default::default()
        };
        let data = dir.path().join("data");
        let ds = generate_dataset(&gen).map_err(|e| e.to_string())?;
        write_dataset(&ds, &data).map_err(|e| e.to_string())?;
        let mut cfg = PipelineConfig {
            inputs: vec![data.display().to_string()],
            output_dir: dir.path().join("out"),
            ..Default::default()
        };
        cfg.cluster.k = vec![3];
        run_pipeline(&cfg).map_err(|e| e.to_string())?;

        let truth = read_ground_truth(&data.join("ground_truth.csv")).map_err(|e| e.to_string())?;
        let labels =
            read_assignments(&cfg.output_dir.join("k3").join(pipeline::ASSIGNMENTS_FILE)).map_err(|e| e.to_string())?;
        if labels.len() != 3 * SYNTH_PER_STYLE {
            return Err(format!("{} of {} tracks labeled", labels.len(), 3 * SYNTH_PER_STYLE));
        }
        let predicted: Vec<(u32, Style)> = labels.iter().map(|l| (l.track_id, l.style)).collect();
        let purity = common::purity(&truth, &predicted);
        let ratio = elbow_ratio(&cfg.output_dir)?;
        if purity < SYNTH_MIN_PURITY || ratio < SYNTH_MIN_ELBOW_RATIO {
            return Err(format!(
                "purity {purity:.4} (need {SYNTH_MIN_PURITY}), elbow ratio {ratio:.2} (need {SYNTH_MIN_ELBOW_RATIO})"
            ));
        }
        Ok(format!("purity {purity:.4} >= {SYNTH_MIN_PURITY}, elbow 2->3 / 3->4 drop ratio {ratio:.2} >= {SYNTH_MIN_ELBOW_RATIO}"))
    })
}

fn criterion_5() -> Outcome {
    let mut pairs = 0usize;
    for seed in 0..INTERACT_RECORDINGS {
        let rec = common::random_recording(seed, 40.0);
        let mut r = common::rng(seed ^ 0xABCD);
        let radius = r.random_range(0.5..15.0);
        let overlap = r.random_range(1..=4);
        let params = InteractionParams {
            radius,
            min_overlap_frames: overlap,
        };
        let fast = find_interactions(&rec, &params).unwrap();
        let slow = common::brute_force_interactions(&rec, radius, overlap);
        if fast != slow {
            return Outcome::Fail(format!(
                "recording {seed}: grid {} pairs vs brute force {}",
                fast.len(),
                slow.len()
            ));
        }
        pairs += fast.len();

        let mut previous: Option<BTreeSet<(u32, u32)>> = None;
        for &radius in &INTERACT_RADII {
            let found = find_interactions(
                &rec,
                &InteractionParams {
                    radius,
                    min_overlap_frames: 1,
                },
            )
            .unwrap();
            let drivers = interacting_drivers(&found);
            if let Some(prev) = &previous {
                if !prev.is_subset(&drivers) {
                    return Outcome::Fail(format!("recording {seed}: interacting set shrank at radius {radius}"));
                }
            }
            previous = Some(drivers);
        }
    }
    Outcome::Pass(format!(
        "{INTERACT_RECORDINGS} random recordings: grid equals all-pairs exactly ({pairs} pairs), interacting sets nested over radii {INTERACT_RADII:?}"
    ))
}

fn criterion_6() -> Outcome {
    let Some(root) = std::env::var_os("ROUND_DATA_DIR").map(PathBuf::from) else {
        return Outcome::Skip("ROUND_DATA_DIR not set".into());
    };
    match round_dataset_checks(&root) {
        Ok(msg) => Outcome::Pass(msg),
        Err(e) => Outcome::Fail(e),
    }
}

fn round_dataset_checks(root: &Path) -> Result<String, String> {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = PipelineConfig {
        inputs: vec![root.display().to_string()],
        output_dir: work.path().join("out"),
        ..Default::default()
    };
    cfg.cluster.k = vec![3];
    let err = |e: pipeline::PipelineError| e.to_string();

    pipeline::run_stage(Stage::Ingest, &cfg).map_err(err)?;
    let verdicts = roundstyle::ingest::read_verdicts(&cfg.output_dir.join(pipeline::VALIDATION_FILE))
        .map_err(|e| e.to_string())?;
    let accepted = |vru: bool| {
        verdicts
            .iter()
            .filter(|v| v.verdict == ValidationVerdict::Accepted && v.class.is_vru() == vru)
            .count() as f64
    };
    let (vehicles, vrus) = (accepted(false), accepted(true));
    let a_ok = (vehicles - ROUND_VEHICLES).abs() <= ROUND_VEHICLE_TOL * ROUND_VEHICLES
        && (vrus - ROUND_VRUS).abs() <= ROUND_VRU_TOL * ROUND_VRUS;

    for s in [Stage::Features, Stage::Cluster, Stage::Label] {
        pipeline::run_stage(s, &cfg).map_err(err)?;
    }
    let labels =
        read_assignments(&cfg.output_dir.join("k3").join(pipeline::ASSIGNMENTS_FILE)).map_err(|e| e.to_string())?;
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for l in &labels {
        *sizes.entry(l.cluster_id).or_default() += 1;
    }
    let mut shares: Vec<f64> = sizes.values().map(|&c| c as f64 / labels.len() as f64).collect();
    shares.sort_by(f64::total_cmp);
    let b_ok = shares.len() == 3
        && shares[0] < ROUND_TINY_SHARE
        && shares[1..]
            .iter()
            .all(|s| (ROUND_MAJOR_SHARE.0..=ROUND_MAJOR_SHARE.1).contains(s));

    let cal = pipeline::calibrate(&cfg, ROUND_TARGET_INTERACTING).map_err(err)?;
    cfg.interaction.radius = cal.radius;
    pipeline::run_stage(Stage::Interact, &cfg).map_err(err)?;
    let records = roundstyle::interact::read_interactions(&cfg.output_dir.join(pipeline::INTERACTIONS_FILE))
        .map_err(|e| e.to_string())?;
    let inter = interacting_drivers(&records);
    let share = |want: bool| {
        let group: Vec<_> = labels
            .iter()
            .filter(|l| inter.contains(&(l.recording_id, l.track_id)) == want)
            .collect();
        100.0 * group.iter().filter(|l| l.style == Style::Conservative).count() as f64 / group.len().max(1) as f64
    };
    let gap = share(true) - share(false);
    let c_ok = gap >= ROUND_MIN_GAP_PP;

    let msg = format!(
        "(a) {vehicles} vehicles, {vrus} VRUs [{}]; (b) cluster shares {shares:.4?} [{}]; (c) radius {} m, conservative gap {gap:.2} pp [{}]",
        if a_ok { "ok" } else { "FAIL" },
        if b_ok { "ok" } else { "FAIL" },
        cal.radius,
        if c_ok { "ok" } else { "FAIL" },
    );
    if a_ok && b_ok && c_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ds = generate_dataset(&GenConfig {
        per_style_count: Style::ALL.iter().map(|&s| (s, 20)).collect(),
        duration_frames: 300,
        vru_count: 3,
        ..Default::default()
    })
    .unwrap();
    write_dataset(&ds, &data).unwrap();
    let cfg = PipelineConfig {
        inputs: vec![data.display().to_string()],
        output_dir: dir.path().join("out"),
        ..Default::default()
    };
    if let Err(e) = run_pipeline(&cfg) {
        return Outcome::Fail(e.to_string());
    }
    let first = snapshot(&cfg.output_dir);
    std::fs::remove_dir_all(&cfg.output_dir).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    if let Err(e) = single.install(|| run_pipeline(&cfg)) {
        return Outcome::Fail(e.to_string());
    }
    let second = snapshot(&cfg.output_dir);
    if first != second {
        let differing: Vec<_> = first
            .keys()
            .chain(second.keys())
            .filter(|k| first.get(*k) != second.get(*k))
            .collect();
        return Outcome::Fail(format!("outputs differ: {differing:?}"));
    }
    Outcome::Pass(format!(
        "{} files byte-identical across two runs (default pool, then 1 thread)",
        first.len()
    ))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 7] = [
        ("1 formula oracle", criterion_1),
        ("2 k-means optimality", criterion_2),
        ("3 k-means invariants", criterion_3),
        ("4 synthetic end-to-end", criterion_4),
        ("5 interaction correctness", criterion_5),
        ("6 rounD dataset", criterion_6),
        ("7 report determinism", criterion_7),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Outcome::Pass(m) => println!("PASS criterion {name}: {m}"),
            Outcome::Skip(m) => println!("SKIP criterion {name}: {m}"),
            Outcome::Fail(m) => {
                failed += 1;
                println!("FAIL criterion {name}: {m}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
