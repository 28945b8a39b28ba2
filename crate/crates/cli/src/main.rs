use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roundstyle::config::PipelineConfig;
use roundstyle::features::{Dv7Series, ExceedanceAlpha};
use roundstyle::label::Style;
use roundstyle::pipeline::{self, AtStage, FailureKind, PipelineError, Stage};
use roundstyle::report::Format;
use roundstyle::synthgen::{self, GenConfig};

/// Driving-style classification at roundabouts.
#[derive(Debug, Parser)]
#[command(name = "roundstyle", version)]
struct Cli {
    /// TOML configuration file. Flags override its values.
    #[arg(long, global = true, env = "ROUNDSTYLE_CONFIG")]
    config: Option<PathBuf>,

    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage and write the full report.
    Run,
    /// Load and validate recordings; writes validation.csv.
    Ingest,
    /// Compute DV1-DV13 per accepted vehicle; writes features.csv.
    Features,
    /// Elbow scan and K-means per requested k; writes elbow.csv and k<k>/model.json.
    Cluster,
    /// Map clusters to styles; writes k<k>/styles.json and k<k>/assignments.csv.
    Label,
    /// Find vehicle-VRU encounters; writes interactions.csv.
    Interact,
    /// Write report.json and the centre and distribution tables.
    Report,
    /// Generate a synthetic dataset with known styles into the output directory.
    Synth(SynthArgs),
    /// Smallest interaction radius reaching a target number of interacting drivers.
    Calibrate {
        /// Interacting-driver count to reach.
        #[arg(long)]
        target: usize,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Recording directory, `*_tracks.csv` file or glob; repeatable.
    #[arg(long = "input", global = true)]
    inputs: Vec<String>,
    /// Output directory (stage files and report).
    #[arg(long = "out", global = true)]
    output_dir: Option<PathBuf>,
    /// Report formats; repeatable.
    #[arg(long = "format", global = true, value_parser = parse_format)]
    formats: Vec<Format>,

    /// Shortest accepted track, in frames.
    #[arg(long, global = true)]
    min_frames: Option<usize>,
    /// Slowest accepted mean vehicle speed, m/s.
    #[arg(long, global = true)]
    min_mean_speed: Option<f64>,

    /// Series for DV7: full or positive.
    #[arg(long, global = true, value_parser = parse_dv7)]
    dv7_series: Option<Dv7Series>,
    /// Exceedance threshold spread for DV12/DV13: dv2 or subseries.
    #[arg(long, global = true, value_parser = parse_alpha)]
    exceedance_alpha: Option<ExceedanceAlpha>,
    /// Leave drivers with undefined measures out of clustering instead of failing.
    #[arg(long, global = true)]
    drop_invalid: Option<bool>,

    /// Cluster count; repeatable.
    #[arg(long = "k", global = true)]
    k: Vec<usize>,
    /// Z-score features before clustering.
    #[arg(long, global = true)]
    scaling: Option<bool>,
    /// Smallest k in the elbow scan.
    #[arg(long, global = true)]
    elbow_k_min: Option<usize>,
    /// Largest k in the elbow scan.
    #[arg(long, global = true)]
    elbow_k_max: Option<usize>,
    /// Seed for clustering and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// K-means restarts per k.
    #[arg(long, global = true)]
    restarts: Option<usize>,
    /// Iteration cap per K-means run.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    /// Largest centroid shift counted as converged, scaled units.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// JSON cluster-to-style map for the k matching its size.
    #[arg(long, global = true)]
    style_map: Option<PathBuf>,

    /// Interaction radius, metres.
    #[arg(long, global = true)]
    radius: Option<f64>,
    /// Frames a pair must be within the radius.
    #[arg(long, global = true)]
    min_overlap_frames: Option<usize>,

    /// Radius grid step for calibrate, metres.
    #[arg(long, global = true)]
    calibration_step: Option<f64>,
    /// Largest radius calibrate tries, metres.
    #[arg(long, global = true)]
    calibration_max_radius: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Tracks per style unless a per-style count is given.
    #[arg(long, default_value_t = 100)]
    per_style: usize,
    /// Conservative tracks; overrides --per-style.
    #[arg(long)]
    conservative: Option<usize>,
    /// Normal tracks; overrides --per-style.
    #[arg(long)]
    normal: Option<usize>,
    /// Aggressive tracks; overrides --per-style.
    #[arg(long)]
    aggressive: Option<usize>,
    /// Hz.
    #[arg(long, default_value_t = 25.0)]
    frame_rate: f64,
    /// Frames per vehicle track.
    #[arg(long, default_value_t = 1000)]
    duration_frames: usize,
    /// Pedestrian tracks.
    #[arg(long, default_value_t = 10)]
    vru_count: usize,
    /// Fraction of vehicles that pass a pedestrian.
    #[arg(long, default_value_t = 0.3)]
    vru_placement: f64,
}

fn parse_format(s: &str) -> Result<Format, String> {
    match s {
        "json" => Ok(Format::Json),
        "csv" => Ok(Format::Csv),
        _ => Err(format!("unknown format `{s}` (expected json or csv)")),
    }
}

fn parse_dv7(s: &str) -> Result<Dv7Series, String> {
    match s {
        "full" => Ok(Dv7Series::Full),
        "positive" => Ok(Dv7Series::Positive),
        _ => Err(format!("unknown dv7 series `{s}` (expected full or positive)")),
    }
}

fn parse_alpha(s: &str) -> Result<ExceedanceAlpha, String> {
    match s {
        "dv2" => Ok(ExceedanceAlpha::Dv2),
        "subseries" => Ok(ExceedanceAlpha::Subseries),
        _ => Err(format!("unknown exceedance alpha `{s}` (expected dv2 or subseries)")),
    }
}

impl Overrides {
    fn apply(self, c: &mut PipelineConfig) {
        if !self.inputs.is_empty() {
            c.inputs = self.inputs;
        }
        if let Some(v) = self.output_dir {
            c.output_dir = v;
        }
        if !self.formats.is_empty() {
            c.formats = self.formats;
        }
        if let Some(v) = self.min_frames {
            c.validation.min_frames = v;
        }
        if let Some(v) = self.min_mean_speed {
            c.validation.min_mean_speed = v;
        }
        if let Some(v) = self.dv7_series {
            c.features.dv7_series = v;
        }
        if let Some(v) = self.exceedance_alpha {
            c.features.exceedance_alpha = v;
        }
        if let Some(v) = self.drop_invalid {
            c.features.drop_invalid = v;
        }
        if !self.k.is_empty() {
            c.cluster.k = self.k;
        }
        if let Some(v) = self.scaling {
            c.cluster.scaling = v;
        }
        if let Some(v) = self.elbow_k_min {
            c.cluster.elbow_k_min = v;
        }
        if let Some(v) = self.elbow_k_max {
            c.cluster.elbow_k_max = v;
        }
        if let Some(v) = self.seed {
            c.cluster.seed = v;
        }
        if let Some(v) = self.restarts {
            c.cluster.restarts = v;
        }
        if let Some(v) = self.max_iter {
            c.cluster.max_iter = v;
        }
        if let Some(v) = self.tol {
            c.cluster.tol = v;
        }
        if let Some(v) = self.style_map {
            c.label.style_map = Some(v);
        }
        if let Some(v) = self.radius {
            c.interaction.radius = v;
        }
        if let Some(v) = self.min_overlap_frames {
            c.interaction.min_overlap_frames = v;
        }
        if let Some(v) = self.calibration_step {
            c.calibration.step = v;
        }
        if let Some(v) = self.calibration_max_radius {
            c.calibration.max_radius = v;
        }
    }
}

fn synth(cfg: &PipelineConfig, a: SynthArgs) -> Result<String, PipelineError> {
    let count = |v: Option<usize>| v.unwrap_or(a.per_style);
    let gen = GenConfig {
        per_style_count: [
            (Style::Conservative, count(a.conservative)),
            (Style::Normal, count(a.normal)),
            (Style::Aggressive, count(a.aggressive)),
        ]
        .into(),
        frame_rate: a.frame_rate,
        duration_frames: a.duration_frames,
        seed: cfg.cluster.seed,
        vru_count: a.vru_count,
        vru_placement: a.vru_placement,
        ..Default::default()
    };
    let ds = synthgen::generate_dataset(&gen).at(Stage::Synth)?;
    synthgen::write_dataset(&ds, &cfg.output_dir).at(Stage::Synth)?;
    Ok(format!(
        "{} vehicle and {} pedestrian tracks in {}",
        ds.ground_truth.len(),
        ds.recording.tracks.len() - ds.ground_truth.len(),
        cfg.output_dir.display()
    ))
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p).at(Stage::Config)?,
        None => PipelineConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.threads = cli.threads;
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(PipelineError::new(
                Stage::Config,
                FailureKind::Usage,
                "--threads must be at least 1",
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Usage, e))?;
    }

    let single = |stage| -> Result<(), PipelineError> {
        println!("{stage}: {}", pipeline::run_stage(stage, &cfg)?);
        Ok(())
    };
    match cli.command {
        Command::Run => {
            for (stage, msg) in pipeline::run_pipeline(&cfg)? {
                println!("{stage}: {msg}");
            }
            println!("report written to {}", cfg.output_dir.display());
        }
        Command::Ingest => single(Stage::Ingest)?,
        Command::Features => single(Stage::Features)?,
        Command::Cluster => single(Stage::Cluster)?,
        Command::Label => single(Stage::Label)?,
        Command::Interact => single(Stage::Interact)?,
        Command::Report => single(Stage::Report)?,
        Command::Synth(args) => println!("synth: {}", synth(&cfg, args)?),
        Command::Calibrate { target } => {
            let c = pipeline::calibrate(&cfg, target)?;
            println!(
                "radius {} m reaches {} interacting drivers (target {target})",
                c.radius, c.interacting
            );
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
