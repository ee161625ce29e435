use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::warn;

use fragtrack::cascade::ProtocolStatus;
use fragtrack::pipeline::{
    read_cascade_log, write_artifacts, ResultLabels, RunInfo, ASSIGNMENTS_FILE, CASCADE_LOG_FILE, RUN_INFO_FILE,
    SUMMARY_FILE,
};
use fragtrack::postproc::Summary;
use fragtrack::synthgen::{
    segmentation_params, validation_metrics, video_path, write_video, GroundTruth, Preset, SynthConfig, SynthFormat,
    ValidationMetrics, ValidationOptions,
};
use fragtrack::TrackConfig;

#[derive(Parser)]
#[command(name = "fragtrack", version, about = "Track unmarked animals by identification")]
struct Cli {
    /// Worker threads. Every stage currently runs on one thread; the value
    /// is accepted for forward compatibility.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a video described by a JSON config.
    Track {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seed (overrides `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic video with ground truth.
    Synth {
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        k: Option<f64>,
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        no_crossings: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::BlobStream)]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a finished run.
    Report {
        /// Run output directory.
        run: PathBuf,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Score a finished run against ground truth; prints JSON.
    Validate {
        run: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Frame span `start:end` (end exclusive).
        #[arg(long)]
        span: Option<String>,
        /// Only count images moving at least this many pixels per frame.
        #[arg(long)]
        min_speed: Option<f64>,
        /// True animals (0-based) to score individually.
        #[arg(long = "individual")]
        individuals: Vec<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Protocol1,
    Protocol2,
    Protocol3,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    BlobStream,
    Pgm,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FRAGTRACK_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.threads.is_some_and(|t| t > 1) {
        warn!("--threads: all stages run on a single thread");
    }
    let result = match cli.command {
        Command::Track { config, out, seed } => return track(&config, out, seed),
        Command::Synth {
            preset,
            n,
            frames,
            theta,
            k,
            snr,
            no_crossings,
            seed,
            format,
            out,
        } => {
            let mut cfg = match preset {
                Some(PresetArg::Protocol1) => Preset::Protocol1.config(seed),
                Some(PresetArg::Protocol2) => Preset::Protocol2.config(seed),
                Some(PresetArg::Protocol3) => Preset::Protocol3.config(seed),
                None => SynthConfig {
                    seed,
                    ..SynthConfig::default()
                },
            };
            if let Some(v) = n {
                cfg.n_individuals = v;
            }
            if let Some(v) = frames {
                cfg.total_frames = v;
            }
            if let Some(v) = theta {
                cfg.theta = v;
            }
            if let Some(v) = k {
                cfg.k = v;
            }
            if let Some(v) = snr {
                cfg.snr = v;
            }
            if no_crossings {
                cfg.crossings = false;
            }
            let format = match format {
                FormatArg::BlobStream => SynthFormat::BlobStream,
                FormatArg::Pgm => SynthFormat::Pgm,
            };
            synth(&cfg, format, &out)
        }
        Command::Report { run, ground_truth } => report(&run, ground_truth.as_deref()),
        Command::Validate {
            run,
            ground_truth,
            span,
            min_speed,
            individuals,
        } => parse_span(span.as_deref()).and_then(|span| {
            let opts = ValidationOptions {
                span,
                min_speed,
                individuals,
            };
            let m = validate(&run, &ground_truth, &opts)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn track(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> ExitCode {
    let mut cfg = match TrackConfig::load(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let run = fragtrack::run_pipeline(&cfg).and_then(|run| {
        write_artifacts(&run, &cfg.output_dir)?;
        Ok(run)
    });
    match run {
        Ok(run) => {
            let s = &run.summary;
            println!(
                "{}: protocol {}, coverage {:.4}, estimated accuracy {:.4}",
                cfg.output_dir.display(),
                protocol_name(s.protocol_used),
                s.coverage,
                s.estimated_accuracy
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn synth(cfg: &SynthConfig, format: SynthFormat, out: &Path) -> Result<()> {
    let video = write_video(cfg, out, format)?;
    // a ready-to-run tracking config next to the video
    let input = video_path(out, format);
    let mut track_cfg = TrackConfig::new(cfg.n_individuals, input.file_name().expect("video file name"));
    track_cfg.output_dir = PathBuf::from("run");
    track_cfg.seed = cfg.seed;
    track_cfg.segmentation = segmentation_params();
    let cfg_path = out.join("run.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&track_cfg)? + "\n")
        .with_context(|| format!("writing {}", cfg_path.display()))?;
    let gt = &video.ground_truth;
    println!(
        "{}: {} frames, {} animals, {} planted fragments, {} crossings",
        out.display(),
        gt.n_frames,
        gt.n_animals,
        gt.fragments.len(),
        gt.crossings.len()
    );
    Ok(())
}

fn parse_span(span: Option<&str>) -> Result<Option<(usize, usize)>> {
    let Some(s) = span else { return Ok(None) };
    let Some((a, b)) = s.split_once(':') else {
        bail!("span must look like start:end, got {s:?}");
    };
    Ok(Some((a.trim().parse()?, b.trim().parse()?)))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn validate(run: &Path, gt: &Path, opts: &ValidationOptions) -> Result<ValidationMetrics> {
    let labels: ResultLabels = read_json(&run.join(ASSIGNMENTS_FILE))?;
    let gt = GroundTruth::load(gt)?;
    Ok(validation_metrics(&labels, &gt, opts)?)
}

fn protocol_name(p: ProtocolStatus) -> &'static str {
    match p {
        ProtocolStatus::Protocol1Done => "protocol1_done",
        ProtocolStatus::Protocol2Done => "protocol2_done",
        ProtocolStatus::Protocol3Done => "protocol3_done",
        ProtocolStatus::Degraded => "degraded",
    }
}

fn report(run: &Path, ground_truth: Option<&Path>) -> Result<()> {
    let summary: Summary = read_json(&run.join(SUMMARY_FILE))?;
    let info: RunInfo = read_json(&run.join(RUN_INFO_FILE))?;
    let log = read_cascade_log(&run.join(CASCADE_LOG_FILE)).map_err(anyhow::Error::msg)?;
    if summary.protocol_used == ProtocolStatus::Degraded {
        println!("!! DEGRADED RUN: no protocol 3 attempt reached the coverage target");
        let c: Vec<String> = info.attempt_coverages.iter().map(|c| format!("{c:.4}")).collect();
        println!("!! attempt coverages: {}", c.join(", "));
    }
    println!("protocol used       {}", protocol_name(summary.protocol_used));
    println!("coverage            {:.4}", summary.coverage);
    println!("estimated accuracy  {:.4}", summary.estimated_accuracy);
    println!("v_max               {:.3} px/frame", summary.v_max);
    println!(
        "fragments           {} individual, {} crossing, {} global",
        info.individual_fragments, info.crossing_fragments, info.global_fragments
    );
    println!(
        "post-processing     {} re-identified, {} unidentified",
        info.reidentified_fragments, info.unidentified_fragments
    );
    println!();
    println!("protocol  iteration  images  coverage  epochs  val_acc");
    for e in &log {
        println!(
            "{:>8}  {:>9}  {:>6}  {:>8.4}  {:>6}  {:>7.4}",
            e.protocol, e.iteration, e.images_accumulated, e.coverage, e.train_epochs, e.val_accuracy
        );
    }
    for w in &summary.warnings {
        println!("warning: {w}");
    }
    if let Some(gt) = ground_truth {
        let m = validate(run, gt, &ValidationOptions::default())?;
        println!();
        println!("validated images    {}", m.counts.total());
        println!("cascade accuracy    {:.4}", m.cascade_accuracy);
        println!("accuracy            {:.4}", m.accuracy);
        println!("non-identified      {:.4}", m.non_identified);
        println!("misidentified       {:.4}", m.misidentified);
    }
    Ok(())
}
