//! End-to-end run: segmentation, crossing detection, fragmentation, the
//! cascade, residual identification, post-processing and output files.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobgraph::{
    build_fragments, build_global_fragments, coexistence_lists, distance_travelled, mark_sure_images, AreaModel,
    BlobGraphError, BlobKind, BlobStore, Fragment, GlobalFragment, OverlapGraph,
};
use crate::cascade::{run_cascade, CascadeError, CascadeInput, CascadeLogEntry, CascadeOutcome, FragmentImages};
use crate::config::{ConfigError, TrackConfig};
use crate::crossdetect::detect_crossings;
use crate::imageprep::{identification_image_side, ImagePrepError};
use crate::ingest::{load_frame_sequence, FrameSequence, IngestError};
use crate::postproc::{
    correct_unrealistic, estimated_accuracy, fit_speed_model, individual_trajectories, interpolate_gaps,
    resolve_crossings, write_summary, write_trajectories_csv, CorrectionInput, PostprocError, Reidentification,
    SpeedModel, Summary, Trajectories,
};
use crate::residual::{residual_identify, Assignment};

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const TRAJECTORIES_INTERPOLATED_FILE: &str = "trajectories_wo_gaps.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CASCADE_LOG_FILE: &str = "cascade_log.jsonl";
pub const ASSIGNMENTS_FILE: &str = "assignments.json";
pub const RUN_INFO_FILE: &str = "run_info.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    BlobGraph(#[from] BlobGraphError),
    #[error("no individual fragment to size identification images from")]
    NoIndividuals(#[from] ImagePrepError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Postproc(#[from] PostprocError),
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status: 2 for configuration errors, 3 for unreadable
    /// input, 4 when tracking itself cannot proceed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Ingest(_) => 3,
            PipelineError::BlobGraph(_) | PipelineError::NoIndividuals(_) | PipelineError::Cascade(_) => 4,
            PipelineError::Postproc(_) | PipelineError::Output { .. } => 1,
        }
    }
}

/// Per-fragment outcome, written to `assignments.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentRecord {
    pub start_frame: usize,
    /// Position of each blob within its frame's segmentation order.
    pub blobs: Vec<usize>,
    /// 1-based identity; `None` when unidentified.
    pub identity: Option<usize>,
    pub accumulated: bool,
    pub p2_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLabels {
    pub n_animals: usize,
    pub n_frames: usize,
    pub first_global_core: usize,
    /// Fragment indices of the first global fragment.
    pub first_global_members: Vec<usize>,
    pub fragments: Vec<FragmentRecord>,
}

/// Run statistics for reports, written to `run_info.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub n_frames: usize,
    pub n_blobs: usize,
    pub individual_fragments: usize,
    pub crossing_fragments: usize,
    pub global_fragments: usize,
    pub image_side: usize,
    /// Coverage of each Protocol 3 attempt (empty when it did not run).
    pub attempt_coverages: Vec<f64>,
    pub reidentified_fragments: usize,
    pub unidentified_fragments: usize,
}

/// Everything a run produces, in memory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub store: BlobStore,
    pub fragments: Vec<Fragment>,
    pub crossing_fragments: Vec<Fragment>,
    pub globals: Vec<GlobalFragment>,
    pub coexist: Vec<Vec<usize>>,
    pub cascade: CascadeOutcome,
    /// Identities after the cascade (accumulated fragments only).
    pub accumulated: Vec<Option<usize>>,
    /// Identities after residual identification.
    pub residual: Vec<Option<usize>>,
    pub assignments: Vec<Assignment>,
    pub p2: Vec<Vec<f64>>,
    pub fixed: Vec<bool>,
    pub speed: SpeedModel,
    pub reidentifications: Vec<Reidentification>,
    /// Final identities.
    pub identities: Vec<Option<usize>>,
    pub trajectories: Trajectories,
    pub trajectories_interpolated: Trajectories,
    pub summary: Summary,
    pub image_side: usize,
}

impl RunArtifacts {
    pub fn first_global(&self) -> &GlobalFragment {
        &self.globals[self.cascade.first_global]
    }

    pub fn info(&self) -> RunInfo {
        RunInfo {
            n_frames: self.store.frame_count(),
            n_blobs: self.store.len(),
            individual_fragments: self.fragments.len(),
            crossing_fragments: self.crossing_fragments.len(),
            global_fragments: self.globals.len(),
            image_side: self.image_side,
            attempt_coverages: self.cascade.attempt_coverages.clone(),
            reidentified_fragments: self.reidentifications.len(),
            unidentified_fragments: self.identities.iter().filter(|i| i.is_none()).count(),
        }
    }

    pub fn labels(&self) -> ResultLabels {
        let fragments = self
            .fragments
            .iter()
            .enumerate()
            .map(|(f, fr)| FragmentRecord {
                start_frame: fr.start_frame,
                blobs: fr.blobs.iter().map(|&b| self.store.index_in_frame(b)).collect(),
                identity: self.identities[f].map(|i| i + 1),
                accumulated: self.accumulated[f].is_some(),
                p2_max: self.p2[f].iter().copied().fold(0.0, f64::max),
            })
            .collect();
        let g = self.first_global();
        ResultLabels {
            n_animals: self.trajectories.n_animals,
            n_frames: self.store.frame_count(),
            first_global_core: g.core_frame,
            first_global_members: g.members.clone(),
            fragments,
        }
    }
}

fn timed<T>(stage: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    info!("{stage}: {:.2}s", t.elapsed().as_secs_f64());
    out
}

/// Loads the configured input and tracks it.
pub fn run_pipeline(cfg: &TrackConfig) -> Result<RunArtifacts, PipelineError> {
    cfg.validate()?;
    let seq = timed("load", || load_frame_sequence(&cfg.input, &cfg.segmentation))?;
    track(&seq, cfg)
}

/// Tracks an already loaded sequence.
pub fn track(seq: &FrameSequence, cfg: &TrackConfig) -> Result<RunArtifacts, PipelineError> {
    let blobs = timed("segmentation", || seq.segment_all(&cfg.segmentation))?;
    track_blobs(blobs, cfg)
}

/// Tracks segmented frames (blobs per frame, in segmentation order).
pub fn track_blobs(blobs: Vec<Vec<crate::ingest::Blob>>, cfg: &TrackConfig) -> Result<RunArtifacts, PipelineError> {
    cfg.validate()?;
    let n = cfg.n_individuals;
    let mut warnings = Vec::new();
    let store = BlobStore::from_frames(blobs);
    info!("{} frames, {} blobs", store.frame_count(), store.len());

    let area = AreaModel::fit(&store, n)?;
    let graph = timed("overlap graph", || OverlapGraph::build(&store));
    let sure = mark_sure_images(&store, &area, &graph);
    let (kinds, _) = timed("crossing detection", || {
        detect_crossings(&store, &sure, area, &cfg.seeded_crossing_detector(), &mut warnings)
    });
    let frag = build_fragments(&store, &graph, &kinds);
    let fragments = frag.individual;
    let globals = build_global_fragments(&fragments, store.frame_count(), n);
    info!(
        "{} individual fragments, {} crossing fragments, {} global fragments",
        fragments.len(),
        frag.crossing.len(),
        globals.len()
    );
    let coexist = coexistence_lists(&fragments);

    let side = match cfg.identification_image_side {
        Some(s) => s,
        None => identification_image_side(
            store
                .blobs()
                .iter()
                .zip(&kinds)
                .filter(|(_, &k)| k == BlobKind::Individual)
                .map(|(b, _)| b),
        )?,
    };
    let images = timed("identification images", || FragmentImages::build(&store, &fragments, side));
    let distances: Vec<f64> = fragments.iter().map(|f| distance_travelled(f, &store)).collect();
    let input = CascadeInput {
        fragments: &fragments,
        globals: &globals,
        images: &images,
        distances: &distances,
        n_animals: n,
    };
    let cascade = timed("cascade", || run_cascade(&input, &cfg.seeded_cascade()))?;
    warnings.extend(cascade.warnings.iter().cloned());
    let accumulated = cascade.identities.clone();

    let p1: Vec<Vec<f64>> = cascade.distributions.iter().map(|d| d.p1.clone()).collect();
    let res = timed("residual identification", || residual_identify(&p1, &accumulated, &coexist));
    let residual = res.identities();
    let fixed: Vec<bool> = res
        .assignments
        .iter()
        .zip(&res.p2)
        .map(|(a, p2)| match a {
            Assignment::Accumulated(_) => true,
            Assignment::Residual(_) => p2.iter().copied().fold(0.0, f64::max) >= cfg.fixed_p2_threshold,
            Assignment::Unidentified => false,
        })
        .collect();

    let speed = fit_speed_model(&fragments, &store)?;
    let correction = CorrectionInput {
        fragments: &fragments,
        store: &store,
        p2: &res.p2,
        fixed: &fixed,
        coexist: &coexist,
        first_core: globals[cascade.first_global].core_frame,
        n_animals: n,
        speed,
    };
    let (identities, reidentifications) = timed("speed correction", || correct_unrealistic(&correction, &residual));
    info!("{} fragments re-identified", reidentifications.len());

    let trajectories = individual_trajectories(&store, &fragments, &identities, n);
    let mut trajectories_interpolated = trajectories.clone();
    timed("crossings", || {
        resolve_crossings(
            &store,
            &frag.crossing,
            &fragments,
            &identities,
            &mut trajectories_interpolated,
            speed,
            &cfg.crossings,
        )
    });
    interpolate_gaps(&mut trajectories_interpolated);

    let summary = Summary {
        estimated_accuracy: estimated_accuracy(&fragments, &identities, &res.p2).unwrap_or(0.0),
        protocol_used: cascade.status,
        coverage: cascade.coverage,
        v_max: speed.v_max,
        warnings,
    };
    Ok(RunArtifacts {
        store,
        fragments,
        crossing_fragments: frag.crossing,
        globals,
        coexist,
        cascade,
        accumulated,
        residual,
        assignments: res.assignments,
        p2: res.p2,
        fixed,
        speed,
        reidentifications,
        identities,
        trajectories,
        trajectories_interpolated,
        summary,
        image_side: side,
    })
}

fn output_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the run's files into `dir` (created if needed).
pub fn write_artifacts(run: &RunArtifacts, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(output_err(dir))?;
    write_trajectories_csv(&run.trajectories, &dir.join(TRAJECTORIES_FILE))?;
    write_trajectories_csv(&run.trajectories_interpolated, &dir.join(TRAJECTORIES_INTERPOLATED_FILE))?;
    write_summary(&run.summary, &dir.join(SUMMARY_FILE))?;
    let log_path = dir.join(CASCADE_LOG_FILE);
    let mut log = Vec::new();
    for e in &run.cascade.log {
        serde_json::to_writer(&mut log, e).expect("log entry serialises");
        log.push(b'\n');
    }
    std::fs::write(&log_path, log).map_err(output_err(&log_path))?;
    let info_path = dir.join(RUN_INFO_FILE);
    let mut info = serde_json::to_string_pretty(&run.info()).expect("run info serialises");
    info.push('\n');
    std::fs::write(&info_path, info).map_err(output_err(&info_path))?;
    let a_path = dir.join(ASSIGNMENTS_FILE);
    let mut f = std::io::BufWriter::new(std::fs::File::create(&a_path).map_err(output_err(&a_path))?);
    serde_json::to_writer(&mut f, &run.labels()).expect("labels serialise");
    f.write_all(b"\n").map_err(output_err(&a_path))?;
    f.flush().map_err(output_err(&a_path))?;
    Ok(())
}

pub fn read_cascade_log(path: &Path) -> Result<Vec<CascadeLogEntry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| format!("{}: {e}", path.display())))
        .collect()
}
