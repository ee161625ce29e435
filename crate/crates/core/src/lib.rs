//! Tracking-by-identification of unmarked animals in grayscale video.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. [`ingest`] loads frames (or a pre-segmented blob stream) and segments
//!    each frame into blobs.
//! 2. [`blobgraph`] links overlapping blobs across frames, labels images that
//!    are surely individuals or crossings, and builds fragments.
//! 3. [`crossdetect`] trains a crossing detector on the sure images and labels
//!    the ambiguous ones.
//! 4. [`cascade`] trains the identification classifier through up to three
//!    protocols and fixes identities of accumulated fragments.
//! 5. [`residual`] assigns identities to the remaining fragments.
//! 6. [`postproc`] corrects impossible identity jumps, resolves crossings and
//!    assembles trajectories.
//!
//! [`synthgen`] produces synthetic videos with ground truth for all of the
//! above, and [`pipeline`] wires everything together behind a JSON config.

pub mod blobgraph;
pub mod cascade;
pub mod classifier;
pub mod config;
pub mod crossdetect;
pub mod imageprep;
pub mod ingest;
pub mod morphology;
pub mod pipeline;
pub mod postproc;
pub mod residual;
pub mod synthgen;

pub use blobgraph::{AreaModel, BlobId, BlobStore, Fragment, FragmentKind, GlobalFragment};
pub use ingest::{Blob, FrameSequence, GrayFrame, SegmentationParams};
pub use config::TrackConfig;
pub use pipeline::{run_pipeline, PipelineError, RunArtifacts};
