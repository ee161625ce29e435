//! Synthetic videos with planted identities and ground truth.
//!
//! Animals are textured ellipses living on a square grid of home cells.
//! Each one alternates individual fragments, whose lengths are drawn from a
//! gamma distribution, with short crossings against a grid neighbour: the
//! pair steps toward the midpoint of their homes until the bodies overlap,
//! stays merged for `crossing_length` frames and steps back. Frames are
//! rendered and then segmented with the regular segmentation, so the blobs
//! are exactly what the tracker would see.

mod validate;

pub use validate::{validation_metrics, ImageCounts, ValidationError, ValidationMetrics, ValidationOptions};

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    segment_frame, write_blob_stream, write_pgm, Blob, GrayFrame, IngestError, SegmentationContext,
    SegmentationParams,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error("rendered frame {frame} does not match the plan: {reason}")]
    Inconsistent { frame: usize, reason: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_individuals: usize,
    pub total_frames: usize,
    /// Gamma scale of individual-fragment lengths.
    pub theta: f64,
    /// Gamma shape of individual-fragment lengths.
    pub k: f64,
    pub crossing_length: usize,
    /// When false nobody ever crosses.
    pub crossings: bool,
    /// Semi-axes of the body ellipse, in pixels.
    pub body_semi_major: f64,
    pub body_semi_minor: f64,
    /// Texture amplitude over per-pixel noise standard deviation.
    pub snr: f64,
    /// Largest centroid displacement per frame.
    pub max_step: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_individuals: 10,
            total_frames: 10_000,
            theta: 2000.0,
            k: 0.5,
            crossing_length: 3,
            crossings: true,
            body_semi_major: 6.0,
            body_semi_minor: 3.0,
            snr: 8.0,
            max_step: 4.0,
            seed: 0,
        }
    }
}

/// Ready-made configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// No crossings: one global fragment holds the whole video.
    Protocol1,
    /// Faint textures.
    Protocol2,
    /// Very short fragments: few images per global fragment.
    Protocol3,
}

impl Preset {
    pub fn config(self, seed: u64) -> SynthConfig {
        let base = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        match self {
            Preset::Protocol1 => SynthConfig {
                n_individuals: 4,
                total_frames: 400,
                crossings: false,
                ..base
            },
            Preset::Protocol2 => SynthConfig {
                n_individuals: 6,
                total_frames: 3000,
                theta: 60.0,
                k: 0.5,
                snr: 1.0,
                ..base
            },
            Preset::Protocol3 => SynthConfig {
                n_individuals: 8,
                total_frames: 3000,
                theta: 10.0,
                k: 0.5,
                snr: 5.0,
                ..base
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.n_individuals < 2 {
            return bad(format!("need at least 2 individuals, got {}", self.n_individuals));
        }
        if !(self.theta > 0.0 && self.k > 0.0) {
            return bad(format!("gamma parameters must be positive (theta {}, k {})", self.theta, self.k));
        }
        if self.total_frames == 0 {
            return bad("total_frames must be positive".into());
        }
        if self.crossings && self.crossing_length == 0 {
            return bad("crossing_length must be positive".into());
        }
        if self.crossings && self.crossing_length >= self.total_frames {
            return bad(format!(
                "a {}-frame crossing does not fit in {} frames",
                self.crossing_length, self.total_frames
            ));
        }
        if !(self.body_semi_minor >= 2.0 && self.body_semi_major >= self.body_semi_minor) {
            return bad("body needs semi_minor >= 2 and semi_major >= semi_minor".into());
        }
        // consecutive bodies must keep overlapping
        if !(self.max_step >= 2.0 && self.max_step < 2.0 * self.body_semi_minor) {
            return bad(format!(
                "max_step {} must lie in [2, {})",
                self.max_step,
                2.0 * self.body_semi_minor
            ));
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        Ok(())
    }

    fn geometry(&self) -> Geometry {
        let a = self.body_semi_major;
        let v = self.max_step;
        // crossing: centres 2a - v apart; staging: 2a + v apart
        let home_radius = 2.0;
        let spacing = (2.0 * (home_radius + a + v) + v).ceil();
        let cols = (self.n_individuals as f64).sqrt().ceil() as usize;
        let rows = self.n_individuals.div_ceil(cols);
        let margin = v.ceil();
        Geometry {
            spacing,
            cols,
            home_radius,
            margin,
            width: (cols as f64 * spacing + 2.0 * margin) as usize,
            height: (rows as f64 * spacing + 2.0 * margin) as usize,
        }
    }
}

struct Geometry {
    spacing: f64,
    cols: usize,
    home_radius: f64,
    margin: f64,
    width: usize,
    height: usize,
}

impl Geometry {
    fn cell(&self, i: usize) -> (usize, usize) {
        (i % self.cols, i / self.cols)
    }

    fn home(&self, i: usize) -> (f64, f64) {
        let (c, r) = self.cell(i);
        (
            self.margin + (c as f64 + 0.5) * self.spacing,
            self.margin + (r as f64 + 0.5) * self.spacing,
        )
    }

    fn neighbours(&self, i: usize, n: usize) -> Vec<usize> {
        let (c, r) = self.cell(i);
        let mut out = Vec::new();
        if c > 0 {
            out.push(i - 1);
        }
        if c + 1 < self.cols && i + 1 < n {
            out.push(i + 1);
        }
        if r > 0 {
            out.push(i - self.cols);
        }
        if i + self.cols < n {
            out.push(i + self.cols);
        }
        out
    }
}

/// Two animals merged into one blob over `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedCrossing {
    pub animals: [usize; 2],
    pub start: usize,
    pub end: usize,
}

/// A maximal run of frames in which `animal` is alone in its blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedFragment {
    pub animal: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_animals: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub body_length: f64,
    /// Animals (0-based) inside each blob, per frame, in segmentation
    /// order.
    pub blobs: Vec<Vec<Vec<usize>>>,
    /// Planned body centre of every animal in every frame.
    pub centroids: Vec<Vec<[f64; 2]>>,
    pub fragments: Vec<PlantedFragment>,
    pub crossings: Vec<PlantedCrossing>,
}

impl GroundTruth {
    pub fn in_crossing(&self, frame: usize, animal: usize) -> bool {
        self.blobs[frame].iter().any(|b| b.len() > 1 && b.contains(&animal))
    }

    /// Centroid displacement of `animal` into `frame` (out of frame 0 for
    /// the first frame).
    pub fn speed(&self, frame: usize, animal: usize) -> f64 {
        if self.n_frames < 2 {
            return 0.0;
        }
        let (a, b) = if frame == 0 { (0, 1) } else { (frame - 1, frame) };
        let (p, q) = (self.centroids[a][animal], self.centroids[b][animal]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let text = serde_json::to_string(self).expect("ground truth serialises");
        std::fs::write(path, text).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| SynthError::Invalid(format!("{}: {e}", path.display())))
    }
}

/// A generated video: segmented blobs plus ground truth.
#[derive(Debug, Clone)]
pub struct SynthVideo {
    pub width: usize,
    pub height: usize,
    pub blobs: Vec<Vec<Blob>>,
    pub ground_truth: GroundTruth,
}

/// `ceil(Gamma(k, theta))`, at least 1.
pub fn sample_fragment_length(gamma: &Gamma<f64>, rng: &mut ChaCha8Rng) -> usize {
    (gamma.sample(rng).ceil() as usize).max(1)
}

/// Frames, before a crossing, in which an animal walks to its staging
/// point (and turns to face its partner).
const APPROACH_FRAMES: usize = 4;
/// Minimum individual frames between crossings with different partners.
const MIN_PARTNER_SWITCH_GAP: usize = APPROACH_FRAMES + 1;

/// Picks crossing times and partners.
///
/// Each animal draws the length of its next individual fragment; when it
/// is due it crosses with a random free grid neighbour, which cuts that
/// neighbour's own fragment short. Crossing again within
/// `MIN_PARTNER_SWITCH_GAP` frames is only allowed with the same partner;
/// when no neighbour qualifies the crossing is postponed by a frame.
fn schedule_crossings(cfg: &SynthConfig, geo: &Geometry, rng: &mut ChaCha8Rng) -> Vec<PlantedCrossing> {
    if !cfg.crossings {
        return Vec::new();
    }
    let n = cfg.n_individuals;
    let c = cfg.crossing_length;
    let gamma = Gamma::new(cfg.k, cfg.theta).expect("validated gamma parameters");
    let mut next: Vec<usize> = (0..n).map(|_| sample_fragment_length(&gamma, rng)).collect();
    // first frame after the latest crossing, and its partner
    let mut last: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut out = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| geo.neighbours(i, n)).collect();
    let free = |last: &[Option<(usize, usize)>], i: usize, t: usize| last[i].is_none_or(|(e, _)| e <= t);
    let may_pair = |last: &[Option<(usize, usize)>], i: usize, j: usize, t: usize| {
        last[i].is_none_or(|(e, p)| p == j || t >= e + MIN_PARTNER_SWITCH_GAP)
    };
    for t in 0..cfg.total_frames {
        if t + c > cfg.total_frames {
            break;
        }
        order.shuffle(rng);
        for &i in &order {
            if next[i] != t || !free(&last, i, t) {
                continue;
            }
            let cands: Vec<usize> = neighbours[i]
                .iter()
                .copied()
                .filter(|&j| free(&last, j, t) && t > 0 && may_pair(&last, i, j, t) && may_pair(&last, j, i, t))
                .collect();
            let Some(&j) = cands.get(rng.random_range(0..cands.len().max(1))) else {
                next[i] += 1;
                continue;
            };
            out.push(PlantedCrossing {
                animals: [i.min(j), i.max(j)],
                start: t,
                end: t + c - 1,
            });
            last[i] = Some((t + c, j));
            last[j] = Some((t + c, i));
            next[i] = t + c + sample_fragment_length(&gamma, rng);
            next[j] = t + c + sample_fragment_length(&gamma, rng);
        }
    }
    out.sort_by_key(|x| (x.start, x.animals));
    out
}

#[derive(Debug, Clone, Copy)]
struct Pose {
    x: f64,
    y: f64,
    angle: f64,
}

fn wrap_axis(a: f64) -> f64 {
    // axis angles live in (-pi/2, pi/2]
    let mut a = a % std::f64::consts::PI;
    if a > std::f64::consts::FRAC_PI_2 {
        a -= std::f64::consts::PI;
    } else if a <= -std::f64::consts::FRAC_PI_2 {
        a += std::f64::consts::PI;
    }
    a
}

fn turn_toward(from: f64, to: f64, cap: f64) -> f64 {
    let d = wrap_axis(to - from);
    wrap_axis(from + d.clamp(-cap, cap))
}

/// Body centres and orientations of one animal over the whole video.
fn plan_motion(
    i: usize,
    cfg: &SynthConfig,
    geo: &Geometry,
    crossings: &[PlantedCrossing],
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    const MAX_TURN: f64 = 0.6;
    let a = cfg.body_semi_major;
    let v = cfg.max_step;
    let home = geo.home(i);
    let mine: Vec<&PlantedCrossing> = crossings.iter().filter(|c| c.animals.contains(&i)).collect();
    // (centre while merged, staging point, axis angle) per crossing
    let spots: Vec<((f64, f64), (f64, f64), f64)> = mine
        .iter()
        .map(|c| {
            let j = if c.animals[0] == i { c.animals[1] } else { c.animals[0] };
            let other = geo.home(j);
            let (dx, dy) = (other.0 - home.0, other.1 - home.1);
            let d = (dx * dx + dy * dy).sqrt();
            let (ux, uy) = (dx / d, dy / d);
            let mid = ((home.0 + other.0) / 2.0, (home.1 + other.1) / 2.0);
            let merged = (mid.0 - (a - v / 2.0) * ux, mid.1 - (a - v / 2.0) * uy);
            let staging = (mid.0 - (a + v / 2.0) * ux, mid.1 - (a + v / 2.0) * uy);
            (merged, staging, wrap_axis(uy.atan2(ux)))
        })
        .collect();
    let step = Normal::new(0.0, 0.35).expect("valid normal");
    let turn = Normal::new(0.0, 0.12).expect("valid normal");
    let mut wander = home;
    let mut pose = Pose {
        x: home.0,
        y: home.1,
        angle: wrap_axis(rng.random_range(-1.5..1.5)),
    };
    let mut out = Vec::with_capacity(cfg.total_frames);
    let mut k = 0; // next crossing not yet finished
    for f in 0..cfg.total_frames {
        while k < mine.len() && mine[k].end < f {
            k += 1;
        }
        // the wander point drifts inside the home disc
        wander.0 += step.sample(rng);
        wander.1 += step.sample(rng);
        let (wx, wy) = (wander.0 - home.0, wander.1 - home.1);
        let r = (wx * wx + wy * wy).sqrt();
        if r > geo.home_radius {
            wander = (home.0 + wx * geo.home_radius / r, home.1 + wy * geo.home_radius / r);
        }
        let heading = pose.angle + turn.sample(rng);
        let in_crossing = k < mine.len() && mine[k].start <= f;
        let prev_end = if in_crossing { None } else { k.checked_sub(1).map(|p| (mine[p].end, p)) };
        let (target, target_angle, exact) = if in_crossing {
            (spots[k].0, spots[k].2, true)
        } else if let Some((e, p)) = prev_end.filter(|&(e, _)| f == e + 1) {
            let _ = e;
            (spots[p].1, spots[p].2, true)
        } else if k < mine.len() && mine[k].start == f + 1 {
            (spots[k].1, spots[k].2, true)
        } else if k < mine.len() && mine[k].start <= f + APPROACH_FRAMES {
            (spots[k].1, spots[k].2, false)
        } else {
            (wander, heading, false)
        };
        if exact {
            pose = Pose {
                x: target.0,
                y: target.1,
                angle: target_angle,
            };
        } else {
            let (dx, dy) = (target.0 - pose.x, target.1 - pose.y);
            let d = (dx * dx + dy * dy).sqrt();
            let s = if d > v { v / d } else { 1.0 };
            pose = Pose {
                x: pose.x + dx * s,
                y: pose.y + dy * s,
                angle: turn_toward(pose.angle, target_angle, MAX_TURN),
            };
        }
        out.push(pose);
    }
    out
}

/// Per-animal texture over body coordinates, bilinearly interpolated.
struct Template {
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

impl Template {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (cols, rows) = (6, 3);
        Self {
            cols,
            rows,
            values: (0..cols * rows).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// `u`, `v` in [0, 1].
    fn sample(&self, u: f64, v: f64) -> f64 {
        let x = u.clamp(0.0, 1.0) * (self.cols - 1) as f64;
        let y = v.clamp(0.0, 1.0) * (self.rows - 1) as f64;
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let g = |c: usize, r: usize| self.values[r * self.cols + c];
        (g(x0, y0) * (1.0 - fx) + g(x1, y0) * fx) * (1.0 - fy) + (g(x0, y1) * (1.0 - fx) + g(x1, y1) * fx) * fy
    }
}

const BACKGROUND: u8 = 200;
const BODY_BASE: f64 = 70.0;
const TEXTURE_AMPLITUDE: f64 = 35.0;
const BODY_MAX: f64 = 130.0;

/// Draws the animals into `frame` and records which animal owns each
/// pixel (the lower id where bodies overlap) in `owner`.
fn render(
    frame: &mut GrayFrame,
    owner: &mut [u32],
    poses: &[Pose],
    templates: &[Template],
    cfg: &SynthConfig,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
) {
    frame.data.fill(BACKGROUND);
    owner.fill(u32::MAX);
    let (a, b) = (cfg.body_semi_major, cfg.body_semi_minor);
    for (i, p) in poses.iter().enumerate() {
        let (c, s) = (p.angle.cos(), p.angle.sin());
        let x0 = (p.x - a - 1.0).floor().max(0.0) as usize;
        let y0 = (p.y - a - 1.0).floor().max(0.0) as usize;
        let x1 = ((p.x + a + 1.0).ceil() as usize).min(frame.width - 1);
        let y1 = ((p.y + a + 1.0).ceil() as usize).min(frame.height - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                if (u / a).powi(2) + (v / b).powi(2) > 1.0 {
                    continue;
                }
                let k = y * frame.width + x;
                if owner[k] != u32::MAX {
                    continue;
                }
                owner[k] = i as u32;
                let t = templates[i].sample((u / a + 1.0) / 2.0, (v / b + 1.0) / 2.0);
                let val = BODY_BASE + TEXTURE_AMPLITUDE * t + noise.sample(rng);
                frame.data[k] = val.round().clamp(0.0, BODY_MAX) as u8;
            }
        }
    }
}

/// Planted fragments from the crossing schedule.
fn planted_fragments(n: usize, total: usize, crossings: &[PlantedCrossing]) -> Vec<PlantedFragment> {
    let mut out = Vec::new();
    for i in 0..n {
        let mut start = 0;
        for c in crossings.iter().filter(|c| c.animals.contains(&i)) {
            if c.start > start {
                out.push(PlantedFragment {
                    animal: i,
                    start,
                    end: c.start - 1,
                });
            }
            start = c.end + 1;
        }
        if start < total {
            out.push(PlantedFragment {
                animal: i,
                start,
                end: total - 1,
            });
        }
    }
    out.sort_by_key(|f| (f.start, f.animal));
    out
}

/// Generates the video, handing every rendered frame to `on_frame`.
pub fn generate_with(
    cfg: &SynthConfig,
    mut on_frame: impl FnMut(usize, &GrayFrame) -> Result<(), SynthError>,
) -> Result<SynthVideo, SynthError> {
    cfg.validate()?;
    let n = cfg.n_individuals;
    let geo = cfg.geometry();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crossings = schedule_crossings(cfg, &geo, &mut rng);
    let templates: Vec<Template> = (0..n).map(|_| Template::random(&mut rng)).collect();
    let poses: Vec<Vec<Pose>> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(1 + i as u64);
            plan_motion(i, cfg, &geo, &crossings, &mut r)
        })
        .collect();
    let mut render_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    render_rng.set_stream(1 << 32);
    let noise = Normal::new(0.0, TEXTURE_AMPLITUDE / cfg.snr).expect("positive snr");
    let params = segmentation_params();
    let ctx = SegmentationContext::default();
    let mut frame = GrayFrame::filled(geo.width, geo.height, BACKGROUND);
    let mut owner = vec![u32::MAX; geo.width * geo.height];
    let mut blobs = Vec::with_capacity(cfg.total_frames);
    let mut gt_blobs = Vec::with_capacity(cfg.total_frames);
    let mut centroids = Vec::with_capacity(cfg.total_frames);
    let mut merged_with: Vec<Option<usize>> = vec![None; n];
    for f in 0..cfg.total_frames {
        let frame_poses: Vec<Pose> = poses.iter().map(|p| p[f]).collect();
        render(&mut frame, &mut owner, &frame_poses, &templates, cfg, &noise, &mut render_rng);
        on_frame(f, &frame)?;
        let fb = segment_frame(&frame, f, &params, &ctx);
        let mut members = Vec::with_capacity(fb.len());
        for b in &fb {
            let mut ids: Vec<usize> = b
                .pixels
                .iter()
                .map(|p| owner[p.y as usize * geo.width + p.x as usize])
                .filter(|&o| o != u32::MAX)
                .map(|o| o as usize)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            members.push(ids);
        }
        merged_with.fill(None);
        for c in crossings.iter().filter(|c| c.start <= f && f <= c.end) {
            merged_with[c.animals[0]] = Some(c.animals[1]);
            merged_with[c.animals[1]] = Some(c.animals[0]);
        }
        check_frame(f, &members, &merged_with)?;
        centroids.push(frame_poses.iter().map(|p| [p.x, p.y]).collect());
        gt_blobs.push(members);
        blobs.push(fb);
    }
    let ground_truth = GroundTruth {
        n_animals: n,
        n_frames: cfg.total_frames,
        width: geo.width,
        height: geo.height,
        body_length: 2.0 * cfg.body_semi_major,
        blobs: gt_blobs,
        centroids,
        fragments: planted_fragments(n, cfg.total_frames, &crossings),
        crossings,
    };
    Ok(SynthVideo {
        width: geo.width,
        height: geo.height,
        blobs,
        ground_truth,
    })
}

/// Every animal must sit in exactly one blob, merged only with its planned
/// crossing partner.
fn check_frame(frame: usize, members: &[Vec<usize>], merged_with: &[Option<usize>]) -> Result<(), SynthError> {
    let mut seen = vec![0usize; merged_with.len()];
    for m in members {
        if m.is_empty() {
            return Err(SynthError::Inconsistent {
                frame,
                reason: "blob without an animal".into(),
            });
        }
        for &i in m {
            seen[i] += 1;
        }
        let ok = match m.as_slice() {
            [i] => merged_with[*i].is_none(),
            [i, j] => merged_with[*i] == Some(*j),
            _ => false,
        };
        if !ok {
            return Err(SynthError::Inconsistent {
                frame,
                reason: format!("unexpected blob membership {m:?}"),
            });
        }
    }
    if let Some(i) = seen.iter().position(|&s| s != 1) {
        return Err(SynthError::Inconsistent {
            frame,
            reason: format!("animal {i} appears in {} blobs", seen[i]),
        });
    }
    Ok(())
}

/// Segmentation used on rendered frames. Rasterised body tips can touch
/// the body only diagonally; such specks are dropped by the area floor.
pub fn segmentation_params() -> SegmentationParams {
    SegmentationParams {
        min_area: 10,
        ..SegmentationParams::default()
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthVideo, SynthError> {
    generate_with(cfg, |_, _| Ok(()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthFormat {
    BlobStream,
    Pgm,
}

/// File name of the video inside the output directory.
pub fn video_path(dir: &Path, format: SynthFormat) -> std::path::PathBuf {
    match format {
        SynthFormat::BlobStream => dir.join("blobs.jsonl"),
        SynthFormat::Pgm => dir.join("frames"),
    }
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Generates and writes the video plus `ground_truth.json` into `dir`.
pub fn write_video(cfg: &SynthConfig, dir: &Path, format: SynthFormat) -> Result<SynthVideo, SynthError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let video = match format {
        SynthFormat::BlobStream => {
            let v = generate(cfg)?;
            write_blob_stream(&video_path(dir, format), &v.blobs)?;
            v
        }
        SynthFormat::Pgm => {
            let frames_dir = video_path(dir, format);
            std::fs::create_dir_all(&frames_dir).map_err(io(&frames_dir))?;
            generate_with(cfg, |f, frame| {
                write_pgm(&frames_dir.join(format!("frame_{f:06}.pgm")), frame).map_err(SynthError::from)
            })?
        }
    };
    video.ground_truth.save(&dir.join(GROUND_TRUTH_FILE))?;
    Ok(video)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_individuals: 5,
            total_frames: 400,
            theta: 20.0,
            k: 0.5,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn gamma_mean_matches() {
        let g = Gamma::new(0.5, 2000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mean = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1000.0).abs() / 1000.0 < 0.05, "{mean}");
    }

    #[test]
    fn rendered_blobs_follow_the_plan() {
        for seed in 0..3 {
            let v = generate(&small(seed)).unwrap();
            assert!(!v.ground_truth.crossings.is_empty());
            for (f, blobs) in v.blobs.iter().enumerate() {
                assert_eq!(blobs.len(), v.ground_truth.blobs[f].len());
            }
        }
    }

    #[test]
    fn steps_are_bounded() {
        let cfg = small(4);
        let v = generate(&cfg).unwrap();
        for f in 1..cfg.total_frames {
            for i in 0..cfg.n_individuals {
                assert!(v.ground_truth.speed(f, i) <= cfg.max_step + 1e-9, "frame {f} animal {i}");
            }
        }
    }

    #[test]
    fn no_crossings_means_one_fragment_each() {
        let cfg = SynthConfig {
            n_individuals: 2,
            total_frames: 50,
            crossings: false,
            ..SynthConfig::default()
        };
        let v = generate(&cfg).unwrap();
        assert_eq!(v.ground_truth.fragments.len(), 2);
        assert!(v.blobs.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn same_seed_same_video() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(a.ground_truth, b.ground_truth);
        let c = generate(&small(10)).unwrap();
        assert_ne!(a.ground_truth, c.ground_truth);
    }

    #[test]
    fn planted_fragments_partition_time() {
        let v = generate(&small(1)).unwrap();
        let gt = &v.ground_truth;
        for i in 0..gt.n_animals {
            let mut covered = vec![0; gt.n_frames];
            for fr in gt.fragments.iter().filter(|f| f.animal == i) {
                for c in &mut covered[fr.start..=fr.end] {
                    *c += 1;
                }
            }
            for (f, &c) in covered.iter().enumerate() {
                assert_eq!(c == 1, !gt.in_crossing(f, i), "frame {f} animal {i}");
                assert!(c <= 1);
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let mut c = small(0);
        c.n_individuals = 1;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.theta = 0.0;
        assert!(c.validate().is_err());
        let mut c = small(0);
        c.max_step = 10.0;
        assert!(c.validate().is_err());
    }
}
