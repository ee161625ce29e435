//! Overlap graph between blobs in consecutive frames, the individual-area
//! model, sure-image heuristics, and individual/crossing/global fragments.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::Blob;

/// Index of a blob in a [`BlobStore`]: frame-major, then segmentation order.
pub type BlobId = usize;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlobGraphError {
    #[error(
        "no frame has exactly {n_animals} blobs, the area model cannot be fitted \
         (frames per blob count: {histogram:?})"
    )]
    NoCompleteFrame {
        n_animals: usize,
        histogram: BTreeMap<usize, usize>,
    },
}

/// All blobs of a video, flattened in frame order.
#[derive(Debug, Clone, Default)]
pub struct BlobStore {
    blobs: Vec<Blob>,
    offsets: Vec<usize>,
}

impl BlobStore {
    pub fn from_frames(frames: Vec<Vec<Blob>>) -> Self {
        let mut offsets = Vec::with_capacity(frames.len() + 1);
        let mut blobs = Vec::with_capacity(frames.iter().map(Vec::len).sum());
        offsets.push(0);
        for (f, fr) in frames.into_iter().enumerate() {
            for mut b in fr {
                b.frame = f;
                blobs.push(b);
            }
            offsets.push(blobs.len());
        }
        Self { blobs, offsets }
    }

    pub fn frame_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn frame_range(&self, frame: usize) -> Range<BlobId> {
        self.offsets[frame]..self.offsets[frame + 1]
    }

    pub fn frame_blobs(&self, frame: usize) -> &[Blob] {
        &self.blobs[self.frame_range(frame)]
    }

    pub fn blob(&self, id: BlobId) -> &Blob {
        &self.blobs[id]
    }

    pub fn blobs(&self) -> &[Blob] {
        &self.blobs
    }

    /// Position of a blob within its frame.
    pub fn index_in_frame(&self, id: BlobId) -> usize {
        id - self.offsets[self.blobs[id].frame]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlobKind {
    Individual,
    Crossing,
}

/// Median and (population) standard deviation of individual blob areas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaModel {
    pub median: f64,
    pub std: f64,
}

impl AreaModel {
    /// Fits the model on blobs from frames whose blob count equals
    /// `n_animals`.
    pub fn fit(store: &BlobStore, n_animals: usize) -> Result<Self, BlobGraphError> {
        let mut areas = Vec::new();
        let mut histogram = BTreeMap::new();
        for f in 0..store.frame_count() {
            let blobs = store.frame_blobs(f);
            *histogram.entry(blobs.len()).or_insert(0) += 1;
            if blobs.len() == n_animals {
                areas.extend(blobs.iter().map(|b| b.area() as f64));
            }
        }
        if areas.is_empty() {
            return Err(BlobGraphError::NoCompleteFrame {
                n_animals,
                histogram,
            });
        }
        Ok(Self::from_areas(&areas))
    }

    pub fn from_areas(areas: &[f64]) -> Self {
        let mut v = areas.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            median,
            std: var.sqrt(),
        }
    }

    /// Individual iff `|area - median| < 4 * std` (strict).
    pub fn classify_area(&self, area: usize) -> BlobKind {
        if (area as f64 - self.median).abs() < 4.0 * self.std {
            BlobKind::Individual
        } else {
            BlobKind::Crossing
        }
    }

    pub fn classify(&self, blob: &Blob) -> BlobKind {
        self.classify_area(blob.area())
    }
}

/// True iff the two pixel sets intersect.
pub fn overlap(a: &Blob, b: &Blob) -> bool {
    if !a.bbox.intersects(&b.bbox) {
        return false;
    }
    // both pixel lists are sorted row-major
    let (mut i, mut j) = (0, 0);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Previous (P) and next (N) overlapping blobs of every blob.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverlapGraph {
    pub prev: Vec<Vec<BlobId>>,
    pub next: Vec<Vec<BlobId>>,
}

impl OverlapGraph {
    pub fn build(store: &BlobStore) -> Self {
        let mut prev = vec![Vec::new(); store.len()];
        let mut next = vec![Vec::new(); store.len()];
        for f in 1..store.frame_count() {
            for a in store.frame_range(f - 1) {
                for b in store.frame_range(f) {
                    if overlap(store.blob(a), store.blob(b)) {
                        next[a].push(b);
                        prev[b].push(a);
                    }
                }
            }
        }
        Self { prev, next }
    }

    /// The unique successor of `b` if `|N_b| = 1` and that successor has
    /// `|P| = 1`.
    #[inline]
    pub fn unique_link(&self, b: BlobId) -> Option<BlobId> {
        match self.next[b].as_slice() {
            [n] if self.prev[*n].len() == 1 => Some(*n),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SureLabel {
    SureIndividual,
    SureCrossing,
    Ambiguous,
}

/// Labels blobs that are surely one animal or surely a crossing.
///
/// The past and future overlapping history of a blob is the chain reachable
/// through one-to-one links (`|N| = 1` on one side, `|P| = 1` on the
/// other); it ends at the first merge or split. Inside such a chain every
/// blob has `|P| = |N| = 1` except possibly the ends, so only the first
/// blob's `|P|` and the last blob's `|N|` decide the history conditions.
pub fn mark_sure_images(store: &BlobStore, area: &AreaModel, graph: &OverlapGraph) -> Vec<SureLabel> {
    let n = store.len();
    // chain first/last via forward and backward passes over unique links
    let mut first = vec![0usize; n];
    for b in 0..n {
        first[b] = b;
    }
    for b in 0..n {
        if let Some(nx) = graph.unique_link(b) {
            first[nx] = first[b];
        }
    }
    let mut last: Vec<usize> = (0..n).collect();
    for b in (0..n).rev() {
        if let Some(nx) = graph.unique_link(b) {
            last[b] = last[nx];
        }
    }
    (0..n)
        .map(|b| {
            let kind = area.classify(store.blob(b));
            let (p, nn) = (graph.prev[b].len(), graph.next[b].len());
            let past_merge = graph.prev[first[b]].len() > 1;
            let future_split = graph.next[last[b]].len() > 1;
            match kind {
                BlobKind::Individual => {
                    if p == 1 && nn == 1 && !past_merge && !future_split {
                        SureLabel::SureIndividual
                    } else {
                        SureLabel::Ambiguous
                    }
                }
                BlobKind::Crossing => {
                    if p > 1 || nn > 1 || (p == 1 && nn == 1 && past_merge && future_split) {
                        SureLabel::SureCrossing
                    } else {
                        SureLabel::Ambiguous
                    }
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FragmentKind {
    Individual,
    Crossing,
}

/// A maximal run of one-to-one overlapping same-kind blobs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub id: usize,
    pub kind: FragmentKind,
    /// One blob per frame, consecutive frames.
    pub blobs: Vec<BlobId>,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn coexists_with(&self, other: &Fragment) -> bool {
        self.start_frame <= other.end_frame && other.start_frame <= self.end_frame
    }

    pub fn contains_frame(&self, frame: usize) -> bool {
        frame >= self.start_frame && frame <= self.end_frame
    }

    pub fn blob_at(&self, frame: usize) -> Option<BlobId> {
        self.contains_frame(frame)
            .then(|| self.blobs[frame - self.start_frame])
    }
}

/// Individual and crossing fragments with a reverse index from blobs.
#[derive(Debug, Clone, Default)]
pub struct Fragmentation {
    pub individual: Vec<Fragment>,
    pub crossing: Vec<Fragment>,
    pub blob_fragment: Vec<(FragmentKind, usize)>,
}

/// Assigns every blob to a fragment. Blobs are visited in frame-major,
/// segmentation order; an unassigned blob opens a fragment which grows
/// while the current blob has exactly one successor, that successor has
/// exactly one predecessor, and it carries the same label.
pub fn build_fragments(store: &BlobStore, graph: &OverlapGraph, kinds: &[BlobKind]) -> Fragmentation {
    assert_eq!(kinds.len(), store.len(), "one label per blob");
    let unset = (FragmentKind::Individual, usize::MAX);
    let mut out = Fragmentation {
        blob_fragment: vec![unset; store.len()],
        ..Default::default()
    };
    for b in 0..store.len() {
        if out.blob_fragment[b] != unset {
            continue;
        }
        let kind = match kinds[b] {
            BlobKind::Individual => FragmentKind::Individual,
            BlobKind::Crossing => FragmentKind::Crossing,
        };
        let list = match kind {
            FragmentKind::Individual => &mut out.individual,
            FragmentKind::Crossing => &mut out.crossing,
        };
        let id = list.len();
        let mut blobs = vec![b];
        out.blob_fragment[b] = (kind, id);
        let mut cur = b;
        while let Some(nx) = graph.unique_link(cur) {
            if kinds[nx] != kinds[b] || out.blob_fragment[nx] != unset {
                break;
            }
            out.blob_fragment[nx] = (kind, id);
            blobs.push(nx);
            cur = nx;
        }
        list.push(Fragment {
            id,
            kind,
            start_frame: store.blob(b).frame,
            end_frame: store.blob(cur).frame,
            blobs,
        });
    }
    out
}

/// Individual fragments, one per animal, coexisting at `core_frame`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalFragment {
    /// Individual fragment ids, ascending.
    pub members: Vec<usize>,
    /// First frame at which all members coexist.
    pub core_frame: usize,
}

impl GlobalFragment {
    pub fn image_count(&self, fragments: &[Fragment]) -> usize {
        self.members.iter().map(|&m| fragments[m].len()).sum()
    }

    pub fn min_fragment_len(&self, fragments: &[Fragment]) -> usize {
        self.members
            .iter()
            .map(|&m| fragments[m].len())
            .min()
            .unwrap_or(0)
    }
}

/// Minimum number of images of every member of a global fragment.
pub const MIN_GLOBAL_MEMBER_IMAGES: usize = 3;

/// Scans frames for moments where exactly `n_animals` individual fragments
/// coexist, all with at least three images. Frames sharing a member set
/// yield one global fragment whose core is the earliest such frame.
pub fn build_global_fragments(
    individual: &[Fragment],
    frame_count: usize,
    n_animals: usize,
) -> Vec<GlobalFragment> {
    let mut starts: Vec<Vec<usize>> = vec![Vec::new(); frame_count + 1];
    let mut ends: Vec<Vec<usize>> = vec![Vec::new(); frame_count + 1];
    for f in individual {
        starts[f.start_frame].push(f.id);
        ends[f.end_frame + 1].push(f.id);
    }
    let mut active: Vec<usize> = Vec::new();
    let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut out = Vec::new();
    for frame in 0..frame_count {
        active.retain(|id| !ends[frame].contains(id));
        active.extend_from_slice(&starts[frame]);
        if active.len() != n_animals || n_animals == 0 {
            continue;
        }
        if active
            .iter()
            .any(|&id| individual[id].len() < MIN_GLOBAL_MEMBER_IMAGES)
        {
            continue;
        }
        let mut members = active.clone();
        members.sort_unstable();
        if seen.contains_key(&members) {
            continue;
        }
        seen.insert(members.clone(), out.len());
        out.push(GlobalFragment {
            members,
            core_frame: frame,
        });
    }
    out
}

/// Sum of Euclidean distances between consecutive centroids.
pub fn distance_travelled(fragment: &Fragment, store: &BlobStore) -> f64 {
    fragment
        .blobs
        .windows(2)
        .map(|w| {
            let (a, b) = (store.blob(w[0]).centroid, store.blob(w[1]).centroid);
            ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
        })
        .sum()
}

/// For every fragment, the ids of the other fragments sharing a frame with
/// it, ascending.
pub fn coexistence_lists(fragments: &[Fragment]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..fragments.len()).collect();
    order.sort_by_key(|&i| (fragments[i].start_frame, i));
    let mut out = vec![Vec::new(); fragments.len()];
    let mut open: Vec<usize> = Vec::new();
    for &i in &order {
        let s = fragments[i].start_frame;
        open.retain(|&j| fragments[j].end_frame >= s);
        for &j in &open {
            out[i].push(j);
            out[j].push(i);
        }
        open.push(i);
    }
    for l in &mut out {
        l.sort_unstable();
    }
    out
}

#[derive(Debug, Serialize)]
struct FragmentDump {
    id: usize,
    kind: FragmentKind,
    frames: [usize; 2],
    centroids: Vec<[f64; 2]>,
}

/// Debug dump of fragments as a JSON array.
pub fn fragments_debug_json(fragments: &[Fragment], store: &BlobStore) -> serde_json::Value {
    let dumps: Vec<FragmentDump> = fragments
        .iter()
        .map(|f| FragmentDump {
            id: f.id,
            kind: f.kind,
            frames: [f.start_frame, f.end_frame],
            centroids: f
                .blobs
                .iter()
                .map(|&b| {
                    let c = store.blob(b).centroid;
                    [c.0, c.1]
                })
                .collect(),
        })
        .collect();
    serde_json::to_value(dumps).expect("fragment dump serialises")
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::imageprep::MaskedImage;
    use crate::ingest::Pixel;

    /// A horizontal run of `len` pixels starting at (x, y).
    pub fn bar(frame: usize, x: u16, y: u16, len: u16) -> Blob {
        let px = (0..len).map(|i| Pixel::new(x + i, y)).collect();
        Blob::new(frame, px, MaskedImage::empty())
    }

    pub fn store(frames: Vec<Vec<Blob>>) -> BlobStore {
        BlobStore::from_frames(frames)
    }
}
