use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::blobgraph::{BlobId, BlobStore, Fragment};
use crate::morphology::Mask;

use super::{SpeedModel, Trajectories};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossingConfig {
    /// Erosions (3x3) tried before giving up on splitting a crossing blob.
    pub max_erosions: usize,
}

impl Default for CrossingConfig {
    fn default() -> Self {
        Self { max_erosions: 5 }
    }
}

type Points = Vec<(i64, i64)>;

/// Erodes until the blob falls apart into two or more pieces.
fn split_blob(pixels: impl IntoIterator<Item = (i64, i64)> + Clone, max_erosions: usize) -> Vec<Points> {
    let mut mask = Mask::from_points(pixels, 1);
    for _ in 0..max_erosions {
        mask = mask.erode3();
        let comps = mask.components();
        if comps.len() >= 2 {
            return comps;
        }
        if comps.is_empty() {
            break;
        }
    }
    Vec::new()
}

fn centroid(points: &[(i64, i64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &(x, y)| (a + x as f64, b + y as f64));
    (sx / n, sy / n)
}

/// A piece of a crossing blob after erosion.
struct SubBlob {
    frame: usize,
    points: Points,
    identity: Option<usize>,
}

/// Identities known at one frame together with their pixels.
fn identified_pixels<'a>(
    frame: usize,
    store: &'a BlobStore,
    blob_identity: &'a HashMap<BlobId, usize>,
    subs: &'a [SubBlob],
) -> Vec<(usize, HashSet<(i64, i64)>)> {
    let mut out: Vec<(usize, HashSet<(i64, i64)>)> = store
        .frame_range(frame)
        .filter_map(|b| blob_identity.get(&b).map(|&id| (id, store.blob(b).pixel_points().collect())))
        .collect();
    out.extend(
        subs.iter()
            .filter(|s| s.frame == frame)
            .filter_map(|s| s.identity.map(|id| (id, s.points.iter().copied().collect()))),
    );
    out
}

/// Assigns identities to the pieces of crossing blobs and writes their
/// centroids into `traj` (which already holds the individual positions).
///
/// Pieces are linked by pixel overlap with identified blobs of the previous
/// frame (sweeping forward through each crossing fragment) and then of the
/// next frame (sweeping backward); leftovers take the nearest identified
/// position of an adjacent frame within `2 v_max`. Only identities absent
/// from the frame are eligible.
pub fn resolve_crossings(
    store: &BlobStore,
    crossing_fragments: &[Fragment],
    individual_fragments: &[Fragment],
    identities: &[Option<usize>],
    traj: &mut Trajectories,
    speed: SpeedModel,
    cfg: &CrossingConfig,
) {
    let mut blob_identity: HashMap<BlobId, usize> = HashMap::new();
    for (f, id) in identities.iter().enumerate() {
        if let Some(id) = *id {
            for &b in &individual_fragments[f].blobs {
                blob_identity.insert(b, id);
            }
        }
    }
    for cf in crossing_fragments {
        let mut subs: Vec<SubBlob> = Vec::new();
        for &b in &cf.blobs {
            let blob = store.blob(b);
            for points in split_blob(blob.pixel_points(), cfg.max_erosions) {
                subs.push(SubBlob {
                    frame: blob.frame,
                    points,
                    identity: None,
                });
            }
        }
        if subs.is_empty() {
            continue;
        }
        let frames: Vec<usize> = cf.blobs.iter().map(|&b| store.blob(b).frame).collect();
        // forward with the previous frame, backward with the next one
        for (order, delta) in [(frames.clone(), -1i64), (frames.iter().rev().copied().collect(), 1)] {
            for f in order {
                let adj = f as i64 + delta;
                if adj < 0 || adj as usize >= store.frame_count() {
                    continue;
                }
                let known = identified_pixels(adj as usize, store, &blob_identity, &subs);
                link_by_overlap(f, &known, &mut subs, traj);
            }
        }
        for s in subs.iter_mut().filter(|s| s.identity.is_none()) {
            let c = centroid(&s.points);
            let mut best: Option<(f64, usize)> = None;
            for adj in [s.frame.checked_sub(1), Some(s.frame + 1)].into_iter().flatten() {
                if adj >= traj.n_frames {
                    continue;
                }
                for id in 0..traj.n_animals {
                    if traj.get(s.frame, id).is_some() {
                        continue;
                    }
                    if let Some(p) = traj.get(adj, id) {
                        let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
                        if speed.is_realistic(d) && best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, id));
                        }
                    }
                }
            }
            if let Some((_, id)) = best {
                s.identity = Some(id);
                traj.set(s.frame, id, c);
            }
        }
    }
}

/// Greedy matching of unresolved pieces at `frame` to known pixel sets by
/// largest overlap.
fn link_by_overlap(
    frame: usize,
    known: &[(usize, HashSet<(i64, i64)>)],
    subs: &mut [SubBlob],
    traj: &mut Trajectories,
) {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (k, s) in subs.iter().enumerate() {
        if s.frame != frame || s.identity.is_some() {
            continue;
        }
        for (id, px) in known {
            if traj.get(frame, *id).is_some() {
                continue;
            }
            let overlap = s.points.iter().filter(|p| px.contains(p)).count();
            if overlap > 0 {
                pairs.push((overlap, k, *id));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, k, id) in pairs {
        if subs[k].identity.is_some() || traj.get(frame, id).is_some() {
            continue;
        }
        subs[k].identity = Some(id);
        traj.set(frame, id, centroid(&subs[k].points));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blobgraph::FragmentKind;
    use crate::imageprep::MaskedImage;
    use crate::ingest::{Blob, Pixel};
    use crate::postproc::interpolate_gaps;

    fn disc(cx: i64, cy: i64, r: i64) -> Vec<Pixel> {
        let mut v = Vec::new();
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    v.push(Pixel::new(x as u16, y as u16));
                }
            }
        }
        v
    }

    fn blob(frame: usize, px: Vec<Pixel>) -> Blob {
        Blob::new(frame, px, MaskedImage::empty())
    }

    fn dumbbell(frame: usize, a: i64, b: i64) -> Blob {
        let mut px = disc(a, 20, 4);
        px.extend(disc(b, 20, 4));
        // thin bridge
        for x in a..=b {
            px.push(Pixel::new(x as u16, 20));
        }
        px.sort();
        px.dedup();
        blob(frame, px)
    }

    #[test]
    fn dumbbell_splits_into_two() {
        let b = dumbbell(0, 10, 22);
        assert_eq!(split_blob(b.pixel_points(), 5).len(), 2);
        let d = blob(0, disc(10, 10, 4));
        assert!(split_blob(d.pixel_points(), 5).is_empty());
    }

    /// Two discs approach, merge into a dumbbell for three frames, and part.
    fn scenario(merge_blob: impl Fn(usize) -> Blob) -> (BlobStore, Vec<Fragment>, Vec<Fragment>) {
        let mut frames = Vec::new();
        for f in 0..2 {
            frames.push(vec![blob(f, disc(10 + f as i64, 20, 4)), blob(f, disc(24 - f as i64, 20, 4))]);
        }
        for f in 2..5 {
            frames.push(vec![merge_blob(f)]);
        }
        for f in 5..7 {
            frames.push(vec![blob(f, disc(10 + f as i64 - 4, 20, 4)), blob(f, disc(24 - f as i64 + 4, 20, 4))]);
        }
        let store = BlobStore::from_frames(frames);
        let ind = |id, blobs: Vec<usize>, s, e| Fragment {
            id,
            kind: FragmentKind::Individual,
            blobs,
            start_frame: s,
            end_frame: e,
        };
        let individual = vec![
            ind(0, vec![0, 2], 0, 1),
            ind(1, vec![1, 3], 0, 1),
            ind(2, vec![7, 9], 5, 6),
            ind(3, vec![8, 10], 5, 6),
        ];
        let crossing = vec![Fragment {
            id: 0,
            kind: FragmentKind::Crossing,
            blobs: vec![4, 5, 6],
            start_frame: 2,
            end_frame: 4,
        }];
        (store, individual, crossing)
    }

    #[test]
    fn crossing_pieces_are_linked_by_overlap() {
        let (store, ind, cross) = scenario(|f| dumbbell(f, 12, 22));
        let ids = vec![Some(0), Some(1), Some(0), Some(1)];
        let mut t = crate::postproc::individual_trajectories(&store, &ind, &ids, 2);
        resolve_crossings(&store, &cross, &ind, &ids, &mut t, SpeedModel { v_max: 1.0 }, &CrossingConfig::default());
        for f in 2..5 {
            let (a, b) = (t.get(f, 0).unwrap(), t.get(f, 1).unwrap());
            assert!(a.0 < 17.0 && b.0 > 17.0, "frame {f}: {a:?} {b:?}");
        }
    }

    #[test]
    fn unsplittable_crossing_is_interpolated() {
        let (store, ind, cross) = scenario(|f| blob(f, disc(17, 20, 8)));
        let ids = vec![Some(0), Some(1), Some(0), Some(1)];
        let mut t = crate::postproc::individual_trajectories(&store, &ind, &ids, 2);
        resolve_crossings(&store, &cross, &ind, &ids, &mut t, SpeedModel { v_max: 1.0 }, &CrossingConfig::default());
        assert!(t.get(3, 0).is_none());
        interpolate_gaps(&mut t);
        // identity 0 goes from x=11 (frame 1) to x=11 (frame 5)
        assert_eq!(t.get(3, 0), Some((11.0, 20.0)));
    }
}
