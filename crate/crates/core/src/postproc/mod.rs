//! Post-processing: speed-based correction of identity jumps, crossing
//! resolution, trajectories and the accuracy estimate.

mod crossings;
mod output;

pub use crossings::{resolve_crossings, CrossingConfig};
pub use output::{
    estimated_accuracy, individual_trajectories, interpolate_gaps, read_trajectories_csv, write_summary,
    write_trajectories_csv, Summary, Trajectories,
};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blobgraph::{BlobStore, Fragment};

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("no individual fragment has two or more images, the speed model is undefined")]
    NoSpeeds,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trajectories file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedModel {
    /// 99th percentile of per-frame centroid displacements (pixels/frame).
    pub v_max: f64,
}

impl SpeedModel {
    pub fn is_realistic(&self, speed: f64) -> bool {
        speed <= 2.0 * self.v_max
    }
}

/// Nearest-rank percentile (`q` in (0, 1]): the value at rank
/// `ceil(q * N)` of the sorted sample.
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[rank - 1])
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn fit_speed_model(fragments: &[Fragment], store: &BlobStore) -> Result<SpeedModel, PostprocError> {
    let speeds: Vec<f64> = fragments
        .iter()
        .flat_map(|f| {
            f.blobs
                .windows(2)
                .map(|w| dist(store.blob(w[0]).centroid, store.blob(w[1]).centroid))
        })
        .collect();
    percentile_nearest_rank(&speeds, 0.99)
        .map(|v_max| SpeedModel { v_max })
        .ok_or(PostprocError::NoSpeeds)
}

/// `d(end of F1, start of F2) / (start frame of F2 - end frame of F1)`.
pub fn boundary_speed(store: &BlobStore, f1: &Fragment, f2: &Fragment) -> f64 {
    let a = store.blob(*f1.blobs.last().expect("non-empty fragment")).centroid;
    let b = store.blob(f2.blobs[0]).centroid;
    let dt = f2.start_frame.saturating_sub(f1.end_frame).max(1);
    dist(a, b) / dt as f64
}

/// `1 / |F|` for fragments with more than one image, `1 / n` otherwise.
pub fn rho(fragment_len: usize, n_animals: usize) -> f64 {
    if fragment_len > 1 {
        1.0 / fragment_len as f64
    } else {
        1.0 / n_animals as f64
    }
}

/// Inputs of the identity-jump correction.
pub struct CorrectionInput<'a> {
    pub fragments: &'a [Fragment],
    pub store: &'a BlobStore,
    pub p2: &'a [Vec<f64>],
    /// Identities that may not change: accumulated fragments and residual
    /// ones with `max P2 >= 0.9`.
    pub fixed: &'a [bool],
    pub coexist: &'a [Vec<usize>],
    /// Core frame of the first global fragment.
    pub first_core: usize,
    pub n_animals: usize,
    pub speed: SpeedModel,
}

/// A change made by the correction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reidentification {
    pub fragment: usize,
    pub from: Option<usize>,
    pub to: Option<usize>,
}

/// Same-identity fragments indexed by start frame.
struct IdentityIndex {
    by_identity: Vec<BTreeSet<(usize, usize)>>,
}

impl IdentityIndex {
    fn new(fragments: &[Fragment], identities: &[Option<usize>], n: usize) -> Self {
        let mut by_identity = vec![BTreeSet::new(); n];
        for (f, id) in identities.iter().enumerate() {
            if let Some(i) = id {
                by_identity[*i].insert((fragments[f].start_frame, f));
            }
        }
        Self { by_identity }
    }

    fn set(&mut self, fragments: &[Fragment], f: usize, from: Option<usize>, to: Option<usize>) {
        let key = (fragments[f].start_frame, f);
        if let Some(i) = from {
            self.by_identity[i].remove(&key);
        }
        if let Some(i) = to {
            self.by_identity[i].insert(key);
        }
    }

    /// Latest fragment of `id` ending before `start`, other than `skip`.
    fn prev(&self, fragments: &[Fragment], id: usize, start: usize, skip: usize) -> Option<usize> {
        self.by_identity[id]
            .range(..(start, 0))
            .rev()
            .map(|&(_, g)| g)
            .filter(|&g| g != skip && fragments[g].end_frame < start)
            .max_by_key(|&g| (fragments[g].end_frame, usize::MAX - g))
    }

    /// Earliest fragment of `id` starting after `end`, other than `skip`.
    fn next(&self, id: usize, end: usize, skip: usize) -> Option<usize> {
        self.by_identity[id]
            .range((end + 1, 0)..)
            .map(|&(_, g)| g)
            .find(|&g| g != skip)
    }
}

struct Corrector<'a> {
    input: &'a CorrectionInput<'a>,
    identities: Vec<Option<usize>>,
    index: IdentityIndex,
    changes: Vec<Reidentification>,
}

impl Corrector<'_> {
    fn speed(&self, a: usize, b: usize) -> f64 {
        boundary_speed(self.input.store, &self.input.fragments[a], &self.input.fragments[b])
    }

    fn unrealistic(&self, a: Option<usize>, b: Option<usize>) -> bool {
        match (a, b) {
            (Some(a), Some(b)) => !self.input.speed.is_realistic(self.speed(a, b)),
            _ => false,
        }
    }

    fn neighbours(&self, f: usize, id: usize) -> (Option<usize>, Option<usize>) {
        let fr = &self.input.fragments[f];
        (
            self.index.prev(self.input.fragments, id, fr.start_frame, f),
            self.index.next(id, fr.end_frame, f),
        )
    }

    /// Which fragment the three cases select for re-identification.
    fn target(&self, f: usize) -> Option<usize> {
        let id = self.identities[f]?;
        let (p, n) = self.neighbours(f, id);
        if p.is_none() && n.is_none() {
            return None;
        }
        let bad_p = self.unrealistic(p, Some(f));
        let bad_n = self.unrealistic(Some(f), n);
        let fixed = |g: Option<usize>| g.is_some_and(|g| self.input.fixed[g]);
        match (bad_p, bad_n) {
            (true, true) => {
                let (p, n) = (p.unwrap(), n.unwrap());
                let pp = self.neighbours(p, id).0;
                let nn = self.neighbours(n, id).1;
                let outer_bad = self.unrealistic(pp, Some(p)) || self.unrealistic(Some(n), nn);
                (fixed(Some(p)) || fixed(Some(n)) || !outer_bad).then_some(f)
            }
            (true, false) => Some(if fixed(p) { f } else { p.unwrap() }),
            (false, true) => Some(if fixed(n) { f } else { n.unwrap() }),
            (false, false) => None,
        }
    }

    fn reidentify(&mut self, f: usize) {
        if self.input.fixed[f] {
            return;
        }
        let inp = self.input;
        let current = self.identities[f];
        let mut available = vec![true; inp.n_animals];
        for &g in &inp.coexist[f] {
            if let Some(i) = self.identities[g] {
                available[i] = false;
            }
        }
        if let Some(i) = current {
            available[i] = true;
        }
        let a: Vec<usize> = (0..inp.n_animals).filter(|&i| available[i]).collect();
        let new = if a.len() == 1 {
            Some(a[0])
        } else {
            let rho = rho(inp.fragments[f].len(), inp.n_animals);
            let mut best: Option<(f64, usize)> = None;
            for &i in &a {
                if inp.p2[f][i] <= rho {
                    continue;
                }
                let (p, n) = self.neighbours(f, i);
                let sp = p.map_or(0.0, |p| self.speed(p, f));
                let sn = n.map_or(0.0, |n| self.speed(f, n));
                if !(inp.speed.is_realistic(sp) && inp.speed.is_realistic(sn)) {
                    continue;
                }
                let s = sp.max(sn);
                if best.is_none_or(|(bs, _)| s < bs) {
                    best = Some((s, i));
                }
            }
            best.map(|b| b.1)
        };
        if new != current {
            self.index.set(inp.fragments, f, current, new);
            self.identities[f] = new;
            self.changes.push(Reidentification {
                fragment: f,
                from: current,
                to: new,
            });
        }
    }

    fn visit(&mut self, f: usize) {
        if let Some(t) = self.target(f) {
            self.reidentify(t);
        }
    }
}

/// Re-identifies fragments whose hand-off to the previous or next fragment
/// of the same identity needs more than twice `v_max`. Fragments ending
/// before the first global fragment's core are visited first, latest end
/// first; then the rest in order of start frame.
pub fn correct_unrealistic(
    input: &CorrectionInput<'_>,
    identities: &[Option<usize>],
) -> (Vec<Option<usize>>, Vec<Reidentification>) {
    let mut c = Corrector {
        input,
        identities: identities.to_vec(),
        index: IdentityIndex::new(input.fragments, identities, input.n_animals),
        changes: Vec::new(),
    };
    let fr = input.fragments;
    let mut before: Vec<usize> = (0..fr.len()).filter(|&f| fr[f].end_frame < input.first_core).collect();
    before.sort_by_key(|&f| (std::cmp::Reverse(fr[f].end_frame), f));
    let mut after: Vec<usize> = (0..fr.len()).filter(|&f| fr[f].end_frame >= input.first_core).collect();
    after.sort_by_key(|&f| (fr[f].start_frame, f));
    for f in before.into_iter().chain(after) {
        c.visit(f);
    }
    (c.identities, c.changes)
}

/// Consecutive same-identity pairs (previous, next) with an unrealistic
/// boundary speed.
pub fn unrealistic_pairs(
    fragments: &[Fragment],
    store: &BlobStore,
    identities: &[Option<usize>],
    n_animals: usize,
    speed: SpeedModel,
) -> Vec<(usize, usize)> {
    let index = IdentityIndex::new(fragments, identities, n_animals);
    let mut out = Vec::new();
    for (f, id) in identities.iter().enumerate() {
        let Some(id) = *id else { continue };
        if let Some(n) = index.next(id, fragments[f].end_frame, f) {
            // only the immediate successor: nothing of this identity in between
            if index.prev(fragments, id, fragments[n].start_frame, n) == Some(f)
                && !speed.is_realistic(boundary_speed(store, &fragments[f], &fragments[n]))
            {
                out.push((f, n));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blobgraph::{coexistence_lists, FragmentKind};
    use crate::imageprep::MaskedImage;
    use crate::ingest::{Blob, Pixel};

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&v, 0.99), Some(99.0));
        assert_eq!(percentile_nearest_rank(&[3.0], 0.99), Some(3.0));
        assert_eq!(percentile_nearest_rank(&[], 0.99), None);
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(4, 10), 0.25);
        assert_eq!(rho(1, 10), 0.1);
    }

    /// One blob per (frame, x) position; fragments given as
    /// (start_frame, [x positions]).
    fn world(specs: &[(usize, Vec<u16>)]) -> (BlobStore, Vec<Fragment>) {
        let frames = specs.iter().map(|(s, xs)| s + xs.len()).max().unwrap();
        let mut per_frame: Vec<Vec<(usize, u16)>> = vec![Vec::new(); frames];
        for (fi, (s, xs)) in specs.iter().enumerate() {
            for (k, &x) in xs.iter().enumerate() {
                per_frame[s + k].push((fi, x));
            }
        }
        let mut blobs = Vec::new();
        let mut owner = Vec::new();
        for (f, list) in per_frame.iter().enumerate() {
            let mut fr = Vec::new();
            for &(fi, x) in list {
                fr.push(Blob::new(f, vec![Pixel::new(x, 0)], MaskedImage::empty()));
                owner.push(fi);
            }
            blobs.push(fr);
        }
        let store = BlobStore::from_frames(blobs);
        let mut fragments: Vec<Fragment> = specs
            .iter()
            .enumerate()
            .map(|(i, (s, xs))| Fragment {
                id: i,
                kind: FragmentKind::Individual,
                blobs: Vec::new(),
                start_frame: *s,
                end_frame: s + xs.len() - 1,
            })
            .collect();
        for (b, &fi) in owner.iter().enumerate() {
            fragments[fi].blobs.push(b);
        }
        (store, fragments)
    }

    #[test]
    fn boundary_speed_example() {
        let (store, fr) = world(&[(0, vec![0; 11]), (12, vec![10])]);
        // 10 pixels over 2 frames
        assert_eq!(boundary_speed(&store, &fr[0], &fr[1]), 5.0);
        let (store, fr) = world(&[(0, vec![3]), (1, vec![3])]);
        assert_eq!(boundary_speed(&store, &fr[0], &fr[1]), 0.0);
    }

    #[test]
    fn unrealistic_jump_is_reidentified() {
        // identity 0 jumps from x=0 to x=100 and back; identity 1 sits at 100
        let (store, fr) = world(&[
            (0, vec![0, 1, 2, 3]),
            (4, vec![100, 100, 100]),
            (7, vec![3, 3, 3]),
            (0, vec![100, 100, 100, 100]),
            (7, vec![100, 100]),
        ]);
        let speed = fit_speed_model(&fr, &store).unwrap();
        assert_eq!(speed.v_max, 1.0);
        let coexist = coexistence_lists(&fr);
        let ids = vec![Some(0), Some(0), Some(0), Some(1), Some(1)];
        let p2 = vec![
            vec![1.0, 0.0],
            vec![0.6, 0.4],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let fixed = vec![true, false, true, true, true];
        let input = CorrectionInput {
            fragments: &fr,
            store: &store,
            p2: &p2,
            fixed: &fixed,
            coexist: &coexist,
            first_core: 0,
            n_animals: 2,
            speed,
        };
        assert_eq!(unrealistic_pairs(&fr, &store, &ids, 2, speed).len(), 2);
        let (new, changes) = correct_unrealistic(&input, &ids);
        assert_eq!(new[1], Some(1));
        assert_eq!(changes.len(), 1);
        assert!(unrealistic_pairs(&fr, &store, &new, 2, speed).is_empty());
    }

    #[test]
    fn no_candidate_leaves_fragment_unidentified() {
        let (store, fr) = world(&[(0, vec![0, 1, 2, 3]), (4, vec![100, 100, 100]), (7, vec![3, 3, 3])]);
        let speed = fit_speed_model(&fr, &store).unwrap();
        let coexist = coexistence_lists(&fr);
        let ids = vec![Some(0), Some(0), Some(0)];
        // P2 of the middle fragment supports no identity above rho = 1/3
        let p2 = vec![vec![1.0, 0.0], vec![0.3, 0.3], vec![1.0, 0.0]];
        let fixed = vec![true, false, true];
        let input = CorrectionInput {
            fragments: &fr,
            store: &store,
            p2: &p2,
            fixed: &fixed,
            coexist: &coexist,
            first_core: 0,
            n_animals: 2,
            speed,
        };
        let (new, _) = correct_unrealistic(&input, &ids);
        assert_eq!(new[1], None);
    }

    #[test]
    fn fixed_previous_sends_current_to_reidentification() {
        // F_p fixed at x=0, F jumps to 50 then keeps going realistically
        let (store, fr) = world(&[(0, vec![0, 0, 0]), (3, vec![50, 51, 52]), (6, vec![53, 54])]);
        let speed = SpeedModel { v_max: 1.0 };
        let coexist = coexistence_lists(&fr);
        let ids = vec![Some(0), Some(0), Some(0)];
        let p2 = vec![vec![1.0, 0.0], vec![0.2, 0.8], vec![0.5, 0.5]];
        let fixed = vec![true, false, false];
        let input = CorrectionInput {
            fragments: &fr,
            store: &store,
            p2: &p2,
            fixed: &fixed,
            coexist: &coexist,
            first_core: 0,
            n_animals: 2,
            speed,
        };
        let (new, _) = correct_unrealistic(&input, &ids);
        assert_eq!(new[1], Some(1));
    }
}
