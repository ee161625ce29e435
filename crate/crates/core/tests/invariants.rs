//! Property checks of the module invariants on random inputs.

use proptest::prelude::*;

use fragtrack::blobgraph::{build_fragments, coexistence_lists, BlobKind, OverlapGraph};
use fragtrack::cascade::{no_duplicated_identities, p1_from_frequencies};
use fragtrack::classifier::class_weights;
use fragtrack::imageprep::MaskedImage;
use fragtrack::ingest::Pixel;
use fragtrack::postproc::{
    correct_unrealistic, interpolate_gaps, percentile_nearest_rank, CorrectionInput, SpeedModel, Trajectories,
};
use fragtrack::residual::{compute_p2, residual_identify};
use fragtrack::{Blob, BlobStore, Fragment, FragmentKind};

/// Fragments from `(start, len)` intervals, one point blob per frame at the
/// given position, plus the store holding them.
fn fragments_from_intervals(intervals: &[(usize, usize, u16, u16)]) -> (BlobStore, Vec<Fragment>) {
    let frames = intervals.iter().map(|&(s, l, _, _)| s + l).max().unwrap_or(0);
    let mut per_frame: Vec<Vec<Blob>> = vec![Vec::new(); frames];
    let mut slots: Vec<Vec<(usize, usize)>> = vec![Vec::new(); intervals.len()];
    for (i, &(s, l, x, y)) in intervals.iter().enumerate() {
        for f in s..s + l {
            slots[i].push((f, per_frame[f].len()));
            let px = Pixel::new(x + (f - s) as u16, y + 3 * i as u16);
            per_frame[f].push(Blob::new(f, vec![px], MaskedImage::empty()));
        }
    }
    let store = BlobStore::from_frames(per_frame);
    let fragments = slots
        .iter()
        .enumerate()
        .map(|(i, s)| Fragment {
            id: i,
            kind: FragmentKind::Individual,
            blobs: s.iter().map(|&(f, k)| store.frame_range(f).start + k).collect(),
            start_frame: s[0].0,
            end_frame: s.last().unwrap().0,
        })
        .collect();
    (store, fragments)
}

fn intervals() -> impl Strategy<Value = Vec<(usize, usize, u16, u16)>> {
    prop::collection::vec((0usize..40, 1usize..15, 0u16..100, 0u16..100), 1..14)
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #[test]
    fn p1_is_a_distribution_peaking_at_the_most_frequent(freq in prop::collection::vec(0u32..3000, 1..12)) {
        let p = p1_from_frequencies(&freq);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = *freq.iter().max().unwrap();
        for (i, &f) in freq.iter().enumerate() {
            prop_assert_eq!(p[i] == p.iter().copied().fold(0.0, f64::max), f == top);
        }
    }

    #[test]
    fn p2_excludes_identities_held_for_sure(own in distribution(5), others in prop::collection::vec(distribution(5), 0..4), held in 0usize..5) {
        let mut certain = vec![0.0; 5];
        certain[held] = 1.0;
        let mut all = others.clone();
        all.push(certain);
        if let Some(p2) = compute_p2(&own, all.iter().map(Vec::as_slice)) {
            prop_assert!((p2.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(p2[held], 0.0);
        }
    }

    #[test]
    fn class_weights_sum_to_classes_minus_one(counts in prop::collection::vec(1usize..1000, 1..20)) {
        let w = class_weights(&counts);
        prop_assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((w.iter().sum::<f64>() - (counts.len() as f64 - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn nearest_rank_percentile_is_a_sample(values in prop::collection::vec(0.0f64..100.0, 1..200), q in 0.01f64..=1.0) {
        let p = percentile_nearest_rank(&values, q).unwrap();
        prop_assert!(values.contains(&p));
        let at_most = values.iter().filter(|&&v| v <= p).count();
        prop_assert!(at_most as f64 >= q * values.len() as f64 - 1e-9);
    }

    #[test]
    fn coexistence_is_interval_overlap(iv in intervals()) {
        let (_, fragments) = fragments_from_intervals(&iv);
        let lists = coexistence_lists(&fragments);
        for (i, l) in lists.iter().enumerate() {
            let want: Vec<usize> = (0..fragments.len())
                .filter(|&j| j != i && fragments[i].coexists_with(&fragments[j]))
                .collect();
            prop_assert_eq!(l, &want);
        }
    }

    #[test]
    fn fragments_partition_blobs(moves in prop::collection::vec(prop::collection::vec(-3i32..=3, 6), 1..80),
                                 crossing_every in 2usize..20) {
        // six animals on one row; touching bodies merge into one blob
        let mut x = [0i32, 12, 24, 36, 48, 60];
        let mut frames = Vec::new();
        for (f, step) in moves.iter().enumerate() {
            for (xi, d) in x.iter_mut().zip(step) {
                *xi = (*xi + d).clamp(0, 80);
            }
            let mut cols: Vec<u16> = x.iter().flat_map(|&a| (a..a + 5).map(|c| c as u16)).collect();
            cols.sort_unstable();
            cols.dedup();
            let mut blobs = Vec::new();
            let mut run: Vec<Pixel> = Vec::new();
            for c in cols {
                if run.last().is_some_and(|p| p.x + 1 != c) {
                    blobs.push(Blob::new(f, std::mem::take(&mut run), MaskedImage::empty()));
                }
                run.push(Pixel::new(c, 0));
            }
            blobs.push(Blob::new(f, run, MaskedImage::empty()));
            frames.push(blobs);
        }
        let store = BlobStore::from_frames(frames);
        let kinds: Vec<BlobKind> = (0..store.len())
            .map(|b| if b % crossing_every == 0 { BlobKind::Crossing } else { BlobKind::Individual })
            .collect();
        let graph = OverlapGraph::build(&store);
        let fr = build_fragments(&store, &graph, &kinds);
        let mut seen = vec![0; store.len()];
        for f in fr.individual.iter().chain(&fr.crossing) {
            for (k, &b) in f.blobs.iter().enumerate() {
                prop_assert_eq!(store.blob(b).frame, f.start_frame + k);
                prop_assert_eq!(kinds[b] == BlobKind::Crossing, f.kind == FragmentKind::Crossing);
                seen[b] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn residual_and_correction_never_duplicate(iv in intervals(), seed_p in prop::collection::vec(distribution(4), 14),
                                               accumulated in prop::collection::vec(prop::option::of(0usize..4), 14),
                                               v_max in 0.5f64..5.0) {
        let (store, fragments) = fragments_from_intervals(&iv);
        let m = fragments.len();
        let coexist = coexistence_lists(&fragments);
        // accumulated identities must already be duplication-free
        let mut fixed: Vec<Option<usize>> = vec![None; m];
        for f in 0..m {
            if let Some(id) = accumulated[f] {
                if coexist[f].iter().all(|&g| fixed[g] != Some(id)) {
                    fixed[f] = Some(id);
                }
            }
        }
        let p1: Vec<Vec<f64>> = seed_p[..m].to_vec();
        let out = residual_identify(&p1, &fixed, &coexist);
        let ids = out.identities();
        prop_assert!(no_duplicated_identities(&ids, &coexist));
        for f in 0..m {
            if fixed[f].is_some() {
                prop_assert_eq!(ids[f], fixed[f]);
            }
        }
        let is_fixed: Vec<bool> = fixed.iter().map(Option::is_some).collect();
        let input = CorrectionInput {
            fragments: &fragments,
            store: &store,
            p2: &out.p2,
            fixed: &is_fixed,
            coexist: &coexist,
            first_core: fragments[0].start_frame,
            n_animals: 4,
            speed: SpeedModel { v_max },
        };
        let (corrected, _) = correct_unrealistic(&input, &ids);
        prop_assert!(no_duplicated_identities(&corrected, &coexist));
        for f in 0..m {
            if is_fixed[f] {
                prop_assert_eq!(corrected[f], ids[f]);
            }
        }
    }

    #[test]
    fn interpolation_keeps_known_positions(known in prop::collection::vec(prop::option::of((0.0f64..100.0, 0.0f64..100.0)), 1..60)) {
        let mut t = Trajectories::new(known.len(), 1);
        for (f, p) in known.iter().enumerate() {
            if let Some(p) = p {
                t.set(f, 0, *p);
            }
        }
        let before = t.clone();
        interpolate_gaps(&mut t);
        for f in 0..known.len() {
            if let Some(p) = before.get(f, 0) {
                prop_assert_eq!(t.get(f, 0), Some(p));
            }
        }
        let any = known.iter().any(Option::is_some);
        prop_assert_eq!(t.missing_count(), if any { 0 } else { known.len() });
    }
}
