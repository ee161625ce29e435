use fragtrack::blobgraph::{build_fragments, build_global_fragments, OverlapGraph};
use fragtrack::pipeline::track_blobs;
use fragtrack::synthgen::{generate, segmentation_params, SynthConfig};
use fragtrack::{AreaModel, BlobStore, TrackConfig};

/// Blob areas alone mislabel a few rotated single bodies; the crossing
/// detector inside the pipeline recovers the planted fragments exactly.
#[test]
fn fragmentation_recovers_planted_fragments() {
    let cfg = SynthConfig {
        n_individuals: 10,
        total_frames: 10_000,
        theta: 2000.0,
        k: 0.5,
        seed: 7,
        ..SynthConfig::default()
    };
    let video = generate(&cfg).unwrap();
    let gt = video.ground_truth;
    assert!(!gt.crossings.is_empty());
    let mut track = TrackConfig::new(10, "synthetic");
    track.segmentation = segmentation_params();
    let run = track_blobs(video.blobs, &track).unwrap();
    let mut planted: Vec<(usize, usize)> = gt.fragments.iter().map(|p| (p.start, p.end)).collect();
    let mut found: Vec<(usize, usize)> = run.fragments.iter().map(|f| (f.start_frame, f.end_frame)).collect();
    planted.sort_unstable();
    found.sort_unstable();
    assert_eq!(found.len(), planted.len());
    assert_eq!(found, planted);
    // each recovered fragment follows one animal
    for f in &run.fragments {
        let animal = gt.blobs[f.start_frame][run.store.index_in_frame(f.blobs[0])][0];
        for (k, &blob) in f.blobs.iter().enumerate() {
            assert_eq!(gt.blobs[f.start_frame + k][run.store.index_in_frame(blob)], vec![animal]);
        }
    }
    assert!(!run.globals.is_empty());
}

#[test]
fn two_animals_without_crossings_form_one_global_fragment() {
    let cfg = SynthConfig {
        n_individuals: 2,
        total_frames: 300,
        crossings: false,
        seed: 1,
        ..SynthConfig::default()
    };
    let video = generate(&cfg).unwrap();
    let store = BlobStore::from_frames(video.blobs);
    let area = AreaModel::fit(&store, 2).unwrap();
    let kinds: Vec<_> = store.blobs().iter().map(|b| area.classify(b)).collect();
    let fr = build_fragments(&store, &OverlapGraph::build(&store), &kinds);
    let globals = build_global_fragments(&fr.individual, store.frame_count(), 2);
    assert_eq!(globals.len(), 1);
    assert_eq!(globals[0].core_frame, 0);
    assert!(fr.individual.iter().all(|f| f.len() == 300));
}

#[test]
fn generation_is_reproducible_and_consistent() {
    let cfg = SynthConfig {
        n_individuals: 5,
        total_frames: 500,
        theta: 50.0,
        seed: 11,
        ..SynthConfig::default()
    };
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.blobs, b.blobs);
    assert_eq!(a.ground_truth, b.ground_truth);
    let gt = &a.ground_truth;
    for (f, blobs) in a.blobs.iter().enumerate() {
        assert_eq!(blobs.len(), gt.blobs[f].len());
        let mut seen: Vec<usize> = gt.blobs[f].iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..cfg.n_individuals).collect::<Vec<_>>(), "frame {f}");
    }
}
