use std::collections::HashMap;

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::*;

fn frame(video: &str, index: u64, h: usize, w: usize, value: f32) -> FrameRecord {
    FrameRecord { video_id: video.into(), index, pixels: Tensor::full(vec![3, h, w], value), phase_label: None }
}

#[test]
fn filter_examples() {
    let same = [frame("v", 0, 4, 4, 10.0), frame("v", 1, 4, 4, 10.0)];
    assert_eq!(filter_static_frames(&same, 8000.0).len(), 1);

    let a = frame("v", 0, 240, 320, 100.0);
    let b = frame("v", 1, 240, 320, 101.0);
    assert!((frame_distance(&a.pixels, &b.pixels) - 480.0).abs() < 1e-9);
    assert_eq!(filter_static_frames(&[a, b], 8000.0).len(), 1);

    let black = frame("v", 0, 240, 320, 0.0);
    let white = frame("v", 1, 240, 320, 255.0);
    assert!((frame_distance(&black.pixels, &white.pixels) - 122_400.0).abs() < 1e-6);
    assert_eq!(filter_static_frames(&[black, white], 8000.0).len(), 2);
}

#[test]
fn filter_compares_against_last_kept_frame() {
    // each step moves 3, so only every third frame clears a threshold of 9 on a 1-pixel frame
    let frames: Vec<_> = (0..7).map(|i| frame("v", i, 1, 1, 3.0 * i as f32)).collect();
    let kept: Vec<u64> = filter_static_frames(&frames, 3.0 * 3f64.sqrt() * 3.0).iter().map(|f| f.index).collect();
    assert_eq!(kept, [0, 3, 6]);
}

#[test]
fn preprocess_crops_wide_frames_to_four_by_three() {
    // 1080x1920: the 240-column borders on either side are cropped away
    let (h, w) = (1080, 1920);
    let raw = Tensor::from_fn(vec![3, h, w], |i| {
        let x = i % w;
        if x < 240 || x >= 1680 { 255.0 } else { 0.0 }
    });
    let out = preprocess_frame(&raw, (240, 320)).unwrap();
    assert_eq!(out.shape(), &[3, 240, 320]);
    assert!(out.data().iter().all(|&v| v == -0.5));
    let shifted = Tensor::from_fn(vec![3, h, w], |i| if i % w < 239 { 255.0 } else { 0.0 });
    assert!(preprocess_frame(&shifted, (240, 320)).unwrap().data().iter().all(|&v| v == -0.5));
    let edge = Tensor::from_fn(vec![3, h, w], |i| if i % w < 250 { 255.0 } else { 0.0 });
    assert!(preprocess_frame(&edge, (240, 320)).unwrap().data().iter().any(|&v| v > -0.5));
}

#[test]
fn preprocess_value_mapping() {
    for (raw, want) in [(0.0, -0.5), (255.0, 0.5), (127.5, 0.0)] {
        let out = preprocess_frame(&Tensor::full(vec![3, 3, 4], raw), (3, 4)).unwrap();
        assert!(out.data().iter().all(|&v| (v - want).abs() < 1e-7), "{raw}");
    }
}

#[test]
fn four_by_three_input_is_only_resampled() {
    let raw = Tensor::from_fn(vec![3, 6, 8], |i| (i % 256) as f32);
    let out = preprocess_frame(&raw, (6, 8)).unwrap();
    for (o, r) in out.data().iter().zip(raw.data()) {
        assert!((o - (r / 255.0 - 0.5)).abs() < 1e-6);
    }
    let up = preprocess_frame(&raw, (12, 16)).unwrap();
    assert_eq!(up.shape(), &[3, 12, 16]);
}

#[test]
fn degenerate_image_is_rejected() {
    let err = preprocess_frame(&Tensor::zeros(vec![3, 0, 4]), (3, 4)).unwrap_err();
    assert!(matches!(err, Error::InvalidImage(_)));
    assert!(preprocess_frame(&Tensor::zeros(vec![1, 3, 4]), (3, 4)).is_err());
}

fn dataset(lens: &[usize]) -> VideoDataset {
    let videos = lens
        .iter()
        .enumerate()
        .map(|(v, &n)| (0..n as u64).map(|i| frame(&format!("v{v}"), i * 7, 1, 1, 0.0)).collect())
        .collect();
    VideoDataset::from_videos(videos, None).unwrap()
}

#[test]
fn default_ops_give_1536_pairs() {
    let data = dataset(&[10, 20, 30]);
    let mut rng = StdRng::seed_from_u64(0);
    let pairs = sample_inequations(&data, OPS_PER_EPOCH, &mut rng).unwrap();
    assert_eq!(pairs.len(), 1536);
    assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 768);
    for p in &pairs {
        let (a, b) = (p.frame_a(&data), p.frame_b(&data));
        assert_eq!(a.video_id, b.video_id);
        assert_eq!(p.label, (b.index < a.index) as usize);
    }
}

#[test]
fn triple_pairs_are_labeled_by_order() {
    let frames = [5u64, 12, 40].iter().map(|&i| frame("v", i, 1, 1, 0.0)).collect();
    let data = VideoDataset::from_videos(vec![frames], None).unwrap();
    let pairs = sample_inequations(&data, 1, &mut StdRng::seed_from_u64(3)).unwrap();
    let idx = |p: &InequationSample| (p.frame_a(&data).index, p.frame_b(&data).index, p.label);
    let got: Vec<_> = pairs.iter().map(idx).collect();
    assert_eq!(got, [(5, 12, 0), (5, 40, 0), (12, 40, 0), (12, 5, 1), (40, 5, 1), (40, 12, 1)]);
}

#[test]
fn video_selection_is_uniform() {
    let data = dataset(&[12; 10]);
    let pairs = sample_inequations(&data, 100_000, &mut StdRng::seed_from_u64(7)).unwrap();
    let mut counts = HashMap::new();
    for p in pairs.iter().step_by(PAIRS_PER_TRIPLE) {
        *counts.entry(p.video).or_insert(0usize) += 1;
    }
    assert_eq!(counts.len(), 10);
    for c in counts.values() {
        let f = *c as f64 / 1e5;
        assert!((0.095..=0.105).contains(&f), "{f}");
    }
}

#[test]
fn short_video_is_named() {
    let mut data = dataset(&[5, 2]);
    let err = sample_inequations(&data, 4, &mut StdRng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(&err, Error::Sampling(m) if m.contains("v1")), "{err}");
    data = dataset(&[]);
    assert!(sample_inequations(&data, 4, &mut StdRng::seed_from_u64(0)).is_err());
}

#[test]
fn chunking() {
    let frames: Vec<usize> = (0..600).collect();
    let chunks = batch_video_sequences(&frames, 256).unwrap();
    assert_eq!(chunks.iter().map(|c| c.len()).collect::<Vec<_>>(), [256, 256, 88]);
    assert_eq!(chunks.concat(), frames);
    assert_eq!(batch_video_sequences(&frames[..10], 256).unwrap().len(), 1);
    assert!(batch_video_sequences(&frames, 0).is_err());
}

fn cfg(ambiguity: f64) -> SynthConfig {
    SynthConfig { ambiguity, ..SynthConfig::default() }
}

#[test]
fn synthetic_video_is_deterministic() {
    let a = synthesize(5, "v", &cfg(0.5)).unwrap();
    let b = synthesize(5, "v", &cfg(0.5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.frames, synthesize(6, "v", &cfg(0.5)).unwrap().frames);
}

#[test]
fn synthetic_structure() {
    for seed in 0..5 {
        let v = synthesize(seed, "v", &SynthConfig { n_frames: 40, ..cfg(1.0) }).unwrap();
        let labels: Vec<usize> = v.frames.iter().map(|f| f.phase_label.unwrap()).collect();
        assert!(labels.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
        assert_eq!((labels[0], *labels.last().unwrap()), (1, 7));
        assert!(v.progress.windows(2).all(|w| w[1] > w[0]));
        assert_eq!((v.progress[0], v.progress[39]), (0.0, 1.0));
        assert_eq!(v.boundaries.len(), 8);
        for (u, l) in v.progress.iter().zip(&labels) {
            assert!(v.boundaries[l - 1] <= *u && *u <= v.boundaries[*l]);
        }
        assert!(v.frames.iter().all(|f| f.pixels.data().iter().all(|&p| (0.0..=255.0).contains(&p) && p.fract() == 0.0)));
    }
    assert!(synthesize(0, "v", &SynthConfig { n_frames: 3, ..cfg(0.0) }).is_err());
    assert!(synthesize(0, "v", &SynthConfig { n_phases: 1, ..cfg(0.0) }).is_err());
    assert!(synthesize(0, "v", &cfg(1.5)).is_err());
}

fn centroid_accuracy(ambiguity: f64) -> f64 {
    let data = synthetic_dataset(42, 15, &cfg(ambiguity)).unwrap();
    let frames: Vec<Vec<&FrameRecord>> = data.videos().map(|(_, f)| f.iter().collect()).collect();
    let train: Vec<&FrameRecord> = frames[..10].concat();
    let test: Vec<&FrameRecord> = frames[10..].concat();
    nearest_centroid_accuracy(&train, &test, 7).unwrap()
}

#[test]
fn centroid_baseline_separates_ambiguity_levels() {
    let clear = centroid_accuracy(0.0);
    let ambiguous = centroid_accuracy(1.0);
    assert!(clear > 0.9, "{clear}");
    assert!(ambiguous <= 1.0 / 7.0 + 0.1, "{ambiguous}");
}

#[test]
fn export_roundtrip_is_pixel_exact() {
    let data = synthetic_dataset(3, 2, &SynthConfig { n_frames: 12, ..cfg(0.3) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let back = ingest_frames(&manifest).unwrap();
    assert_eq!(back, data);
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_dataset(3, 2, &SynthConfig { n_frames: 9, ..cfg(0.0) }).unwrap();
    let manifest = write_dataset(&data, dir.path()).unwrap();
    let loaded = ingest_frames(&manifest).unwrap();
    assert_eq!(loaded.len(), 2);
    assert_eq!(loaded.n_frames(), 18);

    std::fs::write(dir.path().join("video01.csv"), "index,phase_id\n0,1\n1,1\n").unwrap();
    assert!(matches!(ingest_frames(&manifest), Err(Error::Manifest(_))));

    std::fs::write(&manifest, "video01 missing_dir\n").unwrap();
    match ingest_frames(&manifest) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("missing_dir")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(ingest_frames(dir.path().join("nope.txt")), Err(Error::Ingestion { .. })));
}

#[test]
fn dataset_rejects_non_monotone_indices() {
    let frames = vec![frame("v", 3, 1, 1, 0.0), frame("v", 2, 1, 1, 0.0)];
    assert!(matches!(VideoDataset::from_videos(vec![frames], None), Err(Error::Manifest(_))));
    let mut f = frame("v", 0, 1, 1, 0.0);
    f.phase_label = Some(8);
    let err = VideoDataset::from_videos(vec![vec![f]], Some(PhaseLabelSet::cholecystectomy())).unwrap_err();
    assert!(matches!(err, Error::InvalidLabel(_)));
    assert_eq!(PhaseLabelSet::colorectal().n_phases(), 8);
}
