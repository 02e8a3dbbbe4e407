use super::*;
use crate::datapipe::{synthetic_dataset, SynthConfig};

#[test]
fn perfect_prediction() {
    let labels = [1, 2, 3, 3, 2, 1];
    let r = compute_metrics(&labels, &labels, 3).unwrap();
    assert_eq!((r.macro_precision, r.macro_recall, r.accuracy), (Some(1.0), Some(1.0), 1.0));
    assert!(r.per_phase.iter().all(|m| m.accuracy == Some(1.0)));
}

#[test]
fn two_phase_example() {
    let r = compute_metrics(&[1, 2, 2, 2], &[1, 1, 2, 2], 2).unwrap();
    assert!((r.macro_precision.unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.macro_recall.unwrap() - 0.75).abs() < 1e-12);
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.per_phase[0].accuracy, Some(0.75));
    assert_eq!(r.confusion.counts, vec![vec![1, 1], vec![0, 2]]);
}

#[test]
fn absent_phase_is_excluded() {
    let with = compute_metrics(&[1, 2, 2, 2], &[1, 1, 2, 2], 3).unwrap();
    let without = compute_metrics(&[1, 2, 2, 2], &[1, 1, 2, 2], 2).unwrap();
    assert_eq!(with.per_phase[2], PhaseMetrics::default());
    assert_eq!(with.macro_precision, without.macro_precision);
    assert_eq!(with.macro_recall, without.macro_recall);
    assert_eq!(with.accuracy, without.accuracy);
}

#[test]
fn unpredicted_phase_has_zero_recall_and_no_precision() {
    let r = compute_metrics(&[1, 1, 1], &[1, 2, 2], 2).unwrap();
    assert_eq!(r.per_phase[1].recall, Some(0.0));
    assert_eq!(r.per_phase[1].precision, None);
    assert_eq!(r.macro_precision, Some(1.0 / 3.0));
    assert_eq!(r.macro_recall, Some(0.5));
}

#[test]
fn bad_labels() {
    assert!(matches!(compute_metrics(&[0], &[1], 2), Err(Error::InvalidLabel(_))));
    assert!(matches!(compute_metrics(&[1], &[3], 2), Err(Error::InvalidLabel(_))));
    assert!(compute_metrics(&[1, 1], &[1], 2).is_err());
}

#[test]
fn mean_and_sample_std() {
    let m = MeanStd::of(&[0.5, 0.7, 0.9]).unwrap();
    assert!((m.mean - 0.7).abs() < 1e-12);
    assert!((m.std - 0.2).abs() < 1e-12);
    assert_eq!(MeanStd::of(&[0.4]).unwrap().std, 0.0);
    assert!(MeanStd::of(&[]).is_none());
}

#[test]
fn constant_predictor_scores_class_proportion() {
    // every video: 3 frames of phase 1 and 1 of phase 2, predictor always says 1
    let folds: Vec<FoldResult> = (0..4)
        .map(|i| FoldResult {
            video_id: format!("v{i}"),
            report: compute_metrics(&[1; 4], &[1, 1, 1, 2], 2).unwrap(),
            curve: vec![],
            predictions: vec![1; 4],
        })
        .collect();
    let agg = Aggregate::from_folds(&folds);
    assert_eq!(agg.accuracy.unwrap().mean, 0.75);
    assert_eq!(agg.accuracy.unwrap().std, 0.0);
}

fn data(n_videos: usize, n_frames: usize) -> VideoDataset {
    let cfg = SynthConfig { n_frames, n_phases: 3, height: 24, width: 32, ambiguity: 1.0 };
    synthetic_dataset(11, n_videos, &cfg).unwrap()
}

fn prepared(d: &VideoDataset) -> Vec<crate::trainer::PreparedVideo> {
    prepare_videos(d, &ArchConfig::desk(24, 32)).unwrap()
}

#[test]
fn online_prediction_is_causal() {
    let d = data(1, 30);
    let frames = &prepared(&d)[0].frames;
    let mut net = build_tempconet::<f32>(&ArchConfig::desk(24, 32), 3, 4).unwrap();
    let base = phase_probabilities_online(&mut net, frames, 8).unwrap();
    let t = 13;
    let per = 3 * 24 * 32;
    let mut perturbed = frames.clone();
    perturbed.data_mut()[(t + 1) * per..].iter_mut().for_each(|v| *v = -*v);
    let other = phase_probabilities_online(&mut net, &perturbed, 8).unwrap();
    assert_eq!(base.data()[..(t + 1) * 3], other.data()[..(t + 1) * 3]);
    assert_ne!(base.data()[(t + 1) * 3..], other.data()[(t + 1) * 3..]);
}

#[test]
fn chunk_size_does_not_change_predictions() {
    let d = data(1, 40);
    let frames = &prepared(&d)[0].frames;
    let mut net = build_tempconet::<f32>(&ArchConfig::desk(24, 32), 3, 5).unwrap();
    let one = phase_probabilities_online(&mut net, frames, 1).unwrap();
    let all = phase_probabilities_online(&mut net, frames, 256).unwrap();
    assert!(one.max_abs_diff(&all) < 1e-5);
    let mut naive = build_naive_lwfnet::<f32>(&ArchConfig::desk(24, 32), 3, 5).unwrap();
    let a = predict_phases_online(&mut naive, frames, 3).unwrap();
    let b = predict_phases_online(&mut naive, frames, 256).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resolution_mismatch_is_a_shape_error() {
    let mut net = build_tempconet::<f32>(&ArchConfig::desk(24, 32), 3, 5).unwrap();
    let err = predict_phases_online(&mut net, &Tensor::zeros(vec![2, 3, 48, 64]), 8).unwrap_err();
    assert!(matches!(err, Error::InvalidShape(_)));
}

#[test]
fn loso_runs_one_fold_per_video() {
    let d = data(3, 8);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::finetune() };
    let out = run_loso(&d, &ArchConfig::desk(24, 32), &cfg, None, Variant::TempCoNet).unwrap();
    assert_eq!(out.folds.len(), 3);
    let ids: Vec<&str> = out.folds.iter().map(|f| f.video_id.as_str()).collect();
    assert_eq!(ids, ["video01", "video02", "video03"]);
    assert!(out.folds.iter().all(|f| f.curve.len() == 2 && f.predictions.len() == 8));
    let accs: Vec<f64> = out.folds.iter().map(|f| f.report.accuracy).collect();
    let m = MeanStd::of(&accs).unwrap();
    let agg = out.aggregate.accuracy.unwrap();
    assert!((agg.mean - m.mean).abs() < 1e-12 && (agg.std - m.std).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    write_loso_reports(&out, &d, dir.path()).unwrap();
    let files = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(files, 3 + 3 + 2);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("tempconet,3,"));
}

#[test]
fn loso_needs_two_videos() {
    let d = data(1, 8);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::finetune() };
    let err = run_loso(&d, &ArchConfig::desk(24, 32), &cfg, None, Variant::Naive).unwrap_err();
    assert!(matches!(err, Error::Protocol(_)));
}

#[test]
fn folds_do_not_depend_on_video_order() {
    let d = data(3, 6);
    let mut videos: Vec<_> = d.videos().map(|(_, f)| f.to_vec()).collect();
    videos.reverse();
    let reversed = VideoDataset::from_videos(videos, d.phase_set().cloned()).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::finetune() };
    let arch = ArchConfig::desk(24, 32);
    let a = run_loso(&d, &arch, &cfg, None, Variant::Naive).unwrap();
    let b = run_loso(&reversed, &arch, &cfg, None, Variant::Naive).unwrap();
    assert_eq!(a, b);
}

#[test]
fn csv_shapes() {
    let r = compute_metrics(&[1, 1, 1], &[1, 2, 2], 3).unwrap().with_video("v1");
    let csv = fold_csv(&r);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "video_id,phase,precision,recall,accuracy");
    assert_eq!(lines[2], "v1,2,,0,0.3333333333333333");
    assert_eq!(lines[3], "v1,3,,,");
    assert!(lines[4].starts_with("v1,macro,"));
    assert_eq!("tempconet".parse::<Variant>().unwrap(), Variant::TempCoNet);
    assert!("lstm".parse::<Variant>().is_err());
}
