//! Acceptance suite. Runs every primary criterion and prints one PASS/FAIL
//! line each; exits nonzero if any fails. Pass name fragments as arguments
//! to run a subset, e.g. `cargo test --test acceptance -- metrics`.

use std::ops::ControlFlow;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempco::datapipe::{
    filter_static_frames, frame_distance, sample_inequations, synthetic_dataset, FrameRecord, SynthConfig, VideoDataset,
    OPS_PER_EPOCH, PAIRS_PER_TRIPLE, STATIC_FRAME_THRESHOLD,
};
use tempco::evaluator::{compute_metrics, phase_probabilities_online, run_loso, Variant};
use tempco::gradcheck::{run_gradcheck, GradcheckOptions};
use tempco::netarch::{build_tcl_net, build_tempconet, transfer_pretrained, ArchConfig, Checkpoint};
use tempco::tensor::Tensor;
use tempco::trainer::{
    decay_learning_rate, pair_accuracy, prepare_videos, pretrain, sgd_nesterov_step, OptimizerState, Pretrainer, TrainConfig,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn desk() -> ArchConfig {
    ArchConfig::desk(24, 32)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn gradient_suite() -> Outcome {
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    let worst = report
        .checks
        .iter()
        .map(|c| format!("{}={:.1e}", c.name, c.max_rel_error))
        .collect::<Vec<_>>()
        .join(" ");
    let fast = report.elapsed < Duration::from_secs(300);
    outcome(
        report.passed() && fast,
        format!("{} checks in {:.1}s; {worst}", report.checks.len(), report.elapsed.as_secs_f64()),
    )
}

fn sampling_arithmetic() -> Outcome {
    let cfg = SynthConfig { n_frames: 50, n_phases: 3, ..SynthConfig::default() };
    let data = synthetic_dataset(3, 5, &cfg).unwrap();
    let mut bad = 0;
    for epoch in 0..100 {
        let pairs = sample_inequations(&data, OPS_PER_EPOCH, &mut ChaCha8Rng::seed_from_u64(epoch)).unwrap();
        let ones = pairs.iter().filter(|p| p.label == 1).count();
        if pairs.len() != 1536 || ones != 768 || OPS_PER_EPOCH * PAIRS_PER_TRIPLE != 1536 {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("100 epochs of 256 ops, {bad} without exactly 1536 pairs split 768/768"))
}

fn frame(index: u64, h: usize, w: usize, value: f32) -> FrameRecord {
    FrameRecord { video_id: "v".into(), index, pixels: Tensor::full(vec![3, h, w], value), phase_label: None }
}

fn filter_rule() -> Outcome {
    let t = STATIC_FRAME_THRESHOLD;
    let same = [frame(0, 240, 320, 10.0), frame(1, 240, 320, 10.0)];
    let near = [frame(0, 240, 320, 100.0), frame(1, 240, 320, 101.0)];
    let far = [frame(0, 240, 320, 0.0), frame(1, 240, 320, 255.0)];
    let norms = [&same, &near, &far].map(|p| frame_distance(&p[0].pixels, &p[1].pixels));
    let kept = [&same, &near, &far].map(|p| filter_static_frames(p, t).len());
    let examples = norms == [0.0, 480.0, 122_400.0] && kept == [1, 1, 2];

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut violations = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..30);
        let threshold = rng.random_range(0.0..40.0);
        let frames: Vec<FrameRecord> = (0..len)
            .map(|i| {
                let px = (0..12).map(|_| rng.random_range(0..5) as f32 * 4.0).collect();
                FrameRecord { video_id: "v".into(), index: i, pixels: Tensor::new(vec![3, 2, 2], px).unwrap(), phase_label: None }
            })
            .collect();
        let once = filter_static_frames(&frames, threshold);
        if filter_static_frames(&once, threshold) != once {
            violations += 1;
        }
    }
    outcome(
        examples && violations == 0,
        format!("norms {norms:?} kept {kept:?} at {t}; idempotence violations {violations}/1000"),
    )
}

fn gru_carryover() -> Outcome {
    let mut net = build_tempconet::<f32>(&desk(), 7, 11).unwrap();
    let frames = Tensor::<f32>::randn(vec![600, 3, 24, 32], &mut ChaCha8Rng::seed_from_u64(11));
    let whole = phase_probabilities_online(&mut net, &frames, 600).unwrap();
    let diffs: Vec<f64> = [1, 7, 256]
        .iter()
        .map(|&c| whole.max_abs_diff(&phase_probabilities_online(&mut net, &frames, c).unwrap()))
        .collect();
    outcome(diffs.iter().all(|&d| d < 1e-5), format!("max |diff| for chunks 1/7/256: {}", diffs.iter().map(|d| format!("{d:.1e}")).collect::<Vec<_>>().join(" ")))
}

fn schedule_exactness() -> Outcome {
    let net = build_tempconet::<f32>(&desk(), 3, 0).unwrap();
    let mut state = OptimizerState::new(net.params(), 1e-3);
    for _ in 0..100 {
        decay_learning_rate(&mut state, 0.975);
    }
    let expected = 1e-3 * 0.975f64.powi(100);
    let decayed = state.lr;
    let lr_err = (decayed - expected).abs();

    let tcl = build_tcl_net::<f32>(&desk(), 1).unwrap();
    let mut net = build_tempconet::<f32>(&desk(), 3, 2).unwrap();
    transfer_pretrained(&Checkpoint::from_network(&tcl), &mut net).unwrap();
    for p in net.params_mut().iter_mut() {
        p.value = Tensor::zeros(p.value.shape().to_vec());
        p.grad = Tensor::full(p.value.shape().to_vec(), 0.5);
    }
    let mut state = OptimizerState::new(net.params(), 1e-3);
    sgd_nesterov_step(net.params_mut(), &mut state, 0.9).unwrap();
    let step = |name: &str| net.params().by_name(name).unwrap().value.data()[0] as f64;
    let ratios = [step("conv1.kernel") / step("gru.wz"), step("fc6.weight") / step("classifier.weight")];
    let ratio_err = ratios.iter().map(|r| (r - 0.1).abs()).fold(0.0, f64::max);
    outcome(
        lr_err < 1e-9 && ratio_err < 1e-6,
        format!("lr after 100 decays {decayed:.6e} (err {lr_err:.1e}); trunk/fresh step ratios {ratios:?}"),
    )
}

fn learnability() -> Outcome {
    let arch = desk();
    let mut results = Vec::new();
    for seed in 1..=3u64 {
        let start = Instant::now();
        let data = synthetic_dataset(seed, 20, &SynthConfig::default()).unwrap();
        let (train, test) = split(&data, 16);
        let test_videos = prepare_videos(&test, &arch).unwrap();
        let pairs = sample_inequations(&test, OPS_PER_EPOCH, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let cfg = TrainConfig { epochs: 2000, seed, ..TrainConfig::pretrain() };
        let mut best = (0.0, 0);
        Pretrainer::new(&cfg, &train, &arch)
            .unwrap()
            .run(|p, rec| {
                if (rec.epoch + 1) % 25 != 0 {
                    return ControlFlow::Continue(());
                }
                let acc = pair_accuracy(p.net(), &test_videos, &pairs, 256).unwrap();
                if acc > best.0 {
                    best = (acc, rec.epoch + 1);
                }
                if acc >= 0.9 || start.elapsed() > Duration::from_secs(900) {
                    ControlFlow::Break(())
                } else {
                    ControlFlow::Continue(())
                }
            })
            .unwrap();
        let secs = start.elapsed().as_secs_f64();
        results.push((best.0 >= 0.9 && secs < 900.0, format!("seed {seed}: {:.3} at epoch {} in {secs:.0}s", best.0, best.1)));
    }
    let wins = results.iter().filter(|r| r.0).count();
    outcome(wins >= 2, format!("{wins}/3 seeds reach 0.90 held-out pair accuracy; {}", results.into_iter().map(|r| r.1).collect::<Vec<_>>().join("; ")))
}

fn split(data: &VideoDataset, n_train: usize) -> (VideoDataset, VideoDataset) {
    let ids: Vec<String> = data.ids().map(String::from).collect();
    (
        data.subset(ids[..n_train].iter().map(String::as_str)).unwrap(),
        data.subset(ids[n_train..].iter().map(String::as_str)).unwrap(),
    )
}

/// Per-seed LOSO accuracy of the three arms on the ambiguous phase dataset.
struct ClaimRuns {
    naive: Vec<f64>,
    random: Vec<f64>,
    pretrained: Vec<f64>,
}

fn claim_runs() -> ClaimRuns {
    let arch = desk();
    let phase_cfg = SynthConfig { n_frames: 60, n_phases: 7, height: 24, width: 32, ambiguity: 1.0 };
    let mut runs = ClaimRuns { naive: vec![], random: vec![], pretrained: vec![] };
    for seed in 1..=5u64 {
        let data = synthetic_dataset(seed, 8, &phase_cfg).unwrap();
        let corpus = synthetic_dataset(seed + 1000, 20, &SynthConfig::default()).unwrap();
        let pre_cfg = TrainConfig { epochs: 150, seed, ..TrainConfig::pretrain() };
        let (ckpt, _) = pretrain(&pre_cfg, &corpus, &arch).unwrap();
        let cfg = TrainConfig { epochs: 40, base_lr: 1e-2, batch_size: 16, seed, ..TrainConfig::finetune() };
        let acc = |pre: Option<&Checkpoint>, v| run_loso(&data, &arch, &cfg, pre, v).unwrap().aggregate.accuracy.unwrap().mean;
        runs.naive.push(acc(None, Variant::Naive));
        runs.random.push(acc(None, Variant::TempCoNet));
        runs.pretrained.push(acc(Some(&ckpt), Variant::TempCoNet));
        eprintln!(
            "  seed {seed}: naive {:.3} tempconet {:.3} pretrained {:.3}",
            runs.naive[seed as usize - 1],
            runs.random[seed as usize - 1],
            runs.pretrained[seed as usize - 1]
        );
    }
    runs
}

fn gru_beats_feedforward(r: &ClaimRuns) -> Outcome {
    let gaps: Vec<f64> = r.random.iter().zip(&r.naive).map(|(a, b)| a - b).collect();
    let gap = median(gaps.clone());
    outcome(
        gap >= 0.10,
        format!(
            "median paired gap {:.1} points (tempconet [{}] vs naive [{}])",
            gap * 100.0,
            fmt(&r.random),
            fmt(&r.naive)
        ),
    )
}

fn pretraining_helps(r: &ClaimRuns) -> Outcome {
    let wins = r.pretrained.iter().zip(&r.random).filter(|(p, q)| p >= q).count();
    let (mp, mr) = (median(r.pretrained.clone()), median(r.random.clone()));
    outcome(
        wins >= 4 && mp >= mr,
        format!(
            "pretrained >= random in {wins}/5 seeds; medians {mp:.3} vs {mr:.3} (pretrained [{}], random [{}])",
            fmt(&r.pretrained),
            fmt(&r.random)
        ),
    )
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..=10);
        let len = rng.random_range(1..=200);
        let truth: Vec<usize> = (0..len).map(|_| rng.random_range(1..=n)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(1..=n)).collect();
        let r = compute_metrics(&pred, &truth, n).unwrap();
        let mut cm = vec![vec![0u64; n]; n];
        for (&p, &t) in pred.iter().zip(&truth) {
            cm[t - 1][p - 1] += 1;
        }
        let total = len as u64;
        let mut ok = r.confusion.counts == cm;
        let (mut ps, mut rs) = (vec![], vec![]);
        for k in 0..n {
            let tp = cm[k][k];
            let actual: u64 = cm[k].iter().sum();
            let predicted: u64 = cm.iter().map(|row| row[k]).sum();
            let precision = (predicted > 0).then(|| tp as f64 / predicted as f64);
            let recall = (actual > 0).then(|| tp as f64 / actual as f64);
            let accuracy = (actual + predicted > 0).then(|| (total + 2 * tp - actual - predicted) as f64 / total as f64);
            ok &= r.per_phase[k].precision == precision && r.per_phase[k].recall == recall && r.per_phase[k].accuracy == accuracy;
            ps.extend(precision);
            rs.extend(recall);
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let trace: u64 = (0..n).map(|k| cm[k][k]).sum();
        ok &= r.macro_precision == mean(&ps) && r.macro_recall == mean(&rs) && r.accuracy == trace as f64 / total as f64;
        if !ok {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 10000 random cases"))
}

fn determinism() -> Outcome {
    let data = synthetic_dataset(8, 3, &SynthConfig { n_frames: 30, ..SynthConfig::default() }).unwrap();
    let cfg = TrainConfig { epochs: 5, seed: 8, ..TrainConfig::pretrain() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, b) = pool.install(|| (pretrain(&cfg, &data, &desk()).unwrap(), pretrain(&cfg, &data, &desk()).unwrap()));
    let same_ckpt = a.0.to_bytes() == b.0.to_bytes();
    let same_log = a.1.to_csv() == b.1.to_csv();
    let bytes = a.0.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let roundtrip = back.to_bytes() == bytes && back == a.0;
    outcome(
        same_ckpt && same_log && roundtrip,
        format!("checkpoints equal {same_ckpt}, logs equal {same_log}, roundtrip bitwise {roundtrip}"),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut lines = Vec::new();
    let mut run = |name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(name) {
            return;
        }
        let start = Instant::now();
        let o = f();
        let line = format!(
            "{} {name} ({:.0}s): {}",
            if o.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
        println!("{line}");
        lines.push(o.passed);
    };
    run("gradient-suite", &mut gradient_suite);
    run("sampling-arithmetic", &mut sampling_arithmetic);
    run("filter-rule", &mut filter_rule);
    run("gru-carryover", &mut gru_carryover);
    run("schedule-exactness", &mut schedule_exactness);
    run("learnability", &mut learnability);
    if wanted("claim-gru-beats-feedforward") || wanted("claim-pretraining-helps") {
        let runs = claim_runs();
        run("claim-gru-beats-feedforward", &mut || gru_beats_feedforward(&runs));
        run("claim-pretraining-helps", &mut || pretraining_helps(&runs));
    }
    run("metrics-oracle", &mut metrics_oracle);
    run("determinism", &mut determinism);
    let failed = lines.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
