//! Online phase prediction, frame metrics and leave-one-video-out runs.

mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{compute_metrics, ConfusionMatrix, MetricsReport, PhaseMetrics};

use crate::datapipe::{batch_video_sequences, VideoDataset};
use crate::error::{Error, Result};
use crate::netarch::{build_naive_lwfnet, build_tempconet, transfer_pretrained, ArchConfig, Checkpoint, NetworkGraph};
use crate::tensor::{DropoutMode, Tape, Tensor};
use crate::trainer::{derive_seed, finetune_with, prepare_videos, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    TempCoNet,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::TempCoNet => "tempconet",
        }
    }

    pub fn uses_gru(self) -> bool {
        self == Variant::TempCoNet
    }

    pub fn build(self, arch: &ArchConfig, n_phases: usize, seed: u64) -> Result<NetworkGraph> {
        match self {
            Variant::Naive => build_naive_lwfnet(arch, n_phases, seed),
            Variant::TempCoNet => build_tempconet(arch, n_phases, seed),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Variant::Naive),
            "tempconet" => Ok(Variant::TempCoNet),
            other => Err(Error::config(format!("unknown network `{other}` (naive|tempconet)"))),
        }
    }
}

/// Per-frame phase probabilities of one video (`N x 3 x H x W`,
/// preprocessed), computed in order in chunks of `batch_size` from a zero
/// hidden state with dropout off.
pub fn phase_probabilities_online(net: &mut NetworkGraph, frames: &Tensor, batch_size: usize) -> Result<Tensor> {
    let shape = frames.shape();
    let r = net.resolved();
    if shape.len() != 4 || shape[1..] != [r.in_channels, r.input_height, r.input_width] {
        return Err(Error::shape(format!(
            "network expects N×3×{}×{} frames, got {shape:?}",
            r.input_height, r.input_width
        )));
    }
    let n = shape[0];
    let per: usize = shape[1..].iter().product();
    let n_out = net.topology().n_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    net.reset_hidden_state();
    let mut out = Vec::with_capacity(n * n_out);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in batch_video_sequences(&idx, batch_size)? {
        let (s, e) = (chunk[0], chunk[chunk.len() - 1] + 1);
        let mut cshape = shape.to_vec();
        cshape[0] = e - s;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(cshape, frames.data()[s * per..e * per].to_vec())?);
        let probs = net.phase_forward(&mut tape, x, DropoutMode::Eval, &mut rng)?;
        out.extend_from_slice(tape.value(probs).data());
    }
    net.reset_hidden_state();
    Tensor::new(vec![n, n_out], out)
}

/// 1-based argmax phase per frame; see [`phase_probabilities_online`].
pub fn predict_phases_online(net: &mut NetworkGraph, frames: &Tensor, batch_size: usize) -> Result<Vec<usize>> {
    let probs = phase_probabilities_online(net, frames, batch_size)?;
    Ok((0..probs.shape()[0])
        .map(|i| {
            let row = probs.row(i);
            1 + row.iter().enumerate().fold(0, |b, (j, &v)| if v > row[b] { j } else { b })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub video_id: String,
    pub report: MetricsReport,
    /// Held-out frame accuracy after each training epoch.
    pub curve: Vec<f64>,
    /// Final 1-based predictions for the held-out video.
    pub predictions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Some(MeanStd { mean, std: var.sqrt(), n })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Aggregate {
    pub precision: Option<MeanStd>,
    pub recall: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
}

impl Aggregate {
    pub fn from_folds(folds: &[FoldResult]) -> Self {
        let collect = |f: fn(&MetricsReport) -> Option<f64>| -> Vec<f64> { folds.iter().filter_map(|r| f(&r.report)).collect() };
        Aggregate {
            precision: MeanStd::of(&collect(|r| r.macro_precision)),
            recall: MeanStd::of(&collect(|r| r.macro_recall)),
            accuracy: MeanStd::of(&collect(|r| Some(r.accuracy))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LosoOutcome {
    pub variant: Variant,
    /// In video-id order.
    pub folds: Vec<FoldResult>,
    pub aggregate: Aggregate,
}

/// Leave-one-video-out evaluation. Every fold starts from the same
/// initialization (plus the optional pretrained trunk), trains on all other
/// videos for `cfg.epochs` epochs and is scored on the held-out video after
/// each epoch. The fold's shuffle and dropout seeds derive from the held-out
/// video id. Folds run on the current rayon pool.
pub fn run_loso(
    data: &VideoDataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    pretrained: Option<&Checkpoint>,
    variant: Variant,
) -> Result<LosoOutcome> {
    if data.len() < 2 {
        return Err(Error::Protocol(format!("leave-one-out needs at least 2 videos, got {}", data.len())));
    }
    let n_phases = data.n_phases().ok_or_else(|| Error::Data("dataset has no phase labels".into()))?;
    let mut init = variant.build(arch, n_phases, derive_seed(cfg.seed, "init", 0))?;
    if let Some(ckpt) = pretrained {
        transfer_pretrained(ckpt, &mut init)?;
    }
    let prepared = prepare_videos(data, arch)?;
    let ids: Vec<String> = data.ids().map(str::to_string).collect();
    let folds = ids
        .par_iter()
        .enumerate()
        .map(|(k, held_out)| {
            let train = data.subset(ids.iter().filter(|id| *id != held_out).map(String::as_str))?;
            let test = &prepared[k];
            let truth: Vec<usize> = data.labels(held_out)?;
            let fold_cfg = TrainConfig { seed: derive_seed(cfg.seed, held_out, 0), ..cfg.clone() };
            let mut net = init.clone();
            let mut curve = Vec::with_capacity(cfg.epochs);
            finetune_with(&fold_cfg, &train, &mut net, variant.uses_gru(), |_, net| {
                let pred = predict_phases_online(net, &test.frames, cfg.batch_size)?;
                curve.push(compute_metrics(&pred, &truth, n_phases)?.accuracy);
                Ok(())
            })?;
            let predictions = predict_phases_online(&mut net, &test.frames, cfg.batch_size)?;
            let report = compute_metrics(&predictions, &truth, n_phases)?.with_video(held_out.clone());
            Ok(FoldResult { video_id: held_out.clone(), report, curve, predictions })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::from_folds(&folds);
    Ok(LosoOutcome { variant, folds, aggregate })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `video_id,phase,precision,recall,accuracy` rows, one per phase and a
/// final `macro` row. Undefined values are empty.
pub fn fold_csv(report: &MetricsReport) -> String {
    let mut s = String::from("video_id,phase,precision,recall,accuracy\n");
    for (p, m) in report.per_phase.iter().enumerate() {
        writeln!(s, "{},{},{},{},{}", report.video_id, p + 1, opt(m.precision), opt(m.recall), opt(m.accuracy)).unwrap();
    }
    writeln!(
        s,
        "{},macro,{},{},{}",
        report.video_id,
        opt(report.macro_precision),
        opt(report.macro_recall),
        report.accuracy
    )
    .unwrap();
    s
}

/// One summary row: variant, fold count, then mean and standard deviation
/// of macro precision, macro recall and accuracy.
pub fn summary_csv(outcome: &LosoOutcome) -> String {
    let mut s = String::from(
        "net,folds,precision_mean,precision_std,recall_mean,recall_std,accuracy_mean,accuracy_std\n",
    );
    let ms = |m: Option<MeanStd>| m.map_or(",".to_string(), |m| format!("{},{}", m.mean, m.std));
    let a = &outcome.aggregate;
    writeln!(
        s,
        "{},{},{},{},{}",
        outcome.variant.name(),
        outcome.folds.len(),
        ms(a.precision),
        ms(a.recall),
        ms(a.accuracy)
    )
    .unwrap();
    s
}

/// `epoch,<video ids...>` with the held-out accuracy of every fold.
pub fn curves_csv(folds: &[FoldResult]) -> String {
    let mut s = String::from("epoch");
    for f in folds {
        write!(s, ",{}", f.video_id).unwrap();
    }
    s.push('\n');
    let epochs = folds.iter().map(|f| f.curve.len()).max().unwrap_or(0);
    for e in 0..epochs {
        write!(s, "{e}").unwrap();
        for f in folds {
            write!(s, ",{}", opt(f.curve.get(e).copied())).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `fold_<id>.csv`, `predictions_<id>.csv`, `curves.csv` and
/// `summary.csv` into `dir`.
pub fn write_loso_reports(outcome: &LosoOutcome, data: &VideoDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for f in &outcome.folds {
        fs::write(dir.join(format!("fold_{}.csv", f.video_id)), fold_csv(&f.report))?;
        let frames = data.video(&f.video_id).ok_or_else(|| Error::Data(format!("no video {}", f.video_id)))?;
        let mut s = String::from("index,phase_id\n");
        for (fr, p) in frames.iter().zip(&f.predictions) {
            writeln!(s, "{},{p}", fr.index).unwrap();
        }
        fs::write(dir.join(format!("predictions_{}.csv", f.video_id)), s)?;
    }
    fs::write(dir.join("curves.csv"), curves_csv(&outcome.folds))?;
    fs::write(dir.join("summary.csv"), summary_csv(outcome))?;
    Ok(())
}

#[cfg(test)]
mod tests;
