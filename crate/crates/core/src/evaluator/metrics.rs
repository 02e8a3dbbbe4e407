use crate::error::{Error, Result};

/// `counts[actual][predicted]` over 0-based phase indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_phases: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    /// Builds the matrix from 1-based labels.
    pub fn from_labels(predicted: &[usize], truth: &[usize], n_phases: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape(format!("{} predictions for {} frames", predicted.len(), truth.len())));
        }
        let mut counts = vec![vec![0u64; n_phases]; n_phases];
        for (&p, &t) in predicted.iter().zip(truth) {
            for l in [p, t] {
                if l == 0 || l > n_phases {
                    return Err(Error::InvalidLabel(format!("phase {l} not in 1..={n_phases}")));
                }
            }
            counts[t - 1][p - 1] += 1;
        }
        Ok(ConfusionMatrix { n_phases, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_phases).map(|i| self.counts[i][i]).sum()
    }

    pub fn true_positives(&self, p: usize) -> u64 {
        self.counts[p][p]
    }

    /// Frames whose actual phase is `p`.
    pub fn actual(&self, p: usize) -> u64 {
        self.counts[p].iter().sum()
    }

    /// Frames predicted as `p`.
    pub fn predicted(&self, p: usize) -> u64 {
        self.counts.iter().map(|row| row[p]).sum()
    }
}

/// `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// One-vs-rest accuracy.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub video_id: String,
    pub per_phase: Vec<PhaseMetrics>,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Precision `TP/(TP+FP)`, recall `TP/(TP+FN)` and one-vs-rest accuracy per
/// phase, their macro averages over defined values, and overall accuracy.
/// A phase that neither occurs nor is predicted has no defined values; a
/// phase that occurs but is never predicted has recall 0 and no precision.
pub fn compute_metrics(predicted: &[usize], truth: &[usize], n_phases: usize) -> Result<MetricsReport> {
    let cm = ConfusionMatrix::from_labels(predicted, truth, n_phases)?;
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("no frames to evaluate".into()));
    }
    let per_phase: Vec<PhaseMetrics> = (0..n_phases)
        .map(|p| {
            let (tp, actual, pred) = (cm.true_positives(p), cm.actual(p), cm.predicted(p));
            if actual == 0 && pred == 0 {
                return PhaseMetrics::default();
            }
            let tn = total + tp - actual - pred;
            PhaseMetrics {
                precision: (pred > 0).then(|| tp as f64 / pred as f64),
                recall: (actual > 0).then(|| tp as f64 / actual as f64),
                accuracy: Some((tp + tn) as f64 / total as f64),
            }
        })
        .collect();
    Ok(MetricsReport {
        video_id: String::new(),
        macro_precision: mean_defined(per_phase.iter().map(|m| m.precision)),
        macro_recall: mean_defined(per_phase.iter().map(|m| m.recall)),
        accuracy: cm.trace() as f64 / total as f64,
        per_phase,
        confusion: cm,
    })
}

impl MetricsReport {
    pub fn with_video(mut self, id: impl Into<String>) -> Self {
        self.video_id = id.into();
        self
    }
}
