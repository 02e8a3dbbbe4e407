//! Synthetic surgery-like videos driven by a latent progress variable.
//!
//! A frame shows a background whose hue rotates with progress, a dark disk
//! travelling along a circle, and a bottom band with one marker slot per
//! phase. With `ambiguity = a`, hue and disk angle start at a per-video
//! random offset scaled by `a`, and the marker of phase `k` is only drawn in
//! the first `max(1, ceil(len_k * (1 - a)))` frames of that phase. At
//! `a = 1` a single frame says nothing about progress and only the phase
//! onsets show a marker.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FrameRecord, PhaseLabelSet, VideoDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub n_phases: usize,
    pub height: usize,
    pub width: usize,
    pub ambiguity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_frames: 300, n_phases: 7, height: 24, width: 32, ambiguity: 0.0 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phases < 2 || self.n_frames < self.n_phases {
            return Err(Error::config(format!(
                "need n_frames ≥ n_phases ≥ 2, got {} frames and {} phases",
                self.n_frames, self.n_phases
            )));
        }
        if self.height < 8 || self.width < 2 * self.n_phases {
            return Err(Error::config(format!(
                "{}×{} frames too small for {} marker slots",
                self.height, self.width, self.n_phases
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config(format!("ambiguity {} outside [0, 1]", self.ambiguity)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Vec<FrameRecord>,
    /// Latent progress per frame, strictly increasing from 0 to 1.
    pub progress: Vec<f64>,
    /// Phase boundaries in progress space: `0 = b_0 < ... < b_K = 1`.
    pub boundaries: Vec<f64>,
}

const NOISE: f64 = 8.0;

/// Renders one video. Frame indices are `0..n_frames`, labels 1-based.
pub fn synthesize(seed: u64, video_id: &str, cfg: &SynthConfig) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (cfg.n_frames, cfg.n_phases);
    let a = cfg.ambiguity;

    let steps: Vec<f64> = (1..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = steps.iter().sum();
    let mut progress = Vec::with_capacity(n);
    let mut acc = 0.0;
    progress.push(0.0);
    for s in &steps {
        acc += s;
        progress.push(acc / total.max(f64::MIN_POSITIVE));
    }
    progress[n - 1] = 1.0;

    // every phase gets one frame, the rest is split by random weights
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let spare = n - k;
    let mut lens: Vec<usize> = weights.iter().map(|w| 1 + (w / wsum * spare as f64).floor() as usize).collect();
    let mut short = n - lens.iter().sum::<usize>();
    let mut i = 0;
    while short > 0 {
        lens[i % k] += 1;
        short -= 1;
        i += 1;
    }
    let mut labels = Vec::with_capacity(n);
    let mut onsets = Vec::with_capacity(k);
    for (p, &len) in lens.iter().enumerate() {
        onsets.push(labels.len());
        labels.extend(std::iter::repeat_n(p + 1, len));
    }
    let mut boundaries = vec![0.0];
    for &start in &onsets[1..] {
        boundaries.push(0.5 * (progress[start - 1] + progress[start]));
    }
    boundaries.push(1.0);

    let o1: f64 = rng.random();
    let o2: f64 = rng.random();
    let (h, w) = (cfg.height, cfg.width);
    let band = (h / 6).max(2);
    let scene_h = h - band;
    let slot = w / k;
    let disk_r = (scene_h.min(w) as f64 / 6.0).max(1.5);
    let path_r = 0.3 * scene_h.min(w) as f64;
    let (cy, cx) = (scene_h as f64 / 2.0, w as f64 / 2.0);

    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let u = progress[t];
        let phase = labels[t] - 1;
        let visible = ((lens[phase] as f64 * (1.0 - a)).ceil() as usize).max(1);
        let marker = t - onsets[phase] < visible;
        let hue = TAU * (a * o1 + 0.5 * u);
        let bg: [f64; 3] = std::array::from_fn(|c| 127.5 + 80.0 * (hue + TAU * c as f64 / 3.0).cos());
        let ang = TAU * (a * o2 + 0.6 * u);
        let (dy, dx) = (cy + path_r * ang.sin(), cx + path_r * ang.cos());
        let mut px = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut rgb = bg;
                if y < scene_h {
                    let (ry, rx) = (y as f64 + 0.5 - dy, x as f64 + 0.5 - dx);
                    if ry * ry + rx * rx <= disk_r * disk_r {
                        rgb = [20.0; 3];
                    }
                } else if marker && x / slot == phase && x % slot != 0 && y > scene_h {
                    rgb = [255.0; 3];
                }
                for (c, v) in rgb.iter().enumerate() {
                    let noisy = v + rng.random_range(-NOISE..=NOISE);
                    px[c * h * w + y * w + x] = noisy.round().clamp(0.0, 255.0) as f32;
                }
            }
        }
        frames.push(FrameRecord {
            video_id: video_id.to_string(),
            index: t as u64,
            pixels: Tensor::new(vec![3, h, w], px)?,
            phase_label: Some(labels[t]),
        });
    }
    Ok(SyntheticVideo { frames, progress, boundaries })
}

/// Labeled frames of one synthetic video.
pub fn generate_synthetic_video(seed: u64, video_id: &str, cfg: &SynthConfig) -> Result<Vec<FrameRecord>> {
    Ok(synthesize(seed, video_id, cfg)?.frames)
}

/// `n_videos` videos named `video01`, `video02`, ... Each video's seed
/// depends only on the root seed and its position.
pub fn synthetic_dataset(seed: u64, n_videos: usize, cfg: &SynthConfig) -> Result<VideoDataset> {
    let videos = (0..n_videos)
        .map(|i| {
            let vseed = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)).random();
            generate_synthetic_video(vseed, &format!("video{:02}", i + 1), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoDataset::from_videos(videos, Some(PhaseLabelSet::numbered(cfg.n_phases)))
}

/// Frame accuracy of a pixel-space nearest-centroid classifier whose
/// per-phase centroids come from `train` and which labels each `test` frame
/// independently.
pub fn nearest_centroid_accuracy(train: &[&FrameRecord], test: &[&FrameRecord], n_phases: usize) -> Result<f64> {
    let dim = train.first().map(|f| f.pixels.len()).ok_or_else(|| Error::Data("no training frames".into()))?;
    let mut sums = vec![vec![0f64; dim]; n_phases];
    let mut counts = vec![0usize; n_phases];
    for f in train {
        let p = label_of(f, n_phases)?;
        counts[p] += 1;
        for (s, &v) in sums[p].iter_mut().zip(f.pixels.data()) {
            *s += v as f64;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let mut correct = 0;
    for f in test {
        let truth = label_of(f, n_phases)?;
        let best = (0..n_phases)
            .filter(|&p| counts[p] > 0)
            .map(|p| {
                let d: f64 = sums[p].iter().zip(f.pixels.data()).map(|(c, &v)| (c - v as f64).powi(2)).sum();
                (p, d)
            })
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .map(|(p, _)| p);
        correct += (best == Some(truth)) as usize;
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}

fn label_of(f: &FrameRecord, n_phases: usize) -> Result<usize> {
    match f.phase_label {
        Some(l) if (1..=n_phases).contains(&l) => Ok(l - 1),
        _ => Err(Error::Data(format!("video {} frame {} lacks a valid label", f.video_id, f.index))),
    }
}
