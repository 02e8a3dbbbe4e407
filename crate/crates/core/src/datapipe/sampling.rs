use rand::seq::index;
use rand::Rng;

use super::{FrameRecord, VideoDataset};
use crate::error::{Error, Result};

pub const OPS_PER_EPOCH: usize = 256;
pub const PAIRS_PER_TRIPLE: usize = 6;

/// An ordered frame pair of one video. Frames are addressed by position in
/// the video's frame list; `video` is the position in id order.
/// `label` is 0 when frame a comes first and 1 when frame b does.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InequationSample {
    pub video: usize,
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

impl InequationSample {
    pub fn frame_a<'d>(&self, data: &'d VideoDataset) -> &'d FrameRecord {
        &nth_video(data, self.video)[self.a]
    }

    pub fn frame_b<'d>(&self, data: &'d VideoDataset) -> &'d FrameRecord {
        &nth_video(data, self.video)[self.b]
    }
}

fn nth_video(data: &VideoDataset, i: usize) -> &[FrameRecord] {
    data.videos().nth(i).expect("sample refers to an existing video").1
}

/// Draws `n_ops` videos with replacement, three distinct frames from each,
/// and emits the six ordered pairs of every triple.
pub fn sample_inequations(data: &VideoDataset, n_ops: usize, rng: &mut impl Rng) -> Result<Vec<InequationSample>> {
    let lens: Vec<usize> = data.videos().map(|(_, f)| f.len()).collect();
    if lens.is_empty() {
        return Err(Error::Sampling("dataset has no videos".into()));
    }
    if let Some((id, frames)) = data.videos().find(|(_, f)| f.len() < 3) {
        return Err(Error::Sampling(format!("video {id} has {} frames, need at least 3", frames.len())));
    }
    let mut out = Vec::with_capacity(n_ops * PAIRS_PER_TRIPLE);
    for _ in 0..n_ops {
        let video = rng.random_range(0..lens.len());
        let mut t = index::sample(rng, lens[video], 3).into_vec();
        t.sort_unstable();
        let (i1, i2, i3) = (t[0], t[1], t[2]);
        for (a, b, label) in [(i1, i2, 0), (i1, i3, 0), (i2, i3, 0), (i2, i1, 1), (i3, i1, 1), (i3, i2, 1)] {
            out.push(InequationSample { video, a, b, label });
        }
    }
    Ok(out)
}

/// Consecutive chunks of at most `batch_size` frames in temporal order.
pub fn batch_video_sequences<T>(frames: &[T], batch_size: usize) -> Result<Vec<&[T]>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be ≥ 1"));
    }
    Ok(frames.chunks(batch_size).collect())
}
