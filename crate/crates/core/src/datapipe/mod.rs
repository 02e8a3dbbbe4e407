//! Frames, datasets, preprocessing, temporal-pair sampling and the
//! synthetic video generator.

mod ingest;
mod preprocess;
mod sampling;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_frames, read_annotations, read_ppm, write_dataset, write_ppm, MANIFEST_FILE};
pub use preprocess::{filter_static_frames, frame_distance, preprocess_frame, stack_frames, STATIC_FRAME_THRESHOLD};
pub use sampling::{batch_video_sequences, sample_inequations, InequationSample, OPS_PER_EPOCH, PAIRS_PER_TRIPLE};
pub use synth::{
    generate_synthetic_video, nearest_centroid_accuracy, synthesize, synthetic_dataset, SynthConfig, SyntheticVideo,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One extracted frame. `index` is the temporal position in seconds and
/// `pixels` holds raw `3 x H x W` RGB values in `0..=255`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub video_id: String,
    pub index: u64,
    pub pixels: Tensor,
    /// 1-based phase id.
    pub phase_label: Option<usize>,
}

impl FrameRecord {
    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLabelSet {
    pub names: Vec<String>,
}

impl PhaseLabelSet {
    pub fn new(names: Vec<String>) -> Self {
        PhaseLabelSet { names }
    }

    /// `phase 1` .. `phase n`.
    pub fn numbered(n: usize) -> Self {
        PhaseLabelSet { names: (1..=n).map(|i| format!("phase {i}")).collect() }
    }

    pub fn cholecystectomy() -> Self {
        Self::from_strs(&[
            "Placement of trocars",
            "Preparation of Calot's triangle",
            "Clipping and cutting of cystic artery and duct",
            "Gallbladder dissection",
            "Gallbladder retrieval",
            "Hemostasis",
            "Attaching drainage, wound closure and end of operation",
        ])
    }

    pub fn colorectal() -> Self {
        Self::from_strs(&[
            "Team Time-Out",
            "Preparation and orientation at abdomen",
            "Mobilization of colon",
            "Dissection of lymph nodes and blood vessels",
            "Dissection and resection of rectum",
            "Preparation of anastomosis",
            "Placing stoma",
            "Finishing the operation",
        ])
    }

    fn from_strs(names: &[&str]) -> Self {
        PhaseLabelSet { names: names.iter().map(|s| s.to_string()).collect() }
    }

    pub fn n_phases(&self) -> usize {
        self.names.len()
    }
}

/// Videos keyed by id, each an index-ordered frame list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VideoDataset {
    videos: BTreeMap<String, Vec<FrameRecord>>,
    phase_set: Option<PhaseLabelSet>,
}

impl VideoDataset {
    pub fn new(videos: BTreeMap<String, Vec<FrameRecord>>, phase_set: Option<PhaseLabelSet>) -> Result<Self> {
        for (id, frames) in &videos {
            if let Some(w) = frames.windows(2).find(|w| w[1].index <= w[0].index) {
                return Err(Error::Manifest(format!(
                    "video {id}: index {} follows {} (indices must increase)",
                    w[1].index, w[0].index
                )));
            }
            for f in frames {
                if f.video_id != *id {
                    return Err(Error::Data(format!("frame of {} stored under {id}", f.video_id)));
                }
                let Some(label) = f.phase_label else { continue };
                let n = phase_set.as_ref().map_or(0, PhaseLabelSet::n_phases);
                if label == 0 || label > n {
                    return Err(Error::InvalidLabel(format!(
                        "video {id} frame {}: phase {label} not in 1..={n}",
                        f.index
                    )));
                }
            }
        }
        Ok(VideoDataset { videos, phase_set })
    }

    pub fn from_videos(videos: Vec<Vec<FrameRecord>>, phase_set: Option<PhaseLabelSet>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for frames in videos {
            let id = frames.first().map(|f| f.video_id.clone()).unwrap_or_default();
            if map.insert(id.clone(), frames).is_some() {
                return Err(Error::Data(format!("duplicate video id {id}")));
            }
        }
        Self::new(map, phase_set)
    }

    pub fn phase_set(&self) -> Option<&PhaseLabelSet> {
        self.phase_set.as_ref()
    }

    pub fn n_phases(&self) -> Option<usize> {
        self.phase_set.as_ref().map(PhaseLabelSet::n_phases)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Video ids in sorted order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn video(&self, id: &str) -> Option<&[FrameRecord]> {
        self.videos.get(id).map(Vec::as_slice)
    }

    pub fn videos(&self) -> impl Iterator<Item = (&str, &[FrameRecord])> {
        self.videos.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn n_frames(&self) -> usize {
        self.videos.values().map(Vec::len).sum()
    }

    /// Subset restricted to the given ids, phase set kept.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut videos = BTreeMap::new();
        for id in ids {
            let frames = self.videos.get(id).ok_or_else(|| Error::Data(format!("no video {id}")))?;
            videos.insert(id.to_string(), frames.clone());
        }
        Ok(VideoDataset { videos, phase_set: self.phase_set.clone() })
    }

    /// Applies the static-frame filter to every video.
    pub fn filtered(&self, threshold: f64) -> Self {
        VideoDataset {
            videos: self.videos.iter().map(|(k, v)| (k.clone(), filter_static_frames(v, threshold))).collect(),
            phase_set: self.phase_set.clone(),
        }
    }

    /// 1-based labels of one video; data error on the first unlabeled frame.
    pub fn labels(&self, id: &str) -> Result<Vec<usize>> {
        let frames = self.video(id).ok_or_else(|| Error::Data(format!("no video {id}")))?;
        frames
            .iter()
            .map(|f| f.phase_label.ok_or_else(|| Error::Data(format!("video {id} frame {} is unlabeled", f.index))))
            .collect()
    }
}

#[cfg(test)]
mod tests;
