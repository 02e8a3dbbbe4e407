//! On-disk layout.
//!
//! The manifest is a text file with one video per line:
//!
//! ```text
//! # comment
//! @phases Placement of trocars|Preparation|...
//! <video_id> <frame_dir> [annotation_file]
//! ```
//!
//! Paths are relative to the manifest's directory. A frame directory holds
//! binary PPM (P6) files whose stem is the frame index in seconds. The
//! annotation file has `index,phase_id` rows, one per frame, header optional.
//! Without a `@phases` line the phase set is `phase 1..phase N` with N the
//! largest annotated id.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use rayon::prelude::*;

use super::{FrameRecord, PhaseLabelSet, VideoDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn ingestion(path: &Path, reason: impl ToString) -> Error {
    Error::Ingestion { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Reads an 8-bit RGB PPM into a `3 x H x W` tensor of raw values.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| ingestion(path, e))?;
    let img = reader
        .with_guessed_format()
        .map_err(|e| ingestion(path, e))?
        .decode()
        .map_err(|e| ingestion(path, e))?;
    let rgb = img.as_rgb8().ok_or_else(|| ingestion(path, "not an 8-bit RGB image"))?;
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidImage(format!("{} is empty", path.display())));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes a `3 x H x W` tensor of values in `0..=255` as binary PPM.
pub fn write_ppm(path: &Path, pixels: &Tensor) -> Result<()> {
    let [c, h, w] = pixels.shape() else {
        return Err(Error::InvalidImage(format!("expected 3×H×W pixels, got {:?}", pixels.shape())));
    };
    if *c != 3 {
        return Err(Error::InvalidImage(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let src = pixels.data();
    let mut buf = vec![0u8; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            buf[3 * i + ch] = src[ch * h * w + i].round().clamp(0.0, 255.0) as u8;
        }
    }
    let file = BufWriter::new(File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| ingestion(path, e))
}

struct VideoEntry {
    id: String,
    frame_dir: PathBuf,
    annotations: Option<PathBuf>,
}

fn parse_manifest(path: &Path) -> Result<(Vec<VideoEntry>, Option<PhaseLabelSet>)> {
    let text = fs::read_to_string(path).map_err(|e| ingestion(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut phases = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@phases") {
            let names: Vec<String> = rest.trim().split('|').map(|s| s.trim().to_string()).collect();
            phases = Some(PhaseLabelSet::new(names));
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::Manifest(format!(
                "{}:{}: expected `<id> <frame_dir> [annotations]`",
                path.display(),
                lineno + 1
            )));
        }
        if entries.iter().any(|e: &VideoEntry| e.id == fields[0]) {
            return Err(Error::Manifest(format!("duplicate video id {}", fields[0])));
        }
        entries.push(VideoEntry {
            id: fields[0].to_string(),
            frame_dir: base.join(fields[1]),
            annotations: fields.get(2).map(|a| base.join(a)),
        });
    }
    Ok((entries, phases))
}

fn list_frames(dir: &Path, video: &str) -> Result<Vec<(u64, PathBuf)>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| ingestion(dir, e))? {
        let path = entry.map_err(|e| ingestion(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let index = stem
            .parse::<u64>()
            .map_err(|_| Error::Manifest(format!("video {video}: frame file {} has no numeric index", path.display())))?;
        frames.push((index, path));
    }
    frames.sort();
    if let Some(w) = frames.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Manifest(format!("video {video}: index {} appears twice", w[0].0)));
    }
    Ok(frames)
}

/// `index,phase_id` rows of an annotation or prediction file; a
/// non-numeric first line is taken as a header.
pub fn read_annotations(path: &Path) -> Result<Vec<(u64, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| ingestion(path, e))?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(i), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Manifest(format!("{}:{}: expected `index,phase_id`", path.display(), lineno + 1)));
        };
        match (i.parse::<u64>(), p.parse::<usize>()) {
            (Ok(i), Ok(p)) => rows.push((i, p)),
            _ if rows.is_empty() && lineno == 0 => {}
            _ => {
                return Err(Error::Manifest(format!("{}:{}: bad annotation row", path.display(), lineno + 1)))
            }
        }
    }
    Ok(rows)
}

/// Loads every video listed in the manifest.
pub fn ingest_frames(manifest: impl AsRef<Path>) -> Result<VideoDataset> {
    let manifest = manifest.as_ref();
    let (entries, mut phases) = parse_manifest(manifest)?;
    let mut videos = BTreeMap::new();
    let mut max_label = 0;
    for entry in entries {
        let files = list_frames(&entry.frame_dir, &entry.id)?;
        let labels = match &entry.annotations {
            Some(path) => {
                let rows = read_annotations(path)?;
                if rows.len() != files.len() {
                    return Err(Error::Manifest(format!(
                        "video {}: {} annotation rows for {} frames",
                        entry.id,
                        rows.len(),
                        files.len()
                    )));
                }
                if let Some(((i, _), (j, _))) = rows.iter().zip(&files).find(|((i, _), (j, _))| i != j) {
                    return Err(Error::Manifest(format!(
                        "video {}: annotation index {i} does not match frame index {j}",
                        entry.id
                    )));
                }
                rows.into_iter().map(|(_, p)| Some(p)).collect()
            }
            None => vec![None; files.len()],
        };
        let pixels = files.par_iter().map(|(_, p)| read_ppm(p)).collect::<Result<Vec<_>>>()?;
        let frames: Vec<FrameRecord> = files
            .iter()
            .zip(pixels)
            .zip(labels)
            .map(|(((index, _), pixels), phase_label)| {
                max_label = max_label.max(phase_label.unwrap_or(0));
                FrameRecord { video_id: entry.id.clone(), index: *index, pixels, phase_label }
            })
            .collect();
        videos.insert(entry.id, frames);
    }
    if phases.is_none() && max_label > 0 {
        phases = Some(PhaseLabelSet::numbered(max_label));
    }
    VideoDataset::new(videos, phases)
}

/// Writes `dir/manifest.txt`, `dir/<id>/NNNNNN.ppm` and `dir/<id>.csv`.
/// Returns the manifest path.
pub fn write_dataset(data: &VideoDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = BufWriter::new(File::create(&manifest)?);
    if let Some(ps) = data.phase_set() {
        writeln!(out, "@phases {}", ps.names.join("|"))?;
    }
    for (id, frames) in data.videos() {
        let vdir = dir.join(id);
        fs::create_dir_all(&vdir)?;
        frames
            .par_iter()
            .map(|f| write_ppm(&vdir.join(format!("{:06}.ppm", f.index)), &f.pixels))
            .collect::<Result<()>>()?;
        if frames.iter().any(|f| f.phase_label.is_some()) {
            let ann = format!("{id}.csv");
            let mut w = BufWriter::new(File::create(dir.join(&ann))?);
            writeln!(w, "index,phase_id")?;
            for f in frames {
                let label = f.phase_label.ok_or_else(|| Error::Data(format!("video {id} is partly labeled")))?;
                writeln!(w, "{},{label}", f.index)?;
            }
            w.flush()?;
            writeln!(out, "{id} {id} {ann}")?;
        } else {
            writeln!(out, "{id} {id}")?;
        }
    }
    out.flush()?;
    Ok(manifest)
}
