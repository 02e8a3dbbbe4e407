use rayon::prelude::*;

use super::FrameRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STATIC_FRAME_THRESHOLD: f64 = 8000.0;

/// Euclidean norm of the raw pixel difference of two equally sized frames.
pub fn frame_distance(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "frame sizes differ");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Keeps the first frame, then every frame at distance `>= threshold` from
/// the last kept one.
pub fn filter_static_frames(frames: &[FrameRecord], threshold: f64) -> Vec<FrameRecord> {
    let mut kept: Vec<FrameRecord> = Vec::with_capacity(frames.len());
    for f in frames {
        match kept.last() {
            Some(g) if frame_distance(&f.pixels, &g.pixels) < threshold => {}
            _ => kept.push(f.clone()),
        }
    }
    kept
}

/// Center crop to 4:3, bilinear resample to `(height, width)` and map
/// `v -> v / 255 - 0.5`.
pub fn preprocess_frame(raw: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let shape = raw.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidImage(format!("expected 3×H×W pixels, got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let (th, tw) = target;
    if h == 0 || w == 0 || th == 0 || tw == 0 {
        return Err(Error::InvalidImage(format!("degenerate size {h}×{w} -> {th}×{tw}")));
    }
    let (ch, cw) = if w * 3 > h * 4 {
        (h, ((h * 4) as f64 / 3.0).round() as usize)
    } else if w * 3 < h * 4 {
        (((w * 3) as f64 / 4.0).round() as usize, w)
    } else {
        (h, w)
    };
    if ch == 0 || cw == 0 {
        return Err(Error::InvalidImage(format!("{h}×{w} image has no 4:3 region")));
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let sy = ch as f64 / th as f64;
    let sx = cw as f64 / tw as f64;
    let taps = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..th).map(|y| taps(y, sy, ch)).collect();
    let cols: Vec<_> = (0..tw).map(|x| taps(x, sx, cw)).collect();
    let src = raw.data();
    let mut out = Vec::with_capacity(3 * th * tw);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let at = |y: usize, x: usize| plane[(y0 + y) * w + x0 + x] as f64;
        for &(ya, yb, fy) in &rows {
            for &(xa, xb, fx) in &cols {
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bottom = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push((v / 255.0 - 0.5).clamp(-0.5, 0.5) as f32);
            }
        }
    }
    Tensor::new(vec![3, th, tw], out)
}

/// Preprocesses frames in parallel into an `N x 3 x H x W` batch.
pub fn stack_frames(frames: &[FrameRecord], target: (usize, usize)) -> Result<Tensor> {
    let (th, tw) = target;
    let per = 3 * th * tw;
    let planes = frames
        .par_iter()
        .map(|f| preprocess_frame(&f.pixels, target).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(frames.len() * per);
    for p in planes {
        data.extend(p);
    }
    Tensor::new(vec![frames.len(), 3, th, tw], data)
}
