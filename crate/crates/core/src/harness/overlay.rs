//! Side-by-side PNG overlays: prediction on the left, ground truth on the
//! right, both drawn over the windowed frame.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::preprocess::WindowedStack;
use crate::stack::{CtStack, ScoreVolume};

const TINT: [f64; 3] = [255.0, 0.0, 0.0];
const TINT_ALPHA: f64 = 0.5;

fn gray(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn tinted(g: u8) -> Rgb<u8> {
    let mix = |t: f64| (f64::from(g) * (1.0 - TINT_ALPHA) + t * TINT_ALPHA).round() as u8;
    Rgb([mix(TINT[0]), mix(TINT[1]), mix(TINT[2])])
}

fn paint(img: &mut RgbImage, x0: u32, base: ArrayView2<f32>, marked: impl Fn(usize, usize) -> bool) {
    for ((y, x), &v) in base.indexed_iter() {
        let g = gray(v);
        let px = if marked(y, x) { tinted(g) } else { Rgb([g, g, g]) };
        img.put_pixel(x0 + x as u32, y as u32, px);
    }
}

/// Overlay for one frame, `2W × H`. Pixels with `score >= threshold` are
/// tinted on the left half; ground-truth pixels on the right half.
pub fn overlay_frame(stack: &CtStack, scores: &ScoreVolume, frame: usize, threshold: f64) -> Result<RgbImage> {
    if scores.scores.dim() != stack.frames.dim() {
        return Err(Error::arg(format!(
            "score shape {:?} != stack shape {:?}",
            scores.scores.dim(),
            stack.frames.dim()
        )));
    }
    if frame >= stack.depth() {
        return Err(Error::arg(format!("frame {frame} out of range")));
    }
    let windowed = WindowedStack::<f32>::from_stack(stack);
    let base = windowed.frame(frame);
    let (h, w) = base.dim();
    let mut img = RgbImage::new(2 * w as u32, h as u32);
    let s = scores.scores.index_axis(ndarray::Axis(0), frame);
    paint(&mut img, 0, base, |y, x| f64::from(s[[y, x]]) >= threshold);
    match stack.frame_mask(frame) {
        Some(m) => paint(&mut img, w as u32, base, |y, x| m[[y, x]] == 1),
        None => paint(&mut img, w as u32, base, |_, _| false),
    }
    Ok(img)
}

/// The windowed frame with green speckles whose opacity is the saliency
/// magnitude relative to its maximum.
pub fn saliency_image(stack: &CtStack, map: &crate::harness::SaliencyMap) -> Result<RgbImage> {
    if map.frame >= stack.depth() {
        return Err(Error::arg(format!("frame {} out of range", map.frame)));
    }
    let windowed = WindowedStack::<f32>::from_stack(stack);
    let base = windowed.frame(map.frame);
    if base.dim() != map.magnitude.dim() {
        return Err(Error::arg("saliency map does not match the frame shape"));
    }
    let peak = map.magnitude.iter().cloned().fold(0.0, f64::max);
    let (h, w) = base.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in base.indexed_iter() {
        let g = f64::from(gray(v));
        let a = if peak > 0.0 { map.magnitude[[y, x]] / peak } else { 0.0 };
        let keep = (g * (1.0 - a)).round() as u8;
        let green = (g * (1.0 - a) + 255.0 * a).round() as u8;
        img.put_pixel(x as u32, y as u32, Rgb([keep, green, keep]));
    }
    Ok(img)
}

/// `count` distinct frames chosen with `seed`, in ascending order; all
/// frames when `count` is at least the depth.
pub fn select_frames(depth: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= depth {
        return (0..depth).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, depth, count).into_vec();
    picked.sort_unstable();
    picked
}

/// Write `<stack_id>_f<frame>.png` for each selected frame (all frames by
/// default) and return the written paths.
pub fn render_overlay(
    stack: &CtStack,
    scores: &ScoreVolume,
    out: &Path,
    frames: Option<&[usize]>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let all: Vec<usize> = (0..stack.depth()).collect();
    let frames = frames.unwrap_or(&all);
    let mut written = Vec::with_capacity(frames.len());
    for &f in frames {
        let img = overlay_frame(stack, scores, f, DEFAULT_THRESHOLD)?;
        let path = out.join(format!("{}_f{:03}.png", stack.stack_id, f));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}
