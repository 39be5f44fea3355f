//! Sliding-window and fully-convolutional inference, and the
//! pixel → frame → stack score pooling.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::preprocess::WindowedStack;
use crate::scalar::{sigmoid, Scalar};
use crate::stack::{write_json, CtStack, ScoreVolume};

/// Default overlap factor β.
pub const DEFAULT_BETA: f64 = 3.0;
/// Default exponent of the stack-frame norm.
pub const DEFAULT_P: f64 = 256.0;

/// Upper bound on windows pushed through the backbone in one call.
const WINDOW_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub size: usize,
    pub crop: usize,
    pub beta: f64,
    /// Windows per axis, `⌈βH/C⌉`.
    pub per_axis: usize,
    /// Start offsets along one axis (rows and columns share them).
    pub axis_starts: Vec<usize>,
}

impl WindowGrid {
    pub fn window_count(&self) -> usize {
        self.per_axis * self.per_axis
    }

    /// Top-left corners, row-major.
    pub fn starts(&self) -> Vec<(usize, usize)> {
        self.axis_starts
            .iter()
            .flat_map(|&r| self.axis_starts.iter().map(move |&c| (r, c)))
            .collect()
    }
}

/// `k = ⌈βH/C⌉` windows per axis at `round(i·(H−C)/(k−1))`, so the first
/// and last windows sit flush with the borders.
pub fn window_grid(size: usize, crop: usize, beta: f64) -> Result<WindowGrid> {
    if crop == 0 || crop > size {
        return Err(Error::arg(format!("window {crop} does not fit frame {size}")));
    }
    if !(beta >= 1.0 && beta.is_finite()) {
        return Err(Error::arg(format!("beta must be >= 1, got {beta}")));
    }
    let per_axis = (beta * size as f64 / crop as f64).ceil() as usize;
    let span = size - crop;
    let axis_starts = if per_axis == 1 {
        vec![0]
    } else {
        let d = per_axis - 1;
        // Round half up in integer arithmetic.
        (0..per_axis).map(|i| (2 * i * span + d) / (2 * d)).collect()
    };
    Ok(WindowGrid {
        size,
        crop,
        beta,
        per_axis,
        axis_starts,
    })
}

fn check_backbones<T: Scalar>(backbones: &[&dyn Backbone<T>]) -> Result<()> {
    if backbones.is_empty() {
        return Err(Error::Contract("no backbone supplied".into()));
    }
    Ok(())
}

fn fused_input<T: Scalar>(windowed: &WindowedStack<T>, frame: usize) -> Result<Array3<T>> {
    Ok(windowed.fuse_z(frame)?.channels)
}

fn checked_logits<T: Scalar>(backbone: &dyn Backbone<T>, x: &Array4<T>) -> Result<Array3<T>> {
    let (n, _, h, w) = x.dim();
    let y = backbone.forward_padded(x)?;
    if y.dim() != (n, h, w) {
        return Err(Error::Contract(format!(
            "backbone returned {:?} for input {:?}",
            y.dim(),
            x.dim()
        )));
    }
    Ok(y)
}

/// Per-pixel probability: mean of the logistic scores of every window that
/// covers the pixel, then mean over the ensemble.
pub fn sliding_infer<T: Scalar>(
    stack: &CtStack,
    backbones: &[&dyn Backbone<T>],
    crop: usize,
    beta: f64,
) -> Result<ScoreVolume> {
    check_backbones(backbones)?;
    let size = stack.size();
    let grid = window_grid(size, crop, beta)?;
    let starts = grid.starts();
    let windowed = WindowedStack::<T>::from_stack(stack);
    let mut out = Array3::<f32>::zeros(stack.frames.dim());
    for frame in 0..stack.depth() {
        let fused = fused_input(&windowed, frame)?;
        let mut ensemble = Array2::<f64>::zeros((size, size));
        for backbone in backbones {
            let mut sum = Array2::<f64>::zeros((size, size));
            let mut count = Array2::<u32>::zeros((size, size));
            for chunk in starts.chunks(WINDOW_CHUNK) {
                let mut batch = Array4::<T>::zeros((chunk.len(), 3, crop, crop));
                for (i, &(r, c)) in chunk.iter().enumerate() {
                    batch
                        .index_axis_mut(Axis(0), i)
                        .assign(&fused.slice(s![.., r..r + crop, c..c + crop]));
                }
                let logits = checked_logits(*backbone, &batch)?;
                for (i, &(r, c)) in chunk.iter().enumerate() {
                    let mut acc = sum.slice_mut(s![r..r + crop, c..c + crop]);
                    acc.zip_mut_with(&logits.index_axis(Axis(0), i), |a, &z| *a += sigmoid(z).as_f64());
                    count.slice_mut(s![r..r + crop, c..c + crop]).mapv_inplace(|n| n + 1);
                }
            }
            ndarray::Zip::from(&mut ensemble)
                .and(&sum)
                .and(&count)
                .for_each(|e, &s, &n| *e += s / f64::from(n));
        }
        let k = backbones.len() as f64;
        out.index_axis_mut(Axis(0), frame)
            .assign(&ensemble.mapv(|v| clamp_unit(v / k)));
    }
    ScoreVolume::new(stack.stack_id.clone(), out)
}

/// One whole-frame forward pass per frame (and per ensemble member).
pub fn fullconv_infer<T: Scalar>(stack: &CtStack, backbones: &[&dyn Backbone<T>]) -> Result<ScoreVolume> {
    check_backbones(backbones)?;
    let size = stack.size();
    let windowed = WindowedStack::<T>::from_stack(stack);
    let mut out = Array3::<f32>::zeros(stack.frames.dim());
    for frame in 0..stack.depth() {
        let x = fused_input(&windowed, frame)?.insert_axis(Axis(0));
        let mut ensemble = Array2::<f64>::zeros((size, size));
        for backbone in backbones {
            let logits = checked_logits(*backbone, &x)?;
            ensemble.zip_mut_with(&logits.index_axis(Axis(0), 0), |e, &z| *e += sigmoid(z).as_f64());
        }
        let k = backbones.len() as f64;
        out.index_axis_mut(Axis(0), frame)
            .assign(&ensemble.mapv(|v| clamp_unit(v / k)));
    }
    ScoreVolume::new(stack.stack_id.clone(), out)
}

fn clamp_unit(v: f64) -> f32 {
    (v as f32).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Sliding,
    Fullconv,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sliding" => Ok(InferenceMode::Sliding),
            "fullconv" => Ok(InferenceMode::Fullconv),
            other => Err(Error::arg(format!("unknown inference mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InferenceMode::Sliding => "sliding",
            InferenceMode::Fullconv => "fullconv",
        })
    }
}

pub fn infer<T: Scalar>(
    stack: &CtStack,
    backbones: &[&dyn Backbone<T>],
    mode: InferenceMode,
    crop: usize,
    beta: f64,
) -> Result<ScoreVolume> {
    match mode {
        InferenceMode::Sliding => sliding_infer(stack, backbones, crop, beta),
        InferenceMode::Fullconv => fullconv_infer(stack, backbones),
    }
}

/// Mean pixel score of one frame.
pub fn frame_avg_score<T: Scalar>(scores: &[T]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::arg("empty frame"));
    }
    Ok(scores.iter().map(|s| s.as_f64()).sum::<f64>() / scores.len() as f64)
}

/// `(Σ sᵢᵖ)^(1/p)`, evaluated as `m·(Σ (sᵢ/m)ᵖ)^(1/p)` with `m = max sᵢ`.
pub fn frame_lp_score<T: Scalar>(scores: &[T], p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::arg(format!("p must be >= 1, got {p}")));
    }
    if scores.is_empty() {
        return Err(Error::arg("empty frame"));
    }
    let m = scores.iter().map(|s| s.as_f64()).fold(0.0f64, f64::max);
    if m == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = scores.iter().map(|s| (s.as_f64() / m).powf(p)).sum();
    Ok(m * sum.powf(1.0 / p))
}

/// Maximum stack-frame score.
pub fn stack_score(frame_lp: &[f64]) -> Result<f64> {
    if frame_lp.is_empty() {
        return Err(Error::arg("stack has no frames"));
    }
    Ok(frame_lp.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub frame_avg: Vec<f64>,
    pub frame_lp: Vec<f64>,
    pub stack_score: f64,
    pub p: f64,
}

impl ScoreSummary {
    pub fn from_volume(volume: &ScoreVolume, p: f64) -> Result<Self> {
        let mut frame_avg = Vec::with_capacity(volume.depth());
        let mut frame_lp = Vec::with_capacity(volume.depth());
        for frame in volume.scores.outer_iter() {
            let flat = frame.as_standard_layout();
            let values = flat.as_slice().unwrap();
            frame_avg.push(frame_avg_score(values)?);
            frame_lp.push(frame_lp_score(values, p)?);
        }
        let stack_score = stack_score(&frame_lp)?;
        Ok(Self {
            frame_avg,
            frame_lp,
            stack_score,
            p,
        })
    }
}

/// Contents of a stack's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub stack_id: String,
    pub frame_avg: Vec<f64>,
    pub frame_lp: Vec<f64>,
    pub stack_score: f64,
    pub p: f64,
    pub beta: f64,
    #[serde(rename = "C")]
    pub crop: usize,
    pub mode: InferenceMode,
    pub ensemble_size: usize,
}

impl SummaryFile {
    pub fn new(
        stack_id: &str,
        summary: ScoreSummary,
        beta: f64,
        crop: usize,
        mode: InferenceMode,
        ensemble_size: usize,
    ) -> Self {
        Self {
            stack_id: stack_id.to_owned(),
            frame_avg: summary.frame_avg,
            frame_lp: summary.frame_lp,
            stack_score: summary.stack_score,
            p: summary.p,
            beta,
            crop,
            mode,
            ensemble_size,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_grid() {
        let g = window_grid(512, 240, 3.0).unwrap();
        assert_eq!(g.per_axis, 7);
        assert_eq!(g.window_count(), 49);
        assert_eq!(g.axis_starts, vec![0, 45, 91, 136, 181, 227, 272]);
    }

    #[test]
    fn single_window() {
        let g = window_grid(64, 64, 1.0).unwrap();
        assert_eq!(g.starts(), vec![(0, 0)]);
        assert!(window_grid(64, 65, 3.0).is_err());
        assert!(window_grid(64, 32, 0.5).is_err());
    }

    #[test]
    fn pooling_examples() {
        assert!((frame_avg_score(&[0.2f64; 9]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(frame_avg_score(&[0.0f64, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!((frame_avg_score(&[0.1f64, 0.2, 0.3, 0.8]).unwrap() - 0.35).abs() < 1e-15);
        assert!(frame_avg_score::<f64>(&[]).is_err());

        assert_eq!(frame_lp_score(&[0.37f64], 256.0).unwrap(), 0.37);
        assert_eq!(frame_lp_score(&[1.0f64, 0.0, 0.0, 0.0], 3.0).unwrap(), 1.0);
        assert!((frame_lp_score(&[0.5f64, 0.5], 2.0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(frame_lp_score(&[0.5f64], 0.5).is_err());
        assert_eq!(frame_lp_score(&[0.0f64; 4], 256.0).unwrap(), 0.0);

        assert_eq!(stack_score(&[0.4]).unwrap(), 0.4);
        assert_eq!(stack_score(&[0.1, 0.7, 0.3]).unwrap(), 0.7);
        assert!(stack_score(&[]).is_err());
    }

    proptest! {
        #[test]
        fn grid_covers_and_counts(size in 1usize..300, frac in 0.0f64..1.0, beta in 1.0f64..4.0) {
            let crop = ((size as f64 * frac).ceil() as usize).clamp(1, size);
            let g = window_grid(size, crop, beta).unwrap();
            prop_assert_eq!(g.per_axis, (beta * size as f64 / crop as f64).ceil() as usize);
            prop_assert_eq!(g.starts().len(), g.per_axis * g.per_axis);
            prop_assert_eq!(g.axis_starts[0], 0);
            prop_assert_eq!(*g.axis_starts.last().unwrap(), size - crop);
            let mut covered = vec![false; size];
            for &s in &g.axis_starts {
                prop_assert!(s + crop <= size);
                covered[s..s + crop].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
