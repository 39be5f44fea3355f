//! Foreground-centered patch sampling and `(N, K)` batch composition.

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::WindowedStack;
use crate::scalar::Scalar;
use crate::stack::CtStack;

/// HU above which a pixel counts as head tissue for negative-frame sampling.
pub const HEAD_HU_THRESHOLD: i16 = -500;

/// Crop size `C` and batch composition `B = N × K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub crop: usize,
    pub images_per_batch: usize,
    pub patches_per_image: usize,
    pub batch_size: usize,
}

impl BatchSpec {
    pub fn new(crop: usize, images_per_batch: usize, patches_per_image: usize) -> Result<Self> {
        let spec = Self {
            crop,
            images_per_batch,
            patches_per_image,
            batch_size: images_per_batch * patches_per_image,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.images_per_batch == 0 || self.patches_per_image == 0 {
            return Err(Error::arg(format!("batch spec fields must be positive: {self:?}")));
        }
        if self.batch_size != self.images_per_batch * self.patches_per_image {
            return Err(Error::arg(format!(
                "batch size {} != {} images x {} patches",
                self.batch_size, self.images_per_batch, self.patches_per_image
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSource {
    pub stack_id: String,
    pub frame: usize,
    /// `(row, col)` of the crop's top-left pixel.
    pub top_left: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample<T> {
    /// `(3, C, C)` fused windowed input.
    pub input: Array3<T>,
    /// `(C, C)` binary target.
    pub target: Array2<u8>,
    pub source: PatchSource,
}

/// Patch center for `frame`: a uniform mask-positive pixel if any, else a
/// uniform head pixel (HU > −500), else a uniform pixel.
pub fn sample_center<R: Rng>(stack: &CtStack, frame: usize, rng: &mut R) -> (usize, usize) {
    let n = stack.size();
    if let Some(mask) = stack.frame_mask(frame) {
        let positives: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, &v)| v == 1).map(|(p, _)| p).collect();
        if !positives.is_empty() {
            return positives[rng.gen_range(0..positives.len())];
        }
    }
    let head: Vec<(usize, usize)> = stack
        .frames
        .index_axis(Axis(0), frame)
        .indexed_iter()
        .filter(|(_, &v)| v > HEAD_HU_THRESHOLD)
        .map(|(p, _)| p)
        .collect();
    if !head.is_empty() {
        return head[rng.gen_range(0..head.len())];
    }
    (rng.gen_range(0..n), rng.gen_range(0..n))
}

/// Top-left corner of the `crop`×`crop` window centered on `center`,
/// clamped so the window lies inside a `size`×`size` frame.
pub fn crop_origin(size: usize, center: (usize, usize), crop: usize) -> Result<(usize, usize)> {
    if crop > size || crop == 0 {
        return Err(Error::arg(format!("crop {crop} does not fit frame {size}")));
    }
    let half = (crop / 2) as isize;
    let max = (size - crop) as isize;
    let clamp = |c: usize| (c as isize - half).clamp(0, max) as usize;
    Ok((clamp(center.0), clamp(center.1)))
}

/// Cut a patch out of the fused frame `frame` of a windowed stack.
pub fn crop_patch<T: Scalar>(
    stack: &CtStack,
    windowed: &WindowedStack<T>,
    frame: usize,
    center: (usize, usize),
    crop: usize,
) -> Result<PatchSample<T>> {
    let (r, c) = crop_origin(stack.size(), center, crop)?;
    let fused = windowed.fuse_z(frame)?;
    let input = fused.channels.slice(s![.., r..r + crop, c..c + crop]).to_owned();
    let target = match stack.frame_mask(frame) {
        Some(m) => m.slice(s![r..r + crop, c..c + crop]).to_owned(),
        None => Array2::zeros((crop, crop)),
    };
    Ok(PatchSample {
        input,
        target,
        source: PatchSource {
            stack_id: stack.stack_id.clone(),
            frame,
            top_left: (r, c),
        },
    })
}

/// Training stacks with their windowed images, indexed frame by frame.
#[derive(Debug, Clone)]
pub struct PatchDataset<T> {
    pub stacks: Vec<CtStack>,
    pub windowed: Vec<WindowedStack<T>>,
    /// `(stack index, frame index)` for every frame.
    pub frames: Vec<(usize, usize)>,
}

impl<T: Scalar> PatchDataset<T> {
    pub fn new(stacks: Vec<CtStack>) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::arg("empty training set"));
        }
        let size = stacks[0].size();
        if stacks.iter().any(|s| s.size() != size) {
            return Err(Error::Shape("all training stacks must share one frame size".into()));
        }
        let windowed = stacks.iter().map(WindowedStack::from_stack).collect();
        let frames = stacks
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.depth()).map(move |f| (i, f)))
            .collect();
        Ok(Self {
            stacks,
            windowed,
            frames,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_size(&self) -> usize {
        self.stacks[0].size()
    }
}

/// Draw `N` distinct frames uniformly, then `K` foreground-centered patches
/// from each; `B` samples in total, grouped by source frame.
pub fn make_batch<T: Scalar, R: Rng>(
    dataset: &PatchDataset<T>,
    spec: &BatchSpec,
    rng: &mut R,
) -> Result<Vec<PatchSample<T>>> {
    spec.validate()?;
    if spec.images_per_batch > dataset.frame_count() {
        return Err(Error::arg(format!(
            "{} images per batch requested but only {} frames available",
            spec.images_per_batch,
            dataset.frame_count()
        )));
    }
    if spec.crop > dataset.frame_size() {
        return Err(Error::arg(format!(
            "crop {} exceeds frame size {}",
            spec.crop,
            dataset.frame_size()
        )));
    }
    let chosen = index::sample(rng, dataset.frame_count(), spec.images_per_batch);
    let mut out = Vec::with_capacity(spec.batch_size);
    for idx in chosen.iter() {
        let (si, frame) = dataset.frames[idx];
        let stack = &dataset.stacks[si];
        for _ in 0..spec.patches_per_image {
            let center = sample_center(stack, frame, rng);
            out.push(crop_patch(stack, &dataset.windowed[si], frame, center, spec.crop)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn blank(size: usize, depth: usize) -> CtStack {
        let frames = Array3::from_elem((depth, size, size), -1000i16);
        CtStack::new("b", frames, Some(Array3::zeros((depth, size, size)))).unwrap()
    }

    #[test]
    fn singleton_foreground() {
        let mut s = blank(16, 1);
        s.mask.as_mut().unwrap()[[0, 3, 11]] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_center(&s, 0, &mut rng), (3, 11));
        }
    }

    #[test]
    fn negative_frame_falls_back_to_head() {
        let mut s = blank(16, 1);
        for r in 4..8 {
            for c in 5..9 {
                s.frames[[0, r, c]] = 30;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (r, c) = sample_center(&s, 0, &mut rng);
            assert!((4..8).contains(&r) && (5..9).contains(&c));
        }
    }

    #[test]
    fn background_frame_is_uniform() {
        let s = blank(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seen: HashSet<_> = (0..2000).map(|_| sample_center(&s, 0, &mut rng)).collect();
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn foreground_centers_are_uniform() {
        // 100 positive pixels, 1e4 draws: chi-square with 99 dof. The 0.999
        // quantile of chi2(99) is about 148.2.
        let mut s = blank(32, 1);
        for i in 0..100 {
            s.mask.as_mut().unwrap()[[0, 5 + i / 10, 7 + i % 10]] = 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(sample_center(&s, 0, &mut rng)).or_default() += 1;
        }
        assert_eq!(counts.len(), 100);
        let expected = draws as f64 / 100.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 148.2, "chi2 = {chi2}");
    }

    #[test]
    fn crop_origin_examples() {
        assert_eq!(crop_origin(512, (256, 256), 240).unwrap(), (136, 136));
        assert_eq!(crop_origin(512, (0, 0), 240).unwrap(), (0, 0));
        assert_eq!(crop_origin(512, (511, 511), 240).unwrap(), (272, 272));
        assert_eq!(crop_origin(64, (40, 3), 64).unwrap(), (0, 0));
        assert!(crop_origin(64, (0, 0), 65).is_err());
    }

    fn dataset() -> PatchDataset<f32> {
        let p = crate::synth::PhantomParams {
            size: 32,
            lesion_radius: (2.0, 4.0),
            depth_min: 3,
            depth_max: 4,
            ..Default::default()
        };
        PatchDataset::new(crate::synth::generate_corpus(&p, 6).unwrap()).unwrap()
    }

    #[test]
    fn batch_composition() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (n, k) in [(16, 1), (8, 2), (4, 4), (2, 8)] {
            let spec = BatchSpec::new(16, n, k).unwrap();
            assert_eq!(spec.batch_size, 16);
            let batch = make_batch(&ds, &spec, &mut rng).unwrap();
            assert_eq!(batch.len(), 16);
            let frames: HashSet<_> = batch
                .iter()
                .map(|p| (p.source.stack_id.clone(), p.source.frame))
                .collect();
            assert_eq!(frames.len(), n);
        }
        assert!(BatchSpec::new(16, 4, 0).is_err());
        let too_many = BatchSpec::new(16, ds.frame_count() + 1, 1).unwrap();
        assert!(make_batch(&ds, &too_many, &mut rng).is_err());
    }

    #[test]
    fn patches_match_direct_indexing() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = BatchSpec::new(12, 4, 3).unwrap();
        for _ in 0..5 {
            for p in make_batch(&ds, &spec, &mut rng).unwrap() {
                let si = ds.stacks.iter().position(|s| s.stack_id == p.source.stack_id).unwrap();
                let (r, c) = p.source.top_left;
                let mask = ds.stacks[si].mask.as_ref().unwrap();
                assert_eq!(p.target, mask.slice(s![p.source.frame, r..r + 12, c..c + 12]));
                assert_eq!(
                    p.input.index_axis(Axis(0), 1),
                    ds.windowed[si].values.slice(s![p.source.frame, r..r + 12, c..c + 12])
                );
                assert!(p.input.iter().all(|v| (0.0..=255.0).contains(v)));
            }
        }
    }

    #[test]
    fn positive_frames_center_on_foreground() {
        let ds = dataset();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (si, frame) in ds.frames.iter().copied() {
            let s = &ds.stacks[si];
            if s.frame_is_positive(frame) {
                for _ in 0..20 {
                    let (r, c) = sample_center(s, frame, &mut rng);
                    assert_eq!(s.mask.as_ref().unwrap()[[frame, r, c]], 1);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = dataset();
        let spec = BatchSpec::new(16, 4, 2).unwrap();
        let a = make_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = make_batch(&ds, &spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
