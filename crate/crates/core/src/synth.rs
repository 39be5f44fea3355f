//! Seeded CT-like phantom generator.
//!
//! Each stack is an elliptical "head" of soft-tissue HU with band-limited
//! texture on a −1000 HU background. Positive stacks carry 1–3 blob lesions:
//! a Gaussian-falloff ellipsoid intensity field cut off at its unit level
//! set, which is also the ground-truth mask. Lesions extend over at least two
//! adjacent frames whenever the stack has more than one frame.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::{read_json, save_stack, write_json, CtStack};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    /// Frame side length in pixels.
    pub size: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub head_hu_mean: f64,
    pub head_hu_std: f64,
    /// Gaussian sigma (pixels) of the texture low-pass.
    pub texture_sigma: f64,
    /// White noise added after the low-pass, HU.
    pub grain_hu_std: f64,
    pub background_hu: f64,
    /// Head semi-axes as fractions of `size`.
    pub head_axes: (f64, f64),
    pub lesion_count_min: usize,
    pub lesion_count_max: usize,
    pub lesion_hu_mean: f64,
    pub lesion_hu_std: f64,
    /// Lesion peak HU is clipped to this range.
    pub lesion_hu_clip: (f64, f64),
    /// In-plane lesion radius range, pixels.
    pub lesion_radius: (f64, f64),
    /// Through-plane lesion radius range, frames. Must exceed 1.
    pub lesion_z_radius: (f64, f64),
    /// Decay rate of the lesion intensity field in normalized radius².
    pub lesion_falloff: f64,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            size: 128,
            depth_min: 4,
            depth_max: 8,
            head_hu_mean: 30.0,
            head_hu_std: 5.0,
            texture_sigma: 2.0,
            grain_hu_std: 2.0,
            background_hu: -1000.0,
            head_axes: (0.40, 0.34),
            lesion_count_min: 1,
            lesion_count_max: 3,
            lesion_hu_mean: 60.0,
            lesion_hu_std: 15.0,
            lesion_hu_clip: (45.0, 100.0),
            lesion_radius: (4.0, 10.0),
            lesion_z_radius: (1.5, 2.5),
            lesion_falloff: 0.25,
            positive_rate: 0.5,
            seed: 0,
        }
    }
}

/// Scaling applied to the head ellipse on the outermost frames.
const EDGE_FRAME_SCALE: f64 = 0.9;
/// Minimum gap, in pixels, between a lesion and the head boundary.
const LESION_MARGIN: f64 = 2.0;

impl PhantomParams {
    /// Smallest head semi-axis over all frames, pixels.
    pub fn min_head_radius(&self) -> f64 {
        self.head_axes.0.min(self.head_axes.1) * self.size as f64 * EDGE_FRAME_SCALE
    }

    /// Same parameters with lesions disabled.
    pub fn negative(&self) -> Self {
        Self {
            lesion_count_min: 0,
            lesion_count_max: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::arg("phantom size must be at least 8"));
        }
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return Err(Error::arg("invalid depth range"));
        }
        if self.lesion_count_min > self.lesion_count_max {
            return Err(Error::arg("invalid lesion count range"));
        }
        let (rmin, rmax) = self.lesion_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::arg("invalid lesion radius range"));
        }
        if rmax + LESION_MARGIN >= self.min_head_radius() {
            return Err(Error::arg(format!(
                "lesion radius {rmax} does not fit inside head radius {:.1}",
                self.min_head_radius()
            )));
        }
        let (zmin, zmax) = self.lesion_z_radius;
        if !(zmin > 1.0 && zmin <= zmax) {
            return Err(Error::arg("through-plane lesion radius must exceed one frame"));
        }
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return Err(Error::arg("positive_rate must lie in [0,1]"));
        }
        if self.lesion_hu_clip.0 <= self.head_hu_mean {
            return Err(Error::arg("lesion HU floor must exceed head tissue mean"));
        }
        Ok(())
    }
}

/// Geometry of one rendered lesion, returned for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lesion {
    pub center: (f64, f64),
    pub frame: usize,
    pub radius: f64,
    pub z_radius: f64,
    pub peak_hu: f64,
}

impl Lesion {
    /// Normalized squared ellipsoid radius of voxel `(z, y, x)`.
    fn q(&self, z: usize, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.center.0;
        let dx = x as f64 - self.center.1;
        let dz = z as f64 - self.frame as f64;
        (dy * dy + dx * dx) / (self.radius * self.radius) + dz * dz / (self.z_radius * self.z_radius)
    }
}

fn stack_rng(params: &PhantomParams, stack_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(stack_seed);
    rng
}

pub fn generate_stack(params: &PhantomParams, stack_seed: u64) -> Result<CtStack> {
    generate_stack_with_lesions(params, stack_seed).map(|(s, _)| s)
}

pub fn generate_stack_with_lesions(params: &PhantomParams, stack_seed: u64) -> Result<(CtStack, Vec<Lesion>)> {
    params.validate()?;
    let mut rng = stack_rng(params, stack_seed);
    let n = params.size;
    let depth = rng.gen_range(params.depth_min..=params.depth_max);

    let mid = (n as f64 - 1.0) / 2.0;
    let head_center = (mid + rng.gen_range(-2.0..=2.0), mid + rng.gen_range(-2.0..=2.0));
    let axes = (
        params.head_axes.0 * n as f64 * rng.gen_range(0.95..=1.0),
        params.head_axes.1 * n as f64 * rng.gen_range(0.95..=1.0),
    );
    let zmid = (depth as f64 - 1.0) / 2.0;
    let frame_scale = |z: usize| {
        if depth == 1 {
            1.0
        } else {
            1.0 - (1.0 - EDGE_FRAME_SCALE) * (z as f64 - zmid).abs() / zmid
        }
    };
    let in_head = |z: usize, y: f64, x: f64| {
        let s = frame_scale(z);
        let ny = (y - head_center.0) / (axes.0 * s);
        let nx = (x - head_center.1) / (axes.1 * s);
        ny * ny + nx * nx <= 1.0
    };

    let lesion_count = rng.gen_range(params.lesion_count_min..=params.lesion_count_max);
    let peak = Normal::new(params.lesion_hu_mean, params.lesion_hu_std).map_err(|e| Error::arg(e.to_string()))?;
    let mut lesions = Vec::with_capacity(lesion_count);
    for _ in 0..lesion_count {
        let radius = rng.gen_range(params.lesion_radius.0..=params.lesion_radius.1);
        let z_radius = rng.gen_range(params.lesion_z_radius.0..=params.lesion_z_radius.1);
        let frame = rng.gen_range(0..depth);
        // Uniform point in the head ellipse shrunk so the disc stays inside.
        let s = frame_scale(frame);
        let shrink_y = (axes.0 * s - radius - LESION_MARGIN) / (axes.0 * s);
        let shrink_x = (axes.1 * s - radius - LESION_MARGIN) / (axes.1 * s);
        let (uy, ux) = loop {
            let uy: f64 = rng.gen_range(-1.0..=1.0);
            let ux: f64 = rng.gen_range(-1.0..=1.0);
            if uy * uy + ux * ux <= 1.0 {
                break (uy, ux);
            }
        };
        let center = (
            head_center.0 + uy * axes.0 * s * shrink_y,
            head_center.1 + ux * axes.1 * s * shrink_x,
        );
        let peak_hu = peak
            .sample(&mut rng)
            .clamp(params.lesion_hu_clip.0, params.lesion_hu_clip.1);
        lesions.push(Lesion {
            center,
            frame,
            radius,
            z_radius,
            peak_hu,
        });
    }

    let mut frames = Array3::<i16>::zeros((depth, n, n));
    let mut mask = Array3::<u8>::zeros((depth, n, n));
    for z in 0..depth {
        let texture = smooth_noise(n, params.texture_sigma, &mut rng);
        for y in 0..n {
            for x in 0..n {
                let grain: f64 = rng.sample::<f64, _>(StandardNormal) * params.grain_hu_std;
                let hu = if in_head(z, y as f64, x as f64) {
                    let tissue = params.head_hu_mean + params.head_hu_std * texture[[y, x]];
                    let mut hu = tissue;
                    for l in &lesions {
                        let q = l.q(z, y, x);
                        if q <= 1.0 {
                            mask[[z, y, x]] = 1;
                            hu += (l.peak_hu - params.head_hu_mean) * (-params.lesion_falloff * q).exp();
                        }
                    }
                    hu + grain
                } else {
                    params.background_hu + grain
                };
                frames[[z, y, x]] = hu.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            }
        }
    }
    let has_mask = Some(mask);
    let stack = CtStack::new(format!("synth_{stack_seed:05}"), frames, has_mask)?;
    Ok((stack, lesions))
}

/// Unit-variance low-pass-filtered white noise.
fn smooth_noise(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let white = Array2::from_shape_simple_fn((n, n), || rng.sample::<f64, _>(StandardNormal));
    let mut field = if sigma > 0.0 {
        gaussian_blur(&white, sigma)
    } else {
        white
    };
    let len = field.len() as f64;
    let mean = field.sum() / len;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len)
        .sqrt()
        .max(1e-12);
    field.mapv_inplace(|v| (v - mean) / std);
    field
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(src: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as isize;
    let (h, w) = src.dim();
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[[y, reflect(x as isize + j as isize - half, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[[reflect(y as isize + j as isize - half, h), x]])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stack_id: String,
    /// 1 if the stack contains any lesion voxel.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: PhantomParams,
    pub stacks: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        read_json(&dir.as_ref().join(MANIFEST_FILE))
    }

    pub fn stack_ids(&self) -> Vec<String> {
        self.stacks.iter().map(|e| e.stack_id.clone()).collect()
    }

    pub fn positives(&self) -> usize {
        self.stacks.iter().filter(|e| e.label == 1).count()
    }
}

pub fn positive_count(positive_rate: f64, n_stacks: usize) -> usize {
    (positive_rate * n_stacks as f64).round() as usize
}

/// Generate `n_stacks` stacks in memory. Exactly
/// `round(positive_rate * n_stacks)` of them carry lesions.
pub fn generate_corpus(params: &PhantomParams, n_stacks: usize) -> Result<Vec<CtStack>> {
    params.validate()?;
    if params.lesion_count_min == 0 && params.positive_rate > 0.0 {
        return Err(Error::arg("positive stacks need lesion_count_min >= 1"));
    }
    let n_pos = positive_count(params.positive_rate, n_stacks);
    let mut order: Vec<usize> = (0..n_stacks).collect();
    order.shuffle(&mut stack_rng(params, u64::MAX));
    let mut positive = vec![false; n_stacks];
    for &i in &order[..n_pos] {
        positive[i] = true;
    }
    let negative = params.negative();
    (0..n_stacks)
        .map(|i| generate_stack(if positive[i] { params } else { &negative }, i as u64))
        .collect()
}

/// Write a corpus in stack-directory format plus `manifest.json`.
pub fn generate_dataset(params: &PhantomParams, n_stacks: usize, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let stacks = generate_corpus(params, n_stacks)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n_stacks);
    for s in &stacks {
        save_stack(s, out_dir.join(&s.stack_id))?;
        entries.push(ManifestEntry {
            stack_id: s.stack_id.clone(),
            label: u8::from(s.is_positive()),
        });
    }
    let manifest = Manifest {
        params: params.clone(),
        stacks: entries,
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::hu_window;

    fn small() -> PhantomParams {
        PhantomParams {
            size: 64,
            lesion_radius: (3.0, 6.0),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let p = small();
        assert_eq!(generate_stack(&p, 3).unwrap(), generate_stack(&p, 3).unwrap());
        assert_ne!(
            generate_stack(&p, 3).unwrap().frames,
            generate_stack(&p, 4).unwrap().frames
        );
    }

    #[test]
    fn zero_lesions_gives_empty_mask() {
        let s = generate_stack(&small().negative(), 1).unwrap();
        assert!(!s.is_positive());
        assert!(s.mask.unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn oversized_lesion_rejected() {
        let p = PhantomParams {
            lesion_radius: (4.0, 60.0),
            ..Default::default()
        };
        assert!(matches!(generate_stack(&p, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn disc_area_matches_analytic() {
        let p = PhantomParams {
            lesion_count_min: 1,
            lesion_count_max: 1,
            lesion_radius: (8.0, 8.0),
            ..Default::default()
        };
        for seed in 0..5 {
            let (s, lesions) = generate_stack_with_lesions(&p, seed).unwrap();
            let l = &lesions[0];
            let area = s.frame_mask(l.frame).unwrap().iter().filter(|&&v| v == 1).count() as f64;
            let expect = std::f64::consts::PI * l.radius * l.radius;
            assert!((area - expect).abs() / expect < 0.15, "area {area} vs {expect}");
        }
    }

    #[test]
    fn lesions_span_adjacent_frames() {
        let p = PhantomParams {
            lesion_count_min: 1,
            lesion_count_max: 1,
            depth_min: 2,
            depth_max: 5,
            ..small()
        };
        for seed in 0..10 {
            let (s, lesions) = generate_stack_with_lesions(&p, seed).unwrap();
            let f = lesions[0].frame;
            let neighbour = if f + 1 < s.depth() { f + 1 } else { f - 1 };
            assert!(s.frame_is_positive(f) && s.frame_is_positive(neighbour));
        }
    }

    #[test]
    fn lesion_brighter_than_tissue_after_windowing() {
        let p = small();
        for seed in 0..6 {
            let s = generate_stack(&p, seed).unwrap();
            let mask = s.mask.as_ref().unwrap();
            let (mut les, mut nl, mut tis, mut nt) = (0.0, 0usize, 0.0, 0usize);
            for (hu, m) in s.frames.iter().zip(mask.iter()) {
                let v: f64 = hu_window(*hu as i32);
                if *m == 1 {
                    les += v;
                    nl += 1;
                } else if *hu > -500 {
                    tis += v;
                    nt += 1;
                }
            }
            assert!(les / nl as f64 > tis / nt as f64);
        }
    }

    #[test]
    fn positive_counts() {
        assert_eq!(positive_count(0.5, 40), 20);
        assert_eq!(positive_count(0.125, 8), 1);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = PhantomParams {
            positive_rate: 0.125,
            depth_min: 2,
            depth_max: 3,
            ..small()
        };
        let m = generate_dataset(&p, 8, dir.path()).unwrap();
        assert_eq!(m.positives(), 1);
        assert_eq!(Manifest::load(dir.path()).unwrap(), m);
        for e in &m.stacks {
            let s = crate::stack::load_stack(dir.path().join(&e.stack_id)).unwrap();
            assert_eq!(u8::from(s.is_positive()), e.label);
        }
    }
}
