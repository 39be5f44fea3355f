//! Backbone contract and the compact encoder–decoder reference network.

use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    concat_channels, relu_backward_inplace, relu_inplace, split_channels, upsample2, upsample2_backward, BatchNorm2d,
    BnCache, Conv2d,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shape of one named tensor of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// What inference needs from a segmentation network.
///
/// `forward` maps a batch of `(N, 3, C, C)` windowed inputs to `(N, C, C)`
/// logits in evaluation mode. Implementations may reject spatial sizes that
/// are not a multiple of [`Backbone::stride`]; [`Backbone::forward_padded`]
/// lifts that restriction.
pub trait Backbone<T: Scalar>: Send + Sync {
    fn forward(&self, input: &Array4<T>) -> Result<Array3<T>>;

    /// Total downsampling factor. Spatial input sizes must be multiples of it.
    fn stride(&self) -> usize;

    fn parameters(&self) -> Vec<TensorInfo>;

    /// True if shifting the input by a multiple of the stride shifts the
    /// interior logits by the same amount.
    fn is_translation_covariant(&self) -> bool;

    fn parameter_count(&self) -> usize {
        self.parameters()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    /// Reflect-pad right/bottom to the next stride multiple, run
    /// [`Backbone::forward`], crop the logits back.
    fn forward_padded(&self, input: &Array4<T>) -> Result<Array3<T>> {
        let (_, _, h, w) = input.dim();
        let padded = pad_to_multiple(input, self.stride())?;
        if padded.dim() == input.dim() {
            return self.forward(input);
        }
        let out = self.forward(&padded)?;
        Ok(out.slice(s![.., ..h, ..w]).to_owned())
    }
}

/// Right/bottom reflection padding (edge pixel not repeated) so that both
/// spatial sizes become multiples of `multiple`.
pub fn pad_to_multiple<T: Scalar>(x: &Array4<T>, multiple: usize) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    let hp = h.div_ceil(multiple) * multiple;
    let wp = w.div_ceil(multiple) * multiple;
    if hp == h && wp == w {
        return Ok(x.clone());
    }
    if hp - h >= h || wp - w >= w {
        return Err(Error::Shape(format!("{h}x{w} too small to reflect-pad to {hp}x{wp}")));
    }
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    Ok(Array4::from_shape_fn((n, c, hp, wp), |(a, b, y, z)| {
        x[[a, b, reflect(y, h), reflect(z, w)]]
    }))
}

/// Adjoint of [`pad_to_multiple`]: fold gradients of reflected pixels back
/// onto their sources.
pub fn unpad_gradient<T: Scalar>(d: &Array4<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c, hp, wp) = d.dim();
    if hp == h && wp == w {
        return d.clone();
    }
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    let mut out = Array4::zeros((n, c, h, w));
    for ((a, b, y, z), &v) in d.indexed_iter() {
        out[[a, b, reflect(y, h), reflect(z, w)]] += v;
    }
    let _ = (hp, wp);
    out
}

/// Channel widths of the reference network, shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthPreset {
    /// (4, 4, 8, 8): unit tests.
    Tiny,
    /// (8, 16, 32, 64): desk-scale training, ~1e5 parameters.
    Desk,
    /// (16, 32, 64, 128): ~4e5 parameters.
    Wide,
}

impl WidthPreset {
    pub fn widths(self) -> [usize; 4] {
        match self {
            WidthPreset::Tiny => [4, 4, 8, 8],
            WidthPreset::Desk => [8, 16, 32, 64],
            WidthPreset::Wide => [16, 32, 64, 128],
        }
    }
}

/// 3×3 convolution (no bias), batch norm, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

pub struct BlockCache<T> {
    input: Array4<T>,
    bn: BnCache<T>,
    output: Array4<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, 3, stride, false, 2f64.sqrt(), rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward(&mut self, x: Array4<T>, train: bool) -> Result<(Array4<T>, BlockCache<T>)> {
        let z = self.conv.forward(&x)?;
        let (mut y, bn) = if train {
            self.bn.forward(&z, true)
        } else {
            self.bn.forward_eval(&z)
        };
        relu_inplace(&mut y);
        Ok((
            y.clone(),
            BlockCache {
                input: x,
                bn,
                output: y,
            },
        ))
    }

    fn forward_eval(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let z = self.conv.forward(x)?;
        let (mut y, _) = self.bn.forward_eval(&z);
        relu_inplace(&mut y);
        Ok(y)
    }

    /// Appends `[conv.weight, bn.gamma, bn.beta]` gradients to `grads`.
    fn backward(
        &self,
        cache: BlockCache<T>,
        mut dy: Array4<T>,
        grads: &mut Vec<Vec<T>>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        relu_backward_inplace(&mut dy, &cache.output);
        let (dz, dgamma, dbeta) = self.bn.backward(&cache.bn, &dy);
        let (dx, dw, _) = self.conv.backward(&cache.input, &dz, need_dx);
        grads.push(dw.into_raw_vec_and_offset().0);
        grads.push(dgamma.to_vec());
        grads.push(dbeta.to_vec());
        dx
    }
}

const BLOCK_NAMES: [&str; 8] = ["enc0", "enc1", "enc2", "enc3", "bottleneck", "dec2", "dec1", "dec0"];

/// U-shaped FCN: three stride-2 stages, nearest upsampling with channel
/// concatenation of the matching encoder output, 1×1 logit head.
/// The stem divides inputs by 255.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNet<T> {
    pub preset: WidthPreset,
    /// enc0, enc1, enc2, enc3, bottleneck, dec2, dec1, dec0
    pub blocks: Vec<ConvBlock<T>>,
    pub head: Conv2d<T>,
}

/// Activations saved by [`ReferenceNet::forward_tape`].
pub struct Tape<T> {
    caches: Vec<BlockCache<T>>,
    head_input: Array4<T>,
    input_hw: (usize, usize),
}

impl<T: Scalar> ReferenceNet<T> {
    pub const STRIDE: usize = 8;

    pub fn new(preset: WidthPreset, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1, w2, w3] = preset.widths();
        let blocks = vec![
            ConvBlock::new(3, w0, 1, &mut rng),
            ConvBlock::new(w0, w1, 2, &mut rng),
            ConvBlock::new(w1, w2, 2, &mut rng),
            ConvBlock::new(w2, w3, 2, &mut rng),
            ConvBlock::new(w3, w3, 1, &mut rng),
            ConvBlock::new(w3 + w2, w2, 1, &mut rng),
            ConvBlock::new(w2 + w1, w1, 1, &mut rng),
            ConvBlock::new(w1 + w0, w0, 1, &mut rng),
        ];
        let head = Conv2d::new(w0, 1, 1, 1, true, 1.0, &mut rng);
        Self { preset, blocks, head }
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        if n == 0 || c != 3 {
            return Err(Error::Shape(format!(
                "expected (N>0, 3, H, W) input, got {:?}",
                x.dim()
            )));
        }
        if h % Self::STRIDE != 0 || w % Self::STRIDE != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} is not a positive multiple of {}",
                Self::STRIDE
            )));
        }
        Ok(())
    }

    fn stem(x: &Array4<T>) -> Array4<T> {
        let k = T::of(255.0);
        x.mapv(|v| v / k)
    }

    /// Forward pass that records activations. With `train`, batch norm uses
    /// batch statistics and updates its running estimates.
    pub fn forward_tape(&mut self, input: &Array4<T>, train: bool) -> Result<(Array3<T>, Tape<T>)> {
        self.check_input(input)?;
        let (_, _, h, w) = input.dim();
        let mut caches = Vec::with_capacity(8);
        let mut run = |i: usize, x: Array4<T>, blocks: &mut Vec<ConvBlock<T>>| -> Result<Array4<T>> {
            let (y, c) = blocks[i].forward(x, train)?;
            caches.push(c);
            Ok(y)
        };
        let a0 = run(0, Self::stem(input), &mut self.blocks)?;
        let a1 = run(1, a0.clone(), &mut self.blocks)?;
        let a2 = run(2, a1.clone(), &mut self.blocks)?;
        let a3 = run(3, a2.clone(), &mut self.blocks)?;
        let b = run(4, a3, &mut self.blocks)?;
        let c2 = run(5, concat_channels(&upsample2(&b), &a2), &mut self.blocks)?;
        let c1 = run(6, concat_channels(&upsample2(&c2), &a1), &mut self.blocks)?;
        let c0 = run(7, concat_channels(&upsample2(&c1), &a0), &mut self.blocks)?;
        let logits = self.head.forward(&c0)?.index_axis_move(Axis(1), 0);
        Ok((
            logits,
            Tape {
                caches,
                head_input: c0,
                input_hw: (h, w),
            },
        ))
    }

    /// Evaluation-mode forward pass that records activations (for input
    /// gradients); leaves the network untouched.
    pub fn forward_tape_eval(&self, input: &Array4<T>) -> Result<(Array3<T>, Tape<T>)> {
        let mut scratch = self.clone();
        scratch.forward_tape(input, false)
    }

    /// Gradients of `sum(dlogits * logits)` with respect to every parameter
    /// (in [`Backbone::parameters`] order) and to the input.
    pub fn backward(&self, tape: Tape<T>, dlogits: &Array3<T>) -> (Vec<Vec<T>>, Array4<T>) {
        let Tape {
            mut caches,
            head_input,
            input_hw,
        } = tape;
        let (n, h, w) = dlogits.dim();
        debug_assert_eq!((h, w), input_hw);
        let [w0, w1, w2, _] = self.preset.widths();
        let mut per_block: Vec<Vec<Vec<T>>> = vec![Vec::new(); 8];

        let dy = dlogits.clone().insert_axis(Axis(1));
        let (dc0, dhead_w, dhead_b) = self.head.backward(&head_input, &dy, true);
        let mut pop = |i: usize, d: Array4<T>| {
            let cache = caches.pop().expect("tape underflow");
            let dx = self.blocks[i].backward(cache, d, &mut per_block[i], true);
            dx.unwrap()
        };
        let du0 = pop(7, dc0.unwrap());
        let (dup1, mut da0) = split_channels(&du0, w1);
        let du1 = pop(6, upsample2_backward(&dup1));
        let (dup2, mut da1) = split_channels(&du1, w2);
        let du2 = pop(5, upsample2_backward(&dup2));
        let (dupb, mut da2) = split_channels(&du2, self.preset.widths()[3]);
        let da3 = pop(4, upsample2_backward(&dupb));
        da2 += &pop(3, da3);
        da1 += &pop(2, da2);
        da0 += &pop(1, da1);
        let dx0 = pop(0, da0);
        let _ = (n, w0);

        let k = T::of(255.0);
        let dx = dx0.mapv(|v| v / k);
        let mut grads: Vec<Vec<T>> = per_block.into_iter().flatten().collect();
        grads.push(dhead_w.into_raw_vec_and_offset().0);
        grads.push(dhead_b.unwrap().to_vec());
        (grads, dx)
    }

    /// Mutable views of all trainable parameters, [`Backbone::parameters`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.conv.weight.as_slice_mut().unwrap());
            out.push(b.bn.gamma.as_slice_mut().unwrap());
            out.push(b.bn.beta.as_slice_mut().unwrap());
        }
        out.push(self.head.weight.as_slice_mut().unwrap());
        out.push(self.head.bias.as_mut().unwrap().as_slice_mut().unwrap());
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for b in &self.blocks {
            out.push(b.conv.weight.as_slice().unwrap());
            out.push(b.bn.gamma.as_slice().unwrap());
            out.push(b.bn.beta.as_slice().unwrap());
        }
        out.push(self.head.weight.as_slice().unwrap());
        out.push(self.head.bias.as_ref().unwrap().as_slice().unwrap());
        out
    }

    /// Batch-norm running statistics (not trained by gradient descent).
    pub fn buffers(&self) -> Vec<(TensorInfo, &[T])> {
        let mut out = Vec::new();
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            let shape = vec![b.bn.channels()];
            out.push((
                TensorInfo {
                    name: format!("{name}.bn.running_mean"),
                    shape: shape.clone(),
                },
                b.bn.running_mean.as_slice().unwrap(),
            ));
            out.push((
                TensorInfo {
                    name: format!("{name}.bn.running_var"),
                    shape,
                },
                b.bn.running_var.as_slice().unwrap(),
            ));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for b in &mut self.blocks {
            out.push(b.bn.running_mean.as_slice_mut().unwrap());
            out.push(b.bn.running_var.as_slice_mut().unwrap());
        }
        out
    }
}

impl<T: Scalar> Backbone<T> for ReferenceNet<T> {
    fn forward(&self, input: &Array4<T>) -> Result<Array3<T>> {
        self.check_input(input)?;
        let b = &self.blocks;
        let a0 = b[0].forward_eval(&Self::stem(input))?;
        let a1 = b[1].forward_eval(&a0)?;
        let a2 = b[2].forward_eval(&a1)?;
        let a3 = b[3].forward_eval(&a2)?;
        let bt = b[4].forward_eval(&a3)?;
        let c2 = b[5].forward_eval(&concat_channels(&upsample2(&bt), &a2))?;
        let c1 = b[6].forward_eval(&concat_channels(&upsample2(&c2), &a1))?;
        let c0 = b[7].forward_eval(&concat_channels(&upsample2(&c1), &a0))?;
        Ok(self.head.forward(&c0)?.index_axis_move(Axis(1), 0))
    }

    fn stride(&self) -> usize {
        Self::STRIDE
    }

    fn parameters(&self) -> Vec<TensorInfo> {
        let mut out = Vec::new();
        for (name, b) in BLOCK_NAMES.iter().zip(&self.blocks) {
            let (co, fan) = b.conv.weight.dim();
            out.push(TensorInfo {
                name: format!("{name}.conv.weight"),
                shape: vec![co, b.conv.in_channels, 3, 3],
            });
            debug_assert_eq!(fan, b.conv.in_channels * 9);
            out.push(TensorInfo {
                name: format!("{name}.bn.gamma"),
                shape: vec![co],
            });
            out.push(TensorInfo {
                name: format!("{name}.bn.beta"),
                shape: vec![co],
            });
        }
        out.push(TensorInfo {
            name: "head.weight".into(),
            shape: vec![1, self.head.in_channels, 1, 1],
        });
        out.push(TensorInfo {
            name: "head.bias".into(),
            shape: vec![1],
        });
        out
    }

    fn is_translation_covariant(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn input(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((n, 3, size, size), || rng.gen_range(0.0..255.0))
    }

    #[test]
    fn output_shape() {
        let net = ReferenceNet::<f32>::new(WidthPreset::Tiny, 0);
        let x = input(2, 64, 1).mapv(|v| v as f32);
        assert_eq!(net.forward(&x).unwrap().dim(), (2, 64, 64));
    }

    #[test]
    fn deterministic_eval() {
        let net = ReferenceNet::<f32>::new(WidthPreset::Tiny, 3);
        let x = input(1, 32, 2).mapv(|v| v as f32);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
    }

    #[test]
    fn rejects_non_multiple_of_stride() {
        let net = ReferenceNet::<f32>::new(WidthPreset::Tiny, 0);
        let x = Array4::zeros((1, 3, 20, 20));
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
        assert_eq!(net.forward_padded(&x).unwrap().dim(), (1, 20, 20));
    }

    #[test]
    fn supports_all_ablation_crop_sizes() {
        let net = ReferenceNet::<f32>::new(WidthPreset::Tiny, 0);
        for c in [16, 20, 30, 40, 60, 64, 80, 90, 120] {
            let x = Array4::from_elem((1, 3, c, c), 100.0f32);
            let y = net.forward_padded(&x).unwrap();
            assert_eq!(y.dim(), (1, c, c));
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn desk_parameter_count_order_of_magnitude() {
        let n = ReferenceNet::<f32>::new(WidthPreset::Desk, 0).parameter_count();
        assert!((80_000..1_000_000).contains(&n), "{n}");
        let params = ReferenceNet::<f32>::new(WidthPreset::Desk, 0);
        assert_eq!(params.params().iter().map(|p| p.len()).sum::<usize>(), n);
    }

    #[test]
    fn translation_covariance_in_interior() {
        let net = ReferenceNet::<f64>::new(WidthPreset::Tiny, 5);
        let size = 128;
        let shift = ReferenceNet::<f64>::STRIDE;
        let big = input(1, size + shift, 9);
        let a = big.slice(s![.., .., ..size, ..size]).to_owned();
        let b = big.slice(s![.., .., shift.., shift..]).to_owned();
        let ya = net.forward(&a).unwrap();
        let yb = net.forward(&b).unwrap();
        // Zero padding influences logits up to one receptive field from the border.
        let margin = 40;
        for y in margin..size - margin {
            for x in margin..size - margin {
                let d = (ya[[0, y + shift, x + shift]] - yb[[0, y, x]]).abs();
                assert!(d < 1e-4, "({y},{x}) differs by {d}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut net = ReferenceNet::<f64>::new(WidthPreset::Tiny, 11);
        let x = input(2, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dl = Array3::from_shape_simple_fn((2, 16, 16), || rng.gen_range(-1.0..1.0));
        let (_, tape) = net.clone().forward_tape(&x, true).unwrap();
        let (grads, dx) = net.backward(tape, &dl);
        let objective = |n: &ReferenceNet<f64>, x: &Array4<f64>| {
            let (y, _) = n.clone().forward_tape(x, true).unwrap();
            (y * &dl).sum()
        };
        let eps = 1e-5;
        let names = net.parameters();
        for (pi, probe) in [(0usize, 5usize), (1, 2), (13, 7), (21, 3), (24, 0), (25, 0)] {
            let base = net.params()[pi][probe];
            net.params_mut()[pi][probe] = base + eps;
            let fp = objective(&net, &x);
            net.params_mut()[pi][probe] = base - eps;
            let fm = objective(&net, &x);
            net.params_mut()[pi][probe] = base;
            let fd = (fp - fm) / (2.0 * eps);
            let an = grads[pi][probe];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4, "{}[{probe}]: fd {fd} vs {an}", names[pi].name);
        }
        for idx in [[0, 0, 3, 4], [1, 2, 15, 0], [0, 1, 8, 8]] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += 1e-3;
            xm[idx] -= 1e-3;
            let fd = (objective(&net, &xp) - objective(&net, &xm)) / 2e-3;
            let rel = (fd - dx[idx]).abs() / fd.abs().max(dx[idx].abs()).max(1e-8);
            assert!(rel < 1e-4, "dx{idx:?}: fd {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn pad_and_unpad_are_adjoint() {
        let x = input(1, 10, 3);
        let p = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(p.dim(), (1, 3, 16, 16));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Array4::from_shape_simple_fn(p.dim(), || rng.gen_range(-1.0..1.0));
        let lhs = (&p * &g).sum();
        let rhs = (&x * &unpad_gradient(&g, 10, 10)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
