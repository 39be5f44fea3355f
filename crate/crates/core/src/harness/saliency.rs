//! Input-gradient saliency: how each input pixel moves the summed logits of
//! a lesion region.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{pad_to_multiple, unpad_gradient, ReferenceNet};
use crate::preprocess::WindowedStack;
use crate::scalar::Scalar;
use crate::stack::CtStack;

/// Gradient of `weight · Σ_{(y,x) ∈ region} logit(y, x)` with respect to the
/// `(3, H, W)` windowed input, in evaluation mode.
pub fn input_gradient<T: Scalar>(
    net: &ReferenceNet<T>,
    input: &Array3<T>,
    region: &[(usize, usize)],
    weight: T,
) -> Result<Array3<T>> {
    let (c, h, w) = input.dim();
    if c != 3 {
        return Err(Error::Shape(format!(
            "expected a (3, H, W) input, got {:?}",
            input.dim()
        )));
    }
    if region.is_empty() {
        return Err(Error::arg("saliency region is empty"));
    }
    if let Some(&(y, x)) = region.iter().find(|&&(y, x)| y >= h || x >= w) {
        return Err(Error::arg(format!("region pixel ({y}, {x}) outside the {h}x{w} frame")));
    }
    let x = pad_to_multiple(&input.clone().insert_axis(Axis(0)), ReferenceNet::<T>::STRIDE)?;
    let (logits, tape) = net.forward_tape_eval(&x)?;
    let mut dlogits = Array3::<T>::zeros(logits.dim());
    for &(y, x) in region {
        dlogits[[0, y, x]] = weight;
    }
    let (_, dx) = net.backward(tape, &dlogits);
    Ok(unpad_gradient(&dx, h, w).index_axis_move(Axis(0), 0))
}

/// 4-connected components of the positive pixels of a mask, each as a list
/// of `(row, col)` in scan order. Components are ordered by their first
/// pixel in scan order.
pub fn connected_components(mask: ArrayView2<u8>) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut components = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if mask[[y0, x0]] == 0 || seen[[y0, x0]] {
                continue;
            }
            let mut component = Vec::new();
            let mut stack = vec![(y0, x0)];
            seen[[y0, x0]] = true;
            while let Some((y, x)) = stack.pop() {
                component.push((y, x));
                let neighbours = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && mask[[ny, nx]] != 0 && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            component.sort_unstable();
            components.push(component);
        }
    }
    components
}

#[derive(Debug, Clone, Serialize)]
pub struct SaliencyMap {
    pub stack_id: String,
    pub frame: usize,
    pub component: usize,
    pub region_pixels: usize,
    /// Per-channel input gradient, `(3, H, W)`.
    #[serde(skip)]
    pub gradient: Array3<f64>,
    /// Sum over channels of the absolute gradient, `(H, W)`.
    #[serde(skip)]
    pub magnitude: Array2<f64>,
}

/// Saliency of one region of one frame.
pub fn saliency<T: Scalar>(
    net: &ReferenceNet<T>,
    stack: &CtStack,
    frame: usize,
    region: &[(usize, usize)],
) -> Result<SaliencyMap> {
    if frame >= stack.depth() {
        return Err(Error::arg(format!(
            "frame {frame} out of range for depth {}",
            stack.depth()
        )));
    }
    let windowed = WindowedStack::<T>::from_stack(stack);
    let input = windowed.fuse_z(frame)?.channels;
    let gradient = input_gradient(net, &input, region, T::one())?.mapv(|v| v.as_f64());
    let magnitude = gradient.mapv(f64::abs).sum_axis(Axis(0));
    Ok(SaliencyMap {
        stack_id: stack.stack_id.clone(),
        frame,
        component: 0,
        region_pixels: region.len(),
        gradient,
        magnitude,
    })
}

/// Saliency for every connected ground-truth component of every frame.
pub fn saliency_for_lesions<T: Scalar>(net: &ReferenceNet<T>, stack: &CtStack) -> Result<Vec<SaliencyMap>> {
    let mut maps = Vec::new();
    for frame in 0..stack.depth() {
        let Some(mask) = stack.frame_mask(frame) else {
            return Err(Error::arg(format!("stack {} has no ground-truth mask", stack.stack_id)));
        };
        for (k, component) in connected_components(mask).into_iter().enumerate() {
            let mut map = saliency(net, stack, frame, &component)?;
            map.component = k;
            maps.push(map);
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WidthPreset;
    use ndarray::array;

    #[test]
    fn components_are_four_connected() {
        let m = array![[1u8, 1, 0, 0], [0, 0, 0, 1], [1, 0, 1, 1], [0, 0, 0, 0]];
        let c = connected_components(m.view());
        assert_eq!(
            c,
            vec![vec![(0, 0), (0, 1)], vec![(1, 3), (2, 2), (2, 3)], vec![(2, 0)]]
        );
        assert!(connected_components(Array2::<u8>::zeros((3, 3)).view()).is_empty());
    }

    #[test]
    fn shapes_and_linearity() {
        let net = ReferenceNet::<f64>::new(WidthPreset::Tiny, 2);
        let input = Array3::from_shape_fn((3, 20, 20), |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 255) as f64);
        let region = [(4, 4), (4, 5), (5, 5)];
        let g1 = input_gradient(&net, &input, &region, 1.0).unwrap();
        let g2 = input_gradient(&net, &input, &region, 2.0).unwrap();
        assert_eq!(g1.dim(), (3, 20, 20));
        assert_eq!(g2, g1.mapv(|v| 2.0 * v));
        assert!(g1.iter().any(|&v| v != 0.0));
        assert!(input_gradient(&net, &input, &[], 1.0).is_err());
        assert!(input_gradient(&net, &input, &[(20, 0)], 1.0).is_err());
    }
}
