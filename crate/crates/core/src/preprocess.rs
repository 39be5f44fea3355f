//! HU windowing and z-axis fusion.

use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stack::CtStack;

pub const HU_LOW: f64 = -40.0;
pub const HU_HIGH: f64 = 90.0;
pub const INTENSITY_MAX: f64 = 255.0;

/// Clip to `[-40, 90]` HU and map linearly onto `[0, 255]`. No rounding.
pub fn hu_window<T: Scalar>(hu: i32) -> T {
    window_real(T::of(f64::from(hu)))
}

/// [`hu_window`] for real-valued input.
pub fn window_real<T: Scalar>(hu: T) -> T {
    let lo = T::of(HU_LOW);
    let hi = T::of(HU_HIGH);
    if hu <= lo {
        T::zero()
    } else if hu >= hi {
        T::of(INTENSITY_MAX)
    } else {
        (hu - lo) / (hi - lo) * T::of(INTENSITY_MAX)
    }
}

/// A stack after windowing, values in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedStack<T> {
    pub stack_id: String,
    pub values: Array3<T>,
}

impl<T: Scalar> WindowedStack<T> {
    pub fn from_stack(stack: &CtStack) -> Self {
        // 2^16 entries; cheaper than evaluating the window per voxel.
        let lut: Vec<T> = (i16::MIN as i32..=i16::MAX as i32).map(hu_window).collect();
        let values = stack.frames.mapv(|v| lut[(v as i32 - i16::MIN as i32) as usize]);
        Self {
            stack_id: stack.stack_id.clone(),
            values,
        }
    }

    pub fn depth(&self) -> usize {
        self.values.dim().0
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, T> {
        self.values.index_axis(Axis(0), i)
    }

    /// Channels `(i-1, i, i+1)`; a missing neighbour is replaced by frame `i`.
    pub fn fuse_z(&self, i: usize) -> Result<FusedFrame<T>> {
        let d = self.depth();
        if i >= d {
            return Err(Error::arg(format!("frame index {i} out of range for depth {d}")));
        }
        let prev = if i == 0 { i } else { i - 1 };
        let next = if i + 1 == d { i } else { i + 1 };
        let (_, h, w) = self.values.dim();
        let mut channels = Array3::zeros((3, h, w));
        for (c, src) in [prev, i, next].into_iter().enumerate() {
            channels.index_axis_mut(Axis(0), c).assign(&self.frame(src));
        }
        Ok(FusedFrame {
            channels,
            frame_index: i,
        })
    }
}

/// Three-channel network input for one frame: (previous, center, next).
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame<T> {
    pub channels: Array3<T>,
    pub frame_index: usize,
}

/// Convenience wrapper over [`WindowedStack::fuse_z`].
pub fn fuse_z<T: Scalar>(stack: &WindowedStack<T>, i: usize) -> Result<FusedFrame<T>> {
    stack.fuse_z(i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        assert_eq!(hu_window::<f64>(-40), 0.0);
        assert_eq!(hu_window::<f64>(-500), 0.0);
        assert_eq!(hu_window::<f64>(90), 255.0);
        assert_eq!(hu_window::<f64>(3000), 255.0);
        // (25 + 40) / 130 * 255 = 0.5 * 255
        assert_eq!(hu_window::<f64>(25), 127.5);
        assert_eq!(hu_window::<f32>(25), 127.5);
    }

    fn ramp_stack(d: usize) -> WindowedStack<f64> {
        let values = Array3::from_shape_fn((d, 2, 2), |(i, r, c)| (i * 10 + r * 2 + c) as f64);
        WindowedStack {
            stack_id: "r".into(),
            values,
        }
    }

    #[test]
    fn fuse_interior() {
        let s = ramp_stack(5);
        let f = s.fuse_z(2).unwrap();
        assert_eq!(f.channels.index_axis(Axis(0), 0), s.frame(1));
        assert_eq!(f.channels.index_axis(Axis(0), 1), s.frame(2));
        assert_eq!(f.channels.index_axis(Axis(0), 2), s.frame(3));
    }

    #[test]
    fn fuse_edges_replicate_center() {
        let s = ramp_stack(5);
        let f = s.fuse_z(0).unwrap();
        assert_eq!(f.channels.index_axis(Axis(0), 0), s.frame(0));
        assert_eq!(f.channels.index_axis(Axis(0), 1), s.frame(0));
        assert_eq!(f.channels.index_axis(Axis(0), 2), s.frame(1));
        let f = s.fuse_z(4).unwrap();
        assert_eq!(f.channels.index_axis(Axis(0), 2), s.frame(4));
        assert_eq!(f.channels.index_axis(Axis(0), 0), s.frame(3));
    }

    #[test]
    fn fuse_single_frame() {
        let s = ramp_stack(1);
        let f = s.fuse_z(0).unwrap();
        for c in 0..3 {
            assert_eq!(f.channels.index_axis(Axis(0), c), s.frame(0));
        }
        assert!(s.fuse_z(1).is_err());
    }

    proptest! {
        #[test]
        fn window_monotone_and_bounded(a in -5000i32..5000, b in -5000i32..5000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let wl: f64 = hu_window(lo);
            let wh: f64 = hu_window(hi);
            prop_assert!(wl <= wh);
            prop_assert!((0.0..=255.0).contains(&wl));
        }

        #[test]
        fn center_channel_is_exact(d in 1usize..6, seed in 0u64..1000) {
            let values = Array3::from_shape_fn((d, 3, 3), |(i, r, c)| ((seed as usize + i * 7 + r * 3 + c) % 256) as f32);
            let s = WindowedStack { stack_id: "p".into(), values };
            for i in 0..d {
                let f = s.fuse_z(i).unwrap();
                prop_assert_eq!(f.channels.index_axis(Axis(0), 1), s.frame(i));
            }
        }
    }
}
