//! Segmentation backbone contract, the reference network, the weighted loss
//! and checkpoint persistence.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use loss::{weighted_bce, weighted_bce_with_grad, LossConfig};
pub use net::{pad_to_multiple, unpad_gradient, Backbone, ReferenceNet, Tape, TensorInfo, WidthPreset};

/// Construct the reference network for a width preset.
pub fn reference_net<T: crate::Scalar>(preset: WidthPreset, seed: u64) -> ReferenceNet<T> {
    ReferenceNet::new(preset, seed)
}
