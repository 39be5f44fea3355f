//! Experiment orchestration: ablation grids, saliency maps, overlays and
//! run provenance.

pub mod grid;
pub mod overlay;
pub mod provenance;
pub mod saliency;

pub use grid::{
    audit, mode_gaps, render_table, run_grid, run_grid_on, AuditReport, CellResult, DataSource, ExperimentConfig,
    GridCell, GridResults, GridSpec, ModeGap, SplitSpec, TrainBase,
};
pub use overlay::{overlay_frame, render_overlay, saliency_image, select_frames};
pub use provenance::{load_run_record, RunDir, RunRecord, RunStatus, RUN_FILE};
pub use saliency::{connected_components, input_gradient, saliency, saliency_for_lesions, SaliencyMap};
