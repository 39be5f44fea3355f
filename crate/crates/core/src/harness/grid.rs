//! Ablation grids: patch size at equal pixel budget, batch composition at
//! fixed batch size, patch size at fixed batch size, and inference mode.
//!
//! Every grid is expanded into cells, audited against its control rule, and
//! then run cell by cell. A failing cell is recorded and the grid moves on.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folds::split_folds;
use crate::inference::{infer, InferenceMode, DEFAULT_BETA, DEFAULT_P};
use crate::metrics::{evaluate, EvalReport, MetricFn, DEFAULT_THRESHOLD};
use crate::model::{load_checkpoint, Backbone, LossConfig, ReferenceNet, WidthPreset};
use crate::sampler::{BatchSpec, PatchDataset};
use crate::stack::{load_stack_dir, read_json, write_json, CtStack};
use crate::synth::{generate_corpus, PhantomParams};
use crate::trainer::{equalize_budget, steps_for_epochs, train, BudgetReference, TrainConfig, TrainOutput};

/// How the cells of a grid are derived and which quantity is held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridSpec {
    /// Vary the crop size; batch size and epochs come from
    /// [`equalize_budget`], so pixels per batch and step count are constant.
    EqualizedCrops {
        crops: Vec<usize>,
        reference: BudgetReference,
    },
    /// Fixed crop and batch size; vary images per batch `N` and patches per
    /// image `K` with `N·K = B`.
    Composition {
        crop: usize,
        batch_size: usize,
        compositions: Vec<(usize, usize)>,
        total_steps: usize,
    },
    /// Vary the crop size at a fixed batch size and step count.
    FixedBudget {
        crops: Vec<usize>,
        batch_size: usize,
        total_steps: usize,
    },
}

impl GridSpec {
    pub fn rule_name(&self) -> &'static str {
        match self {
            GridSpec::EqualizedCrops { .. } => "equalized_crops",
            GridSpec::Composition { .. } => "composition",
            GridSpec::FixedBudget { .. } => "fixed_budget",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        params: PhantomParams,
        n_stacks: usize,
    },
    Directory {
        path: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<CtStack>> {
        match self {
            DataSource::Synthetic { params, n_stacks } => generate_corpus(params, *n_stacks),
            DataSource::Directory { path } => load_stack_dir(path),
        }
    }
}

/// Which fold of a seeded k-fold split is held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub folds: usize,
    pub seed: u64,
    pub test_fold: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            folds: 4,
            seed: 0,
            test_fold: 0,
        }
    }
}

/// Training settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBase {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossConfig,
    pub preset: WidthPreset,
}

impl Default for TrainBase {
    fn default() -> Self {
        let reference = TrainConfig::new(
            BatchSpec {
                crop: 1,
                images_per_batch: 1,
                patches_per_image: 1,
                batch_size: 1,
            },
            1,
            0,
        );
        Self {
            lr0: reference.lr0,
            momentum: reference.momentum,
            weight_decay: reference.weight_decay,
            loss: reference.loss,
            preset: reference.preset,
        }
    }
}

impl TrainBase {
    pub fn config(&self, spec: BatchSpec, total_steps: usize, epochs: Option<f64>, seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            total_steps,
            epochs,
            spec,
            loss: self.loss,
            seed,
            checkpoint_every: None,
            preset: self.preset,
        }
    }
}

fn default_modes() -> Vec<InferenceMode> {
    vec![InferenceMode::Sliding]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

fn default_p() -> f64 {
    DEFAULT_P
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub grid: GridSpec,
    /// Inference modes evaluated per cell. The first is the primary one;
    /// with both modes present the table reports sliding minus fullconv.
    #[serde(default = "default_modes")]
    pub modes: Vec<InferenceMode>,
    /// Every cell is trained once per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainBase,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

/// Desk-scale crops: full-resolution crops for 512-pixel frames scaled by 128/512.
pub const DESK_TABLE1_CROPS: [usize; 5] = [20, 30, 40, 60, 120];
pub const DESK_TABLE3_CROPS: [usize; 5] = [16, 30, 60, 90, 120];
pub const TABLE2_COMPOSITIONS: [(usize, usize); 4] = [(16, 1), (8, 2), (4, 4), (2, 8)];
/// Desk equivalent of `C = 240, B = 16`.
pub const DESK_REFERENCE: BudgetReference = BudgetReference {
    crop: 60,
    batch_size: 16,
    epochs: 40.0,
};
pub const DESK_STEPS: usize = 400;

impl ExperimentConfig {
    fn desk(name: &str, grid: GridSpec, modes: Vec<InferenceMode>) -> Self {
        Self {
            name: name.into(),
            grid,
            modes,
            seeds: default_seeds(),
            train: TrainBase::default(),
            data: DataSource::Synthetic {
                params: PhantomParams::default(),
                n_stacks: 40,
            },
            split: SplitSpec::default(),
            beta: DEFAULT_BETA,
            p: DEFAULT_P,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn table1() -> Self {
        let grid = GridSpec::EqualizedCrops {
            crops: DESK_TABLE1_CROPS.to_vec(),
            reference: DESK_REFERENCE,
        };
        Self::desk("table1", grid, default_modes())
    }

    pub fn table2() -> Self {
        let grid = GridSpec::Composition {
            crop: DESK_REFERENCE.crop,
            batch_size: DESK_REFERENCE.batch_size,
            compositions: TABLE2_COMPOSITIONS.to_vec(),
            total_steps: DESK_STEPS,
        };
        Self::desk("table2", grid, default_modes())
    }

    pub fn table3() -> Self {
        let grid = GridSpec::FixedBudget {
            crops: DESK_TABLE3_CROPS.to_vec(),
            batch_size: DESK_REFERENCE.batch_size,
            total_steps: DESK_STEPS,
        };
        Self::desk("table3", grid, default_modes())
    }

    /// The `table1` grid evaluated with both inference modes.
    pub fn table4() -> Self {
        let mut cfg = Self::table1();
        cfg.name = "table4".into();
        cfg.modes = vec![InferenceMode::Sliding, InferenceMode::Fullconv];
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "table1" => Some(Self::table1()),
            "table2" => Some(Self::table2()),
            "table3" => Some(Self::table3()),
            "table4" => Some(Self::table4()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::arg("at least one inference mode is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::arg("at least one seed is required"));
        }
        if self.split.test_fold >= self.split.folds {
            return Err(Error::arg("test_fold must be below folds"));
        }
        let empty = match &self.grid {
            GridSpec::EqualizedCrops { crops, .. } | GridSpec::FixedBudget { crops, .. } => crops.is_empty(),
            GridSpec::Composition { compositions, .. } => compositions.is_empty(),
        };
        if empty {
            return Err(Error::arg("grid has no cells"));
        }
        Ok(())
    }

    /// Expand the grid into cells. `frame_count` is the number of training
    /// frames, needed to turn epochs into steps.
    pub fn cells(&self, frame_count: usize) -> Result<Vec<GridCell>> {
        self.validate()?;
        let mut base = Vec::new();
        match &self.grid {
            GridSpec::EqualizedCrops { crops, reference } => {
                for b in equalize_budget(crops, *reference)? {
                    base.push(GridCell {
                        label: format!("C={}", b.crop),
                        crop: b.crop,
                        batch_size: b.batch_size,
                        images_per_batch: b.batch_size,
                        patches_per_image: 1,
                        total_steps: steps_for_epochs(b.epochs, frame_count, b.batch_size),
                        epochs: Some(b.epochs),
                        rounded_from: b.rounded_from,
                        seed: 0,
                    });
                }
            }
            GridSpec::Composition {
                crop,
                batch_size,
                compositions,
                total_steps,
            } => {
                for &(n, k) in compositions {
                    base.push(GridCell {
                        label: format!("N={n},K={k}"),
                        crop: *crop,
                        batch_size: *batch_size,
                        images_per_batch: n,
                        patches_per_image: k,
                        total_steps: *total_steps,
                        epochs: None,
                        rounded_from: None,
                        seed: 0,
                    });
                }
            }
            GridSpec::FixedBudget {
                crops,
                batch_size,
                total_steps,
            } => {
                for &c in crops {
                    base.push(GridCell {
                        label: format!("C={c}"),
                        crop: c,
                        batch_size: *batch_size,
                        images_per_batch: *batch_size,
                        patches_per_image: 1,
                        total_steps: *total_steps,
                        epochs: None,
                        rounded_from: None,
                        seed: 0,
                    });
                }
            }
        }
        Ok(base
            .into_iter()
            .flat_map(|cell| self.seeds.iter().map(move |&seed| GridCell { seed, ..cell.clone() }))
            .collect())
    }
}

/// One trained model of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub label: String,
    pub crop: usize,
    pub batch_size: usize,
    pub images_per_batch: usize,
    pub patches_per_image: usize,
    pub total_steps: usize,
    pub epochs: Option<f64>,
    pub rounded_from: Option<f64>,
    pub seed: u64,
}

impl GridCell {
    pub fn batch_spec(&self) -> Result<BatchSpec> {
        let spec = BatchSpec::new(self.crop, self.images_per_batch, self.patches_per_image)?;
        if spec.batch_size != self.batch_size {
            return Err(Error::Contract(format!(
                "cell {}: N·K = {} but B = {}",
                self.label, spec.batch_size, self.batch_size
            )));
        }
        Ok(spec)
    }

    pub fn dir_name(&self) -> String {
        let label: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        format!("{label}_seed{}", self.seed)
    }
}

/// The control rule a grid was checked against and what was verified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub rule: String,
    pub checks: Vec<String>,
}

fn contract(msg: String) -> Error {
    Error::Contract(msg)
}

fn constant_steps(cells: &[GridCell], checks: &mut Vec<String>) -> Result<()> {
    let steps = cells[0].total_steps;
    if let Some(c) = cells.iter().find(|c| c.total_steps != steps) {
        return Err(contract(format!(
            "cell {} runs {} steps, expected {steps}",
            c.label, c.total_steps
        )));
    }
    checks.push(format!("steps = {steps} in every cell"));
    Ok(())
}

/// Check the grid's control rule on its expanded cells:
///
/// - equalized crops: `B·C²` equals `B_ref·C_ref²` exactly (for a rounded
///   batch size, the recorded unrounded value satisfies it), `K = 1`, and
///   every cell runs the same number of steps;
/// - composition: every cell has the grid's `B` and `C`, `N·K = B`, and the
///   same number of steps;
/// - fixed budget: every cell has the same `B` and the same number of steps.
pub fn audit(grid: &GridSpec, cells: &[GridCell]) -> Result<AuditReport> {
    if cells.is_empty() {
        return Err(contract("grid has no cells".into()));
    }
    let mut checks = Vec::new();
    for c in cells {
        if c.images_per_batch * c.patches_per_image != c.batch_size {
            return Err(contract(format!("cell {}: N·K != B", c.label)));
        }
    }
    match grid {
        GridSpec::EqualizedCrops { reference, .. } => {
            let budget = reference.batch_size * reference.crop * reference.crop;
            for c in cells {
                match c.rounded_from {
                    None => {
                        if c.batch_size * c.crop * c.crop != budget {
                            return Err(contract(format!(
                                "cell {}: B·C² = {} != {budget}",
                                c.label,
                                c.batch_size * c.crop * c.crop
                            )));
                        }
                    }
                    Some(exact) => {
                        let pixels = exact * (c.crop * c.crop) as f64;
                        if (pixels - budget as f64).abs() > 1e-9 * budget as f64 {
                            return Err(contract(format!(
                                "cell {}: unrounded B·C² = {pixels} != {budget}",
                                c.label
                            )));
                        }
                        if c.batch_size != (exact.round() as usize).max(1) {
                            return Err(contract(format!(
                                "cell {}: batch size is not the rounded budget",
                                c.label
                            )));
                        }
                    }
                }
                if c.patches_per_image != 1 {
                    return Err(contract(format!("cell {}: K must be 1", c.label)));
                }
            }
            let rounded = cells.iter().filter(|c| c.rounded_from.is_some()).count();
            checks.push(format!("B·C² = {budget} in every cell ({rounded} rounded)"));
            constant_steps(cells, &mut checks)?;
        }
        GridSpec::Composition { crop, batch_size, .. } => {
            for c in cells {
                if c.crop != *crop || c.batch_size != *batch_size {
                    return Err(contract(format!(
                        "cell {}: (B, C) = ({}, {}), expected ({batch_size}, {crop})",
                        c.label, c.batch_size, c.crop
                    )));
                }
            }
            checks.push(format!("(B, C) = ({batch_size}, {crop}) and N·K = B in every cell"));
            constant_steps(cells, &mut checks)?;
        }
        GridSpec::FixedBudget { batch_size, .. } => {
            for c in cells {
                if c.batch_size != *batch_size {
                    return Err(contract(format!(
                        "cell {}: B = {}, expected {batch_size}",
                        c.label, c.batch_size
                    )));
                }
            }
            checks.push(format!("B = {batch_size} in every cell"));
            constant_steps(cells, &mut checks)?;
        }
    }
    Ok(AuditReport {
        rule: grid.rule_name().into(),
        checks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    /// Keyed by inference mode name.
    pub reports: BTreeMap<String, EvalReport>,
    pub error: Option<String>,
    pub train_seconds: f64,
    pub reused_checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResults {
    pub name: String,
    pub rule: String,
    pub audit: AuditReport,
    pub modes: Vec<InferenceMode>,
    pub split: SplitSpec,
    pub cells: Vec<CellResult>,
}

impl GridResults {
    pub fn failed(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }
}

/// Train and evaluate every cell of the grid, loading data from the config.
/// With `out_dir`, each cell writes its training artifacts under
/// `cells/<label>_seed<seed>/` and the grid writes `results.json` and
/// `table.md`.
pub fn run_grid(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<GridResults> {
    let stacks = cfg.data.load()?;
    run_grid_on(cfg, stacks, out_dir)
}

/// [`run_grid`] on an already loaded corpus.
pub fn run_grid_on(cfg: &ExperimentConfig, stacks: Vec<CtStack>, out_dir: Option<&Path>) -> Result<GridResults> {
    cfg.validate()?;
    let ids: Vec<String> = stacks.iter().map(|s| s.stack_id.clone()).collect();
    let split = split_folds(&ids, cfg.split.folds, cfg.split.seed)?;
    let test_ids = split.fold(cfg.split.test_fold);
    let (test, trainval): (Vec<CtStack>, Vec<CtStack>) =
        stacks.into_iter().partition(|s| test_ids.contains(&s.stack_id));
    let dataset = PatchDataset::<f32>::new(trainval)?;
    let cells = cfg.cells(dataset.frame_count())?;
    let audit_report = audit(&cfg.grid, &cells)?;
    for check in &audit_report.checks {
        log::info!("audit {}: {check}", audit_report.rule);
    }

    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let cell_dir = out_dir.map(|d| d.join("cells").join(cell.dir_name()));
        let started = Instant::now();
        let outcome = run_cell(cfg, &cell, &dataset, &test, cell_dir.as_deref());
        let train_seconds = started.elapsed().as_secs_f64();
        let result = match outcome {
            Ok((reports, reused)) => CellResult {
                cell,
                reports,
                error: None,
                train_seconds,
                reused_checkpoint: reused,
            },
            Err(e) => {
                log::error!("cell {} (seed {}) failed: {e}", cell.label, cell.seed);
                CellResult {
                    cell,
                    reports: BTreeMap::new(),
                    error: Some(e.to_string()),
                    train_seconds,
                    reused_checkpoint: false,
                }
            }
        };
        results.push(result);
    }
    let grid = GridResults {
        name: cfg.name.clone(),
        rule: audit_report.rule.clone(),
        audit: audit_report,
        modes: cfg.modes.clone(),
        split: cfg.split,
        cells: results,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("results.json"), &grid)?;
        let table = render_table(&grid);
        std::fs::write(dir.join("table.md"), &table).map_err(|e| Error::io(dir.join("table.md"), e))?;
    }
    Ok(grid)
}

fn run_cell(
    cfg: &ExperimentConfig,
    cell: &GridCell,
    dataset: &PatchDataset<f32>,
    test: &[CtStack],
    dir: Option<&Path>,
) -> Result<(BTreeMap<String, EvalReport>, bool)> {
    let train_cfg = cfg
        .train
        .config(cell.batch_spec()?, cell.total_steps, cell.epochs, cell.seed);
    let output = dir.map(|d| TrainOutput { dir: d.to_path_buf() });
    let (net, reused) = match output.as_ref().and_then(|o| reusable_checkpoint(o, &train_cfg)) {
        Some(net) => (net, true),
        None => (train(dataset, &train_cfg, output.as_ref())?.net, false),
    };
    let backbones: Vec<&dyn Backbone<f32>> = vec![&net];
    let mut reports = BTreeMap::new();
    for &mode in &cfg.modes {
        let preds = test
            .iter()
            .map(|s| infer(s, &backbones, mode, cell.crop, cfg.beta))
            .collect::<Result<Vec<_>>>()?;
        reports.insert(mode.to_string(), evaluate(&preds, test, cfg.threshold, cfg.p)?);
    }
    Ok((reports, reused))
}

/// A final checkpoint whose recorded training config equals `train_cfg`.
fn reusable_checkpoint(output: &TrainOutput, train_cfg: &TrainConfig) -> Option<ReferenceNet<f32>> {
    let dir = output.final_checkpoint();
    if !dir.is_dir() {
        return None;
    }
    let (net, manifest) = load_checkpoint::<f32>(&dir).ok()?;
    let recorded: TrainConfig = serde_json::from_value(manifest.train_config).ok()?;
    (recorded == *train_cfg).then(|| {
        log::info!("reusing checkpoint {}", dir.display());
        net
    })
}

const TABLE_METRICS: [(&str, MetricFn); 5] = [
    ("Dice", |r| Some(r.dice)),
    ("Jaccard", |r| Some(r.jaccard)),
    ("Pixel AP", |r| r.pixel_ap),
    ("Frame AP", |r| r.frame_ap),
    ("Stack AUC", |r| r.stack_auc),
];

/// Cells grouped by label, in first-appearance order.
fn columns(results: &GridResults) -> Vec<(String, Vec<&CellResult>)> {
    let mut order: Vec<(String, Vec<&CellResult>)> = Vec::new();
    for c in &results.cells {
        match order.iter_mut().find(|(l, _)| *l == c.cell.label) {
            Some((_, v)) => v.push(c),
            None => order.push((c.cell.label.clone(), vec![c])),
        }
    }
    order
}

fn seed_mean(cells: &[&CellResult], mode: InferenceMode, metric: MetricFn) -> Option<f64> {
    let values: Vec<f64> = cells
        .iter()
        .filter_map(|c| c.reports.get(&mode.to_string()).and_then(metric))
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-cell sliding-minus-fullconv difference of every table metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeGap {
    pub label: String,
    pub seed: u64,
    pub gaps: BTreeMap<String, f64>,
}

pub fn mode_gaps(results: &GridResults) -> Vec<ModeGap> {
    let (sl, fc) = (InferenceMode::Sliding.to_string(), InferenceMode::Fullconv.to_string());
    results
        .cells
        .iter()
        .filter_map(|c| {
            let (a, b) = (c.reports.get(&sl)?, c.reports.get(&fc)?);
            let gaps = TABLE_METRICS
                .iter()
                .filter_map(|(name, f)| Some((name.to_string(), f(a)? - f(b)?)))
                .collect();
            Some(ModeGap {
                label: c.cell.label.clone(),
                seed: c.cell.seed,
                gaps,
            })
        })
        .collect()
}

/// Markdown table with one column per cell (averaged over seeds) and the
/// grid's control variables as header rows. With both inference modes the
/// sliding value is followed by its gap to fullconv in parentheses.
pub fn render_table(results: &GridResults) -> String {
    let cols = columns(results);
    let primary = results.modes[0];
    let both = results.modes.contains(&InferenceMode::Sliding) && results.modes.contains(&InferenceMode::Fullconv);
    let mut out = String::new();
    let _ = writeln!(out, "## {} ({})\n", results.name, results.rule);
    let header: Vec<String> = cols.iter().map(|(l, _)| l.clone()).collect();
    let _ = writeln!(out, "| | {} |", header.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(cols.len()));
    let mut row = |name: &str, f: &dyn Fn(&GridCell) -> String| {
        let cells: Vec<String> = cols.iter().map(|(_, v)| f(&v[0].cell)).collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    };
    match results.rule.as_str() {
        "composition" => {
            row("N", &|c| c.images_per_batch.to_string());
            row("K", &|c| c.patches_per_image.to_string());
            row("Crop Size", &|c| c.crop.to_string());
        }
        _ => {
            row("Crop Size", &|c| c.crop.to_string());
            row("Batch Size", &|c| c.batch_size.to_string());
        }
    }
    if results.rule == "equalized_crops" {
        row("Epoch", &|c| c.epochs.map_or("-".into(), |e| format!("{e:.2}")));
    }
    row("Steps", &|c| c.total_steps.to_string());
    for (name, metric) in TABLE_METRICS {
        let cells: Vec<String> = cols
            .iter()
            .map(|(_, v)| {
                let main = if both { InferenceMode::Sliding } else { primary };
                match seed_mean(v, main, metric) {
                    None if v.iter().all(|c| c.error.is_some()) => "failed".into(),
                    None => "-".into(),
                    Some(m) if both => match seed_mean(v, InferenceMode::Fullconv, metric) {
                        Some(f) => format!("{m:.3} ({:+.3})", m - f),
                        None => format!("{m:.3}"),
                    },
                    Some(m) => format!("{m:.3}"),
                }
            })
            .collect();
        let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
    }
    let seeds: Vec<String> = results
        .cells
        .iter()
        .map(|c| c.cell.seed)
        .collect::<std::collections::BTreeSet<_>>()
        .iter()
        .map(u64::to_string)
        .collect();
    let _ = writeln!(out, "\nseeds: {}", seeds.join(", "));
    for c in results.failed() {
        let _ = writeln!(
            out,
            "failed: {} seed {}: {}",
            c.cell.label,
            c.cell.seed,
            c.error.as_deref().unwrap_or("")
        );
    }
    out
}
