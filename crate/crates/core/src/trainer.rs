//! Momentum-SGD training loop, learning-rate schedule and the
//! controlled-budget bookkeeping used by the ablation grids.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, weighted_bce_with_grad, LossConfig, ReferenceNet, WidthPreset};
use crate::sampler::{make_batch, BatchSpec, PatchDataset, PatchSample, PatchSource};
use crate::scalar::Scalar;
use crate::stack::write_json;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub total_steps: usize,
    /// Informational: the epoch count `total_steps` was derived from, if any.
    #[serde(default)]
    pub epochs: Option<f64>,
    pub spec: BatchSpec,
    #[serde(default)]
    pub loss: LossConfig,
    pub seed: u64,
    /// Write a checkpoint every this many steps (final checkpoint always).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_preset")]
    pub preset: WidthPreset,
}

fn default_preset() -> WidthPreset {
    WidthPreset::Desk
}

impl TrainConfig {
    pub fn new(spec: BatchSpec, total_steps: usize, seed: u64) -> Self {
        Self {
            lr0: 0.005,
            momentum: 0.9,
            weight_decay: 0.0,
            total_steps,
            epochs: None,
            spec,
            loss: LossConfig::default(),
            seed,
            checkpoint_every: None,
            preset: WidthPreset::Desk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::arg("lr0 must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::arg("total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg("momentum must lie in [0,1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::arg("weight_decay must be non-negative"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::arg("checkpoint_every must be positive"));
        }
        self.spec.validate()?;
        self.loss.validate()
    }
}

/// One epoch is `frame_count / N` batches.
pub fn steps_for_epochs(epochs: f64, frame_count: usize, images_per_batch: usize) -> usize {
    ((epochs * frame_count as f64 / images_per_batch as f64).round() as usize).max(1)
}

/// Steps at which the learning rate drops: `⌊0.4T⌋` and `⌊0.8T⌋`.
pub fn lr_breakpoints(total_steps: usize) -> (usize, usize) {
    (total_steps * 4 / 10, total_steps * 8 / 10)
}

/// `lr0`, then ×0.1 from `⌊0.4T⌋`, then ×0.01 from `⌊0.8T⌋`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= cfg.total_steps {
        return Err(Error::arg(format!("step {step} outside [0, {})", cfg.total_steps)));
    }
    let (b1, b2) = lr_breakpoints(cfg.total_steps);
    Ok(if step < b1 {
        cfg.lr0
    } else if step < b2 {
        cfg.lr0 / 10.0
    } else {
        cfg.lr0 / 100.0
    })
}

/// SGD with heavy-ball momentum: `v ← μv + g + λp`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct MomentumSgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> MomentumSgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>], lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Seconds since training started.
    pub wallclock: f64,
}

pub struct TrainOutcome<T> {
    pub net: ReferenceNet<T>,
    pub log: Vec<LogRecord>,
}

/// Stack a batch into `(B, 3, C, C)` inputs and `(B, C, C)` targets.
pub fn collate<T: Scalar>(batch: &[PatchSample<T>]) -> (Array4<T>, Array3<T>) {
    let c = batch[0].target.nrows();
    let mut x = Array4::zeros((batch.len(), 3, c, c));
    let mut y = Array3::zeros((batch.len(), c, c));
    for (i, p) in batch.iter().enumerate() {
        x.index_axis_mut(Axis(0), i).assign(&p.input);
        y.index_axis_mut(Axis(0), i)
            .assign(&p.target.mapv(|v| if v == 1 { T::one() } else { T::zero() }));
    }
    (x, y)
}

/// One forward/backward pass on a collated batch. Inputs whose size is not a
/// stride multiple are reflect-padded; the loss only sees the original crop.
pub fn loss_and_grads<T: Scalar>(
    net: &mut ReferenceNet<T>,
    x: &Array4<T>,
    y: &Array3<T>,
    loss: &LossConfig,
) -> Result<(f64, Vec<Vec<T>>)> {
    let (b, _, h, w) = x.dim();
    let padded = crate::model::pad_to_multiple(x, ReferenceNet::<T>::STRIDE)?;
    let (logits, tape) = net.forward_tape(&padded, true)?;
    let cropped = logits.slice(s![.., ..h, ..w]).to_owned();
    let (l, g) = weighted_bce_with_grad(&cropped, y, loss)?;
    let mut dlogits = Array3::zeros(logits.dim());
    dlogits.slice_mut(s![.., ..h, ..w]).assign(&g);
    let (grads, _) = net.backward(tape, &dlogits);
    let _ = b;
    Ok((l.as_f64(), grads))
}

/// Where training artifacts go: `log.jsonl`, `config.json`,
/// `checkpoints/step_NNNNNN/` and `checkpoints/final/`.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoints").join("final")
    }
}

#[derive(Serialize)]
struct FailureDump<'a> {
    step: usize,
    lr: f64,
    loss: f64,
    batch: Vec<&'a PatchSource>,
    checkpoint: String,
}

pub fn train<T: Scalar>(
    dataset: &PatchDataset<T>,
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut net = ReferenceNet::<T>::new(cfg.preset, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = MomentumSgd::new(cfg.momentum, cfg.weight_decay);
    let config_echo = serde_json::to_value(cfg)?;

    let mut log_writer = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            write_json(&out.dir.join("config.json"), cfg)?;
            let p = out.dir.join("log.jsonl");
            Some(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
        }
        None => None,
    };

    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let batch = make_batch(dataset, &cfg.spec, &mut rng)?;
        let (x, y) = collate(&batch);
        let (loss, grads) = loss_and_grads(&mut net, &x, &y, &cfg.loss)?;
        if !loss.is_finite() {
            let dump = dump_failure(output, &net, &config_echo, step, lr, loss, &batch)?;
            return Err(Error::NonFiniteLoss { step, loss, dump });
        }
        opt.step(net.params_mut(), &grads, lr);
        let rec = LogRecord {
            step,
            lr,
            loss,
            wallclock: start.elapsed().as_secs_f64(),
        };
        if let (Some(w), Some(out)) = (log_writer.as_mut(), output) {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(out.dir.join("log.jsonl"), e))?;
            if let Some(every) = cfg.checkpoint_every {
                if (step + 1) % every == 0 && step + 1 < cfg.total_steps {
                    save_checkpoint(
                        &net,
                        config_echo.clone(),
                        out.dir.join("checkpoints").join(format!("step_{:06}", step + 1)),
                    )?;
                }
            }
        }
        if step % 100 == 0 {
            log::debug!("step {step} lr {lr} loss {loss:.5}");
        }
        log.push(rec);
    }
    if let (Some(mut w), Some(out)) = (log_writer, output) {
        w.flush().map_err(|e| Error::io(out.dir.join("log.jsonl"), e))?;
        save_checkpoint(&net, config_echo, out.final_checkpoint())?;
    }
    Ok(TrainOutcome { net, log })
}

fn dump_failure<T: Scalar>(
    output: Option<&TrainOutput>,
    net: &ReferenceNet<T>,
    config: &serde_json::Value,
    step: usize,
    lr: f64,
    loss: f64,
    batch: &[PatchSample<T>],
) -> Result<String> {
    let dir = match output {
        Some(o) => o.dir.join("failure"),
        None => std::env::temp_dir().join(format!("patchfcn-failure-{}", std::process::id())),
    };
    let ckpt = dir.join("checkpoint");
    save_checkpoint(net, config.clone(), &ckpt)?;
    let dump = FailureDump {
        step,
        lr,
        loss,
        batch: batch.iter().map(|p| &p.source).collect(),
        checkpoint: ckpt.display().to_string(),
    };
    write_json(&dir.join("state.json"), &dump)?;
    Ok(dir.display().to_string())
}

/// Reference point for [`equalize_budget`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReference {
    pub crop: usize,
    pub batch_size: usize,
    pub epochs: f64,
}

impl BudgetReference {
    /// `C = 240, B = 16, 400 epochs`.
    pub const FULL_SCALE: BudgetReference = BudgetReference {
        crop: 240,
        batch_size: 16,
        epochs: 400.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub crop: usize,
    pub batch_size: usize,
    pub epochs: f64,
    /// Unrounded `B_ref·(C_ref/C)²` when it was not an integer.
    pub rounded_from: Option<f64>,
}

/// Per-crop batch size holding input pixels per batch constant, and epochs
/// scaled so the number of gradient steps stays constant (`K = 1`, so
/// steps ∝ epochs / B).
pub fn equalize_budget(crops: &[usize], reference: BudgetReference) -> Result<Vec<Budget>> {
    if reference.crop == 0 || reference.batch_size == 0 || reference.epochs <= 0.0 {
        return Err(Error::arg("invalid budget reference"));
    }
    crops
        .iter()
        .map(|&c| {
            if c == 0 {
                return Err(Error::arg("crop size must be positive"));
            }
            let exact = reference.batch_size as f64 * (reference.crop as f64 / c as f64).powi(2);
            let batch = (exact.round() as usize).max(1);
            let rounded_from = (batch as f64 != exact).then_some(exact);
            if let Some(e) = rounded_from {
                log::warn!("batch size for C={c} rounded from {e:.3} to {batch}");
            }
            let epochs = reference.epochs * batch as f64 / reference.batch_size as f64;
            Ok(Budget {
                crop: c,
                batch_size: batch,
                epochs,
                rounded_from,
            })
        })
        .collect()
}

/// Load a `TrainConfig` JSON file.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    crate::stack::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, PhantomParams};

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig::new(BatchSpec::new(16, 4, 1).unwrap(), total, 0)
    }

    #[test]
    fn lr_examples() {
        let c = cfg(1000);
        assert_eq!(lr_at(100, &c).unwrap(), 0.005);
        assert_eq!(lr_at(500, &c).unwrap(), 0.0005);
        assert_eq!(lr_at(900, &c).unwrap(), 0.00005);
        assert_eq!(lr_at(399, &c).unwrap(), 0.005);
        assert_eq!(lr_at(400, &c).unwrap(), 0.0005);
        assert_eq!(lr_at(799, &c).unwrap(), 0.0005);
        assert_eq!(lr_at(800, &c).unwrap(), 0.00005);
        assert!(lr_at(1000, &c).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let ds = PatchDataset::<f32>::new(
            generate_corpus(
                &PhantomParams {
                    size: 32,
                    lesion_radius: (2.0, 3.0),
                    ..Default::default()
                },
                2,
            )
            .unwrap(),
        )
        .unwrap();
        assert!(matches!(train(&ds, &cfg(0), None), Err(Error::Argument(_))));
    }

    #[test]
    fn momentum_matches_hand_recursion() {
        // f(p) = 0.5 * a * p^2, g = a p.
        let a = 2.0f64;
        let (mu, lr) = (0.9, 0.1);
        let mut opt = MomentumSgd::<f64>::new(mu, 0.0);
        let mut p = [1.0f64];
        let (mut hp, mut hv) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let g = vec![vec![a * p[0]]];
            opt.step(vec![&mut p[..]], &g, lr);
            hv = mu * hv + a * hp;
            hp -= lr * hv;
            assert_eq!(p[0], hp);
        }
        // First step by hand: v = 2, p = 1 - 0.2 = 0.8.
        let mut opt = MomentumSgd::<f64>::new(mu, 0.0);
        let mut q = [1.0f64];
        opt.step(vec![&mut q[..]], &[vec![2.0]], lr);
        assert_eq!(q[0], 0.8);
    }

    #[test]
    fn budget_table_values() {
        let b = equalize_budget(&[80, 120, 160, 240, 480], BudgetReference::FULL_SCALE).unwrap();
        let got: Vec<(usize, f64)> = b.iter().map(|x| (x.batch_size, x.epochs)).collect();
        assert_eq!(
            got,
            vec![(144, 3600.0), (64, 1600.0), (36, 900.0), (16, 400.0), (4, 100.0)]
        );
        assert!(b.iter().all(|x| x.rounded_from.is_none()));
        for x in &b {
            assert_eq!(x.batch_size * x.crop * x.crop, 16 * 240 * 240);
        }
    }

    #[test]
    fn budget_rounding_is_recorded() {
        let b = equalize_budget(&[100], BudgetReference::FULL_SCALE).unwrap();
        assert_eq!(b[0].batch_size, 92);
        assert!((b[0].rounded_from.unwrap() - 92.16).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic() {
        let p = PhantomParams {
            size: 32,
            lesion_radius: (3.0, 5.0),
            depth_min: 2,
            depth_max: 3,
            ..Default::default()
        };
        let ds = PatchDataset::<f32>::new(generate_corpus(&p, 4).unwrap()).unwrap();
        let mut c = TrainConfig::new(BatchSpec::new(16, 4, 1).unwrap(), 6, 3);
        c.preset = WidthPreset::Tiny;
        let a = train(&ds, &c, None).unwrap();
        let b = train(&ds, &c, None).unwrap();
        let strip = |l: &[LogRecord]| l.iter().map(|r| (r.step, r.lr, r.loss.to_bits())).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn non_multiple_crop_trains() {
        let p = PhantomParams {
            size: 32,
            lesion_radius: (3.0, 5.0),
            depth_min: 2,
            depth_max: 3,
            ..Default::default()
        };
        let ds = PatchDataset::<f32>::new(generate_corpus(&p, 2).unwrap()).unwrap();
        let mut c = TrainConfig::new(BatchSpec::new(20, 2, 2).unwrap(), 2, 3);
        c.preset = WidthPreset::Tiny;
        let out = train(&ds, &c, None).unwrap();
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }
}
