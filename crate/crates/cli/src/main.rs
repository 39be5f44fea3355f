use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use patchfcn::folds::split_folds;
use patchfcn::harness::{
    mode_gaps, render_overlay, render_table, run_grid, saliency, saliency_for_lesions, saliency_image, select_frames,
    DataSource, ExperimentConfig, RunDir,
};
use patchfcn::inference::{infer, InferenceMode, ScoreSummary, SummaryFile, DEFAULT_BETA, DEFAULT_P};
use patchfcn::metrics::{cross_validate, evaluate, pr_curve, roc_curve, write_curve_csv, DEFAULT_THRESHOLD};
use patchfcn::model::{load_checkpoint, Backbone};
use patchfcn::sampler::{BatchSpec, PatchDataset};
use patchfcn::stack::{load_scores, load_stack_dir, save_scores, CtStack, ScoreVolume};
use patchfcn::synth::{generate_dataset, PhantomParams};
use patchfcn::trainer::{load_train_config, train, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(
    name = "patchfcn",
    version,
    about = "Patch-based FCN segmentation pipeline for CT stacks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train a reference network on patches.
    Train(TrainArgs),
    /// Score stacks with one checkpoint or an ensemble.
    Infer(InferArgs),
    /// Evaluate score volumes against ground truth.
    Eval(EvalArgs),
    /// k-fold cross validation of train + infer + eval.
    Cv(CvArgs),
    /// Run an ablation grid.
    Ablate(AblateArgs),
    /// Input-gradient saliency of lesion regions.
    Saliency(SaliencyArgs),
    /// Prediction / ground-truth overlay images.
    Overlay(OverlayArgs),
}

#[derive(Args, Serialize)]
struct SplitArgs {
    /// Split the dataset into this many seeded folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Held-out fold (requires --folds).
    #[arg(long)]
    test_fold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl SplitArgs {
    /// The held-out fold when `held_out`, otherwise its complement; every
    /// stack when no split is requested.
    fn select(&self, stacks: Vec<CtStack>, held_out: bool) -> Result<Vec<CtStack>> {
        let (folds, k) = match (self.folds, self.test_fold) {
            (None, None) => return Ok(stacks),
            (Some(f), Some(k)) => (f, k),
            _ => bail!("--folds and --test-fold must be given together"),
        };
        if k >= folds {
            bail!("--test-fold {k} must be below --folds {folds}");
        }
        let ids: Vec<String> = stacks.iter().map(|s| s.stack_id.clone()).collect();
        let test = split_folds(&ids, folds, self.split_seed)?.fold(k);
        Ok(stacks
            .into_iter()
            .filter(|s| test.contains(&s.stack_id) == held_out)
            .collect())
    }

    fn seeds(&self) -> Vec<u64> {
        if self.folds.is_some() {
            vec![self.split_seed]
        } else {
            Vec::new()
        }
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    n_stacks: usize,
    /// Phantom parameters as JSON; unspecified fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the parameters.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON (TrainConfig fields). Flags below are
    /// used when it is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 16)]
    images_per_batch: usize,
    #[arg(long, default_value_t = 1)]
    patches_per_image: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[command(flatten)]
    split: SplitArgs,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_train_config(p)?,
            None => TrainConfig::new(
                BatchSpec::new(self.crop, self.images_per_batch, self.patches_per_image)?,
                800,
                0,
            ),
        };
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.checkpoint_every.is_some() {
            cfg.checkpoint_every = self.checkpoint_every;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Sliding,
    Fullconv,
}

impl From<ModeArg> for InferenceMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sliding => InferenceMode::Sliding,
            ModeArg::Fullconv => InferenceMode::Fullconv,
        }
    }
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Sliding)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Window size for sliding inference; defaults to the training crop of
    /// the first checkpoint.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
    /// One or more checkpoint directories; scores are averaged.
    #[arg(long, num_args = 1.., required = true)]
    ensemble: Vec<PathBuf>,
    /// Restrict to these stack ids.
    #[arg(long, num_args = 1..)]
    stacks: Vec<String>,
    #[command(flatten)]
    split: SplitArgs,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory of score volumes, one subdirectory per stack.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
    /// Also write pixel PR and stack ROC curves as CSV.
    #[arg(long)]
    curves: bool,
}

#[derive(Args, Serialize)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 16)]
    images_per_batch: usize,
    #[arg(long, default_value_t = 1)]
    patches_per_image: usize,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Sliding)]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    /// table1, table2, table3, table4 or a path to a grid JSON file.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Use this dataset directory instead of the grid's data source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Replace the grid's seed list.
    #[arg(long, num_args = 1..)]
    seeds: Vec<u64>,
}

#[derive(Args, Serialize)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    stack: String,
    /// Only this frame; every lesion component of it is processed.
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct OverlayArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, num_args = 1..)]
    stacks: Vec<String>,
    /// Render this many randomly chosen frames per stack instead of all.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Create the run directory, run `body`, and record how it ended.
fn with_run<A: Serialize, F>(command: &str, out: &Path, args: &A, seeds: Vec<u64>, body: F) -> Result<ExitCode>
where
    F: FnOnce(&Path) -> Result<ExitCode>,
{
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let run = RunDir::create(out, command, argv, serde_json::to_value(args)?, seeds)?;
    let outcome = body(out);
    let status = match &outcome {
        Ok(code) if *code == ExitCode::SUCCESS => Ok(()),
        Ok(_) => Err("completed with failures".to_string()),
        Err(e) => Err(format!("{e:#}")),
    };
    run.finish(&status)?;
    outcome
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => {
            let mut params: PhantomParams = match &a.config {
                Some(p) => serde_json::from_str(
                    &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => PhantomParams::default(),
            };
            if let Some(s) = a.seed {
                params.seed = s;
            }
            with_run("synth", &a.out, &a, vec![params.seed], |out| {
                let m = generate_dataset(&params, a.n_stacks, out)?;
                println!(
                    "wrote {} stacks ({} positive) to {}",
                    m.stacks.len(),
                    m.positives(),
                    out.display()
                );
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Train(a) => {
            let cfg = a.config()?;
            let mut seeds = vec![cfg.seed];
            seeds.extend(a.split.seeds());
            with_run("train", &a.out, &a, seeds, |out| {
                let stacks = a.split.select(load_stack_dir(&a.data)?, false)?;
                let ds = PatchDataset::<f32>::new(stacks)?;
                let outcome = train(&ds, &cfg, Some(&TrainOutput { dir: out.to_path_buf() }))?;
                let last = outcome.log.last().map_or(f64::NAN, |r| r.loss);
                println!(
                    "trained {} steps, final loss {last:.5}; checkpoint at {}",
                    cfg.total_steps,
                    out.join("checkpoints/final").display()
                );
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Infer(a) => {
            let seeds = a.split.seeds();
            with_run("infer", &a.out, &a, seeds, |out| {
                let mut nets = Vec::new();
                let mut crop = a.crop;
                for dir in &a.ensemble {
                    let (net, manifest) =
                        load_checkpoint::<f32>(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
                    if crop.is_none() {
                        crop = manifest
                            .train_config
                            .pointer("/spec/crop")
                            .and_then(|v| v.as_u64())
                            .map(|v| v as usize);
                    }
                    nets.push(net);
                }
                let crop = crop.context("no --crop given and the checkpoint does not record one")?;
                let backbones: Vec<&dyn Backbone<f32>> = nets.iter().map(|n| n as &dyn Backbone<f32>).collect();
                let stacks = filter_ids(a.split.select(load_stack_dir(&a.data)?, true)?, &a.stacks)?;
                let mode = InferenceMode::from(a.mode);
                for s in &stacks {
                    let vol = infer(s, &backbones, mode, crop, a.beta)?;
                    save_scores(&vol, out.join("scores").join(&s.stack_id))?;
                    let summary = ScoreSummary::from_volume(&vol, a.p)?;
                    SummaryFile::new(&s.stack_id, summary, a.beta, crop, mode, nets.len())
                        .save(&out.join("summaries").join(format!("{}.json", s.stack_id)))?;
                }
                println!(
                    "scored {} stacks ({mode}, C={crop}, ensemble of {})",
                    stacks.len(),
                    nets.len()
                );
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Eval(a) => with_run("eval", &a.out, &a, Vec::new(), |out| {
            let preds = load_score_dir(&a.scores)?;
            let ids: Vec<String> = preds.iter().map(|p| p.stack_id.clone()).collect();
            let gts = filter_ids(load_stack_dir(&a.data)?, &ids)?;
            let report = evaluate(&preds, &gts, a.threshold, a.p)?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            if a.curves {
                write_curves(out, &preds, &gts, a.p)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }),
        Command::Cv(a) => {
            let base = match &a.config {
                Some(p) => load_train_config(p)?,
                None => TrainConfig::new(BatchSpec::new(a.crop, a.images_per_batch, a.patches_per_image)?, 800, 0),
            };
            let mut cfg = base;
            if let Some(s) = a.steps {
                cfg.total_steps = s;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            with_run("cv", &a.out, &a, vec![cfg.seed, a.split_seed], |out| {
                let stacks = load_stack_dir(&a.data)?;
                let ids: Vec<String> = stacks.iter().map(|s| s.stack_id.clone()).collect();
                let mode = InferenceMode::from(a.mode);
                let report = cross_validate(&ids, a.folds, a.split_seed, |k, train_ids, test_ids| {
                    let pick = |want: &[String]| {
                        stacks
                            .iter()
                            .filter(|s| want.contains(&s.stack_id))
                            .cloned()
                            .collect::<Vec<_>>()
                    };
                    let ds = PatchDataset::<f32>::new(pick(train_ids))?;
                    let fold_out = TrainOutput {
                        dir: out.join(format!("fold{k}")),
                    };
                    let net = train(&ds, &cfg, Some(&fold_out))?.net;
                    let test = pick(test_ids);
                    let preds = test
                        .iter()
                        .map(|s| infer(s, &[&net as &dyn Backbone<f32>], mode, cfg.spec.crop, a.beta))
                        .collect::<patchfcn::Result<Vec<_>>>()?;
                    let r = evaluate(&preds, &test, DEFAULT_THRESHOLD, a.p)?;
                    log::info!("fold {k}: dice {:.4} pixel AP {:?}", r.dice, r.pixel_ap);
                    Ok(r)
                })?;
                std::fs::write(out.join("cv.json"), serde_json::to_string_pretty(&report)?)?;
                for (name, ms) in &report.summary {
                    println!("{name}: {:.4} ± {:.4} (folds={})", ms.mean, ms.std, ms.folds);
                }
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Ablate(a) => {
            let mut cfg = match ExperimentConfig::preset(&a.grid) {
                Some(c) => c,
                None => {
                    ExperimentConfig::load(Path::new(&a.grid)).with_context(|| format!("loading grid {}", a.grid))?
                }
            };
            if let Some(d) = &a.data {
                cfg.data = DataSource::Directory { path: d.clone() };
            }
            if !a.seeds.is_empty() {
                cfg.seeds = a.seeds.clone();
            }
            let mut seeds = cfg.seeds.clone();
            seeds.push(cfg.split.seed);
            with_run("ablate", &a.out, &cfg, seeds, |out| {
                let results = run_grid(&cfg, Some(out))?;
                println!("{}", render_table(&results));
                let gaps = mode_gaps(&results);
                if !gaps.is_empty() {
                    std::fs::write(out.join("mode_gaps.json"), serde_json::to_string_pretty(&gaps)?)?;
                }
                let failed = results.failed().len();
                if failed > 0 {
                    eprintln!("{failed} of {} cells failed", results.cells.len());
                    return Ok(ExitCode::from(2));
                }
                Ok(ExitCode::SUCCESS)
            })
        }
        Command::Saliency(a) => with_run("saliency", &a.out, &a, Vec::new(), |out| {
            let (net, _) = load_checkpoint::<f32>(&a.checkpoint)?;
            let stack = filter_ids(load_stack_dir(&a.data)?, std::slice::from_ref(&a.stack))?.remove(0);
            let maps = match a.frame {
                Some(f) => {
                    let mask = stack.frame_mask(f).context("stack has no ground-truth mask")?;
                    let comps = patchfcn::harness::connected_components(mask);
                    if comps.is_empty() {
                        bail!("frame {f} of {} has no lesion region", stack.stack_id);
                    }
                    comps
                        .iter()
                        .enumerate()
                        .map(|(k, c)| {
                            saliency(&net, &stack, f, c).map(|mut m| {
                                m.component = k;
                                m
                            })
                        })
                        .collect::<patchfcn::Result<Vec<_>>>()?
                }
                None => saliency_for_lesions(&net, &stack)?,
            };
            if maps.is_empty() {
                bail!("stack {} has no lesion regions", stack.stack_id);
            }
            for m in &maps {
                let stem = format!("{}_f{:03}_c{}", m.stack_id, m.frame, m.component);
                write_f64(&out.join(format!("{stem}_gradient.bin")), m.gradient.iter())?;
                write_f64(&out.join(format!("{stem}_magnitude.bin")), m.magnitude.iter())?;
                saliency_image(&stack, m)?.save(out.join(format!("{stem}.png")))?;
            }
            std::fs::write(out.join("saliency.json"), serde_json::to_string_pretty(&maps)?)?;
            println!("wrote {} saliency maps", maps.len());
            Ok(ExitCode::SUCCESS)
        }),
        Command::Overlay(a) => with_run("overlay", &a.out, &a, vec![a.seed], |out| {
            let preds = load_score_dir(&a.scores)?;
            let wanted: Vec<String> = if a.stacks.is_empty() {
                preds.iter().map(|p| p.stack_id.clone()).collect()
            } else {
                a.stacks.clone()
            };
            let stacks = filter_ids(load_stack_dir(&a.data)?, &wanted)?;
            let mut n = 0;
            for s in &stacks {
                let vol = preds
                    .iter()
                    .find(|p| p.stack_id == s.stack_id)
                    .with_context(|| format!("no scores for stack {}", s.stack_id))?;
                let frames = a.frames.map(|k| select_frames(s.depth(), k, a.seed));
                n += render_overlay(s, vol, out, frames.as_deref())?.len();
            }
            println!("wrote {n} overlay images to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }),
    }
}

fn filter_ids(stacks: Vec<CtStack>, ids: &[String]) -> Result<Vec<CtStack>> {
    if ids.is_empty() {
        return Ok(stacks);
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        match stacks.iter().find(|s| &s.stack_id == id) {
            Some(s) => out.push(s.clone()),
            None => bail!("stack {id} not found"),
        }
    }
    Ok(out)
}

fn load_score_dir(dir: &Path) -> Result<Vec<ScoreVolume>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no score volumes in {}", dir.display());
    }
    Ok(entries.iter().map(load_scores).collect::<patchfcn::Result<Vec<_>>>()?)
}

fn write_curves(out: &Path, preds: &[ScoreVolume], gts: &[CtStack], p: f64) -> Result<()> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut stack_scores = Vec::new();
    let mut stack_labels = Vec::new();
    for gt in gts {
        let pred = preds
            .iter()
            .find(|v| v.stack_id == gt.stack_id)
            .context("unmatched stack")?;
        let mask = gt.mask.as_ref().context("stack without ground truth")?;
        scores.extend(pred.scores.iter().copied());
        labels.extend(mask.iter().map(|&v| v == 1));
        stack_scores.push(ScoreSummary::from_volume(pred, p)?.stack_score);
        stack_labels.push(gt.is_positive());
    }
    write_curve_csv(
        &out.join("pixel_pr.csv"),
        "threshold,precision,recall",
        &pr_curve(&scores, &labels)?,
    )?;
    if let Ok(roc) = roc_curve(&stack_scores, &stack_labels) {
        write_curve_csv(&out.join("stack_roc.csv"), "threshold,fpr,tpr", &roc)?;
    }
    Ok(())
}

fn write_f64<'a>(path: &Path, values: impl Iterator<Item = &'a f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
