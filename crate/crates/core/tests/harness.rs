//! Grid runner, saliency and overlay rendering on small corpora.

use patchfcn::folds::split_folds;
use patchfcn::harness::{
    mode_gaps, render_overlay, run_grid_on, saliency_for_lesions, select_frames, DataSource, ExperimentConfig,
    GridSpec, SplitSpec, TrainBase,
};
use patchfcn::inference::{infer, InferenceMode};
use patchfcn::metrics::evaluate;
use patchfcn::model::{Backbone, WidthPreset};
use patchfcn::sampler::PatchDataset;
use patchfcn::stack::CtStack;
use patchfcn::synth::{generate_corpus, PhantomParams};
use patchfcn::trainer::train;

fn params() -> PhantomParams {
    PhantomParams {
        size: 32,
        lesion_radius: (3.0, 5.0),
        depth_min: 3,
        depth_max: 4,
        ..Default::default()
    }
}

fn corpus() -> Vec<CtStack> {
    generate_corpus(&params(), 8).unwrap()
}

fn config(grid: GridSpec, modes: Vec<InferenceMode>) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        grid,
        modes,
        seeds: vec![5],
        train: TrainBase {
            preset: WidthPreset::Tiny,
            ..Default::default()
        },
        data: DataSource::Synthetic {
            params: params(),
            n_stacks: 8,
        },
        split: SplitSpec {
            folds: 4,
            seed: 1,
            test_fold: 2,
        },
        beta: 2.0,
        p: 64.0,
        threshold: 0.5,
    }
}

#[test]
fn single_cell_grid_matches_direct_training_and_evaluation() {
    let cfg = config(
        GridSpec::FixedBudget {
            crops: vec![16],
            batch_size: 4,
            total_steps: 4,
        },
        vec![InferenceMode::Sliding],
    );
    let stacks = corpus();
    let results = run_grid_on(&cfg, stacks.clone(), None).unwrap();
    assert_eq!(results.cells.len(), 1);
    let cell = &results.cells[0];
    assert!(cell.error.is_none());

    let ids: Vec<String> = stacks.iter().map(|s| s.stack_id.clone()).collect();
    let test_ids = split_folds(&ids, 4, 1).unwrap().fold(2);
    let (test, trainval): (Vec<CtStack>, Vec<CtStack>) =
        stacks.into_iter().partition(|s| test_ids.contains(&s.stack_id));
    let dataset = PatchDataset::<f32>::new(trainval).unwrap();
    let train_cfg = cfg.train.config(cell.cell.batch_spec().unwrap(), 4, None, 5);
    let net = train(&dataset, &train_cfg, None).unwrap().net;
    let preds: Vec<_> = test
        .iter()
        .map(|s| infer(s, &[&net as &dyn Backbone<f32>], InferenceMode::Sliding, 16, 2.0).unwrap())
        .collect();
    let direct = evaluate(&preds, &test, 0.5, 64.0).unwrap();
    assert_eq!(cell.reports["sliding"], direct);
}

#[test]
fn rerun_reuses_checkpoints_and_reproduces_reports() {
    let cfg = config(
        GridSpec::Composition {
            crop: 16,
            batch_size: 4,
            compositions: vec![(4, 1), (2, 2)],
            total_steps: 3,
        },
        vec![InferenceMode::Sliding, InferenceMode::Fullconv],
    );
    let out = tempfile::tempdir().unwrap();
    let first = run_grid_on(&cfg, corpus(), Some(out.path())).unwrap();
    assert!(first.cells.iter().all(|c| !c.reused_checkpoint && c.error.is_none()));
    assert!(out.path().join("results.json").is_file());
    let table = std::fs::read_to_string(out.path().join("table.md")).unwrap();
    assert!(table.contains("N=4,K=1") && table.contains("N=2,K=2"));

    let second = run_grid_on(&cfg, corpus(), Some(out.path())).unwrap();
    assert!(second.cells.iter().all(|c| c.reused_checkpoint));
    for (a, b) in first.cells.iter().zip(&second.cells) {
        assert_eq!(a.reports, b.reports);
    }
    let gaps = mode_gaps(&second);
    assert_eq!(gaps.len(), 2);
    for (gap, cell) in gaps.iter().zip(&second.cells) {
        let expected = cell.reports["sliding"].dice - cell.reports["fullconv"].dice;
        assert_eq!(gap.gaps["Dice"], expected);
    }

    // A changed training setting must not reuse the old checkpoint.
    let mut changed = cfg.clone();
    changed.train.lr0 = 0.004;
    let third = run_grid_on(&changed, corpus(), Some(out.path())).unwrap();
    assert!(third.cells.iter().all(|c| !c.reused_checkpoint));
}

#[test]
fn failing_cell_is_recorded_and_the_grid_continues() {
    // A 64-pixel crop does not fit the 32-pixel frames.
    let cfg = config(
        GridSpec::FixedBudget {
            crops: vec![64, 16],
            batch_size: 2,
            total_steps: 2,
        },
        vec![InferenceMode::Sliding],
    );
    let results = run_grid_on(&cfg, corpus(), None).unwrap();
    assert_eq!(results.cells.len(), 2);
    assert!(results.cells[0].error.as_deref().unwrap().contains("crop 64"));
    assert!(results.cells[0].reports.is_empty());
    assert!(results.cells[1].error.is_none());
    assert_eq!(results.failed().len(), 1);
}

#[test]
fn saliency_covers_every_lesion_component() {
    let stacks = corpus();
    let net = train(
        &PatchDataset::<f32>::new(stacks.clone()).unwrap(),
        &config(
            GridSpec::FixedBudget {
                crops: vec![16],
                batch_size: 2,
                total_steps: 2,
            },
            vec![InferenceMode::Sliding],
        )
        .train
        .config(patchfcn::sampler::BatchSpec::new(16, 2, 1).unwrap(), 2, None, 0),
        None,
    )
    .unwrap()
    .net;
    let positive = stacks.iter().find(|s| s.is_positive()).unwrap();
    let maps = saliency_for_lesions(&net, positive).unwrap();
    let lesion_frames = (0..positive.depth()).filter(|&f| positive.frame_is_positive(f)).count();
    assert!(maps.len() >= lesion_frames);
    let lesion_pixels: usize = positive.mask.as_ref().unwrap().iter().filter(|&&m| m == 1).count();
    assert_eq!(maps.iter().map(|m| m.region_pixels).sum::<usize>(), lesion_pixels);
    for m in &maps {
        assert_eq!(m.gradient.dim(), (3, 32, 32));
        assert_eq!(m.magnitude.dim(), (32, 32));
        assert!(m.magnitude.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
    let negative = stacks.iter().find(|s| !s.is_positive()).unwrap();
    assert!(saliency_for_lesions(&net, negative).unwrap().is_empty());
}

#[test]
fn overlays_are_written_per_frame() {
    let stack = corpus().remove(0);
    let scores =
        patchfcn::stack::ScoreVolume::new(stack.stack_id.clone(), stack.mask.as_ref().unwrap().mapv(f32::from))
            .unwrap();
    let out = tempfile::tempdir().unwrap();
    let frames = select_frames(stack.depth(), 2, 7);
    assert_eq!(frames, select_frames(stack.depth(), 2, 7));
    let written = render_overlay(&stack, &scores, out.path(), Some(&frames)).unwrap();
    assert_eq!(written.len(), 2);
    for path in &written {
        let img = image::open(path).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (64, 32));
    }
    let all = render_overlay(&stack, &scores, out.path(), None).unwrap();
    assert_eq!(all.len(), stack.depth());
}
