use std::fs;
use std::path::Path;

use ndarray::Array3;
use proptest::prelude::*;

use patchfcn::model::{load_checkpoint, save_checkpoint, WidthPreset};
use patchfcn::stack::{load_scores, load_stack, load_stack_dir, save_scores, save_stack, CtStack, ScoreVolume};
use patchfcn::synth::{generate_dataset, Manifest, PhantomParams};
use patchfcn::{Error, Net, Net64};

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn arb_stack() -> impl Strategy<Value = CtStack> {
    (1usize..4, 1usize..9, any::<bool>()).prop_flat_map(|(d, n, with_mask)| {
        let len = d * n * n;
        (
            prop::collection::vec(any::<i16>(), len),
            prop::collection::vec(0u8..=1, len),
            "[a-z0-9_]{1,12}",
        )
            .prop_map(move |(hu, mask, id)| {
                let frames = Array3::from_shape_vec((d, n, n), hu).unwrap();
                let mask = with_mask.then(|| Array3::from_shape_vec((d, n, n), mask).unwrap());
                CtStack::new(id, frames, mask).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stack_save_load_save_is_byte_identical(stack in arb_stack()) {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        save_stack(&stack, &a).unwrap();
        let loaded = load_stack(&a).unwrap();
        prop_assert_eq!(&loaded, &stack);
        save_stack(&loaded, &b).unwrap();
        prop_assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }

    #[test]
    fn scores_save_load_save_is_byte_identical(
        (d, n) in (1usize..4, 1usize..9),
        seed in any::<u64>(),
    ) {
        let mut x = seed;
        let scores = Array3::from_shape_fn((d, n, n), |_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 40) as f32 / (1u64 << 24) as f32
        });
        let vol = ScoreVolume::new("s", scores).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        save_scores(&vol, &a).unwrap();
        let loaded = load_scores(&a).unwrap();
        prop_assert_eq!(&loaded, &vol);
        save_scores(&loaded, &b).unwrap();
        prop_assert_eq!(dir_bytes(&a), dir_bytes(&b));
    }
}

#[test]
fn frames_payload_is_little_endian_int16() {
    let frames = Array3::from_shape_vec((1, 2, 2), vec![1i16, -2, 300, -1000]).unwrap();
    let stack = CtStack::new("le", frames, None).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_stack(&stack, tmp.path()).unwrap();
    let bytes = fs::read(tmp.path().join("frames.bin")).unwrap();
    assert_eq!(bytes, [1, 0, 0xfe, 0xff, 0x2c, 0x01, 0x18, 0xfc]);
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("header.json")).unwrap()).unwrap();
    assert_eq!(header["hu_dtype"], "int16-le");
    assert_eq!(header["has_mask"], false);
    assert!(!tmp.path().join("mask.bin").exists());
}

#[test]
fn dataset_directory_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let params = PhantomParams {
        size: 32,
        lesion_radius: (3.0, 5.0),
        ..Default::default()
    };
    let manifest = generate_dataset(&params, 6, tmp.path()).unwrap();
    assert_eq!(Manifest::load(tmp.path()).unwrap(), manifest);
    let stacks = load_stack_dir(tmp.path()).unwrap();
    assert_eq!(stacks.len(), 6);
    for (s, e) in stacks.iter().zip(&manifest.stacks) {
        assert_eq!(s.stack_id, e.stack_id);
        assert_eq!(u8::from(s.is_positive()), e.label);
    }
    // Without a manifest the stacks are discovered by directory.
    fs::remove_file(tmp.path().join("manifest.json")).unwrap();
    assert_eq!(load_stack_dir(tmp.path()).unwrap(), stacks);
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_stack_dir(empty.path()), Err(Error::Argument(_))));
}

#[test]
fn checkpoint_dtype_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let net = Net64::new(WidthPreset::Tiny, 1);
    save_checkpoint(&net, serde_json::json!({}), tmp.path()).unwrap();
    assert!(load_checkpoint::<f64>(tmp.path()).is_ok());
    assert!(matches!(load_checkpoint::<f32>(tmp.path()), Err(Error::Format { .. })));
}

#[test]
fn checkpoint_blob_corruption_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let net = Net::new(WidthPreset::Tiny, 1);
    save_checkpoint(&net, serde_json::json!({}), tmp.path()).unwrap();
    let blob = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .unwrap();
    let mut bytes = fs::read(&blob).unwrap();
    bytes.push(0);
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(tmp.path()),
        Err(Error::Corruption { .. })
    ));
}
