//! Stack and score-volume containers plus their one-directory-per-volume
//! on-disk format.
//!
//! A stack directory holds `header.json`, `frames.bin` (D·H·W int16-le,
//! frame-major, row-major) and optionally `mask.bin` (D·H·W uint8). A score
//! directory holds `header.json` and `scores.bin` (D·H·W float32-le).

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_FILE: &str = "header.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const MASK_FILE: &str = "mask.bin";
pub const SCORES_FILE: &str = "scores.bin";

/// One head CT scan: `D` square frames of Hounsfield units, with an optional
/// binary ground-truth mask of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CtStack {
    pub stack_id: String,
    pub frames: Array3<i16>,
    pub mask: Option<Array3<u8>>,
}

impl CtStack {
    pub fn new(stack_id: impl Into<String>, frames: Array3<i16>, mask: Option<Array3<u8>>) -> Result<Self> {
        let s = Self {
            stack_id: stack_id.into(),
            frames,
            mask,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.frames.dim();
        if d == 0 {
            return Err(Error::arg(format!("stack {} has no frames", self.stack_id)));
        }
        if h != w || h == 0 {
            return Err(Error::Shape(format!(
                "frames must be square and non-empty, got {h}x{w}"
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != self.frames.dim() {
                return Err(Error::Shape(format!(
                    "mask shape {:?} differs from frame shape {:?}",
                    m.dim(),
                    self.frames.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(Error::arg("mask values must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.frames.dim().0
    }

    /// Frame side length (frames are square).
    pub fn size(&self) -> usize {
        self.frames.dim().1
    }

    pub fn frame_mask(&self, frame: usize) -> Option<ArrayView2<'_, u8>> {
        self.mask.as_ref().map(|m| m.index_axis(ndarray::Axis(0), frame))
    }

    /// Stack-level label: any positive voxel.
    pub fn is_positive(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v == 1))
    }

    pub fn frame_is_positive(&self, frame: usize) -> bool {
        self.frame_mask(frame).is_some_and(|m| m.iter().any(|&v| v == 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub stack_id: String,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub hu_dtype: String,
    pub has_mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreHeader {
    pub stack_id: String,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub score_dtype: String,
}

/// Per-voxel hemorrhage probabilities for one stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVolume {
    pub stack_id: String,
    pub scores: Array3<f32>,
}

impl ScoreVolume {
    pub fn new(stack_id: impl Into<String>, scores: Array3<f32>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::arg(format!("score {bad} outside [0,1]")));
        }
        Ok(Self {
            stack_id: stack_id.into(),
            scores,
        })
    }

    pub fn depth(&self) -> usize {
        self.scores.dim().0
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: format!("cannot read: {e}"),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::Corruption {
            path: path.to_owned(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    Ok(bytes)
}

pub fn save_stack(stack: &CtStack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    stack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = stack.frames.dim();
    let header = StackHeader {
        stack_id: stack.stack_id.clone(),
        d,
        h,
        w,
        hu_dtype: "int16-le".into(),
        has_mask: stack.mask.is_some(),
    };
    write_json(&dir.join(HEADER_FILE), &header)?;

    let mut frames = Vec::with_capacity(d * h * w * 2);
    for v in stack.frames.iter() {
        frames.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(FRAMES_FILE);
    fs::write(&path, frames).map_err(|e| Error::io(&path, e))?;

    if let Some(mask) = &stack.mask {
        let path = dir.join(MASK_FILE);
        let bytes: Vec<u8> = mask.iter().copied().collect();
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_stack(dir: impl AsRef<Path>) -> Result<CtStack> {
    let dir = dir.as_ref();
    let header: StackHeader = read_json(&dir.join(HEADER_FILE))?;
    if header.hu_dtype != "int16-le" {
        return Err(Error::Format {
            path: dir.join(HEADER_FILE),
            reason: format!("unsupported hu_dtype {:?}", header.hu_dtype),
        });
    }
    let n = header.d * header.h * header.w;
    let bytes = read_payload(&dir.join(FRAMES_FILE), n * 2)?;
    let values: Vec<i16> = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let frames =
        Array3::from_shape_vec((header.d, header.h, header.w), values).map_err(|e| Error::Shape(e.to_string()))?;

    let mask = if header.has_mask {
        let path = dir.join(MASK_FILE);
        let bytes = read_payload(&path, n)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::Corruption {
                path,
                reason: "mask value outside {0,1}".into(),
            });
        }
        Some(Array3::from_shape_vec((header.d, header.h, header.w), bytes).map_err(|e| Error::Shape(e.to_string()))?)
    } else {
        None
    };
    CtStack::new(header.stack_id, frames, mask)
}

pub fn save_scores(volume: &ScoreVolume, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (d, h, w) = volume.scores.dim();
    let header = ScoreHeader {
        stack_id: volume.stack_id.clone(),
        d,
        h,
        w,
        score_dtype: "float32-le".into(),
    };
    write_json(&dir.join(HEADER_FILE), &header)?;
    let mut bytes = Vec::with_capacity(d * h * w * 4);
    for v in volume.scores.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let path = dir.join(SCORES_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

pub fn load_scores(dir: impl AsRef<Path>) -> Result<ScoreVolume> {
    let dir = dir.as_ref();
    let header: ScoreHeader = read_json(&dir.join(HEADER_FILE))?;
    if header.score_dtype != "float32-le" {
        return Err(Error::Format {
            path: dir.join(HEADER_FILE),
            reason: format!("unsupported score_dtype {:?}", header.score_dtype),
        });
    }
    let n = header.d * header.h * header.w;
    let bytes = read_payload(&dir.join(SCORES_FILE), n * 4)?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let scores =
        Array3::from_shape_vec((header.d, header.h, header.w), values).map_err(|e| Error::Shape(e.to_string()))?;
    ScoreVolume::new(header.stack_id, scores)
}

#[derive(Deserialize)]
struct ManifestIds {
    stacks: Vec<ManifestId>,
}

#[derive(Deserialize)]
struct ManifestId {
    stack_id: String,
}

/// Load every stack of a dataset directory. Stacks listed in
/// `manifest.json` are loaded in manifest order; without a manifest, every
/// subdirectory holding a `header.json` is loaded in name order.
pub fn load_stack_dir(dir: impl AsRef<Path>) -> Result<Vec<CtStack>> {
    let dir = dir.as_ref();
    let manifest = dir.join("manifest.json");
    let ids: Vec<String> = if manifest.exists() {
        read_json::<ManifestIds>(&manifest)?
            .stacks
            .into_iter()
            .map(|e| e.stack_id)
            .collect()
    } else {
        let mut names = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if entry.path().join(HEADER_FILE).is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        names
    };
    if ids.is_empty() {
        return Err(Error::arg(format!("no stacks found in {}", dir.display())));
    }
    ids.iter().map(|id| load_stack(dir.join(id))).collect()
}
