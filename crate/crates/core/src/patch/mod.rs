//! Annotation parsing, patch extraction, normalization, augmentation,
//! splitting and synthetic slide generation.

mod annotations;
mod augment;
mod extract;
mod synth;

use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use annotations::{parse_annotations, AnnotationRecord, AnnotationSet};
pub use augment::{apply_draw, augment, patch_rng, AugmentConfig, AugmentDraw};
pub use extract::{
    denormalize_patch, extract_patches, normalize_patch, split_dataset, to_pixel, ManifestEntry, PatchManifest,
};
pub use synth::{synth_slides, SynthSlideSpec, SyntheticSlide};

use crate::split::SplitError;

pub const PATCH_SIZE: u32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    Tumour,
    NonTumour,
    Mitosis,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Tumour, ClassLabel::NonTumour, ClassLabel::Mitosis];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassLabel> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Tumour => "tumour",
            ClassLabel::NonTumour => "non_tumour",
            ClassLabel::Mitosis => "mitosis",
        }
    }

    /// Annotation key, accepting both spellings.
    pub fn from_key(key: &str) -> Option<ClassLabel> {
        match key {
            "tumour" | "tumor" => Some(ClassLabel::Tumour),
            "non_tumour" | "non_tumor" => Some(ClassLabel::NonTumour),
            "mitosis" => Some(ClassLabel::Mitosis),
            _ => None,
        }
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.name().to_string()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("malformed annotation document at line {line}, column {column}: {message}")]
    Malformed { line: usize, column: usize, message: String },
    #[error("annotation {index} has coordinate ({x}, {y}) outside [0, 1]")]
    CoordinateOutOfRange { index: usize, x: f64, y: f64 },
    #[error("image {width}x{height} is smaller than the {size}-pixel window")]
    ImageTooSmall { width: u32, height: u32, size: u32 },
    #[error("patch is {width}x{height}, expected {expected}x{expected}")]
    WrongExtents { expected: u32, width: u32, height: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, PatchError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn load_png(path: &Path) -> Result<RgbImage, PatchError> {
    Ok(image::open(path)?.to_rgb8())
}

/// Relative location of a patch file: `<class>/<patch id>.png`.
pub fn patch_relpath(entry: &ManifestEntry) -> String {
    format!("{}/{}.png", entry.class.name(), entry.patch_id)
}

/// Loads every patch named in the manifest from class folders under `dir`.
pub fn load_patches(dir: &Path, manifest: &PatchManifest) -> Result<Vec<RgbImage>, PatchError> {
    manifest
        .entries
        .iter()
        .map(|e| load_png(&dir.join(patch_relpath(e))))
        .collect()
}
