use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{AnnotationSet, ClassLabel, PatchError};
use crate::autodiff::Tensor;
use crate::split::{assign_splits, Split};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patch_id: String,
    pub image_id: String,
    pub class: ClassLabel,
    /// Top-left corner of the window in the source image.
    pub row: u32,
    pub col: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub patch_size: u32,
    pub entries: Vec<ManifestEntry>,
    /// Indexed by [`ClassLabel::index`].
    pub class_counts: [usize; 3],
}

impl PatchManifest {
    pub fn new(patch_size: u32, entries: Vec<ManifestEntry>) -> Self {
        let mut m = PatchManifest {
            patch_size,
            entries,
            class_counts: [0; 3],
        };
        m.recount();
        m
    }

    pub fn recount(&mut self) {
        self.class_counts = [0; 3];
        for e in &self.entries {
            self.class_counts[e.class.index()] += 1;
        }
    }

    pub fn extend(&mut self, other: PatchManifest) {
        self.entries.extend(other.entries);
        self.recount();
    }

    pub fn labels(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class.index()).collect()
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    /// Checks id uniqueness, count consistency and that each window fits the
    /// extents returned by `extents(image_id)`.
    pub fn validate(&self, extents: impl Fn(&str) -> Option<(u32, u32)>) -> Result<(), PatchError> {
        let mut ids = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.patch_id.as_str()) {
                return Err(PatchError::InvalidManifest(format!("duplicate patch id {}", e.patch_id)));
            }
            let (w, h) = extents(&e.image_id)
                .ok_or_else(|| PatchError::InvalidManifest(format!("unknown image {}", e.image_id)))?;
            if e.col + self.patch_size > w || e.row + self.patch_size > h {
                return Err(PatchError::InvalidManifest(format!("window of {} leaves its image", e.patch_id)));
            }
        }
        let mut check = self.clone();
        check.recount();
        if check.class_counts != self.class_counts {
            return Err(PatchError::InvalidManifest("class counts disagree with entries".into()));
        }
        Ok(())
    }

    /// `class,count,fraction` rows in class order.
    pub fn audit_csv(&self) -> String {
        let total = self.entries.len().max(1) as f64;
        let mut s = String::from("class,count,fraction\n");
        for c in ClassLabel::ALL {
            let n = self.class_counts[c.index()];
            s.push_str(&format!("{},{},{}\n", c.name(), n, n as f64 / total));
        }
        s
    }
}

/// Pixel index of a normalized coordinate on an axis of `extent` pixels.
pub fn to_pixel(v: f64, extent: u32) -> u32 {
    (v * (extent - 1) as f64).round() as u32
}

fn window_origin(center: u32, extent: u32, size: u32) -> u32 {
    center.saturating_sub(size / 2).min(extent - size)
}

/// One `size`-square patch per annotation, centred on the annotated pixel and
/// shifted inward where it would leave the image.
pub fn extract_patches(
    image: &RgbImage,
    annotations: &AnnotationSet,
    size: u32,
) -> Result<(Vec<RgbImage>, PatchManifest), PatchError> {
    let (w, h) = image.dimensions();
    if size == 0 || w < size || h < size {
        return Err(PatchError::ImageTooSmall { width: w, height: h, size });
    }
    let mut patches = Vec::with_capacity(annotations.records.len());
    let mut entries = Vec::with_capacity(annotations.records.len());
    for (i, r) in annotations.records.iter().enumerate() {
        let col = window_origin(to_pixel(r.x, w), w, size);
        let row = window_origin(to_pixel(r.y, h), h, size);
        patches.push(image::imageops::crop_imm(image, col, row, size, size).to_image());
        entries.push(ManifestEntry {
            patch_id: format!("{}_{:05}", annotations.image_id, i),
            image_id: annotations.image_id.clone(),
            class: r.class,
            row,
            col,
            split: Split::Unassigned,
        });
    }
    Ok((patches, PatchManifest::new(size, entries)))
}

/// Bytes divided by 255 into a channel-major `[3, size, size]` tensor.
pub fn normalize_patch(patch: &RgbImage, size: u32) -> Result<Tensor, PatchError> {
    let (w, h) = patch.dimensions();
    if w != size || h != size {
        return Err(PatchError::WrongExtents {
            expected: size,
            width: w,
            height: h,
        });
    }
    let plane = (size * size) as usize;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in patch.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * plane + i] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, size as usize, size as usize], data).expect("shape matches data"))
}

/// Inverse of [`normalize_patch`] (values clamped to [0, 1] and rounded).
pub fn denormalize_patch(t: &Tensor) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// Assigns splits to a manifest; see [`crate::split::assign_splits`].
pub fn split_dataset(
    manifest: &PatchManifest,
    fractions: &[f64],
    seed: u64,
    stratify: bool,
) -> Result<PatchManifest, PatchError> {
    let splits = assign_splits(&manifest.labels(), fractions, seed, stratify)?;
    let mut out = manifest.clone();
    for (e, s) in out.entries.iter_mut().zip(splits) {
        e.split = s;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::AnnotationRecord;

    fn set(points: &[(f64, f64)]) -> AnnotationSet {
        let mut a = AnnotationSet::new("img", 128, 128);
        a.records = points
            .iter()
            .map(|&(x, y)| AnnotationRecord {
                class: ClassLabel::Mitosis,
                x,
                y,
            })
            .collect();
        a
    }

    #[test]
    fn centered_and_corner_windows() {
        let img = RgbImage::new(128, 128);
        let (_, m) = extract_patches(&img, &set(&[(0.5, 0.5), (0.0, 0.0), (1.0, 1.0)]), 64).unwrap();
        let origins: Vec<(u32, u32)> = m.entries.iter().map(|e| (e.row, e.col)).collect();
        assert_eq!(origins, vec![(32, 32), (0, 0), (64, 64)]);
    }

    #[test]
    fn small_image_rejected() {
        let img = RgbImage::new(63, 100);
        assert!(matches!(
            extract_patches(&img, &set(&[(0.5, 0.5)]), 64),
            Err(PatchError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn normalize_values() {
        let p = RgbImage::from_pixel(64, 64, image::Rgb([0, 51, 255]));
        let t = normalize_patch(&p, 64).unwrap();
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[4096], 0.2);
        assert_eq!(t.data()[8192], 1.0);
        assert_eq!(denormalize_patch(&t), p);
        assert!(normalize_patch(&RgbImage::new(32, 64), 64).is_err());
    }
}
