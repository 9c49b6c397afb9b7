use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ClassLabel, PatchError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub class: ClassLabel,
    /// Normalized horizontal coordinate in [0, 1].
    pub x: f64,
    /// Normalized vertical coordinate in [0, 1].
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub records: Vec<AnnotationRecord>,
    /// Points under unrecognized class keys, by key.
    pub skipped: BTreeMap<String, usize>,
}

impl AnnotationSet {
    pub fn new(image_id: &str, width: u32, height: u32) -> Self {
        AnnotationSet {
            image_id: image_id.to_string(),
            width,
            height,
            records: Vec::new(),
            skipped: BTreeMap::new(),
        }
    }

    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.class.index()] += 1;
        }
        c
    }

    /// Class-keyed document form, the inverse of [`parse_annotations`].
    pub fn to_document(&self) -> String {
        let mut doc: BTreeMap<&str, Vec<serde_json::Value>> = BTreeMap::new();
        for c in ClassLabel::ALL {
            doc.insert(c.name(), Vec::new());
        }
        for r in &self.records {
            doc.get_mut(r.class.name())
                .unwrap()
                .push(serde_json::json!({ "x": r.x, "y": r.y }));
        }
        serde_json::to_string_pretty(&doc).expect("annotation document serializes")
    }
}

#[derive(Deserialize)]
struct Point {
    x: f64,
    y: f64,
}

/// Parses a class-keyed JSON document of `{x, y}` lists with normalized
/// coordinates. Records follow key order, then list order.
pub fn parse_annotations(document: &str, image_id: &str, width: u32, height: u32) -> Result<AnnotationSet, PatchError> {
    if width == 0 || height == 0 {
        return Err(PatchError::ImageTooSmall {
            width,
            height,
            size: 1,
        });
    }
    let raw: BTreeMap<String, serde_json::Value> = serde_json::from_str(document).map_err(|e| PatchError::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut set = AnnotationSet::new(image_id, width, height);
    for (key, value) in raw {
        let Some(class) = ClassLabel::from_key(&key) else {
            let n = value.as_array().map_or(0, |a| a.len());
            log::warn!("{image_id}: skipping {n} points under unrecognized class key {key:?}");
            set.skipped.insert(key, n);
            continue;
        };
        let points: Vec<Point> = serde_json::from_value(value).map_err(|e| PatchError::Malformed {
            line: 0,
            column: 0,
            message: format!("class {key:?}: {e}"),
        })?;
        for p in points {
            let index = set.records.len();
            if !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)) {
                return Err(PatchError::CoordinateOutOfRange { index, x: p.x, y: p.y });
            }
            set.records.push(AnnotationRecord { class, x: p.x, y: p.y });
        }
    }
    Ok(set)
}
