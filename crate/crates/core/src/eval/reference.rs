//! Published confusion counts for the histology test set and the summary
//! figures reported next to them. Class order is tumour, non-tumour, mitosis.

pub const CLASS_NAMES: [&str; 3] = ["tumour", "non_tumour", "mitosis"];

/// Image-only (ResNet) counts. The 9 misclassified non-tumour nuclei have no
/// stated destination and are placed in the tumour column.
pub const IMAGE_ONLY_COUNTS: [[u64; 3]; 3] = [[22091, 1578, 0], [9, 1796, 0], [15, 176, 163]];

/// Fusion counts.
pub const FUSION_COUNTS: [[u64; 3]; 3] = [[23682, 0, 5], [0, 1747, 4], [0, 359, 31]];

/// Summary values reported for the fusion model.
pub const FUSION_REPORTED_ACCURACY: f64 = 0.997;
pub const FUSION_REPORTED_MACRO_F1: f64 = 0.996;
pub const FUSION_REPORTED_MACRO_AUC: f64 = 0.997;
pub const FUSION_REPORTED_MITOSIS_AUC: f64 = 0.994;
pub const IMAGE_ONLY_REPORTED_MITOSIS_AUC: f64 = 0.9272;

pub fn to_rows(counts: &[[u64; 3]; 3]) -> Vec<Vec<u64>> {
    counts.iter().map(|r| r.to_vec()).collect()
}

pub fn class_names() -> Vec<String> {
    CLASS_NAMES.iter().map(|s| s.to_string()).collect()
}
