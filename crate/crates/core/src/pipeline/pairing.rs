use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PairingPolicy, PipelineError};
use crate::patch::{ClassLabel, PatchManifest};
use crate::split::Split;
use crate::tabular::FeatureTable;

/// Cohort rows available for pairing: ids, binary outcome and split.
#[derive(Clone, Debug, PartialEq)]
pub struct CohortIndex {
    pub row_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

impl CohortIndex {
    pub fn new(row_ids: Vec<String>, labels: Vec<usize>, splits: Vec<Split>) -> Result<Self, PipelineError> {
        if row_ids.len() != labels.len() || row_ids.len() != splits.len() {
            return Err(PipelineError::Data("cohort ids, labels and splits differ in length".into()));
        }
        Ok(CohortIndex { row_ids, labels, splits })
    }

    pub fn from_table(table: &FeatureTable, splits: Vec<Split>) -> Result<Self, PipelineError> {
        let labels = table
            .labels
            .clone()
            .ok_or_else(|| PipelineError::Data("cohort table has no label column".into()))?;
        Self::new(table.row_ids.clone(), labels, splits)
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub patch_id: String,
    pub row_id: String,
    pub class: ClassLabel,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
    /// `hash-assign` or `explicit-map`.
    pub policy: String,
}

impl PairedDataset {
    pub fn in_split(&self, split: Split) -> Vec<&Pair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["patch_id", "row_id", "class", "split"]).expect("in-memory csv");
        for p in &self.pairs {
            w.write_record([p.patch_id.as_str(), p.row_id.as_str(), p.class.name(), p.split.as_str()])
                .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8 csv")
    }
}

/// Two independent uniforms in [0, 1) and a row pick from SHA-256 of the
/// seed and patch id.
fn patch_hash(seed: u64, patch_id: &str) -> (f64, u64) {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patch_id.as_bytes());
    let d = h.finalize();
    let a = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    let b = u64::from_le_bytes(d[8..16].try_into().expect("8 bytes"));
    ((a >> 11) as f64 / (1u64 << 53) as f64, b)
}

/// Parses a `patch_id,row_id` table.
pub fn read_pairing_table(text: &str) -> Result<BTreeMap<String, String>, PipelineError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| PipelineError::Config(e.to_string()))?.clone();
    let (Some(pi), Some(ri)) = (
        headers.iter().position(|h| h == "patch_id"),
        headers.iter().position(|h| h == "row_id"),
    ) else {
        return Err(PipelineError::Config("pairing table needs patch_id and row_id columns".into()));
    };
    let mut map = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| PipelineError::Config(e.to_string()))?;
        let patch = rec[pi].to_string();
        if map.insert(patch.clone(), rec[ri].to_string()).is_some() {
            return Err(PipelineError::Config(format!("pairing table lists {patch} twice")));
        }
    }
    Ok(map)
}

/// Pairs every patch with one cohort row. Hash-assign draws a positive
/// patient with the class's rate, then a row from that outcome's pool inside
/// the patch's split; patients may serve several patches. Explicit maps are
/// used as given and must respect splits.
pub fn pair_modalities(
    manifest: &PatchManifest,
    cohort: &CohortIndex,
    policy: &PairingPolicy,
    explicit: Option<&BTreeMap<String, String>>,
    seed: u64,
) -> Result<PairedDataset, PipelineError> {
    if cohort.is_empty() {
        return Err(PipelineError::Data("cohort is empty".into()));
    }
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    match policy {
        PairingPolicy::HashAssign { positive_rate } => {
            let mut pools: BTreeMap<(Split, usize), Vec<usize>> = BTreeMap::new();
            for i in 0..cohort.len() {
                pools.entry((cohort.splits[i], cohort.labels[i])).or_default().push(i);
            }
            for e in &manifest.entries {
                let (u, pick) = patch_hash(seed, &e.patch_id);
                let want = usize::from(u < positive_rate[e.class.index()]);
                let pool = match pools.get(&(e.split, want)) {
                    Some(p) => p,
                    None => {
                        log::warn!("no outcome-{want} patients in split {}; mixing rate not honoured", e.split.as_str());
                        pools.get(&(e.split, 1 - want)).ok_or_else(|| {
                            PipelineError::Data(format!("no cohort rows in split {} for {}", e.split.as_str(), e.patch_id))
                        })?
                    }
                };
                pairs.push(Pair {
                    patch_id: e.patch_id.clone(),
                    row_id: cohort.row_ids[pool[(pick % pool.len() as u64) as usize]].clone(),
                    class: e.class,
                    split: e.split,
                });
            }
        }
        PairingPolicy::ExplicitMap => {
            let map = explicit.ok_or_else(|| PipelineError::Config("explicit-map pairing needs a table".into()))?;
            let rows: BTreeMap<&str, usize> = cohort.row_ids.iter().enumerate().map(|(i, r)| (r.as_str(), i)).collect();
            let mut unmatched = BTreeSet::new();
            let mut crossed = Vec::new();
            for e in &manifest.entries {
                let Some(row) = map.get(&e.patch_id) else {
                    unmatched.insert(e.patch_id.clone());
                    continue;
                };
                let Some(&i) = rows.get(row.as_str()) else {
                    unmatched.insert(e.patch_id.clone());
                    continue;
                };
                if cohort.splits[i] != e.split {
                    crossed.push(e.patch_id.clone());
                }
                pairs.push(Pair {
                    patch_id: e.patch_id.clone(),
                    row_id: row.clone(),
                    class: e.class,
                    split: e.split,
                });
            }
            if !unmatched.is_empty() {
                return Err(PipelineError::Unmatched(unmatched.into_iter().collect()));
            }
            if !crossed.is_empty() {
                return Err(PipelineError::Data(format!(
                    "pairs cross splits (patch and patient in different splits): {crossed:?}"
                )));
            }
        }
    }
    Ok(PairedDataset {
        pairs,
        policy: match policy {
            PairingPolicy::HashAssign { .. } => "hash-assign",
            PairingPolicy::ExplicitMap => "explicit-map",
        }
        .to_string(),
    })
}
