use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fusiondx_core::eval::{CalibrationMethod, ConfusionMatrix, EvaluationReport};
use fusiondx_core::patch::{ClassLabel, ManifestEntry, PatchManifest};
use fusiondx_core::pipeline::{
    compare_models, pair_modalities, read_pairing_table, resolve_output_dir, run_pipeline, run_stage, CohortIndex,
    ExperimentConfig, LedgerEntry, PairingPolicy, PipelineError, Stage, LEDGER_FILE, LOCK_FILE,
};
use fusiondx_core::split::Split;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

/// Small enough to run every stage in a few seconds.
fn tiny(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.images.synth.counts = [12, 12, 9];
    c.images.synth.difficulty = 0.2;
    c.images.patch_size = 16;
    c.cnn.model.input_size = 16;
    c.cnn.model.channels = vec![4, 8];
    c.cnn.model.hidden = 16;
    c.cnn.train.max_epochs = 2;
    c.cnn.train.batch_size = 8;
    c.cohort.synth.n = 300;
    c.mlp.model.hidden = vec![16, 8];
    c.mlp.train.max_epochs = 3;
    c.gbdt.max_rounds = 20;
    c.gbdt.max_depth = 3;
    c.fusion.model.hidden = vec![16, 8];
    c.fusion.train.max_epochs = 3;
    c.fusion.train.batch_size = 8;
    c.explain.gradcam_patches = 2;
    c.explain.shap_rows = 10;
    c
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn ledger(dir: &Path) -> Vec<LedgerEntry> {
    fs::read_to_string(dir.join(LEDGER_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn default_config_round_trips_through_toml() {
    let c = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    let t = tiny(3);
    assert_eq!(ExperimentConfig::from_toml(&t.to_toml()).unwrap(), t);
    t.validate().unwrap();
}

#[test]
fn bundled_config_loads_validates_and_round_trips() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let c = ExperimentConfig::load(&path).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert_eq!(c.cnn.model, Default::default());
}

#[test]
fn missing_patience_survives_the_round_trip() {
    let mut c = tiny(0);
    c.cnn.train.patience = None;
    c.fusion.train.patience = Some(2);
    let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back.cnn.train.patience, None);
    assert_eq!(back.fusion.train.patience, Some(2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_configs_round_trip(
        seed in 0u64..i64::MAX as u64,
        counts in prop::array::uniform3(1usize..200),
        difficulty in 0.0f64..=1.0,
        train in 0.05f64..0.9,
        lr in 1e-6f64..1.0,
        patience in prop::option::of(1usize..20),
        rates in prop::array::uniform3(0.0f64..=1.0),
        explicit in any::<bool>(),
        platt in prop::option::of(any::<bool>()),
    ) {
        let mut c = ExperimentConfig { seed, ..ExperimentConfig::default() };
        c.images.synth.counts = counts;
        c.images.synth.difficulty = difficulty;
        let rest = (1.0 - train) / 2.0;
        c.cohort.split = vec![train, rest, 1.0 - train - rest];
        c.mlp.train.optimizer.learning_rate = lr;
        c.fusion.train.patience = patience;
        c.pairing = if explicit {
            c.paths.pairing_table = Some(PathBuf::from("pairs.csv"));
            PairingPolicy::ExplicitMap
        } else {
            PairingPolicy::HashAssign { positive_rate: rates }
        };
        c.evaluate.calibration = platt.map(|p| if p { CalibrationMethod::Platt } else { CalibrationMethod::Isotonic });
        let text = c.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }
}

#[test]
fn invalid_configs_are_rejected_with_exit_code_2() {
    let cases: Vec<(&str, Box<dyn Fn(&mut ExperimentConfig)>)> = vec![
        ("patch/cnn size", Box::new(|c| c.images.patch_size = 32)),
        ("split sum", Box::new(|c| c.images.split = vec![0.7, 0.2, 0.2])),
        ("empty val", Box::new(|c| c.cohort.split = vec![0.8, 0.0, 0.2])),
        ("rate", Box::new(|c| c.pairing = PairingPolicy::HashAssign { positive_rate: [0.1, 1.5, 0.9] })),
        ("no table", Box::new(|c| c.pairing = PairingPolicy::ExplicitMap)),
        ("classes", Box::new(|c| c.fusion.model.classes = 2)),
        ("bins", Box::new(|c| c.evaluate.ece_bins = 0)),
        ("difficulty", Box::new(|c| c.images.synth.difficulty = 1.5)),
    ];
    for (name, edit) in cases {
        let mut c = tiny(0);
        edit(&mut c);
        let e = c.validate().expect_err(name);
        assert_eq!(e.exit_code(), 2, "{name}: {e}");
    }
    let mut c = tiny(0);
    c.pairing = PairingPolicy::ExplicitMap;
    c.paths.pairing_table = Some(PathBuf::from("/nonexistent/pairs.csv"));
    assert_eq!(c.validate().unwrap_err().exit_code(), 3);
    assert_eq!(ExperimentConfig::from_toml("seed = \"x\"").unwrap_err().exit_code(), 2);
}

#[test]
fn derived_seeds_depend_on_purpose_and_master_seed() {
    let a = tiny(1);
    let b = tiny(2);
    assert_ne!(a.derived_seed("train-cnn"), a.derived_seed("train-mlp"));
    assert_ne!(a.derived_seed("train-cnn"), b.derived_seed("train-cnn"));
    assert_eq!(a.derived_seed("pairing"), tiny(1).derived_seed("pairing"));
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pairs.csv"), "patch_id,row_id\n").unwrap();
    let mut c = tiny(0);
    c.pairing = PairingPolicy::ExplicitMap;
    c.paths.pairing_table = Some(PathBuf::from("pairs.csv"));
    c.paths.output_dir = Some(PathBuf::from("out"));
    let path = dir.path().join("exp.toml");
    fs::write(&path, c.to_toml()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.paths.pairing_table.unwrap(), dir.path().join("pairs.csv"));
    assert_eq!(loaded.paths.output_dir.unwrap(), dir.path().join("out"));
}

#[test]
fn output_directory_precedence() {
    let mut c = tiny(0);
    let cfg = Path::new("/x/exp.toml");
    assert_eq!(resolve_output_dir(None, &c, cfg, None), Path::new("runs/exp"));
    assert_eq!(resolve_output_dir(None, &c, cfg, Some("/r")), Path::new("/r/exp"));
    c.paths.output_dir = Some(PathBuf::from("/cfg"));
    assert_eq!(resolve_output_dir(None, &c, cfg, Some("/r")), Path::new("/cfg"));
    assert_eq!(resolve_output_dir(Some(Path::new("/cli")), &c, cfg, Some("/r")), Path::new("/cli"));
}

// ---- pairing ----

fn manifest(entries: &[(&str, ClassLabel, Split)]) -> PatchManifest {
    PatchManifest::new(
        64,
        entries
            .iter()
            .map(|&(id, class, split)| ManifestEntry {
                patch_id: id.to_string(),
                image_id: "img".into(),
                class,
                row: 0,
                col: 0,
                split,
            })
            .collect(),
    )
}

fn cohort(n: usize, prevalence: f64) -> CohortIndex {
    let splits = [Split::Train, Split::Val, Split::Test];
    CohortIndex::new(
        (0..n).map(|i| format!("p{i}")).collect(),
        (0..n).map(|i| usize::from((i as f64) < prevalence * n as f64)).collect(),
        (0..n).map(|i| splits[i % 3]).collect(),
    )
    .unwrap()
}

fn hash_policy(rates: [f64; 3]) -> PairingPolicy {
    PairingPolicy::HashAssign { positive_rate: rates }
}

#[test]
fn explicit_map_single_pair() {
    let m = manifest(&[("a", ClassLabel::Mitosis, Split::Train)]);
    let c = CohortIndex::new(vec!["p1".into()], vec![1], vec![Split::Train]).unwrap();
    let map = read_pairing_table("patch_id,row_id\na,p1\n").unwrap();
    let paired = pair_modalities(&m, &c, &PairingPolicy::ExplicitMap, Some(&map), 0).unwrap();
    assert_eq!(paired.pairs.len(), 1);
    assert_eq!((paired.pairs[0].patch_id.as_str(), paired.pairs[0].row_id.as_str()), ("a", "p1"));
    assert_eq!(paired.pairs[0].split, Split::Train);
    assert_eq!(paired.policy, "explicit-map");
}

#[test]
fn explicit_map_lists_every_unmatched_patch() {
    let m = manifest(&[
        ("a", ClassLabel::Tumour, Split::Train),
        ("b", ClassLabel::Tumour, Split::Train),
        ("c", ClassLabel::Tumour, Split::Train),
    ]);
    let c = CohortIndex::new(vec!["p1".into()], vec![0], vec![Split::Train]).unwrap();
    // "b" is absent, "c" names an unknown patient
    let map = read_pairing_table("patch_id,row_id\na,p1\nc,p9\n").unwrap();
    match pair_modalities(&m, &c, &PairingPolicy::ExplicitMap, Some(&map), 0) {
        Err(e @ PipelineError::Unmatched(_)) => {
            assert_eq!(e.exit_code(), 2);
            let PipelineError::Unmatched(ids) = e else { unreachable!() };
            assert_eq!(ids, vec!["b".to_string(), "c".to_string()]);
        }
        other => panic!("expected unmatched ids, got {other:?}"),
    }
}

#[test]
fn explicit_map_rejects_pairs_across_splits() {
    let m = manifest(&[("a", ClassLabel::Tumour, Split::Test)]);
    let c = CohortIndex::new(vec!["p1".into()], vec![0], vec![Split::Train]).unwrap();
    let map = read_pairing_table("patch_id,row_id\na,p1\n").unwrap();
    assert!(pair_modalities(&m, &c, &PairingPolicy::ExplicitMap, Some(&map), 0).is_err());
}

#[test]
fn pairing_table_needs_its_columns_and_unique_patches() {
    assert!(read_pairing_table("patch,row\na,b\n").is_err());
    assert!(read_pairing_table("patch_id,row_id\na,b\na,c\n").is_err());
}

#[test]
fn hash_assign_is_deterministic_per_seed() {
    let entries: Vec<(String, ClassLabel, Split)> = (0..300)
        .map(|i| (format!("x{i}"), ClassLabel::ALL[i % 3], Split::Train))
        .collect();
    let refs: Vec<(&str, ClassLabel, Split)> = entries.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect();
    let m = manifest(&refs);
    let c = cohort(90, 0.3);
    let p = hash_policy([0.1, 0.1, 0.9]);
    let a = pair_modalities(&m, &c, &p, None, 5).unwrap();
    assert_eq!(a, pair_modalities(&m, &c, &p, None, 5).unwrap());
    assert_ne!(a, pair_modalities(&m, &c, &p, None, 6).unwrap());
    // each patch's draw is independent of the other manifest rows
    let half = manifest(&refs[150..]);
    assert_eq!(pair_modalities(&half, &c, &p, None, 5).unwrap().pairs, a.pairs[150..]);
}

#[test]
fn hash_assign_honours_the_class_mixture() {
    let n = 10_000;
    let entries: Vec<(String, ClassLabel, Split)> = (0..n)
        .map(|i| (format!("patch_{i:05}"), if i % 2 == 0 { ClassLabel::Mitosis } else { ClassLabel::Tumour }, Split::Train))
        .collect();
    let refs: Vec<(&str, ClassLabel, Split)> = entries.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect();
    let c = cohort(3000, 0.2);
    let positive: BTreeMap<&str, usize> = c.row_ids.iter().map(String::as_str).zip(c.labels.iter().copied()).collect();
    let paired = pair_modalities(&manifest(&refs), &c, &hash_policy([0.15, 0.5, 0.9]), None, 11).unwrap();
    let rate = |class: ClassLabel| {
        let ps: Vec<_> = paired.pairs.iter().filter(|p| p.class == class).collect();
        ps.iter().filter(|p| positive[p.row_id.as_str()] == 1).count() as f64 / ps.len() as f64
    };
    let (mit, tum) = (rate(ClassLabel::Mitosis), rate(ClassLabel::Tumour));
    assert!((mit - 0.9).abs() <= 0.02, "mitosis rate {mit}");
    assert!((tum - 0.15).abs() <= 0.02, "tumour rate {tum}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pairs_exist_and_agree_on_split(
        classes in prop::collection::vec(0usize..3, 1..80),
        splits in prop::collection::vec(0usize..3, 80),
        n in 6usize..60,
        prevalence in 0.0f64..=1.0,
        seed in any::<u64>(),
        rates in prop::array::uniform3(0.0f64..=1.0),
    ) {
        let entries: Vec<(String, ClassLabel, Split)> = classes
            .iter()
            .enumerate()
            .map(|(i, &k)| (format!("q{i}"), ClassLabel::ALL[k], Split::from_index(splits[i])))
            .collect();
        let refs: Vec<(&str, ClassLabel, Split)> = entries.iter().map(|(a, b, c)| (a.as_str(), *b, *c)).collect();
        let m = manifest(&refs);
        let c = cohort(n, prevalence);
        let split_of: BTreeMap<&str, Split> = c.row_ids.iter().map(String::as_str).zip(c.splits.iter().copied()).collect();
        let paired = pair_modalities(&m, &c, &hash_policy(rates), None, seed).unwrap();
        prop_assert_eq!(paired.pairs.len(), m.entries.len());
        for (p, e) in paired.pairs.iter().zip(&m.entries) {
            prop_assert_eq!(&p.patch_id, &e.patch_id);
            prop_assert_eq!(p.split, e.split);
            prop_assert_eq!(split_of[p.row_id.as_str()], e.split);
        }
    }
}

#[test]
fn empty_cohort_is_rejected() {
    let m = manifest(&[("a", ClassLabel::Tumour, Split::Train)]);
    let c = CohortIndex::new(vec![], vec![], vec![]).unwrap();
    assert!(pair_modalities(&m, &c, &hash_policy([0.5; 3]), None, 0).is_err());
}

// ---- comparison ----

fn report(name: &str, counts: Vec<Vec<u64>>, classes: &[&str]) -> EvaluationReport {
    let cm = ConfusionMatrix::from_counts(classes.iter().map(|s| s.to_string()).collect(), counts).unwrap();
    EvaluationReport::from_confusion(name, cm)
}

#[test]
fn identical_reports_have_zero_deltas() {
    let r = report("a", vec![vec![8, 2], vec![1, 4]], &["x", "y"]);
    let mut r2 = r.clone();
    r2.model = "b".into();
    let cmp = compare_models(&[r, r2]).unwrap();
    for d in &cmp.deltas {
        assert_eq!((d.accuracy, d.macro_f1), (0.0, 0.0));
    }
    assert_eq!(cmp.minority_class, "y");
    let csv = cmp.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("model,accuracy,macro_f1,macro_auc,minority_auc,delta_accuracy"));
}

#[test]
fn comparison_deltas_are_against_the_first_report() {
    let a = report("a", vec![vec![5, 5], vec![5, 5]], &["x", "y"]);
    let b = report("b", vec![vec![10, 0], vec![0, 10]], &["x", "y"]);
    let cmp = compare_models(&[a, b]).unwrap();
    assert_eq!(cmp.deltas[1].accuracy, 0.5);
    assert_eq!(cmp.deltas[1].macro_f1, 0.5);
    // ties in support go to the first class
    assert_eq!(cmp.minority_class, "x");
}

#[test]
fn comparison_preconditions() {
    let a = report("a", vec![vec![1, 0], vec![0, 1]], &["x", "y"]);
    assert!(compare_models(std::slice::from_ref(&a)).is_err());
    assert!(compare_models(&[]).is_err());
    let b = report("b", vec![vec![1, 0], vec![0, 1]], &["x", "z"]);
    assert!(compare_models(&[a, b]).is_err());
}

// ---- run directory ----

#[test]
fn missing_input_names_the_path_and_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let e = run_stage(&tiny(0), Stage::TrainCnn, dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("manifest_train.json"), "{e}");
    assert!(!dir.path().join(LOCK_FILE).exists(), "lock released after failure");
}

#[test]
fn changed_config_is_refused_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    run_stage(&tiny(0), Stage::SynthCohort, dir.path()).unwrap();
    let before = fs::read(dir.path().join("cohort/cohort.csv")).unwrap();
    let e = run_stage(&tiny(1), Stage::SynthCohort, dir.path()).unwrap_err();
    assert!(matches!(e, PipelineError::ConfigMismatch { .. }));
    assert_eq!(e.exit_code(), 2);
    assert_eq!(fs::read(dir.path().join("cohort/cohort.csv")).unwrap(), before);
    run_stage(&tiny(0), Stage::SynthCohort, dir.path()).unwrap();
}

#[test]
fn lock_file_excludes_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "1").unwrap();
    let e = run_stage(&tiny(0), Stage::SynthCohort, dir.path()).unwrap_err();
    assert!(matches!(e, PipelineError::Locked(_)), "{e}");
    assert!(!dir.path().join("cohort").exists());
    fs::remove_file(dir.path().join(LOCK_FILE)).unwrap();
    run_stage(&tiny(0), Stage::SynthCohort, dir.path()).unwrap();
    assert!(!dir.path().join(LOCK_FILE).exists());
}

#[test]
fn stage_names_parse_back() {
    for s in Stage::ALL {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
    }
    assert_eq!("train".parse::<Stage>().unwrap_err().exit_code(), 2);
}

#[test]
fn full_run_writes_reports_ledger_and_digests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = tiny(4);
    let summaries = run_pipeline(&cfg, out).unwrap();
    assert_eq!(summaries.len(), Stage::ALL.len());

    let fusion: serde_json::Value = serde_json::from_slice(&fs::read(out.join("reports/fusion.json")).unwrap()).unwrap();
    let aucs = fusion["per_class_auc"].as_object().unwrap();
    let keys: Vec<&str> = aucs.keys().map(String::as_str).collect();
    assert_eq!(keys, vec!["mitosis", "non_tumour", "tumour"]);
    let gbdt: EvaluationReport = serde_json::from_slice(&fs::read(out.join("reports/gbdt.json")).unwrap()).unwrap();
    let cal = gbdt.calibration.expect("calibration summary");
    assert_eq!((cal.method.as_str(), cal.fitted_on.as_str()), ("isotonic", "val"));
    for f in ["plots/cnn_roc.svg", "plots/comparison_image.svg", "plots/shap_importance.svg", "plots/mlp_training.svg"] {
        assert!(fs::read_to_string(out.join(f)).unwrap().starts_with("<svg"), "{f}");
    }
    let cmp = fs::read_to_string(out.join("reports/comparison_image.csv")).unwrap();
    assert!(cmp.lines().nth(1).unwrap().starts_with("cnn,"));
    assert!(cmp.lines().nth(2).unwrap().starts_with("fusion,"));

    let entries = ledger(out);
    let stages: Vec<&str> = entries.iter().map(|e| e.stage.as_str()).collect();
    assert_eq!(stages, Stage::ALL.map(Stage::name).to_vec());
    for e in &entries {
        assert_eq!(e.config_hash, cfg.hash());
        assert_eq!(e.seed, 4);
        assert!(e.wall_seconds >= 0.0);
        for (rel, digest) in &e.outputs {
            assert_eq!(&sha_hex(&fs::read(out.join(rel)).unwrap()), digest, "{rel}");
        }
    }
    let leftovers: Vec<_> = files_under(out)
        .into_iter()
        .filter(|p| p.to_string_lossy().contains(".tmp-") || p.ends_with(LOCK_FILE))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");

    // rerunning a stage reproduces its digests
    let again = run_stage(&cfg, Stage::TrainGbdt, out).unwrap();
    assert_eq!(again.outputs, entries[6].outputs);

    // the ledger line alone is enough to redo a stage elsewhere
    let entry = &entries[7];
    let replay = tempfile::tempdir().unwrap();
    for rel in &entry.inputs {
        let to = replay.path().join(rel);
        fs::create_dir_all(to.parent().unwrap()).unwrap();
        fs::copy(out.join(rel), to).unwrap();
    }
    for p in files_under(&out.join("patches")) {
        let to = replay.path().join(p.strip_prefix(out).unwrap());
        fs::create_dir_all(to.parent().unwrap()).unwrap();
        fs::copy(&p, to).unwrap();
    }
    let cfg2 = ExperimentConfig::from_toml(&entry.config).unwrap();
    let redo = run_stage(&cfg2, entry.stage.parse().unwrap(), replay.path()).unwrap();
    assert_eq!(redo.outputs, entry.outputs);
}

#[test]
fn training_stages_run_without_any_test_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = tiny(9);
    for s in [Stage::SynthImages, Stage::SynthCohort, Stage::Extract, Stage::PrepTab] {
        run_stage(&cfg, s, out).unwrap();
    }
    let test: PatchManifest = serde_json::from_slice(&fs::read(out.join("patches/manifest_test.json")).unwrap()).unwrap();
    assert!(!test.entries.is_empty());
    for e in &test.entries {
        fs::remove_file(out.join("patches").join(fusiondx_core::patch::patch_relpath(e))).unwrap();
    }
    for f in [
        "patches/manifest_test.json",
        "patches/manifest.json",
        "tabular/neural_test.json",
        "tabular/gbdt_test.json",
        "cohort/cohort.csv",
    ] {
        fs::remove_file(out.join(f)).unwrap();
    }
    for s in [Stage::TrainCnn, Stage::TrainMlp, Stage::TrainGbdt, Stage::TrainFusion] {
        run_stage(&cfg, s, out).unwrap_or_else(|e| panic!("{s}: {e}"));
    }
    assert_eq!(run_stage(&cfg, Stage::Evaluate, out).unwrap_err().exit_code(), 3);
}
