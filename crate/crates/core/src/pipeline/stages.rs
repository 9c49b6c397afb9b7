use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::compare::{compare_models, COMPARISON_METRICS};
use super::pairing::{pair_modalities, read_pairing_table, CohortIndex, PairedDataset};
use super::plot::{bar_chart, line_chart, Series};
use super::run::{read_file, StageContext};
use super::{PairingPolicy, PipelineError, Stage};
use crate::autodiff::{Checkpoint, Feed, Tensor};
use crate::eval::{
    argmax, ece, isotonic_fit, platt_fit, reliability_bins, reliability_csv, roc_auc_ovr, youden_threshold,
    CalibrationMethod, CalibrationModel, CalibrationSummary, EvaluationReport,
};
use crate::gbdt::{attribution_csv, global_importance, train_gbdt, Ensemble};
use crate::neural::{
    build_fusion, build_mlp, build_simple_cnn, extract_embedding, grad_cam, heatmap_png, history_csv, overlay_png,
    predict_proba, train_model, Dataset, EpochRecord, Model, TrainOutcome, IMAGE_EMBEDDING_INPUT, IMAGE_INPUT,
    TABULAR_EMBEDDING_INPUT, TABULAR_INPUT,
};
use crate::patch::{
    encode_png, extract_patches, normalize_patch, parse_annotations, patch_relpath, split_dataset, synth_slides,
    ClassLabel, PatchManifest,
};
use crate::split::Split;
use crate::tabular::{
    apply_preprocessor, fit_preprocessor, stratified_split, synth_cohort, DesignMatrix, FeatureTable, TableSchema,
    Target,
};

/// Outcome names of the binary tabular target.
pub const TABULAR_CLASSES: [&str; 2] = ["low_risk", "high_risk"];

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];
const ID_COLUMN: &str = "patient_id";
const LABEL_COLUMN: &str = "label";

/// Preprocessed rows of one cohort split with their outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSplit {
    pub split: Split,
    pub matrix: DesignMatrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SlideInfo {
    image_id: String,
    width: u32,
    height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainSummary {
    parameters: usize,
    best_epoch: Option<usize>,
    best_val_macro_f1: Option<f64>,
    stopped_early: bool,
    epochs_run: usize,
}

pub(crate) fn execute(stage: Stage, ctx: &mut StageContext) -> Result<(), PipelineError> {
    match stage {
        Stage::SynthImages => synth_images_stage(ctx),
        Stage::SynthCohort => synth_cohort_stage(ctx),
        Stage::Extract => extract_stage(ctx),
        Stage::PrepTab => prep_tab_stage(ctx),
        Stage::TrainCnn => train_cnn_stage(ctx),
        Stage::TrainMlp => train_mlp_stage(ctx),
        Stage::TrainGbdt => train_gbdt_stage(ctx),
        Stage::TrainFusion => train_fusion_stage(ctx),
        Stage::Evaluate => evaluate_stage(ctx),
        Stage::ExplainGradcam => explain_gradcam_stage(ctx),
        Stage::ExplainShap => explain_shap_stage(ctx),
    }
}

fn manifest_path(split: Split) -> String {
    format!("patches/manifest_{}.json", split.as_str())
}

fn tabular_path(target: Target, split: Split) -> String {
    let t = match target {
        Target::Neural => "neural",
        Target::Gbdt => "gbdt",
    };
    format!("tabular/{t}_{}.json", split.as_str())
}

fn synth_images_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let mut spec = ctx.config.images.synth.clone();
    spec.seed = ctx.config.derived_seed("synth-images");
    let slides = synth_slides(&spec)?;
    let mut index = Vec::with_capacity(slides.len());
    for s in &slides {
        let id = &s.annotations.image_id;
        ctx.write(&format!("slides/{id}.png"), &encode_png(&s.image)?)?;
        ctx.write(&format!("slides/{id}.json"), s.annotations.to_document().as_bytes())?;
        index.push(SlideInfo {
            image_id: id.clone(),
            width: s.image.width(),
            height: s.image.height(),
        });
    }
    ctx.write_json("slides/index.json", &index)
}

fn extract_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let index: Vec<SlideInfo> = ctx.read_json("slides/index.json")?;
    let size = ctx.config.images.patch_size;
    let mut manifest = PatchManifest::new(size, Vec::new());
    let mut patches = Vec::new();
    for s in &index {
        let bytes = ctx.read(&format!("slides/{}.png", s.image_id))?;
        let image = image::load_from_memory(&bytes)
            .map_err(|e| PipelineError::Data(format!("{}: {e}", s.image_id)))?
            .to_rgb8();
        let doc = String::from_utf8(ctx.read(&format!("slides/{}.json", s.image_id))?)
            .map_err(|e| PipelineError::Data(e.to_string()))?;
        let ann = parse_annotations(&doc, &s.image_id, image.width(), image.height())?;
        let (p, m) = extract_patches(&image, &ann, size)?;
        patches.extend(p);
        manifest.extend(m);
    }
    let extents: BTreeMap<&str, (u32, u32)> = index.iter().map(|s| (s.image_id.as_str(), (s.width, s.height))).collect();
    manifest.validate(|id| extents.get(id).copied())?;
    let cfg = &ctx.config.images;
    let manifest = split_dataset(&manifest, &cfg.split, ctx.config.derived_seed("split-images"), cfg.stratify)?;
    for (e, p) in manifest.entries.iter().zip(&patches) {
        ctx.write(&format!("patches/{}", patch_relpath(e)), &encode_png(p)?)?;
    }
    for split in SPLITS {
        let part = PatchManifest::new(
            size,
            manifest.entries.iter().filter(|e| e.split == split).cloned().collect(),
        );
        ctx.write_json(&manifest_path(split), &part)?;
    }
    ctx.write("patches/audit.csv", manifest.audit_csv().as_bytes())?;
    ctx.write_json("patches/manifest.json", &manifest)
}

fn synth_cohort_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let mut spec = ctx.config.cohort.synth.clone();
    spec.seed = ctx.config.derived_seed("synth-cohort");
    let table = synth_cohort(&spec)?;
    let schema = table.schema(ID_COLUMN, Some(LABEL_COLUMN));
    ctx.write("cohort/cohort.csv", table.to_csv(&schema)?.as_bytes())?;
    ctx.write_json("cohort/schema.json", &schema)
}

fn prep_tab_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let schema: TableSchema = ctx.read_json("cohort/schema.json")?;
    let text = String::from_utf8(ctx.read("cohort/cohort.csv")?).map_err(|e| PipelineError::Data(e.to_string()))?;
    let table = FeatureTable::from_csv(&text, &schema)?;
    let labels = table
        .labels
        .clone()
        .ok_or_else(|| PipelineError::Data("cohort has no label column".into()))?;
    if labels.iter().any(|&l| l > 1) {
        return Err(PipelineError::Data("cohort labels must be 0 or 1".into()));
    }
    let splits = stratified_split(&labels, &ctx.config.cohort.split, ctx.config.derived_seed("split-cohort"))?;
    let idx = |s: Split| -> Vec<usize> { (0..splits.len()).filter(|&i| splits[i] == s).collect() };
    let model = fit_preprocessor(&table.select_rows(&idx(Split::Train)), &ctx.config.cohort.preprocess)?;
    for split in SPLITS {
        let rows = idx(split);
        let part = table.select_rows(&rows);
        for target in [Target::Neural, Target::Gbdt] {
            let out = TabularSplit {
                split,
                matrix: apply_preprocessor(&model, &part, target)?,
                labels: rows.iter().map(|&i| labels[i]).collect(),
            };
            ctx.write_json(&tabular_path(target, split), &out)?;
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([ID_COLUMN, "split"]).expect("in-memory csv");
    for (id, s) in table.row_ids.iter().zip(&splits) {
        w.write_record([id.as_str(), s.as_str()]).expect("in-memory csv");
    }
    ctx.write("tabular/splits.csv", &w.into_inner().expect("in-memory csv"))?;
    ctx.write_json("tabular/preprocessor.json", &model)
}

/// Patch tensors `[N, 3, S, S]` for a manifest, read from `patches/`.
fn load_patch_tensor(ctx: &StageContext, manifest: &PatchManifest) -> Result<Tensor, PipelineError> {
    let s = manifest.patch_size as usize;
    let mut data = Vec::with_capacity(manifest.entries.len() * 3 * s * s);
    for e in &manifest.entries {
        let path = ctx.path(&format!("patches/{}", patch_relpath(e)));
        let img = image::load_from_memory(&read_file(&path)?)
            .map_err(|err| PipelineError::Data(format!("{}: {err}", path.display())))?
            .to_rgb8();
        data.extend_from_slice(normalize_patch(&img, manifest.patch_size)?.data());
    }
    Ok(Tensor::new(vec![manifest.entries.len(), 3, s, s], data).map_err(|e| PipelineError::Data(e.to_string()))?)
}

fn image_dataset(ctx: &StageContext, split: Split) -> Result<(PatchManifest, Dataset), PipelineError> {
    let manifest: PatchManifest = ctx.read_json(&manifest_path(split))?;
    if manifest.entries.is_empty() {
        return Err(PipelineError::Data(format!("{} split has no patches", split.as_str())));
    }
    let mut feed = Feed::new();
    feed.insert(IMAGE_INPUT.into(), load_patch_tensor(ctx, &manifest)?);
    let ids = manifest.entries.iter().map(|e| e.patch_id.clone()).collect();
    let data = Dataset::new(feed, manifest.labels(), ids)?;
    Ok((manifest, data))
}

fn tabular_dataset(part: &TabularSplit) -> Result<Dataset, PipelineError> {
    let mut feed = Feed::new();
    feed.insert(TABULAR_INPUT.into(), part.matrix.to_tensor());
    Ok(Dataset::new(feed, part.labels.clone(), part.matrix.row_ids.clone())?)
}

fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>, PipelineError> {
    model
        .to_checkpoint()
        .to_bytes()
        .map_err(|e| PipelineError::Data(e.to_string()))
}

fn load_model(ctx: &StageContext, rel: &str) -> Result<Model, PipelineError> {
    let ck = Checkpoint::from_bytes(&ctx.read(rel)?).map_err(|e| PipelineError::Data(format!("{rel}: {e}")))?;
    Ok(Model::from_checkpoint(ck)?)
}

fn history_svg(name: &str, history: &[EpochRecord]) -> String {
    let pick = |f: fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        history.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let series = [
        ("train loss", pick(|r| Some(r.train_loss))),
        ("val loss", pick(|r| r.val_loss)),
        ("train accuracy", pick(|r| Some(r.train_acc))),
        ("val accuracy", pick(|r| r.val_acc)),
        ("val macro F1", pick(|r| r.val_macro_f1)),
    ]
    .into_iter()
    .filter(|(_, p)| !p.is_empty())
    .map(|(n, points)| Series {
        name: n.to_string(),
        points,
    })
    .collect::<Vec<_>>();
    line_chart(&format!("{name} training"), "epoch", "value", &series, None, None)
}

fn write_training(ctx: &mut StageContext, name: &str, outcome: &TrainOutcome) -> Result<(), PipelineError> {
    ctx.write(&format!("models/{name}.ckpt"), &checkpoint_bytes(&outcome.model)?)?;
    ctx.write(&format!("models/{name}_history.csv"), history_csv(&outcome.history).as_bytes())?;
    ctx.write(&format!("plots/{name}_training.svg"), history_svg(name, &outcome.history).as_bytes())?;
    ctx.write_json(
        &format!("models/{name}_summary.json"),
        &TrainSummary {
            parameters: outcome.model.num_parameters(),
            best_epoch: outcome.best_epoch,
            best_val_macro_f1: outcome.best_val_macro_f1,
            stopped_early: outcome.stopped_early,
            epochs_run: outcome.history.len(),
        },
    )
}

fn train_cnn_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let (_, train) = image_dataset(ctx, Split::Train)?;
    let (_, val) = image_dataset(ctx, Split::Val)?;
    let cfg = ctx.config;
    let model = build_simple_cnn(&cfg.cnn.model, cfg.derived_seed("init-cnn"))?;
    let mut policy = cfg.cnn.train.clone();
    policy.seed = cfg.derived_seed("train-cnn");
    if let Some(a) = policy.augment.as_mut() {
        a.seed = cfg.derived_seed("augment-cnn");
    }
    let outcome = train_model(model, &train, Some(&val), &policy)?;
    write_training(ctx, "cnn", &outcome)
}

fn train_mlp_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let train: TabularSplit = ctx.read_json(&tabular_path(Target::Neural, Split::Train))?;
    let val: TabularSplit = ctx.read_json(&tabular_path(Target::Neural, Split::Val))?;
    let cfg = ctx.config;
    let mut mcfg = cfg.mlp.model.clone();
    mcfg.input_width = train.matrix.cols;
    let model = build_mlp(&mcfg, cfg.derived_seed("init-mlp"))?;
    let mut policy = cfg.mlp.train.clone();
    policy.seed = cfg.derived_seed("train-mlp");
    let outcome = train_model(model, &tabular_dataset(&train)?, Some(&tabular_dataset(&val)?), &policy)?;
    write_training(ctx, "mlp", &outcome)
}

fn positive(labels: &[usize]) -> Vec<bool> {
    labels.iter().map(|&l| l == 1).collect()
}

fn fit_calibration(
    method: CalibrationMethod,
    scores: &[f64],
    labels: &[usize],
) -> Result<CalibrationModel, PipelineError> {
    let pos = positive(labels);
    Ok(match method {
        CalibrationMethod::Platt => platt_fit(scores, &pos, Split::Val)?,
        CalibrationMethod::Isotonic => {
            let t: Vec<f64> = pos.iter().map(|&b| f64::from(u8::from(b))).collect();
            isotonic_fit(scores, &t, None, Split::Val)?
        }
    })
}

fn gbdt_scores(ensemble: &Ensemble, part: &TabularSplit) -> Result<Vec<f64>, PipelineError> {
    Ok(ensemble.predict_proba(&part.matrix.data, part.matrix.cols)?)
}

fn train_gbdt_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let train: TabularSplit = ctx.read_json(&tabular_path(Target::Gbdt, Split::Train))?;
    let val: TabularSplit = ctx.read_json(&tabular_path(Target::Gbdt, Split::Val))?;
    let mut cfg = ctx.config.gbdt.clone();
    cfg.seed = ctx.config.derived_seed("train-gbdt");
    let out = train_gbdt(&train.matrix, &train.labels, &cfg, Some((&val.matrix, &val.labels)))?;
    ctx.write("models/gbdt.json", out.ensemble.to_json().as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "train_loss", "valid_metric"]).expect("in-memory csv");
    for r in &out.history {
        let v = r.valid_metric.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.round.to_string(), r.train_loss.to_string(), v])
            .expect("in-memory csv");
    }
    ctx.write("models/gbdt_history.csv", &w.into_inner().expect("in-memory csv"))?;
    let loss = Series {
        name: "train loss".into(),
        points: out.history.iter().map(|r| (r.round as f64, r.train_loss)).collect(),
    };
    let metric = Series {
        name: format!("val {:?}", cfg.metric).to_lowercase(),
        points: out
            .history
            .iter()
            .filter_map(|r| r.valid_metric.map(|v| (r.round as f64, v)))
            .collect(),
    };
    let svg = line_chart("gbdt training", "round", "value", &[loss, metric], None, None);
    ctx.write("plots/gbdt_training.svg", svg.as_bytes())?;
    if let Some(method) = ctx.config.evaluate.calibration {
        let cal = fit_calibration(method, &gbdt_scores(&out.ensemble, &val)?, &val.labels)?;
        ctx.write_json("models/gbdt_calibration.json", &cal)?;
    }
    ctx.write_json(
        "models/gbdt_summary.json",
        &serde_json::json!({
            "trees": out.ensemble.trees.len(),
            "best_rounds": out.best_rounds,
            "best_metric": out.best_metric,
            "scale_pos_weight": out.scale_pos_weight,
        }),
    )
}

/// All cohort rows present in the given splits, for pairing.
fn cohort_index(parts: &[&TabularSplit]) -> Result<CohortIndex, PipelineError> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for p in parts {
        ids.extend(p.matrix.row_ids.iter().cloned());
        labels.extend_from_slice(&p.labels);
        splits.extend(std::iter::repeat_n(p.split, p.labels.len()));
    }
    CohortIndex::new(ids, labels, splits)
}

fn pair_split(ctx: &StageContext, manifest: &PatchManifest, cohort: &CohortIndex) -> Result<PairedDataset, PipelineError> {
    let cfg = ctx.config;
    let explicit = match (&cfg.pairing, &cfg.paths.pairing_table) {
        (PairingPolicy::ExplicitMap, Some(p)) => {
            let text = String::from_utf8(read_file(p)?).map_err(|e| PipelineError::Config(e.to_string()))?;
            Some(read_pairing_table(&text)?)
        }
        _ => None,
    };
    pair_modalities(manifest, cohort, &cfg.pairing, explicit.as_ref(), cfg.derived_seed("pairing"))
}

/// Frozen image and tabular embeddings for paired patches, as the fusion head's feed.
fn fusion_feed(
    cnn: &Model,
    mlp: &Model,
    patches: &Feed,
    pairs: &PairedDataset,
    tabular: &TabularSplit,
) -> Result<Feed, PipelineError> {
    let rows: BTreeMap<&str, usize> = tabular
        .matrix
        .row_ids
        .iter()
        .enumerate()
        .map(|(i, r)| (r.as_str(), i))
        .collect();
    let idx: Vec<usize> = pairs
        .pairs
        .iter()
        .map(|p| {
            rows.get(p.row_id.as_str())
                .copied()
                .ok_or_else(|| PipelineError::Data(format!("paired row {} is not in its split", p.row_id)))
        })
        .collect::<Result<_, _>>()?;
    let mut tab = Feed::new();
    tab.insert(TABULAR_INPUT.into(), tabular.matrix.select_rows(&idx).to_tensor());
    let mut feed = Feed::new();
    feed.insert(IMAGE_EMBEDDING_INPUT.into(), extract_embedding(cnn, patches)?);
    feed.insert(TABULAR_EMBEDDING_INPUT.into(), extract_embedding(mlp, &tab)?);
    Ok(feed)
}

fn fusion_dataset(
    ctx: &mut StageContext,
    cnn: &Model,
    mlp: &Model,
    split: Split,
    write_pairs: bool,
) -> Result<(Dataset, Vec<usize>), PipelineError> {
    let (manifest, images) = image_dataset(ctx, split)?;
    let tabular: TabularSplit = ctx.read_json(&tabular_path(Target::Neural, split))?;
    let pairs = pair_split(ctx, &manifest, &cohort_index(&[&tabular])?)?;
    if write_pairs {
        ctx.write(&format!("pairs/pairs_{}.csv", split.as_str()), pairs.to_csv().as_bytes())?;
    }
    let feed = fusion_feed(cnn, mlp, &images.inputs, &pairs, &tabular)?;
    let labels = images.labels.clone();
    Ok((Dataset::new(feed, images.labels, images.ids)?, labels))
}

fn train_fusion_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let cnn = load_model(ctx, "models/cnn.ckpt")?;
    let mlp = load_model(ctx, "models/mlp.ckpt")?;
    let (train, _) = fusion_dataset(ctx, &cnn, &mlp, Split::Train, true)?;
    let (val, _) = fusion_dataset(ctx, &cnn, &mlp, Split::Val, true)?;
    let cfg = ctx.config;
    let mut fcfg = cfg.fusion.model.clone();
    if (fcfg.image_width, fcfg.tabular_width) != (cnn.meta.embedding_width, mlp.meta.embedding_width) {
        log::info!(
            "fusion branch widths set from the trained branches: {} + {}",
            cnn.meta.embedding_width,
            mlp.meta.embedding_width
        );
    }
    fcfg.image_width = cnn.meta.embedding_width;
    fcfg.tabular_width = mlp.meta.embedding_width;
    let model = build_fusion(&fcfg, cfg.derived_seed("init-fusion"))?;
    let mut policy = cfg.fusion.train.clone();
    policy.seed = cfg.derived_seed("train-fusion");
    policy.augment = None;
    let outcome = train_model(model, &train, Some(&val), &policy)?;
    write_training(ctx, "fusion", &outcome)
}

fn roc_svg(name: &str, probs: &[Vec<f64>], labels: &[usize], classes: &[String]) -> Result<String, PipelineError> {
    let roc = roc_auc_ovr(probs, labels, classes.len())?;
    let series: Vec<Series> = classes
        .iter()
        .zip(&roc.per_class)
        .filter_map(|(c, curve)| {
            curve.as_ref().map(|r| Series {
                name: format!("{c} (AUC {:.3})", r.auc),
                points: r.points.iter().map(|p| (p.fpr, p.tpr)).collect(),
            })
        })
        .collect();
    Ok(line_chart(
        &format!("{name} ROC (one-vs-rest)"),
        "false positive rate",
        "true positive rate",
        &series,
        Some((0.0, 1.0)),
        Some((0.0, 1.0)),
    ))
}

fn write_report(
    ctx: &mut StageContext,
    report: &EvaluationReport,
    probs: &[Vec<f64>],
    labels: &[usize],
) -> Result<(), PipelineError> {
    let name = report.model.clone();
    ctx.write(&format!("reports/{name}.json"), report.to_json().as_bytes())?;
    ctx.write(&format!("reports/{name}_confusion.csv"), report.confusion.to_csv().as_bytes())?;
    let roc = roc_auc_ovr(probs, labels, report.class_names.len())?;
    for (class, curve) in report.class_names.iter().zip(&roc.per_class) {
        if let Some(c) = curve {
            ctx.write(&format!("reports/{name}_roc_{class}.csv"), c.to_csv().as_bytes())?;
        }
    }
    let svg = roc_svg(&name, probs, labels, &report.class_names)?;
    ctx.write(&format!("plots/{name}_roc.svg"), svg.as_bytes())
}

fn binary_probs(p: &[f64]) -> Vec<Vec<f64>> {
    p.iter().map(|&p| vec![1.0 - p, p]).collect()
}

fn write_comparison(ctx: &mut StageContext, name: &str, reports: &[EvaluationReport]) -> Result<(), PipelineError> {
    let cmp = compare_models(reports)?;
    ctx.write(&format!("reports/comparison_{name}.csv"), cmp.to_csv().as_bytes())?;
    ctx.write(&format!("reports/comparison_{name}.json"), cmp.to_json().as_bytes())?;
    let categories: Vec<String> = COMPARISON_METRICS
        .iter()
        .map(|m| m.replace("minority", &format!("{} ", cmp.minority_class)).replace('_', " "))
        .collect();
    let series: Vec<(String, Vec<Option<f64>>)> =
        cmp.rows.iter().map(|r| (r.model.clone(), r.values().to_vec())).collect();
    let svg = bar_chart(&format!("{name} models"), "score", &categories, &series);
    ctx.write(&format!("plots/comparison_{name}.svg"), svg.as_bytes())
}

fn evaluate_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let cnn = load_model(ctx, "models/cnn.ckpt")?;
    let mlp = load_model(ctx, "models/mlp.ckpt")?;
    let fusion = load_model(ctx, "models/fusion.ckpt")?;
    let ensemble: Ensemble = ctx.read_json("models/gbdt.json")?;
    let patch_classes = ClassLabel::names();
    let tab_classes: Vec<String> = TABULAR_CLASSES.iter().map(|s| s.to_string()).collect();

    let (_, images) = image_dataset(ctx, Split::Test)?;
    let cnn_probs = predict_proba(&cnn, &images.inputs)?;
    let cnn_report = EvaluationReport::from_probabilities("cnn", &cnn_probs, &images.labels, patch_classes.clone())?;
    write_report(ctx, &cnn_report, &cnn_probs, &images.labels)?;

    let (fusion_data, fusion_labels) = fusion_dataset(ctx, &cnn, &mlp, Split::Test, true)?;
    let fusion_probs = predict_proba(&fusion, &fusion_data.inputs)?;
    let fusion_report =
        EvaluationReport::from_probabilities("fusion", &fusion_probs, &fusion_labels, patch_classes.clone())?;
    write_report(ctx, &fusion_report, &fusion_probs, &fusion_labels)?;
    write_comparison(ctx, "image", &[cnn_report, fusion_report])?;

    let neural_test: TabularSplit = ctx.read_json(&tabular_path(Target::Neural, Split::Test))?;
    let mlp_probs = predict_proba(&mlp, &tabular_dataset(&neural_test)?.inputs)?;
    let mlp_report = EvaluationReport::from_probabilities("mlp", &mlp_probs, &neural_test.labels, tab_classes.clone())?;
    write_report(ctx, &mlp_report, &mlp_probs, &neural_test.labels)?;

    let gbdt_val: TabularSplit = ctx.read_json(&tabular_path(Target::Gbdt, Split::Val))?;
    let gbdt_test: TabularSplit = ctx.read_json(&tabular_path(Target::Gbdt, Split::Test))?;
    let raw = gbdt_scores(&ensemble, &gbdt_test)?;
    let bins = ctx.config.evaluate.ece_bins;
    let pos = positive(&gbdt_test.labels);
    let calibration: Option<CalibrationModel> = match ctx.path("models/gbdt_calibration.json").is_file() {
        true => Some(ctx.read_json("models/gbdt_calibration.json")?),
        false => None,
    };
    let (scores, val_scores) = match &calibration {
        Some(c) => (c.apply_all(&raw), c.apply_all(&gbdt_scores(&ensemble, &gbdt_val)?)),
        None => (raw.clone(), gbdt_scores(&ensemble, &gbdt_val)?),
    };
    let gbdt_probs = binary_probs(&scores);
    let mut gbdt_report =
        EvaluationReport::from_probabilities("gbdt", &gbdt_probs, &gbdt_test.labels, tab_classes.clone())?;
    if let Some(c) = &calibration {
        gbdt_report.calibration = CalibrationSummary::from_models(
            std::slice::from_ref(c),
            Some(ece(&raw, &pos, bins)?),
            Some(ece(&scores, &pos, bins)?),
        );
    }
    match youden_threshold(&val_scores, &positive(&gbdt_val.labels)) {
        Ok(t) => gbdt_report.threshold = Some(t),
        Err(e) => gbdt_report.warnings.push(format!("no validation threshold: {e}")),
    }
    let mut rel = String::new();
    for (tag, p) in [("raw", &raw), ("calibrated", &scores)] {
        let table = reliability_csv(&reliability_bins(p, &pos, bins)?);
        let mut lines = table.lines();
        let header = lines.next().unwrap_or_default();
        if rel.is_empty() {
            rel.push_str(&format!("stage,{header}\n"));
        }
        for line in lines {
            rel.push_str(&format!("{tag},{line}\n"));
        }
    }
    ctx.write("reports/gbdt_reliability.csv", rel.as_bytes())?;
    write_report(ctx, &gbdt_report, &gbdt_probs, &gbdt_test.labels)?;
    write_comparison(ctx, "tabular", &[mlp_report, gbdt_report])
}

fn explain_gradcam_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let mut cnn = load_model(ctx, "models/cnn.ckpt")?;
    let manifest: PatchManifest = ctx.read_json(&manifest_path(Split::Test))?;
    let n = ctx.config.explain.gradcam_patches.min(manifest.entries.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patch_id", "predicted", "peak_row", "peak_col"]).expect("in-memory csv");
    for e in &manifest.entries[..n] {
        let path = ctx.path(&format!("patches/{}", patch_relpath(e)));
        let img = image::load_from_memory(&read_file(&path)?)
            .map_err(|err| PipelineError::Data(format!("{}: {err}", path.display())))?
            .to_rgb8();
        let t = normalize_patch(&img, manifest.patch_size)?;
        let mut batch = Feed::new();
        batch.insert(
            IMAGE_INPUT.into(),
            Tensor::new(
                [vec![1], t.shape().to_vec()].concat(),
                t.data().to_vec(),
            )
            .map_err(|err| PipelineError::Data(err.to_string()))?,
        );
        let pred = argmax(&predict_proba(&cnn, &batch)?[0]);
        let cam = grad_cam(&mut cnn, &t, pred)?;
        let (r, c) = cam.peak();
        ctx.write(&format!("explain/gradcam/{}_heatmap.png", e.patch_id), &heatmap_png(&cam)?)?;
        ctx.write(
            &format!("explain/gradcam/{}_overlay.png", e.patch_id),
            &overlay_png(&img, &cam, ctx.config.explain.overlay_alpha)?,
        )?;
        let pred_name = ClassLabel::from_index(pred).map(ClassLabel::name).unwrap_or("?");
        w.write_record([e.patch_id.as_str(), pred_name, &r.to_string(), &c.to_string()])
            .expect("in-memory csv");
    }
    ctx.write("explain/gradcam/summary.csv", &w.into_inner().expect("in-memory csv"))
}

fn explain_shap_stage(ctx: &mut StageContext) -> Result<(), PipelineError> {
    let ensemble: Ensemble = ctx.read_json("models/gbdt.json")?;
    let test: TabularSplit = ctx.read_json(&tabular_path(Target::Gbdt, Split::Test))?;
    let m = &test.matrix;
    let n = ctx.config.explain.shap_rows.min(m.rows);
    let csv = attribution_csv(&ensemble, &m.row_ids[..n], &m.data[..n * m.cols])?;
    ctx.write("explain/shap/attributions.csv", csv.as_bytes())?;
    let importance = global_importance(&ensemble, &m.data, m.cols)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "feature", "mean_abs_shap"]).expect("in-memory csv");
    for (rank, (j, v)) in importance.iter().enumerate() {
        w.write_record([(rank + 1).to_string(), m.names[*j].clone(), v.to_string()])
            .expect("in-memory csv");
    }
    ctx.write("explain/shap/importance.csv", &w.into_inner().expect("in-memory csv"))?;
    let top: Vec<&(usize, f64)> = importance.iter().take(15).collect();
    let svg = bar_chart(
        "mean |SHAP| (top features)",
        "mean |SHAP| (log-odds)",
        &top.iter().map(|(j, _)| m.names[*j].clone()).collect::<Vec<_>>(),
        &[("gbdt".to_string(), top.iter().map(|(_, v)| Some(*v)).collect())],
    );
    ctx.write("plots/shap_importance.svg", svg.as_bytes())
}
