use fusiondx_core::autodiff::Tensor;
use fusiondx_core::patch::*;
use fusiondx_core::split::Split;
use image::RgbImage;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn single_mitosis_point() {
    let set = parse_annotations(r#"{"mitosis": [{"x": 0.5, "y": 0.5}]}"#, "s", 128, 128).unwrap();
    assert_eq!(set.records.len(), 1);
    assert_eq!(set.records[0].class, ClassLabel::Mitosis);
}

#[test]
fn empty_lists_give_empty_set() {
    let set = parse_annotations(r#"{"mitosis": [], "tumour": []}"#, "s", 128, 128).unwrap();
    assert!(set.records.is_empty());
}

#[test]
fn class_counts_by_enumeration() {
    let doc = r#"{
        "tumour": [{"x": 0.1, "y": 0.1}, {"x": 0.2, "y": 0.2}, {"x": 0.3, "y": 0.3}],
        "non_tumor": [{"x": 0.4, "y": 0.4}, {"x": 0.5, "y": 0.5}],
        "mitosis": [{"x": 0.6, "y": 0.6}]
    }"#;
    let set = parse_annotations(doc, "s", 128, 128).unwrap();
    assert_eq!(set.class_counts(), [3, 2, 1]);
}

#[test]
fn random_points_all_extracted_in_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = RgbImage::from_fn(300, 200, |x, y| image::Rgb([x as u8, y as u8, (x ^ y) as u8]));
    let mut set = AnnotationSet::new("s", 300, 200);
    for _ in 0..50 {
        set.records.push(AnnotationRecord {
            class: ClassLabel::from_index(rng.random_range(0..3)).unwrap(),
            x: rng.random(),
            y: rng.random(),
        });
    }
    let (patches, m) = extract_patches(&img, &set, 64).unwrap();
    assert_eq!(m.entries.len(), 50);
    assert_eq!(patches.len(), 50);
    m.validate(|_| Some((300, 200))).unwrap();
    for (p, e) in patches.iter().zip(&m.entries) {
        // window content matches the source at the recorded origin
        assert_eq!(p.get_pixel(0, 0), img.get_pixel(e.col, e.row));
        assert_eq!(p.get_pixel(63, 63), img.get_pixel(e.col + 63, e.row + 63));
    }
}

#[test]
fn identity_augmentation_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.random::<f64>()).collect()).unwrap();
    let out = augment(&t, &AugmentConfig::identity(), &mut rng);
    assert_eq!(out.data(), t.data());
}

#[test]
fn double_hflip_is_identity() {
    let t = Tensor::new(vec![3, 4, 5], (0..60).map(|i| i as f64 / 60.0).collect()).unwrap();
    let d = AugmentDraw {
        hflip: true,
        ..AugmentDraw::IDENTITY
    };
    assert_eq!(apply_draw(&apply_draw(&t, &d), &d).data(), t.data());
}

#[test]
fn hflip_matches_index_reversal() {
    // channel-major 1x2x2: [[a, b], [c, d]]
    let t = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let d = AugmentDraw {
        hflip: true,
        ..AugmentDraw::IDENTITY
    };
    let out = apply_draw(&t, &d);
    let mut expect = vec![0.0; 4];
    for r in 0..2 {
        for c in 0..2 {
            expect[r * 2 + c] = t.data()[r * 2 + (1 - c)];
        }
    }
    assert_eq!(out.data(), &expect[..]);
}

#[test]
fn jitter_stays_in_unit_range() {
    let cfg = AugmentConfig {
        brightness: 0.5,
        contrast: 0.5,
        ..AugmentConfig::default()
    };
    let t = Tensor::new(vec![3, 16, 16], (0..768).map(|i| (i % 256) as f64 / 255.0).collect()).unwrap();
    for s in 0..20 {
        let out = augment(&t, &cfg, &mut patch_rng(s, "p", 0));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

fn manifest_of(counts: &[(ClassLabel, usize)]) -> PatchManifest {
    let mut entries = Vec::new();
    for &(c, n) in counts {
        for _ in 0..n {
            entries.push(ManifestEntry {
                patch_id: format!("p{}", entries.len()),
                image_id: "s".into(),
                class: c,
                row: 0,
                col: 0,
                split: Split::Unassigned,
            });
        }
    }
    PatchManifest::new(64, entries)
}

fn split_count(m: &PatchManifest, c: ClassLabel, s: Split) -> usize {
    m.entries.iter().filter(|e| e.class == c && e.split == s).count()
}

#[test]
fn split_eighty_twenty() {
    let m = split_dataset(&manifest_of(&[(ClassLabel::Tumour, 100)]), &[0.8, 0.2], 3, true).unwrap();
    assert_eq!(split_count(&m, ClassLabel::Tumour, Split::Train), 80);
    assert_eq!(split_count(&m, ClassLabel::Tumour, Split::Val), 20);
}

#[test]
fn split_stratified_counts() {
    let base = manifest_of(&[
        (ClassLabel::Tumour, 900),
        (ClassLabel::NonTumour, 90),
        (ClassLabel::Mitosis, 10),
    ]);
    let m = split_dataset(&base, &[0.8, 0.1, 0.1], 5, true).unwrap();
    let train: Vec<usize> = ClassLabel::ALL
        .iter()
        .map(|&c| split_count(&m, c, Split::Train))
        .collect();
    assert_eq!(train, vec![720, 72, 8]);
    assert_eq!(m, split_dataset(&base, &[0.8, 0.1, 0.1], 5, true).unwrap());
    assert!(split_dataset(&base, &[0.8, 0.3], 5, true).is_err());
}

#[test]
fn synth_is_deterministic_and_extractable() {
    let spec = SynthSlideSpec {
        counts: [10, 10, 10],
        seed: 3,
        ..SynthSlideSpec::default()
    };
    let a = synth_slides(&spec).unwrap();
    let b = synth_slides(&spec).unwrap();
    assert_eq!(a[0].image, b[0].image);
    assert_eq!(a[0].annotations, b[0].annotations);
    assert_eq!(a[0].annotations.records.len(), 30);
    let (patches, m) = extract_patches(&a[0].image, &a[0].annotations, PATCH_SIZE).unwrap();
    assert_eq!(patches.len(), 30);
    assert_eq!(m.class_counts, [10, 10, 10]);
    let other = synth_slides(&SynthSlideSpec { seed: 4, ..spec }).unwrap();
    assert_ne!(other[0].image, a[0].image);
}

#[test]
fn annotation_document_reparses_to_same_pixels() {
    let slides = synth_slides(&SynthSlideSpec::default()).unwrap();
    let ann = &slides[0].annotations;
    let back = parse_annotations(&ann.to_document(), &ann.image_id, ann.width, ann.height).unwrap();
    let px = |s: &AnnotationSet| {
        let mut v: Vec<(u32, u32, ClassLabel)> = s
            .records
            .iter()
            .map(|r| (to_pixel(r.x, s.width), to_pixel(r.y, s.height), r.class))
            .collect();
        v.sort();
        v
    };
    assert_eq!(px(&back), px(ann));
}

#[test]
fn patches_round_trip_through_png_folders() {
    let dir = tempfile::tempdir().unwrap();
    let slides = synth_slides(&SynthSlideSpec {
        counts: [2, 2, 2],
        ..SynthSlideSpec::default()
    })
    .unwrap();
    let (patches, m) = extract_patches(&slides[0].image, &slides[0].annotations, PATCH_SIZE).unwrap();
    for (p, e) in patches.iter().zip(&m.entries) {
        let path = dir.path().join(patch_relpath(e));
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, encode_png(p).unwrap()).unwrap();
    }
    assert_eq!(load_patches(dir.path(), &m).unwrap(), patches);
    let json = serde_json::to_string(&m).unwrap();
    assert_eq!(serde_json::from_str::<PatchManifest>(&json).unwrap(), m);
    assert!(m.audit_csv().starts_with("class,count,fraction\ntumour,2,"));
}

proptest! {
    #[test]
    fn normalize_is_a_byte_bijection(bytes in prop::collection::vec(any::<u8>(), 64 * 64 * 3)) {
        let img = RgbImage::from_raw(64, 64, bytes.clone()).unwrap();
        let t = normalize_patch(&img, 64).unwrap();
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(denormalize_patch(&t).into_raw(), bytes);
    }

    #[test]
    fn windows_stay_inside(w in 64u32..200, h in 64u32..200, pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..20)) {
        let img = RgbImage::new(w, h);
        let mut set = AnnotationSet::new("s", w, h);
        set.records = pts.iter().map(|&(x, y)| AnnotationRecord { class: ClassLabel::Tumour, x, y }).collect();
        let (_, m) = extract_patches(&img, &set, 64).unwrap();
        prop_assert_eq!(m.entries.len(), pts.len());
        prop_assert!(m.validate(|_| Some((w, h))).is_ok());
    }

    #[test]
    fn stratified_split_within_one(n0 in 1usize..200, n1 in 1usize..50, n2 in 1usize..20, seed in any::<u64>()) {
        let base = manifest_of(&[(ClassLabel::Tumour, n0), (ClassLabel::NonTumour, n1), (ClassLabel::Mitosis, n2)]);
        let fr = [0.8, 0.1, 0.1];
        let m = split_dataset(&base, &fr, seed, true).unwrap();
        for (c, n) in [(ClassLabel::Tumour, n0), (ClassLabel::NonTumour, n1), (ClassLabel::Mitosis, n2)] {
            let mut total = 0;
            for (k, s) in [Split::Train, Split::Val, Split::Test].into_iter().enumerate() {
                let got = split_count(&m, c, s) as f64;
                prop_assert!((got - fr[k] * n as f64).abs() <= 1.0);
                total += got as usize;
            }
            prop_assert_eq!(total, n);
        }
    }
}
