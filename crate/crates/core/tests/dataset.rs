use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use image::RgbImage;
use polypforge_core::dataset::toy::{
    generate_toy_dataset, render_tile, render_toy_tiles, Motif, MotifRule, ToyClass, ToyDomainSpec,
};
use polypforge_core::dataset::{
    class_distribution, expected_tile_count, split_dataset, tile_region, ClassLabel, DatasetError, DatasetManifest,
    LabelSet, ManifestEntry, Provenance, Split, SplitFractions,
};
use polypforge_core::hashing::sha256_hex;
use proptest::prelude::*;

fn entry(path: &str, label: &str) -> ManifestEntry {
    ManifestEntry {
        path: path.into(),
        label: label.into(),
        split: Split::Train,
        provenance: Provenance::Real,
        source_ref: None,
        generator_ref: None,
        theta: None,
    }
}

fn write_fixture(dir: &Path, n: usize) -> std::path::PathBuf {
    fs::create_dir_all(dir.join("img")).unwrap();
    let mut lines = String::new();
    for i in 0..n {
        RgbImage::new(4, 4).save(dir.join(format!("img/{i}.png"))).unwrap();
        let label = if i % 2 == 0 { "HP" } else { "SSA" };
        lines.push_str(&format!(
            "{{\"path\":\"img/{i}.png\",\"label\":\"{label}\",\"split\":\"train\",\"provenance\":\"real\"}}\n"
        ));
    }
    let p = dir.join("manifest.jsonl");
    fs::write(&p, lines).unwrap();
    p
}

#[test]
fn load_manifest_well_formed_and_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_fixture(dir.path(), 5);
    let m = DatasetManifest::load(&p, &LabelSet::reference()).unwrap();
    assert_eq!(m.len(), 5);
    let tiles = m.load_tiles().unwrap();
    assert_eq!(tiles[1].label(), "SSA");
    assert_eq!(tiles[1].provenance(), Provenance::Real);

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let m = DatasetManifest::load(&empty, &LabelSet::reference()).unwrap();
    assert!(m.is_empty());
    assert_eq!(m.label_set, LabelSet::reference());
}

#[test]
fn load_manifest_error_kinds_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_fixture(dir.path(), 3);
    let labels = LabelSet::reference();

    assert!(matches!(
        DatasetManifest::load(&dir.path().join("nope.jsonl"), &labels),
        Err(DatasetError::MissingFile(_))
    ));

    fs::remove_file(dir.path().join("img/1.png")).unwrap();
    match DatasetManifest::load(&p, &labels) {
        Err(DatasetError::DanglingReference { line, path }) => {
            assert_eq!(line, 2);
            assert!(path.ends_with("img/1.png"));
        }
        other => panic!("expected dangling reference, got {other:?}"),
    }

    let bad = dir.path().join("bad.jsonl");
    fs::write(
        &bad,
        "{\"path\":\"img/0.png\",\"label\":\"HP\",\"split\":\"train\",\"provenance\":\"real\"}\n{not json\n",
    )
    .unwrap();
    assert!(matches!(DatasetManifest::load(&bad, &labels), Err(DatasetError::MalformedLine { line: 2, .. })));

    fs::write(&bad, "{\"path\":\"img/0.png\",\"label\":\"XYZ\",\"split\":\"train\",\"provenance\":\"real\"}\n")
        .unwrap();
    assert!(matches!(DatasetManifest::load(&bad, &labels), Err(DatasetError::UnknownLabel { line: 1, .. })));

    fs::write(&bad, "{\"path\":\"img/0.png\",\"label\":\"HP\",\"split\":\"train\",\"provenance\":\"synthetic\"}\n")
        .unwrap();
    assert!(matches!(DatasetManifest::load(&bad, &labels), Err(DatasetError::InvalidEntry { line: 1, .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_fixture(dir.path(), 6);
    let labels = LabelSet::reference();
    let mut m = DatasetManifest::load(&p, &labels).unwrap();
    m.entries[0].split = Split::Test;
    m.entries[1].theta = Some(0.25);
    m.entries[2].source_ref = Some("slide7@0,0,224".into());
    let q = dir.path().join("copy.jsonl");
    m.write(&q).unwrap();
    let back = DatasetManifest::load(&q, &labels).unwrap();
    assert_eq!(back.entries, m.entries);
    assert_eq!(back.label_set, m.label_set);
}

#[test]
fn label_set_rejects_duplicates() {
    let r = LabelSet::new(vec![ClassLabel::new("HP", false), ClassLabel::new("HP", true)]);
    assert!(matches!(r, Err(DatasetError::DuplicateLabel(_))));
    let r = LabelSet::reference();
    assert!(r.get("SSA").unwrap().is_adenomatous);
    assert!(!r.get("NO").unwrap().is_adenomatous);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn tiling_count_matches_closed_form(w in 1u32..80, h in 1u32..80, t in 1u32..40, s in 1u32..30) {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let out = tile_region(&img, "src", "HP", t, s).unwrap();
        let mut enumerated = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if x % s == 0 && y % s == 0 && x + t <= w && y + t <= h {
                    enumerated.push((x, y));
                }
            }
        }
        prop_assert_eq!(out.tiles.len(), enumerated.len());
        prop_assert_eq!(expected_tile_count(w, h, t, s), enumerated.len());
        for (tile, (x, y)) in out.tiles.iter().zip(&enumerated) {
            prop_assert_eq!(tile.width(), t);
            prop_assert_eq!(tile.pixels().get_pixel(0, 0)[0], *x as u8);
            prop_assert_eq!(tile.pixels().get_pixel(0, 0)[1], *y as u8);
        }
        prop_assert_eq!(out.warning.is_some(), t > w || t > h);
    }
}

fn flat_manifest(counts: &[(&str, usize)]) -> DatasetManifest {
    let mut entries = Vec::new();
    for (label, n) in counts {
        for i in 0..*n {
            entries.push(entry(&format!("{label}/{i}.png"), label));
        }
    }
    DatasetManifest::new("/nonexistent", LabelSet::reference(), entries).unwrap()
}

fn split_counts(m: &DatasetManifest, label: &str) -> [usize; 3] {
    let mut c = [0; 3];
    for e in m.entries.iter().filter(|e| e.label == label) {
        c[Split::ALL.iter().position(|s| *s == e.split).unwrap()] += 1;
    }
    c
}

#[test]
fn split_examples() {
    let m = flat_manifest(&[("HP", 100)]);
    let s = split_dataset(&m, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 7).unwrap();
    assert_eq!(split_counts(&s, "HP"), [80, 10, 10]);
    let all = split_dataset(&m, SplitFractions::new(1.0, 0.0, 0.0).unwrap(), 7).unwrap();
    assert!(all.entries.iter().all(|e| e.split == Split::Train));
    let again = split_dataset(&m, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 7).unwrap();
    assert_eq!(s.entries, again.entries);
    let other = split_dataset(&m, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 8).unwrap();
    assert_ne!(s.entries, other.entries);
    assert!(SplitFractions::new(0.5, 0.6, -0.1).is_err());
}

#[test]
fn split_underflow_is_explicit() {
    let m = flat_manifest(&[("HP", 50), ("SSA", 2)]);
    let err = split_dataset(&m, SplitFractions::new(0.8, 0.1, 0.1).unwrap(), 0).unwrap_err();
    assert!(matches!(err, DatasetError::SplitUnderflow { ref class, groups: 2, buckets: 3 } if class == "SSA"));
}

#[test]
fn split_keeps_source_images_together() {
    let mut entries = Vec::new();
    for slide in 0..30 {
        for crop in 0..4 {
            let mut e = entry(&format!("t/{slide}_{crop}.png"), if slide % 3 == 0 { "TA" } else { "NO" });
            e.source_ref = Some(format!("slide{slide}@{crop},0,224"));
            entries.push(e);
        }
    }
    let m = DatasetManifest::new("/x", LabelSet::reference(), entries).unwrap();
    let s = split_dataset(&m, SplitFractions::new(0.6, 0.2, 0.2).unwrap(), 3).unwrap();
    let mut by_slide: BTreeMap<&str, HashSet<Split>> = BTreeMap::new();
    for e in &s.entries {
        by_slide.entry(e.source_image_id()).or_default().insert(e.split);
    }
    assert!(by_slide.values().all(|s| s.len() == 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]
    #[test]
    fn stratified_split_within_one_entry(a in 3usize..120, b in 3usize..120, c in 3usize..60, seed in 0u64..1000,
                                        tr in 1u32..8, va in 1u32..8, te in 1u32..8) {
        let sum = (tr + va + te) as f64;
        let f = SplitFractions::new(tr as f64 / sum, va as f64 / sum, 1.0 - (tr + va) as f64 / sum).unwrap();
        let m = flat_manifest(&[("HP", a), ("TA", b), ("SSA", c)]);
        let s = split_dataset(&m, f, seed).unwrap();
        for (label, n) in [("HP", a), ("TA", b), ("SSA", c)] {
            let got = split_counts(&s, label);
            for (k, frac) in [f.train, f.val, f.test].iter().enumerate() {
                let exact = frac * n as f64;
                prop_assert!((got[k] as f64 - exact).abs() <= 1.0 + 1e-9, "{label}: {got:?} vs {exact}");
            }
            prop_assert_eq!(got.iter().sum::<usize>(), n);
        }
    }
}

#[test]
fn class_distribution_examples() {
    let d = class_distribution(&flat_manifest(&[("HP", 50), ("SSA", 50)])).unwrap();
    assert_eq!(d.get("HP").unwrap().fraction, 0.5);
    assert_eq!(d.get("SSA").unwrap().fraction, 0.5);

    let d = class_distribution(&flat_manifest(&[("HP", 10), ("NO", 20), ("TA", 70)])).unwrap();
    assert!((d.get("HP").unwrap().fraction - 0.1).abs() < 1e-12);
    assert!((d.get("NO").unwrap().fraction - 0.2).abs() < 1e-12);
    assert!((d.get("TA").unwrap().fraction - 0.7).abs() < 1e-12);

    // Figure-2 shaped fixture: TA and SSA at 14.8% and 3.3% of 1000 tiles.
    let d = class_distribution(&flat_manifest(&[("NO", 500), ("HP", 219), ("TVA", 100), ("TA", 148), ("SSA", 33)]))
        .unwrap();
    assert!((d.get("TA").unwrap().fraction - 0.148).abs() < 1e-12);
    assert!((d.get("SSA").unwrap().fraction - 0.033).abs() < 1e-12);
    let total: f64 = d.rows.iter().map(|(_, s)| s.fraction).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert_eq!(d.total(), 1000);

    let empty = DatasetManifest::new("/x", LabelSet::reference(), vec![]).unwrap();
    assert!(matches!(class_distribution(&empty), Err(DatasetError::EmptyDistribution)));
}

fn toy_class(name: &str, motif: Motif, count: usize, lo: f64, hi: f64) -> ToyClass {
    ToyClass { name: name.into(), adenomatous: motif != Motif::PlainDisk, motif, count, feature_strength: [lo, hi] }
}

#[test]
fn toy_dataset_counts_theta_and_determinism() {
    let spec = ToyDomainSpec::new(
        32,
        1,
        vec![toy_class("NO", Motif::PlainDisk, 100, 0.0, 1.0), toy_class("SSA", Motif::StripedDisk, 100, 0.0, 1.0)],
    );
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_toy_dataset(&spec, a.path()).unwrap();
    let mb = generate_toy_dataset(&spec, b.path()).unwrap();
    assert_eq!(ma.len(), 200);
    assert!(ma.entries.iter().all(|e| e.theta.is_some()));
    assert_eq!(ma.entries, mb.entries);
    for e in &ma.entries {
        let ha = sha256_hex(&fs::read(a.path().join(&e.path)).unwrap());
        let hb = sha256_hex(&fs::read(b.path().join(&e.path)).unwrap());
        assert_eq!(ha, hb, "{}", e.path);
    }
    let reloaded = DatasetManifest::load(&a.path().join("manifest.jsonl"), &spec.label_set()).unwrap();
    assert_eq!(reloaded.entries, ma.entries);
}

#[test]
fn toy_spec_json_schema_and_validation() {
    let text = r#"{"image_size": 32, "seed": 4, "classes": [
        {"name": "NO", "motif": "plain_disk", "count": 3},
        {"name": "SSA", "adenomatous": true, "motif": "striped_disk", "count": 2, "feature_strength": [0.2, 0.9]}
    ], "splits": {"train": 1.0, "val": 0.0, "test": 0.0}}"#;
    let spec = ToyDomainSpec::from_json(text).unwrap();
    assert_eq!(spec.classes[1].feature_strength, [0.2, 0.9]);
    let bad = text.replace("[0.2, 0.9]", "[0.2, 1.5]");
    assert!(matches!(ToyDomainSpec::from_json(&bad), Err(DatasetError::InvalidToySpec { .. })));
}

#[test]
fn pixel_rule_separates_toy_classes() {
    let spec = ToyDomainSpec::new(
        32,
        11,
        vec![
            toy_class("NO", Motif::PlainDisk, 200, 1.0, 1.0),
            toy_class("SSA", Motif::StripedDisk, 200, 0.2, 1.0),
            toy_class("HP", Motif::RingedDisk, 200, 0.2, 1.0),
        ],
    );
    let rule = MotifRule::for_palette(&spec.palette);
    let tiles = render_toy_tiles(&spec).unwrap();
    let correct = tiles.iter().filter(|t| rule.classify(t.pixels()) == spec.class(t.label()).unwrap().motif).count();
    let acc = correct as f64 / tiles.len() as f64;
    assert!(acc >= 0.99, "rule accuracy {acc}");
}

#[test]
fn zero_strength_striped_tile_reads_as_plain() {
    let spec = ToyDomainSpec::new(32, 0, vec![toy_class("SSA", Motif::StripedDisk, 1, 0.0, 0.0)]);
    let rule = MotifRule::for_palette(&spec.palette);
    for seed in 0..20 {
        assert_eq!(rule.classify(&render_tile(&spec, Motif::StripedDisk, 0.0, seed)), Motif::PlainDisk);
        assert_eq!(rule.classify(&render_tile(&spec, Motif::StripedDisk, 1.0, seed)), Motif::StripedDisk);
    }
}

#[test]
fn motif_score_is_nondecreasing_in_theta() {
    let spec = ToyDomainSpec::new(32, 0, vec![toy_class("x", Motif::StripedDisk, 1, 0.0, 1.0)]);
    let rule = MotifRule::for_palette(&spec.palette);
    for motif in [Motif::StripedDisk, Motif::RingedDisk, Motif::PlainDisk] {
        for seed in 0..25 {
            let scores: Vec<f64> =
                (0..=10).map(|k| rule.score(&render_tile(&spec, motif, k as f64 / 10.0, seed), motif)).collect();
            for w in scores.windows(2) {
                assert!(w[1] >= w[0], "{motif:?} seed {seed}: {scores:?}");
            }
        }
    }
}
