use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use diad::dataset::{generate_synthetic, load_batch, scan_mvtec_layout, DatasetManifest};
use diad::imageio;
use diad::Error;
use diad_core::image::Grid;
use diad_core::synth::{RgbImage, SyntheticSpec};
use sha2::{Digest, Sha256};

fn solid(h: usize, w: usize, v: u8) -> RgbImage {
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            img.set(y, x, [v, v / 2, 255 - v]);
        }
    }
    img
}

fn touch_png(root: &Path, rel: &str) {
    imageio::write_rgb(&root.join(rel), &solid(8, 8, 100)).unwrap();
}

fn touch_mask(root: &Path, rel: &str) {
    let mut m = Grid::zeros(8, 8);
    m.set(2, 3, 1.0);
    imageio::write_mask(&root.join(rel), &m).unwrap();
}

/// Two categories with three training and two test images each.
fn fixture(root: &Path) {
    for cat in ["zeta", "alpha"] {
        for f in ["002.png", "000.png", "001.png"] {
            touch_png(root, &format!("{cat}/train/good/{f}"));
        }
        touch_png(root, &format!("{cat}/test/good/000.png"));
        touch_png(root, &format!("{cat}/test/crack/000.png"));
        touch_mask(root, &format!("{cat}/ground_truth/crack/000_mask.png"));
    }
}

#[test]
fn fixture_tree_is_enumerated_in_lexicographic_order() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let m = scan_mvtec_layout(dir.path()).unwrap();
    assert_eq!(m.categories, ["alpha", "zeta"]);
    let paths: Vec<String> = m
        .entries
        .iter()
        .map(|e| e.path.display().to_string())
        .collect();
    let mut expected = Vec::new();
    for cat in ["alpha", "zeta"] {
        for f in ["000", "001", "002"] {
            expected.push(format!("{cat}/train/good/{f}.png"));
        }
        expected.push(format!("{cat}/test/crack/000.png"));
        expected.push(format!("{cat}/test/good/000.png"));
    }
    assert_eq!(paths, expected);
    assert_eq!(m.image_size, Some((8, 8)));
    for e in &m.entries {
        assert_eq!(
            e.mask.is_some(),
            e.defect == "crack",
            "{}",
            e.path.display()
        );
    }
    assert_eq!(m.indices("train", Some("zeta")), vec![5, 6, 7]);
}

#[test]
fn missing_mask_is_reported_by_file_name() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::remove_file(dir.path().join("zeta/ground_truth/crack/000_mask.png")).unwrap();
    let err = scan_mvtec_layout(dir.path()).unwrap_err().to_string();
    assert!(err.contains("zeta/test/crack/000.png"), "{err}");
    assert!(err.contains("000_mask.png"), "{err}");
}

#[test]
fn empty_test_directory_names_the_category() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::remove_dir_all(dir.path().join("alpha/test")).unwrap();
    std::fs::create_dir_all(dir.path().join("alpha/test/good")).unwrap();
    let err = scan_mvtec_layout(dir.path()).unwrap_err().to_string();
    assert!(err.contains("alpha"), "{err}");
}

#[test]
fn training_split_must_be_defect_free_and_root_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    touch_png(dir.path(), "alpha/train/crack/000.png");
    assert!(matches!(
        scan_mvtec_layout(dir.path()),
        Err(Error::Dataset(_))
    ));
    assert!(scan_mvtec_layout(&dir.path().join("nope")).is_err());
}

#[test]
fn unreadable_image_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    std::fs::write(dir.path().join("alpha/train/good/001.png"), b"not a png").unwrap();
    assert!(matches!(
        scan_mvtec_layout(dir.path()),
        Err(Error::Format { .. })
    ));
}

#[test]
fn manifest_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let m = scan_mvtec_layout(dir.path()).unwrap();
    let csv = dir.path().join("manifest.csv");
    m.write_csv(&csv).unwrap();
    let back = DatasetManifest::read_csv(&csv, dir.path()).unwrap();
    assert_eq!(back.entries, m.entries);
    assert_eq!(back.categories, m.categories);
}

fn tree_hashes(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = Sha256::digest(std::fs::read(&p).unwrap());
                let hex: String = h.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), hex);
            }
        }
    }
    out
}

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_size: 32,
        train_per_category: 4,
        test_good_per_category: 2,
        test_defect_per_category: 3,
        ..SyntheticSpec::default()
    }
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&small_spec(), a.path()).unwrap();
    generate_synthetic(&small_spec(), b.path()).unwrap();
    generate_synthetic(
        &SyntheticSpec {
            seed: 8,
            ..small_spec()
        },
        c.path(),
    )
    .unwrap();
    let (ha, hb, hc) = (
        tree_hashes(a.path()),
        tree_hashes(b.path()),
        tree_hashes(c.path()),
    );
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
    assert_ne!(ha, hc);
}

#[test]
fn default_spec_row_count_matches_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::default();
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    let per_cat =
        spec.train_per_category + spec.test_good_per_category + spec.test_defect_per_category;
    assert_eq!(m.entries.len(), spec.num_categories * per_cat);
    assert_eq!(m.categories, ["blob_noise", "checker", "sinusoidal"]);
    let masks = m.entries.iter().filter(|e| e.mask.is_some()).count();
    assert_eq!(masks, spec.num_categories * spec.test_defect_per_category);
    assert_eq!(m.image_size, Some((64, 64)));
}

#[test]
fn zero_injectors_leave_only_good_test_images() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        injectors: vec![],
        test_defect_per_category: 0,
        ..small_spec()
    };
    let m = generate_synthetic(&spec, dir.path()).unwrap();
    assert!(m
        .entries
        .iter()
        .all(|e| e.defect == "good" && e.mask.is_none()));
    assert!(!m.indices("test", None).is_empty());
}

#[test]
fn written_masks_are_binary_and_match_defects() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small_spec(), dir.path()).unwrap();
    let idx = m.indices("test", None);
    let loaded = load_batch(&m, &idx, (32, 32)).unwrap();
    for (&i, l) in idx.iter().zip(&loaded) {
        match (&l.mask, m.entries[i].is_anomalous()) {
            (Some(mask), true) => {
                assert!(mask.is_binary());
                assert!(mask.count_positive() > 0);
            }
            (None, false) => {}
            other => panic!("unexpected mask state {:?}", other.1),
        }
    }
}

/// Half-pixel-centred bilinear weights for 4 → 8 with edge clamping.
const UP4TO8: [[f64; 4]; 8] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.75, 0.25, 0.0, 0.0],
    [0.25, 0.75, 0.0, 0.0],
    [0.0, 0.75, 0.25, 0.0],
    [0.0, 0.25, 0.75, 0.0],
    [0.0, 0.0, 0.75, 0.25],
    [0.0, 0.0, 0.25, 0.75],
    [0.0, 0.0, 0.0, 1.0],
];

#[test]
fn four_by_four_png_upsamples_like_the_reference_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = RgbImage::new(4, 4);
    for y in 0..4 {
        for x in 0..4 {
            img.set(
                y,
                x,
                [
                    (y * 60 + x * 5) as u8,
                    (x * 70) as u8,
                    ((y * 4 + x) * 15) as u8,
                ],
            );
        }
    }
    touch_png(dir.path(), "cat/train/good/000.png");
    touch_png(dir.path(), "cat/test/good/000.png");
    imageio::write_rgb(&dir.path().join("cat/test/good/000.png"), &img).unwrap();
    let m = scan_mvtec_layout(dir.path()).unwrap();
    let idx = m.indices("test", None);
    let out = &load_batch(&m, &idx, (8, 8)).unwrap()[0].image;
    assert_eq!(out.shape(), &[3, 8, 8]);
    for c in 0..3 {
        for (oy, row_y) in UP4TO8.iter().enumerate() {
            for (ox, row_x) in UP4TO8.iter().enumerate() {
                let mut v = 0.0;
                for (iy, wy) in row_y.iter().enumerate() {
                    for (ix, wx) in row_x.iter().enumerate() {
                        v += wy * wx * f64::from(img.get(iy, ix)[c]) / 255.0;
                    }
                }
                let got = out.data()[c * 64 + oy * 8 + ox];
                assert!((got - v).abs() < 1e-6, "c{c} ({oy},{ox}): {got} vs {v}");
            }
        }
    }
}

#[test]
fn same_size_load_is_identity_and_masks_stay_binary() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&small_spec(), dir.path()).unwrap();
    let idx = m.indices("test", None);
    let same = load_batch(&m, &idx, (32, 32)).unwrap();
    for (&i, l) in idx.iter().zip(&same) {
        let raw = imageio::read_rgb(&m.root.join(&m.entries[i].path))
            .unwrap()
            .to_tensor();
        assert!(l.image.max_abs_diff(&raw).unwrap() < 1e-6);
    }
    for size in [(20, 20), (48, 40), (7, 9)] {
        for l in load_batch(&m, &idx, size).unwrap() {
            assert_eq!(l.image.shape(), &[3, size.0, size.1]);
            if let Some(mask) = l.mask {
                assert_eq!(mask.dims(), size);
                assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
    let order: Vec<usize> = idx.iter().rev().copied().collect();
    let rev = load_batch(&m, &order, (32, 32)).unwrap();
    assert_eq!(rev[0], same[same.len() - 1]);
    assert!(load_batch(&m, &[m.entries.len()], (32, 32)).is_err());
}
