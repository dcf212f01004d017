mod common;

use std::path::Path;

use diad::cli::main_with_args;
use diad::report::SavedReport;
use diad_core::metrics::{CategoryMetrics, MetricsReport, Triple};

fn run(root: &Path, args: &[&str]) -> i32 {
    let mut full = vec![
        "diad".to_string(),
        "--output-root".into(),
        root.display().to_string(),
    ];
    full.extend(args.iter().map(|s| s.to_string()));
    main_with_args(full)
}

const MICRO: &[&str] = &[
    "--set",
    "dataset.image_size=32",
    "--set",
    "dataset.synthetic.train_per_category=3",
    "--set",
    "dataset.synthetic.test_good_per_category=1",
    "--set",
    "dataset.synthetic.test_defect_per_category=2",
];

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &[]), 1);
    assert_eq!(run(dir.path(), &["frobnicate"]), 1);
    assert_eq!(run(dir.path(), &["--preset", "nope", "generate-data"]), 1);
    assert_eq!(
        run(dir.path(), &["--set", "scoring.nope=1", "generate-data"]),
        1
    );
    assert_eq!(run(dir.path(), &["train", "--phase", "warmup"]), 1);
    assert_eq!(run(dir.path(), &["ablate", "--study", "colour"]), 1);
    assert_eq!(run(dir.path(), &["--help"]), 0);
}

#[test]
fn missing_prerequisites_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["evaluate"]), 2);
    assert_eq!(run(dir.path(), &["train", "--phase", "train_sg"]), 2);
    assert_eq!(run(dir.path(), &["report", "missing"]), 2);
}

#[test]
fn generate_data_is_deterministic_and_respects_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = MICRO.to_vec();
    a.extend(["generate-data", "--out", "a"]);
    let mut b = MICRO.to_vec();
    b.extend(["generate-data", "--out", "b"]);
    let mut c = MICRO.to_vec();
    c.extend(["--seed", "8", "generate-data", "--out", "c"]);
    for args in [&a, &b, &c] {
        assert_eq!(run(dir.path(), args), 0);
    }
    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    let first = "blob_noise/train/good/000.png";
    assert_eq!(read("a", "manifest.csv"), read("b", "manifest.csv"));
    assert_eq!(read("a", first), read("b", first));
    assert_ne!(read("a", first), read("c", first));
    let cfg = String::from_utf8(read("c", "config.toml")).unwrap();
    assert!(cfg.contains("seed = 8"));
}

fn saved(hash: &str) -> SavedReport {
    let t = Triple {
        auroc: 0.972,
        ap: 0.99,
        f1max: 0.965,
    };
    let c = CategoryMetrics {
        category: "mean".into(),
        image: t,
        pixel: Some(t),
        pro: Some(0.9),
        dice: Some(0.5),
        pixel_threshold: None,
    };
    let report = MetricsReport {
        categories: vec![CategoryMetrics {
            category: "a".into(),
            ..c.clone()
        }],
        mean: c,
    };
    SavedReport::new(hash, &report, 4)
}

#[test]
fn report_renders_and_refuses_mixed_configs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, hash) in [("x", "aaaa"), ("y", "aaaa"), ("z", "bbbb")] {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(
            d.join("metrics.json"),
            serde_json::to_string(&saved(hash)).unwrap(),
        )
        .unwrap();
    }
    assert_eq!(run(dir.path(), &["report", "x", "--out", "one.md"]), 0);
    let md = std::fs::read_to_string(dir.path().join("one.md")).unwrap();
    assert!(md.starts_with("config `aaaa`"));
    assert!(
        md.contains("| mean | 97.2/99.0/96.5 | 97.2/99.0/96.5 | 90.0 | 50.0 |"),
        "{md}"
    );
    assert_eq!(run(dir.path(), &["report", "x", "y", "--out", "two.md"]), 0);
    assert_eq!(run(dir.path(), &["report", "x", "z"]), 1);
}
