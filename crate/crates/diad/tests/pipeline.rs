mod common;

use diad::ablation::{run_study, Study, POOLING_GRID};
use diad::checkpoint::Checkpoint;
use diad::pipeline::{
    evaluate, read_log, records, train_all, train_denoiser_phase, Run, TrainOptions,
};
use diad::report::{read_per_image, write_evaluation, ArtifactOptions, SavedReport};
use diad::{gridfile, Error};
use diad_core::metrics::evaluate_dataset;
use diad_core::training::Phase;

fn losses(run: &Run, phase: Phase) -> Vec<f64> {
    read_log(&run.log_path())
        .unwrap()
        .into_iter()
        .filter(|r| r.phase == phase.name())
        .map(|r| r.loss)
        .collect()
}

#[test]
fn full_run_trains_evaluates_and_ablates() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::micro_run(dir.path());
    let outcomes = train_all(&run, &TrainOptions::default()).unwrap();
    assert_eq!(outcomes.len(), 3);
    for (o, phase) in outcomes.iter().zip(Phase::ALL) {
        assert_eq!(o.phase, phase);
        assert!(o.complete && !o.resumed);
        assert_eq!(o.epochs_completed, 2);
        let ck = Checkpoint::read(&run.checkpoint_path(phase)).unwrap();
        assert!(ck.is_complete(phase));
        assert_eq!(ck.config_hash, run.config.hash());
        assert!(!losses(&run, phase).is_empty());
    }
    let n_ckpt = std::fs::read_dir(run.dir.join("checkpoints"))
        .unwrap()
        .count();
    assert_eq!(n_ckpt, 3);

    let again = train_all(&run, &TrainOptions::default()).unwrap();
    assert!(again.iter().all(|o| o.complete && o.resumed));

    let models = run.load_models().unwrap();
    let manifest = run.manifest().unwrap();
    let a = evaluate(&run.config, &models, &manifest, None).unwrap();
    let b = evaluate(&run.config, &models, &manifest, None).unwrap();
    assert_eq!(a.images.len(), 10);
    for (x, y) in a.images.iter().zip(&b.images) {
        assert_eq!(x.image_score.to_bits(), y.image_score.to_bits());
        assert_eq!(x.pixel_map, y.pixel_map);
    }
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.categories.len(), 2);

    let out = run.dir.join("evaluation");
    let saved = write_evaluation(
        &a,
        &out,
        ArtifactOptions {
            heatmaps: true,
            reconstructions: true,
        },
    )
    .unwrap();
    assert_eq!(SavedReport::read(&out.join("metrics.json")).unwrap(), saved);
    let md = std::fs::read_to_string(out.join("metrics.md")).unwrap();
    let cell = has_percent_cell(&md);
    assert!(cell, "{md}");
    let rows = read_per_image(&out.join("per_image.csv")).unwrap();
    assert_eq!(rows.len(), a.images.len());
    let mut reread = a.images.clone();
    for (row, img) in rows.iter().zip(reread.iter_mut()) {
        assert_eq!(row.path, img.entry.path);
        assert_eq!(row.config_hash, run.config.hash());
        assert!(out.join(row.heatmap.as_ref().unwrap()).is_file());
        assert!(out.join("reconstructions").join(&row.path).is_file());
        img.pixel_map = gridfile::read(&out.join(&row.map)).unwrap();
    }
    let from_disk = evaluate_dataset(&records(&reread), &run.config.metrics().unwrap()).unwrap();
    let direct = SavedReport::new(&a.config_hash, &from_disk, reread.len());
    for (x, y) in direct.rows().zip(saved.rows()) {
        assert_eq!(x.category, y.category);
        assert!((x.image_auroc - y.image_auroc).abs() < 1e-12);
        assert!((x.pixel_auroc.unwrap() - y.pixel_auroc.unwrap()).abs() < 1e-4);
    }

    let ddim = run_study(
        &run,
        Study::DdimSteps,
        &Study::DdimSteps.parse_points("1,5,10,20").unwrap(),
        &run.dir.join("abl"),
    )
    .unwrap();
    assert_eq!(ddim.rows.len(), 4);
    assert!(ddim.rows.iter().all(|r| r.wall_time > 0.0));
    let files = ddim.write(&run.dir.join("abl")).unwrap();
    let csv = std::fs::read_to_string(
        files
            .iter()
            .find(|f| f.extension().unwrap() == "csv")
            .unwrap(),
    )
    .unwrap();
    assert!(csv.lines().next().unwrap().contains("wall_time_s"));
    assert_eq!(csv.lines().count(), 5);

    let pool = run_study(
        &run,
        Study::Pooling,
        &Study::Pooling.default_points(&run.config),
        &run.dir.join("abl"),
    )
    .unwrap();
    let labels: Vec<String> = pool.rows.iter().map(|r| r.point.clone()).collect();
    let expected: Vec<String> = POOLING_GRID
        .iter()
        .map(|(i, k)| format!("{i}-{k}"))
        .collect();
    assert_eq!(labels, expected);
    assert!(pool.to_markdown().lines().count() >= 10);
}

/// Looks for a mean row whose image cell reads like `97.2/99.0/96.5`.
fn has_percent_cell(md: &str) -> bool {
    md.lines().filter(|l| l.starts_with("| mean |")).any(|l| {
        let cell = l.split('|').nth(2).unwrap().trim();
        let parts: Vec<&str> = cell.split('/').collect();
        parts.len() == 3
            && parts.iter().all(|p| {
                let (int, frac) = p.split_once('.').unwrap_or(("", ""));
                !int.is_empty() && frac.len() == 1 && p.parse::<f64>().is_ok()
            })
    })
}

#[test]
fn resuming_reproduces_the_uninterrupted_loss_curve() {
    let straight = tempfile::tempdir().unwrap();
    let paused = tempfile::tempdir().unwrap();
    let a = common::micro_run(straight.path());
    let b = common::micro_run(paused.path());
    train_all(&a, &TrainOptions::default()).unwrap();

    let first = train_all(
        &b,
        &TrainOptions {
            stop_after_epochs: Some(1),
        },
    )
    .unwrap();
    assert_eq!(first.len(), 1);
    assert!(!first[0].complete);
    assert_eq!(first[0].epochs_completed, 1);
    let ck = Checkpoint::read(&b.checkpoint_path(Phase::TrainAutoencoder)).unwrap();
    assert!(!ck.is_complete(Phase::TrainAutoencoder));
    let rest = train_all(&b, &TrainOptions::default()).unwrap();
    assert!(rest[0].resumed);
    assert!(rest.iter().all(|o| o.complete));

    for phase in Phase::ALL {
        let (la, lb) = (losses(&a, phase), losses(&b, phase));
        assert_eq!(la.len(), lb.len(), "{}", phase.name());
        for (x, y) in la.iter().zip(&lb) {
            assert!((x - y).abs() <= 1e-6, "{}: {x} vs {y}", phase.name());
        }
    }
}

#[test]
fn skipping_a_phase_without_its_prerequisite_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::micro_run(dir.path());
    let err = train_denoiser_phase(&run, Phase::PretrainSd, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    train_denoiser_phase(&run, Phase::TrainAutoencoder, &TrainOptions::default()).unwrap();
    let err = train_denoiser_phase(&run, Phase::TrainSg, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Missing(_)), "{err}");
    assert!(matches!(run.load_models(), Err(Error::Missing(_))));
}

#[test]
fn changed_settings_refuse_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::micro_run(dir.path());
    train_all(
        &run,
        &TrainOptions {
            stop_after_epochs: Some(1),
        },
    )
    .unwrap();
    let mut other = run.config.clone();
    other.training.autoencoder.learning_rate *= 2.0;
    let changed = Run::new(other, dir.path(), &run.dir);
    assert!(matches!(
        train_all(&changed, &TrainOptions::default()),
        Err(Error::Config(_))
    ));
}
