#![allow(dead_code)]

use std::path::Path;

use diad::config::RunConfig;
use diad::pipeline::Run;

/// Tiny networks on 16×16 images; trains in seconds.
pub fn micro_config() -> RunConfig {
    let sets = [
        "dataset.image_size=16",
        "dataset.synthetic.num_categories=2",
        "dataset.synthetic.train_per_category=6",
        "dataset.synthetic.test_good_per_category=2",
        "dataset.synthetic.test_defect_per_category=3",
        "model.autoencoder.base_channels=4",
        "model.autoencoder.channel_multipliers=[1,2]",
        "model.denoiser.base_channels=8",
        "model.denoiser.channel_multipliers=[1,1,2,2]",
        "model.denoiser.num_heads=2",
        "model.denoiser.time_embed_dim=16",
        "model.denoiser.hint_channels=[4,8]",
        "model.schedule.steps=50",
        "training.autoencoder.epochs=2",
        "training.pretrain_sd.epochs=2",
        "training.train_sg.epochs=2",
        "training.autoencoder.batch_size=4",
        "training.pretrain_sd.batch_size=4",
        "training.train_sg.batch_size=4",
        "scoring.backbone_widths=[4,8,8]",
        "scoring.feature_levels=[1,2]",
        "scoring.sigma=1.0",
        "scoring.pooling_iterations=2",
        "scoring.pooling_kernel=2",
        "scoring.forward_t=50",
        "scoring.ddim_steps=5",
        "scoring.batch_size=4",
    ];
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    RunConfig::desk()
        .with_overrides(&sets)
        .expect("micro config is valid")
}

/// A run rooted at `root` with the micro corpus already generated.
pub fn micro_run(root: &Path) -> Run {
    let config = micro_config();
    let run = Run::new(config.clone(), root, &root.join("run"));
    diad::dataset::generate_synthetic(&config.synthetic().unwrap(), &run.dataset_root()).unwrap();
    run
}
