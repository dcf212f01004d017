mod common;

use diad::checkpoint::{save_autoencoder, save_denoiser, Checkpoint, ModelKind};
use diad::Error;
use diad_core::autoencoder::Autoencoder;
use diad_core::denoiser::build_assembly;
use diad_core::params::ParamGroup;
use diad_core::training::{Phase, TrainingState};

#[test]
fn autoencoder_round_trip_restores_weights_and_optimizer_state() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::micro_config();
    let mut ae = Autoencoder::<f32>::new(config.autoencoder().unwrap(), 99).unwrap();
    ae.latent_scale = 0.731;
    let tc = config.train_config(Phase::TrainAutoencoder);
    let mut state = TrainingState::new(&tc).unwrap();
    state.epoch = 1;
    state.batches = 3;
    state.optimizer.state.step = 3;
    for (k, (id, p)) in ae.store.iter().enumerate() {
        let n = p.value.data().len();
        state
            .optimizer
            .state
            .m
            .insert(id, (0..n).map(|i| (i + k) as f64 * 1e-3).collect());
        state
            .optimizer
            .state
            .v
            .insert(id, (0..n).map(|i| (i * k) as f64 * 1e-7).collect());
    }
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &config, &ae, Some((&state, false))).unwrap();

    let ck = Checkpoint::read(&path).unwrap();
    assert_eq!(ck.kind, ModelKind::Autoencoder);
    assert_eq!(ck.config_hash, config.hash());
    assert_eq!(ck.config, config);
    assert_eq!(ck.phase(), Some(Phase::TrainAutoencoder));
    assert!(!ck.is_complete(Phase::TrainAutoencoder));
    let back = ck.autoencoder().unwrap();
    assert_eq!(back.latent_scale, 0.731);
    assert_eq!(ck.num_tensors(), ae.store.iter().count());
    for g in ParamGroup::ALL {
        assert_eq!(back.store.checksum(g), ae.store.checksum(g));
    }
    let restored = ck
        .training_state(
            &back.store,
            tc.optimizer().unwrap(),
            Phase::TrainAutoencoder,
        )
        .unwrap();
    assert_eq!((restored.epoch, restored.batches), (1, 3));
    assert_eq!(restored.optimizer.state, state.optimizer.state);
    assert!(ck
        .training_state(&back.store, tc.optimizer().unwrap(), Phase::TrainSg)
        .is_err());
}

#[test]
fn denoiser_round_trip_and_kind_checks() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::micro_config();
    let asm = build_assembly::<f32>(config.denoiser().unwrap(), 5).unwrap();
    let path = dir.path().join("d.ckpt");
    save_denoiser(&path, &config, &asm, None).unwrap();
    let ck = Checkpoint::read(&path).unwrap();
    assert!(ck.progress.is_none());
    assert!(!ck.is_complete(Phase::TrainSg));
    let back = ck.denoiser().unwrap();
    for g in ParamGroup::ALL {
        assert_eq!(back.store.checksum(g), asm.store.checksum(g));
    }
    assert!(matches!(ck.autoencoder(), Err(Error::Config(_))));
}

#[test]
fn damaged_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::micro_config();
    let ae = Autoencoder::<f32>::new(config.autoencoder().unwrap(), 1).unwrap();
    let path = dir.path().join("ae.ckpt");
    save_autoencoder(&path, &config, &ae, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(
        Checkpoint::decode(&bytes[..bytes.len() - 8], &path),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        Checkpoint::decode(&bytes[..40], &path),
        Err(Error::Format { .. })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::decode(&magic, &path),
        Err(Error::Format { .. })
    ));
    assert!(matches!(
        Checkpoint::read(&dir.path().join("none.ckpt")),
        Err(Error::Io { .. })
    ));
    assert!(!dir.path().join("ae.tmp").exists());
}

#[test]
fn mismatched_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::micro_config();
    let ae = Autoencoder::<f32>::new(config.autoencoder().unwrap(), 1).unwrap();
    let path = dir.path().join("ae.ckpt");
    let mut other = config.clone();
    other.model.autoencoder.base_channels = 8;
    save_autoencoder(&path, &other, &ae, None).unwrap();
    assert!(matches!(
        Checkpoint::read(&path).unwrap().autoencoder(),
        Err(Error::Config(_))
    ));
}
