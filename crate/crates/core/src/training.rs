//! Seeded training loops for the three phases: autoencoder, unconditional
//! SD pretraining and SG training with SD frozen.
//!
//! Every batch draws its timesteps and noise from a generator derived from
//! `(seed, phase, batch index)`, and every epoch shuffles from
//! `(seed, phase, epoch)`. Optimizer updates happen every
//! `grad_accumulation` batches and at the end of each epoch, so a run
//! resumed from an epoch boundary replays the uninterrupted run exactly.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autoencoder::{autoencoder_loss_graph, Autoencoder};
use crate::denoiser::{Conditioning, DenoiserAssembly, SgInput};
use crate::diffusion::{forward_diffuse, LatentTensor, NoiseSchedule};
use crate::error::{bad_config, invalid, Error, Result};
use crate::graph::{Graph, Mode, RunningStatUpdate};
use crate::image::{check_image, ImageTensor};
use crate::optim::{apply_running_updates, AdamW, AdamWConfig};
use crate::params::{Grads, ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    TrainAutoencoder,
    PretrainSd,
    TrainSg,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::TrainAutoencoder, Phase::PretrainSd, Phase::TrainSg];

    pub fn name(self) -> &'static str {
        match self {
            Phase::TrainAutoencoder => "train_autoencoder",
            Phase::PretrainSd => "pretrain_sd",
            Phase::TrainSg => "train_sg",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    fn index(self) -> u64 {
        self as u64 + 1
    }

    /// Whether `group` is updated in this phase.
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::TrainAutoencoder => group == ParamGroup::Autoencoder,
            Phase::PretrainSd => group == ParamGroup::Sd,
            Phase::TrainSg => group.is_sg_side(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_accumulation: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stops after this many batches even if epochs remain.
    pub max_batches: Option<u64>,
    /// KL weight of the autoencoder objective.
    pub kl_weight: f64,
}

impl TrainConfig {
    pub fn new(phase: Phase) -> Self {
        Self {
            phase,
            epochs: 1,
            batch_size: 8,
            learning_rate: 1e-4,
            grad_accumulation: 1,
            weight_decay: 0.0,
            seed: 0,
            max_batches: None,
            kl_weight: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(bad_config!(
                "epochs, batch size and gradient accumulation must be positive"
            ));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(bad_config!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(bad_config!("kl weight must be non-negative"));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<AdamW> {
        AdamW::new(AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for one `(seed, phase, stream, index)` tuple.
fn derived_rng(seed: u64, phase: Phase, stream: u64, index: u64) -> ChaCha8Rng {
    let k = splitmix(splitmix(splitmix(seed) ^ phase.index()) ^ stream) ^ index;
    ChaCha8Rng::seed_from_u64(splitmix(k))
}

/// Generator for the timesteps and noise of batch `batch`.
pub fn batch_rng(seed: u64, phase: Phase, batch: u64) -> ChaCha8Rng {
    derived_rng(seed, phase, 1, batch)
}

/// Data order of `epoch`: a seeded Fisher–Yates permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut rng = derived_rng(seed, phase, 2, epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// `n` timesteps drawn uniformly from `0..steps`.
pub fn sample_timesteps(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..steps)).collect()
}

pub fn gaussian<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Training inputs: clean diffusion latents and the images they came from.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserData<'a> {
    pub latents: &'a [LatentTensor],
    pub images: &'a [ImageTensor],
}

/// One logged batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Global batch index within the phase.
    pub batch: u64,
    pub loss: f64,
    pub reconstruction: Option<f64>,
    pub kl: Option<f64>,
}

/// Everything needed to continue a phase: position and optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub phase: Phase,
    /// Next epoch to run.
    pub epoch: usize,
    /// Batches completed so far.
    pub batches: u64,
    pub optimizer: AdamW,
}

impl TrainingState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            phase: config.phase,
            epoch: 0,
            batches: 0,
            optimizer: config.optimizer()?,
        })
    }

    pub fn finished(&self, config: &TrainConfig) -> bool {
        self.epoch >= config.epochs || config.max_batches.is_some_and(|m| self.batches >= m)
    }
}

/// Checksums of every group a phase must not touch.
fn frozen_checksums<F: Scalar>(store: &ParamStore<F>, phase: Phase) -> Vec<(ParamGroup, u64)> {
    ParamGroup::ALL
        .into_iter()
        .filter(|&g| g != ParamGroup::Buffer && !phase.trains(g))
        .map(|g| (g, store.checksum(g)))
        .collect()
}

fn verify_frozen<F: Scalar>(store: &ParamStore<F>, before: &[(ParamGroup, u64)]) -> Result<()> {
    for &(g, sum) in before {
        if store.checksum(g) != sum {
            return Err(Error::FrozenGroupChanged(g.name().into()));
        }
    }
    Ok(())
}

fn check_loss(loss: f64, phase: Phase, batch: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(alloc::format!(
            "{} loss is {loss} at batch {batch}",
            phase.name()
        )))
    }
}

/// Models that own a parameter store.
pub trait Trainable<F: Scalar> {
    fn store(&self) -> &ParamStore<F>;
    fn store_mut(&mut self) -> &mut ParamStore<F>;
}

impl<F: Scalar> Trainable<F> for DenoiserAssembly<F> {
    fn store(&self) -> &ParamStore<F> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

impl<F: Scalar> Trainable<F> for Autoencoder<F> {
    fn store(&self) -> &ParamStore<F> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }
}

/// Gradients of one batch plus the batch-norm statistics it produced.
pub struct BatchOutput<F> {
    pub record: StepRecord,
    pub grads: Grads<F>,
    pub running: Vec<RunningStatUpdate<F>>,
}

/// Shared epoch/batch driver.
fn drive<F: Scalar, M: Trainable<F>, B, S, E>(
    model: &mut M,
    n: usize,
    config: &TrainConfig,
    state: &mut TrainingState,
    mut batch: B,
    mut on_step: S,
    mut on_epoch: E,
) -> Result<()>
where
    B: FnMut(&M, &[usize], &mut ChaCha8Rng, u64) -> Result<BatchOutput<F>>,
    S: FnMut(&StepRecord),
    E: FnMut(&TrainingState, &M) -> Result<()>,
{
    config.validate()?;
    if n == 0 {
        return Err(invalid!("training corpus is empty"));
    }
    if state.phase != config.phase {
        return Err(invalid!(
            "state belongs to phase {} but the config runs {}",
            state.phase.name(),
            config.phase.name()
        ));
    }
    let phase = config.phase;
    model.store_mut().set_frozen_by(|g| !phase.trains(g));
    let frozen = frozen_checksums(model.store(), phase);
    let scale = F::of(1.0 / config.grad_accumulation as f64);
    while !state.finished(config) {
        let order = epoch_order(n, config.seed, phase, state.epoch);
        let mut pending: Option<Grads<F>> = None;
        let mut in_acc = 0;
        for chunk in order.chunks(config.batch_size) {
            if config.max_batches.is_some_and(|m| state.batches >= m) {
                break;
            }
            let mut rng = batch_rng(config.seed, phase, state.batches);
            let mut out = batch(model, chunk, &mut rng, state.batches)?;
            out.record.epoch = state.epoch;
            check_loss(out.record.loss, phase, state.batches)?;
            apply_running_updates(model.store_mut(), &out.running);
            out.grads.scale(scale);
            match &mut pending {
                Some(acc) => acc.accumulate(out.grads),
                None => pending = Some(out.grads),
            }
            in_acc += 1;
            state.batches += 1;
            on_step(&out.record);
            if in_acc == config.grad_accumulation {
                state
                    .optimizer
                    .step(model.store_mut(), &pending.take().expect("accumulated"))?;
                in_acc = 0;
            }
        }
        if let Some(acc) = pending.take() {
            state.optimizer.step(model.store_mut(), &acc)?;
        }
        state.epoch += 1;
        verify_frozen(model.store(), &frozen)?;
        on_epoch(state, model)?;
    }
    Ok(())
}

/// Loss and gradients of the noise-prediction objective on one batch:
/// uniform timesteps and fresh Gaussian noise per image.
pub fn denoiser_batch<F: Scalar>(
    asm: &DenoiserAssembly<F>,
    phase: Phase,
    data: DenoiserData<'_>,
    indices: &[usize],
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Grads<F>, Vec<RunningStatUpdate<F>>)> {
    let n = indices.len();
    let shape = data.latents[indices[0]].shape().to_vec();
    let t = sample_timesteps(rng, n, schedule.steps());
    let mut zt = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n);
    for (&i, &ti) in indices.iter().zip(&t) {
        let e: Tensor<f64> = gaussian(rng, &shape);
        zt.push(forward_diffuse(&data.latents[i], ti, &e, schedule)?.cast::<F>());
        eps.push(e.cast::<F>());
    }
    let mut g = Graph::new(&asm.store, Mode::Train);
    let z = g.input(Tensor::stack(&zt)?);
    let target = g.input(Tensor::stack(&eps)?);
    let cond = match phase {
        Phase::TrainSg => {
            let xs: Vec<Tensor<F>> = indices.iter().map(|&i| data.images[i].cast()).collect();
            let x0 = g.input(Tensor::stack(&xs)?);
            let clean = match asm.net.config.sg_input {
                SgInput::Clean => {
                    let zs: Vec<Tensor<F>> =
                        indices.iter().map(|&i| data.latents[i].cast()).collect();
                    Some(g.input(Tensor::stack(&zs)?))
                }
                SgInput::Noisy => None,
            };
            Conditioning::Image { x0, clean }
        }
        Phase::PretrainSd => Conditioning::None,
        Phase::TrainAutoencoder => {
            return Err(invalid!(
                "the denoiser is not trained in the autoencoder phase"
            ))
        }
    };
    let pred = asm.net.forward(&mut g, z, &t, cond)?;
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0].as_f64();
    let grads = g.backward(loss)?;
    let running = g.take_running_updates();
    Ok((value, grads, running))
}

/// Runs (or resumes) a denoiser phase. `on_step` sees every batch;
/// `on_epoch` runs after each epoch with the state to checkpoint. A fresh
/// SG phase first re-copies the (pretrained) SD weights into the SG clone.
pub fn train_denoiser<F: Scalar>(
    asm: &mut DenoiserAssembly<F>,
    data: DenoiserData<'_>,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    state: &mut TrainingState,
    on_step: impl FnMut(&StepRecord),
    on_epoch: impl FnMut(&TrainingState, &DenoiserAssembly<F>) -> Result<()>,
) -> Result<()> {
    if !matches!(config.phase, Phase::PretrainSd | Phase::TrainSg) {
        return Err(invalid!("{} is not a denoiser phase", config.phase.name()));
    }
    if data.latents.len() != data.images.len() {
        return Err(invalid!(
            "{} latents for {} images",
            data.latents.len(),
            data.images.len()
        ));
    }
    if config.phase == Phase::TrainSg && asm.net.sg.is_none() {
        return Err(bad_config!(
            "the `sd` connection variant has nothing to train in train_sg"
        ));
    }
    if config.phase == Phase::TrainSg && state.batches == 0 {
        asm.sync_sg_from_sd();
    }
    let phase = config.phase;
    drive(
        asm,
        data.latents.len(),
        config,
        state,
        |asm, idx, rng, batch| {
            let (loss, grads, running) = denoiser_batch(asm, phase, data, idx, schedule, rng)?;
            Ok(BatchOutput {
                record: StepRecord {
                    phase,
                    epoch: 0,
                    batch,
                    loss,
                    reconstruction: None,
                    kl: None,
                },
                grads,
                running,
            })
        },
        on_step,
        on_epoch,
    )
}

/// Runs (or resumes) autoencoder training on images in `[0, 1]`, sampling
/// latents with the reparameterization trick.
pub fn train_autoencoder<F: Scalar>(
    ae: &mut Autoencoder<F>,
    images: &[ImageTensor],
    config: &TrainConfig,
    state: &mut TrainingState,
    on_step: impl FnMut(&StepRecord),
    on_epoch: impl FnMut(&TrainingState, &Autoencoder<F>) -> Result<()>,
) -> Result<()> {
    if config.phase != Phase::TrainAutoencoder {
        return Err(invalid!(
            "{} is not the autoencoder phase",
            config.phase.name()
        ));
    }
    for x in images {
        check_image(x)?;
        let (_, h, w) = x.dims3();
        ae.config().latent_shape(h, w)?;
    }
    let kl_weight = config.kl_weight;
    drive(
        ae,
        images.len(),
        config,
        state,
        |ae, idx, rng, batch| {
            let xs: Vec<Tensor<F>> = idx.iter().map(|&i| images[i].cast()).collect();
            let mut g = Graph::new(&ae.store, Mode::Train);
            let x = g.input(Tensor::stack(&xs)?);
            let (mean, logvar) = ae.net.forward_encode(&mut g, x)?;
            let noise = gaussian(rng, g.shape(mean));
            let z = ae.net.forward_sample(&mut g, mean, logvar, noise)?;
            let rec = ae.net.forward_decode(&mut g, z)?;
            let (total, r, k) = autoencoder_loss_graph(&mut g, x, rec, mean, logvar, kl_weight)?;
            let record = StepRecord {
                phase: Phase::TrainAutoencoder,
                epoch: 0,
                batch,
                loss: g.value(total).data()[0].as_f64(),
                reconstruction: Some(g.value(r).data()[0].as_f64()),
                kl: Some(g.value(k).data()[0].as_f64()),
            };
            let grads = g.backward(total)?;
            let running = g.take_running_updates();
            Ok(BatchOutput {
                record,
                grads,
                running,
            })
        },
        on_step,
        on_epoch,
    )
}

/// Sets `latent_scale` to the reciprocal standard deviation of the encoder
/// means over `images`, so diffusion latents have unit variance.
pub fn calibrate_latent_scale<F: Scalar>(
    ae: &mut Autoencoder<F>,
    images: &[ImageTensor],
    batch: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Err(invalid!(
            "cannot calibrate the latent scale on an empty corpus"
        ));
    }
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for chunk in images.chunks(batch.max(1)) {
        for (m, _) in ae.encode_batch(chunk)? {
            for &v in m.data() {
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let std = libm::sqrt(var);
    ae.latent_scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    Ok(ae.latent_scale)
}

/// Batched [`Autoencoder::diffusion_latents`].
pub fn encode_corpus<F: Scalar>(
    ae: &Autoencoder<F>,
    images: &[ImageTensor],
    batch: usize,
) -> Result<Vec<LatentTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        out.extend(ae.diffusion_latents(chunk)?);
    }
    Ok(out)
}
