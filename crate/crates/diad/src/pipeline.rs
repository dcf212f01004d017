//! Training phases, checkpoint bookkeeping and evaluation of a run directory.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use diad_core::autoencoder::Autoencoder;
use diad_core::backbone::ToyBackbone;
use diad_core::denoiser::{build_assembly, DenoiserAssembly};
use diad_core::diffusion::NoiseSchedule;
use diad_core::image::{Grid, ImageTensor};
use diad_core::metrics::{evaluate_dataset, EvalRecord, MetricsReport};
use diad_core::params::ParamGroup;
use diad_core::scoring::{score_batch, AnomalyResult, DiffusionReconstructor};
use diad_core::training::{
    calibrate_latent_scale, encode_corpus, train_autoencoder, train_denoiser, DenoiserData, Phase,
    StepRecord, TrainConfig, TrainingState,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_autoencoder, save_denoiser, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{load_batch, scan_mvtec_layout, DatasetManifest, ManifestEntry};
use crate::error::{Error, IoContext, Result};

/// A run directory and the configuration driving it.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub output_root: PathBuf,
    pub dir: PathBuf,
}

impl Run {
    pub fn new(config: RunConfig, output_root: &Path, dir: &Path) -> Self {
        Self {
            config,
            output_root: output_root.to_path_buf(),
            dir: dir.to_path_buf(),
        }
    }

    pub fn dataset_root(&self) -> PathBuf {
        let root = &self.config.dataset.root;
        if root.is_absolute() {
            root.clone()
        } else {
            self.output_root.join(root)
        }
    }

    pub fn checkpoint_path(&self, phase: Phase) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("{}.ckpt", phase.name()))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn save_config(&self) -> Result<()> {
        self.config.save(&self.config_path())
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let root = self.dataset_root();
        if !root.is_dir() {
            return Err(Error::Missing(format!(
                "dataset {} does not exist (run generate-data first)",
                root.display()
            )));
        }
        scan_mvtec_layout(&root)
    }

    fn image_size(&self) -> (usize, usize) {
        let s = self.config.dataset.image_size;
        (s, s)
    }

    /// All training images of every category, resized to the model size.
    pub fn train_images(&self, manifest: &DatasetManifest) -> Result<Vec<ImageTensor>> {
        let idx = manifest.indices("train", None);
        if idx.is_empty() {
            return Err(Error::Dataset("the training split is empty".into()));
        }
        Ok(load_batch(manifest, &idx, self.image_size())?
            .into_iter()
            .map(|l| l.image)
            .collect())
    }

    fn read_prerequisite(&self, phase: Phase) -> Result<Checkpoint> {
        let path = self.checkpoint_path(phase);
        if !path.is_file() {
            return Err(Error::Missing(format!(
                "phase {} has no checkpoint at {}",
                phase.name(),
                path.display()
            )));
        }
        let ck = Checkpoint::read(&path)?;
        if !ck.is_complete(phase) {
            return Err(Error::Missing(format!(
                "phase {} has not finished",
                phase.name()
            )));
        }
        Ok(ck)
    }

    pub fn load_autoencoder(&self) -> Result<Autoencoder<f32>> {
        let ck = self.read_prerequisite(Phase::TrainAutoencoder)?;
        if ck.config.model.autoencoder != self.config.model.autoencoder {
            return Err(Error::Config(
                "the autoencoder checkpoint was trained with a different architecture".into(),
            ));
        }
        ck.autoencoder()
    }

    pub fn load_denoiser(&self) -> Result<DenoiserAssembly<f32>> {
        let ck = self.read_prerequisite(Phase::TrainSg)?;
        if ck.config.model != self.config.model {
            return Err(Error::Config(
                "the denoiser checkpoint was trained with a different model section".into(),
            ));
        }
        ck.denoiser()
    }

    pub fn load_models(&self) -> Result<Models> {
        Ok(Models {
            autoencoder: self.load_autoencoder()?,
            denoiser: self.load_denoiser()?,
            schedule: self.config.schedule()?,
        })
    }
}

/// Trained networks needed for inference.
#[derive(Debug, Clone)]
pub struct Models {
    pub autoencoder: Autoencoder<f32>,
    pub denoiser: DenoiserAssembly<f32>,
    pub schedule: NoiseSchedule,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    /// Seconds since the command started.
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reconstruction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
}

struct TrainLog {
    out: BufWriter<File>,
    path: PathBuf,
    start: Instant,
    error: Option<Error>,
}

impl TrainLog {
    fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .at(path)?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            start: Instant::now(),
            error: None,
        })
    }

    fn step(&mut self, r: &StepRecord) {
        let rec = LogRecord {
            phase: r.phase.name().into(),
            epoch: r.epoch,
            step: r.batch,
            loss: r.loss,
            wall_time: self.start.elapsed().as_secs_f64(),
            reconstruction: r.reconstruction,
            kl: r.kl,
        };
        let line = serde_json::to_string(&rec).expect("log record serializes");
        if let Err(e) = writeln!(self.out, "{line}") {
            self.error.get_or_insert(Error::io(&self.path, e));
        }
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.out.flush().at(&self.path)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).at(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, e)))
        .collect()
}

/// Limits for a training invocation.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Stop once this many epochs of the phase have completed; a later call
    /// resumes from the saved state.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseOutcome {
    pub phase: Phase,
    pub epochs_completed: usize,
    pub batches: u64,
    pub mean_last_epoch_loss: Option<f64>,
    pub complete: bool,
    pub resumed: bool,
    pub checkpoint: PathBuf,
}

fn limited(tc: &TrainConfig, opts: &TrainOptions) -> TrainConfig {
    let mut t = tc.clone();
    if let Some(n) = opts.stop_after_epochs {
        t.epochs = t.epochs.min(n.max(1));
    }
    t
}

/// Loads the phase's own checkpoint when resuming and checks that it
/// belongs to the same experiment.
fn resume_point(run: &Run, phase: Phase) -> Result<Option<Checkpoint>> {
    let path = run.checkpoint_path(phase);
    if !path.is_file() {
        return Ok(None);
    }
    let ck = Checkpoint::read(&path)?;
    let same = ck.config.model == run.config.model
        && ck.config.seed == run.config.seed
        && ck.config.dataset == run.config.dataset
        && {
            let (a, b) = (
                ck.config.phase_section(phase),
                run.config.phase_section(phase),
            );
            PhaseSectionKey::from(a) == PhaseSectionKey::from(b)
        };
    if !same || ck.phase() != Some(phase) {
        return Err(Error::Config(format!(
            "{} belongs to a different configuration; remove it or use another run directory",
            path.display()
        )));
    }
    Ok(Some(ck))
}

/// Phase settings that must not change across a resume (epochs may grow).
#[derive(PartialEq)]
struct PhaseSectionKey(usize, u64, u64, usize, u64);

impl From<&crate::config::PhaseSection> for PhaseSectionKey {
    fn from(p: &crate::config::PhaseSection) -> Self {
        PhaseSectionKey(
            p.batch_size,
            p.learning_rate.to_bits(),
            p.weight_decay.to_bits() ^ p.kl_weight.to_bits().rotate_left(1),
            p.grad_accumulation,
            p.max_batches,
        )
    }
}

struct EpochMeter {
    sum: f64,
    count: usize,
    last: Option<f64>,
}

impl EpochMeter {
    fn new() -> Self {
        Self {
            sum: 0.0,
            count: 0,
            last: None,
        }
    }

    fn add(&mut self, loss: f64) {
        self.sum += loss;
        self.count += 1;
    }

    fn close(&mut self) {
        if self.count > 0 {
            self.last = Some(self.sum / self.count as f64);
        }
        self.sum = 0.0;
        self.count = 0;
    }
}

/// Keeps a pipeline error raised inside a training callback and hands the
/// trainer a core error so it stops.
fn stash(slot: &std::cell::RefCell<Option<Error>>, r: Result<()>) -> diad_core::Result<()> {
    r.map_err(|e| {
        let msg = e.to_string();
        *slot.borrow_mut() = Some(e);
        diad_core::Error::InvalidArgument(msg)
    })
}

fn settle(trained: diad_core::Result<()>, failure: Option<Error>) -> Result<()> {
    match (trained, failure) {
        (_, Some(e)) => Err(e),
        (r, None) => r.map_err(Error::from),
    }
}

pub fn train_autoencoder_phase(run: &Run, opts: &TrainOptions) -> Result<PhaseOutcome> {
    let phase = Phase::TrainAutoencoder;
    let cfg = &run.config;
    let tc = cfg.train_config(phase);
    let path = run.checkpoint_path(phase);
    let (mut ae, mut state, resumed) = match resume_point(run, phase)? {
        Some(ck) => {
            let ae = ck.autoencoder()?;
            let state = ck.training_state(&ae.store, tc.optimizer()?, phase)?;
            if ck.is_complete(phase) && state.finished(&tc) {
                return Ok(PhaseOutcome {
                    phase,
                    epochs_completed: state.epoch,
                    batches: state.batches,
                    mean_last_epoch_loss: None,
                    complete: true,
                    resumed: true,
                    checkpoint: path,
                });
            }
            (ae, state, true)
        }
        None => (
            Autoencoder::new(cfg.autoencoder()?, cfg.seed)?,
            TrainingState::new(&tc)?,
            false,
        ),
    };
    let manifest = run.manifest()?;
    let images = run.train_images(&manifest)?;
    let mut log = TrainLog::open(&run.log_path())?;
    let mut meter = EpochMeter::new();
    let run_tc = limited(&tc, opts);
    {
        let meter = std::cell::RefCell::new(&mut meter);
        let log = std::cell::RefCell::new(&mut log);
        let failure = std::cell::RefCell::new(None);
        let trained = train_autoencoder(
            &mut ae,
            &images,
            &run_tc,
            &mut state,
            |r| {
                meter.borrow_mut().add(r.loss);
                log.borrow_mut().step(r);
            },
            |s, m| {
                meter.borrow_mut().close();
                let r = log
                    .borrow_mut()
                    .flush()
                    .and_then(|()| save_autoencoder(&path, cfg, m, Some((s, false))));
                stash(&failure, r)
            },
        );
        settle(trained, failure.into_inner())?;
    }
    log.flush()?;
    let complete = state.finished(&tc);
    if complete {
        calibrate_latent_scale(&mut ae, &images, cfg.scoring.batch_size)?;
        save_autoencoder(&path, cfg, &ae, Some((&state, true)))?;
    }
    Ok(PhaseOutcome {
        phase,
        epochs_completed: state.epoch,
        batches: state.batches,
        mean_last_epoch_loss: meter.last,
        complete,
        resumed,
        checkpoint: path,
    })
}

pub fn train_denoiser_phase(run: &Run, phase: Phase, opts: &TrainOptions) -> Result<PhaseOutcome> {
    if phase == Phase::TrainAutoencoder {
        return train_autoencoder_phase(run, opts);
    }
    let cfg = &run.config;
    let tc = cfg.train_config(phase);
    let path = run.checkpoint_path(phase);
    let ae = run.load_autoencoder()?;
    let (mut asm, mut state, resumed) = match resume_point(run, phase)? {
        Some(ck) => {
            let asm = ck.denoiser()?;
            let state = ck.training_state(&asm.store, tc.optimizer()?, phase)?;
            if ck.is_complete(phase) && state.finished(&tc) {
                return Ok(PhaseOutcome {
                    phase,
                    epochs_completed: state.epoch,
                    batches: state.batches,
                    mean_last_epoch_loss: None,
                    complete: true,
                    resumed: true,
                    checkpoint: path,
                });
            }
            (asm, state, true)
        }
        None => {
            let mut asm = build_assembly::<f32>(cfg.denoiser()?, cfg.seed.wrapping_add(1))?;
            if phase == Phase::TrainSg {
                let sd = run.read_prerequisite(Phase::PretrainSd)?;
                sd.load_group(&mut asm.store, ParamGroup::Sd)?;
            }
            (asm, TrainingState::new(&tc)?, false)
        }
    };
    if phase == Phase::TrainSg && !cfg.denoiser()?.connection.has_sg() {
        state.epoch = tc.epochs;
        save_denoiser(&path, cfg, &asm, Some((&state, true)))?;
        return Ok(PhaseOutcome {
            phase,
            epochs_completed: state.epoch,
            batches: 0,
            mean_last_epoch_loss: None,
            complete: true,
            resumed,
            checkpoint: path,
        });
    }
    let manifest = run.manifest()?;
    let images = run.train_images(&manifest)?;
    let latents = encode_corpus(&ae, &images, cfg.scoring.batch_size)?;
    let schedule = cfg.schedule()?;
    let mut log = TrainLog::open(&run.log_path())?;
    let mut meter = EpochMeter::new();
    let run_tc = limited(&tc, opts);
    {
        let meter = std::cell::RefCell::new(&mut meter);
        let log = std::cell::RefCell::new(&mut log);
        let failure = std::cell::RefCell::new(None);
        let trained = train_denoiser(
            &mut asm,
            DenoiserData {
                latents: &latents,
                images: &images,
            },
            &schedule,
            &run_tc,
            &mut state,
            |r| {
                meter.borrow_mut().add(r.loss);
                log.borrow_mut().step(r);
            },
            |s, m| {
                meter.borrow_mut().close();
                let r = log
                    .borrow_mut()
                    .flush()
                    .and_then(|()| save_denoiser(&path, cfg, m, Some((s, s.finished(&tc)))));
                stash(&failure, r)
            },
        );
        settle(trained, failure.into_inner())?;
    }
    log.flush()?;
    Ok(PhaseOutcome {
        phase,
        epochs_completed: state.epoch,
        batches: state.batches,
        mean_last_epoch_loss: meter.last,
        complete: state.finished(&tc),
        resumed,
        checkpoint: path,
    })
}

/// Runs every phase in order, stopping at the first one left unfinished.
pub fn train_all(run: &Run, opts: &TrainOptions) -> Result<Vec<PhaseOutcome>> {
    let mut out = Vec::new();
    for phase in Phase::ALL {
        let o = train_denoiser_phase(run, phase, opts)?;
        let done = o.complete;
        out.push(o);
        if !done {
            break;
        }
    }
    Ok(out)
}

/// Scoring result of one test image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub entry: ManifestEntry,
    pub label: bool,
    pub image_score: f64,
    pub pixel_map: Grid,
    pub mask: Grid,
    pub reconstruction: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub config_hash: String,
    pub report: MetricsReport,
    pub images: Vec<ImageResult>,
    pub wall_time: f64,
}

pub fn records(images: &[ImageResult]) -> Vec<EvalRecord> {
    images
        .iter()
        .map(|r| EvalRecord {
            category: r.entry.category.clone(),
            image_score: r.image_score,
            pixel_map: r.pixel_map.clone(),
            gt_label: r.label,
            gt_mask: Some(r.mask.clone()),
        })
        .collect()
}

/// Reconstructs and scores images in batches of `config.scoring.batch_size`,
/// batches running concurrently. Results keep the input order.
pub fn score_images(
    config: &RunConfig,
    models: &Models,
    images: &[ImageTensor],
) -> Result<Vec<AnomalyResult>> {
    let backbone = ToyBackbone::new(
        &config.scoring.backbone_widths,
        config.scoring.backbone_seed,
    )?;
    let scoring = config.scoring()?;
    let rec = DiffusionReconstructor {
        autoencoder: &models.autoencoder,
        assembly: &models.denoiser,
        schedule: &models.schedule,
        config: config.reconstruction(),
    };
    let chunks: Vec<Vec<AnomalyResult>> = images
        .par_chunks(config.scoring.batch_size.max(1))
        .map(|c| score_batch(c, &rec, &backbone, &scoring).map_err(Error::from))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Scores the test split (optionally one category) and computes metrics.
pub fn evaluate(
    config: &RunConfig,
    models: &Models,
    manifest: &DatasetManifest,
    category: Option<&str>,
) -> Result<Evaluation> {
    config.validate()?;
    let start = Instant::now();
    let idx = manifest.indices("test", category);
    if idx.is_empty() {
        return Err(Error::Dataset(match category {
            Some(c) => format!("category {c} has no test images"),
            None => "the test split is empty".into(),
        }));
    }
    let s = config.dataset.image_size;
    let loaded = load_batch(manifest, &idx, (s, s))?;
    let tensors: Vec<ImageTensor> = loaded.iter().map(|l| l.image.clone()).collect();
    let results = score_images(config, models, &tensors)?;
    let images: Vec<ImageResult> = idx
        .iter()
        .zip(loaded)
        .zip(results)
        .map(|((&i, l), r)| {
            let entry = manifest.entries[i].clone();
            ImageResult {
                label: entry.is_anomalous(),
                mask: l.mask.unwrap_or_else(|| Grid::zeros(s, s)),
                entry,
                image_score: r.image_score,
                pixel_map: r.pixel_map,
                reconstruction: r.reconstruction,
            }
        })
        .collect();
    let report = evaluate_dataset(&records(&images), &config.metrics()?)?;
    Ok(Evaluation {
        config_hash: config.hash(),
        report,
        images,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
