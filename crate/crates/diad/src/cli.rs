//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use diad_core::image::resize_bilinear;
use diad_core::synth::RgbImage;
use diad_core::training::Phase;

use crate::ablation::{run_study, Study};
use crate::config::RunConfig;
use crate::dataset::generate_synthetic;
use crate::error::{Error, IoContext, Result};
use crate::pipeline::{evaluate, score_images, train_all, train_denoiser_phase, Run, TrainOptions};
use crate::report::{compare, report_file, write_evaluation, ArtifactOptions, SavedReport};
use crate::{gridfile, imageio};

#[derive(Debug, Parser)]
#[command(
    name = "diad",
    version,
    about = "Diffusion-based multi-class anomaly detection"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Base directory for relative paths and outputs.
    #[arg(long, global = true, env = "DIAD_OUTPUT_ROOT", default_value = ".")]
    pub output_root: PathBuf,
    /// Run directory holding checkpoints, logs and reports.
    #[arg(long, global = true, default_value = "run")]
    pub run: PathBuf,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration: desk or paper-reference.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Override a config value, e.g. `--set scoring.sigma=4.0`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus as an MVTec-style tree.
    GenerateData {
        /// Destination; defaults to the configured dataset root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or resume) the autoencoder phase.
    TrainAutoencoder {
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Train (or resume) the denoiser phases.
    Train {
        /// pretrain_sd, train_sg or all (which includes the autoencoder).
        #[arg(long, default_value = "all")]
        phase: String,
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Reconstruct images and write their anomaly maps.
    Reconstruct {
        /// A PNG file or a directory of PNG files.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        heatmaps: bool,
    },
    /// Score the test split and write metric reports.
    Evaluate {
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        heatmaps: bool,
        #[arg(long)]
        reconstructions: bool,
    },
    /// Sweep one setting and tabulate the metrics.
    Ablate {
        /// ddim_steps, forward_t, feature_layers, pooling, connection_variant or norm_activation.
        #[arg(long)]
        study: String,
        /// Custom points, e.g. `1,5,10` or `8-8,4-16` or `2+3+4,3+4`.
        #[arg(long)]
        points: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render or compare saved evaluation reports.
    Report {
        /// Evaluation directories or metrics.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

impl GlobalArgs {
    /// Preset or file, then `--set` overrides, then `--seed`. Without
    /// either source an existing run's saved config is reused.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let run_config = resolve(&self.output_root, &self.run).join("config.toml");
        let base = match (&self.config, &self.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::Usage(
                    "--config and --preset are mutually exclusive".into(),
                ))
            }
            (Some(path), None) => RunConfig::load(&resolve(&self.output_root, path))?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) if run_config.is_file() => RunConfig::load(&run_config)?,
            (None, None) => RunConfig::desk(),
        };
        let mut config = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn run_dir(&self) -> PathBuf {
        resolve(&self.output_root, &self.run)
    }
}

fn phase_arg(name: &str) -> Result<Option<Phase>> {
    match name {
        "all" => Ok(None),
        _ => Phase::from_name(name).map(Some).ok_or_else(|| {
            Error::Usage(format!(
                "unknown phase {name:?}; expected pretrain_sd, train_sg, train_autoencoder or all"
            ))
        }),
    }
}

fn print_outcome(o: &crate::pipeline::PhaseOutcome) {
    let loss = o
        .mean_last_epoch_loss
        .map_or_else(|| "-".into(), |l| format!("{l:.5}"));
    println!(
        "{}: {} epochs, {} batches, last epoch loss {loss}, {} -> {}",
        o.phase.name(),
        o.epochs_completed,
        o.batches,
        if o.complete { "complete" } else { "paused" },
        o.checkpoint.display()
    );
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Usage(format!(
            "input {} does not exist",
            input.display()
        )));
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(input).at(input)? {
        let p = e.at(input)?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Usage(format!("no PNG files in {}", input.display())));
    }
    Ok(out)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Report { inputs, out } => {
            let mut reports = Vec::new();
            for p in inputs {
                let file = report_file(&resolve(&g.output_root, p));
                reports.push((p.display().to_string(), SavedReport::read(&file)?));
            }
            let text = if reports.len() == 1 {
                reports[0].1.to_markdown()
            } else {
                compare(&reports)?
            };
            match out {
                Some(o) => {
                    let o = resolve(&g.output_root, o);
                    std::fs::write(&o, &text).at(&o)?;
                    println!("wrote {}", o.display());
                }
                None => print!("{text}"),
            }
            return Ok(());
        }
        Command::GenerateData { out } => {
            let config = g.resolve_config()?;
            let run = Run::new(config.clone(), &g.output_root, &g.run_dir());
            if config.dataset.source != "synthetic" {
                return Err(Error::Usage(
                    "generate-data needs dataset.source = \"synthetic\"".into(),
                ));
            }
            let root = out
                .as_ref()
                .map_or_else(|| run.dataset_root(), |o| resolve(&g.output_root, o));
            let manifest = generate_synthetic(&config.synthetic()?, &root)?;
            manifest.write_csv(&root.join("manifest.csv"))?;
            config.save(&root.join("config.toml"))?;
            println!(
                "wrote {} images in {} categories to {}",
                manifest.entries.len(),
                manifest.categories.len(),
                root.display()
            );
            return Ok(());
        }
        _ => {}
    }

    let config = g.resolve_config()?;
    let run = Run::new(config.clone(), &g.output_root, &g.run_dir());
    match &cli.command {
        Command::TrainAutoencoder { stop_after_epochs } => {
            run.save_config()?;
            let opts = TrainOptions {
                stop_after_epochs: *stop_after_epochs,
            };
            print_outcome(&train_denoiser_phase(&run, Phase::TrainAutoencoder, &opts)?);
        }
        Command::Train {
            phase,
            stop_after_epochs,
        } => {
            let phase = phase_arg(phase)?;
            run.save_config()?;
            let opts = TrainOptions {
                stop_after_epochs: *stop_after_epochs,
            };
            match phase {
                Some(p) => print_outcome(&train_denoiser_phase(&run, p, &opts)?),
                None => train_all(&run, &opts)?.iter().for_each(print_outcome),
            }
        }
        Command::Reconstruct {
            input,
            out,
            heatmaps,
        } => {
            let files = png_inputs(&resolve(&g.output_root, input))?;
            let out = out.as_ref().map_or_else(
                || run.dir.join("reconstructions"),
                |o| resolve(&g.output_root, o),
            );
            let models = run.load_models()?;
            let s = config.dataset.image_size;
            let images = files
                .iter()
                .map(|f| Ok(resize_bilinear(&imageio::read_rgb(f)?.to_tensor(), s, s)))
                .collect::<Result<Vec<_>>>()?;
            let results = score_images(&config, &models, &images)?;
            std::fs::create_dir_all(&out).at(&out)?;
            config.save(&out.join("config.toml"))?;
            let hash = config.short_hash();
            for (f, r) in files.iter().zip(&results) {
                let stem = f
                    .file_stem()
                    .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
                imageio::write_rgb(
                    &out.join(format!("{stem}_recon.png")),
                    &RgbImage::from_tensor(&r.reconstruction),
                )?;
                gridfile::write(&out.join(format!("{stem}_map.grid")), &r.pixel_map)?;
                if *heatmaps {
                    let img = imageio::heatmap(&r.pixel_map, r.pixel_map.min(), r.pixel_map.max());
                    imageio::write_rgb(&out.join(format!("{stem}_heatmap.png")), &img)?;
                }
                println!("{}\t{:.6}\t{hash}", f.display(), r.image_score);
            }
        }
        Command::Evaluate {
            category,
            out,
            heatmaps,
            reconstructions,
        } => {
            let models = run.load_models()?;
            let manifest = run.manifest()?;
            let ev = evaluate(&config, &models, &manifest, category.as_deref())?;
            let out = out.as_ref().map_or_else(
                || run.dir.join("evaluation"),
                |o| resolve(&g.output_root, o),
            );
            let saved = write_evaluation(
                &ev,
                &out,
                ArtifactOptions {
                    heatmaps: *heatmaps,
                    reconstructions: *reconstructions,
                },
            )?;
            config.save(&out.join("config.toml"))?;
            print!("{}", saved.to_markdown());
            println!("wrote {} ({:.1} s)", out.display(), ev.wall_time);
        }
        Command::Ablate { study, points, out } => {
            let s = Study::from_name(study).ok_or_else(|| {
                let names: Vec<_> = Study::ALL.iter().map(|s| s.name()).collect();
                Error::Usage(format!(
                    "unknown study {study:?}; expected one of {names:?}"
                ))
            })?;
            let points = match points {
                Some(p) => s.parse_points(p)?,
                None => s.default_points(&config),
            };
            let out = out
                .as_ref()
                .map_or_else(|| run.dir.join("ablations"), |o| resolve(&g.output_root, o));
            let result = run_study(&run, s, &points, &out)?;
            config.save(&out.join(format!("{}_config.toml", s.name())))?;
            print!("{}", result.to_markdown());
            for f in result.write(&out)? {
                println!("wrote {}", f.display());
            }
        }
        Command::Report { .. } | Command::GenerateData { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
