//! Ablation sweeps over inference and architecture settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use diad_core::backbone::ToyBackbone;
use diad_core::image::ImageTensor;
use diad_core::metrics::evaluate_dataset;
use diad_core::scoring::{score_reconstructions, DiffusionReconstructor, Reconstructor};
use diad_core::training::Phase;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::dataset::{load_batch, DatasetManifest};
use crate::error::{Error, IoContext, Result};
use crate::pipeline::{
    evaluate, records, train_denoiser_phase, ImageResult, Models, Run, TrainOptions,
};
use crate::report::MetricsRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    DdimSteps,
    ForwardT,
    FeatureLayers,
    Pooling,
    ConnectionVariant,
    NormActivation,
}

impl Study {
    pub const ALL: [Study; 6] = [
        Study::DdimSteps,
        Study::ForwardT,
        Study::FeatureLayers,
        Study::Pooling,
        Study::ConnectionVariant,
        Study::NormActivation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Study::DdimSteps => "ddim_steps",
            Study::ForwardT => "forward_t",
            Study::FeatureLayers => "feature_layers",
            Study::Pooling => "pooling",
            Study::ConnectionVariant => "connection_variant",
            Study::NormActivation => "norm_activation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Whether sweep points need a retrained SG branch.
    pub fn retrains(self) -> bool {
        matches!(self, Study::ConnectionVariant | Study::NormActivation)
    }

    /// Config keys changed by a sweep point, in CSV column order.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            Study::DdimSteps => &["scoring.ddim_steps"],
            Study::ForwardT => &["scoring.forward_t"],
            Study::FeatureLayers => &["scoring.feature_levels"],
            Study::Pooling => &["scoring.pooling_iterations", "scoring.pooling_kernel"],
            Study::ConnectionVariant => &["model.denoiser.connection"],
            Study::NormActivation => &["model.denoiser.sff_norm"],
        }
    }

    pub fn default_points(self, config: &RunConfig) -> Vec<SweepPoint> {
        let t = config.model.schedule.steps;
        match self {
            Study::DdimSteps => [1, 5, 10, 20, 50]
                .into_iter()
                .filter(|&s| s <= config.scoring.forward_t)
                .map(|s| SweepPoint::single(s.to_string()))
                .collect(),
            Study::ForwardT => {
                let mut v: Vec<usize> = [1, 3, 5, 6, 8, 10]
                    .iter()
                    .map(|k| (t * k / 10).max(1))
                    .collect();
                v.dedup();
                v.into_iter()
                    .map(|s| SweepPoint::single(s.to_string()))
                    .collect()
            }
            Study::FeatureLayers => [
                "[1,2,3,4,5]",
                "[1,2,3,4]",
                "[2,3,4,5]",
                "[1,2,3]",
                "[2,3,4]",
                "[2,3]",
                "[3,4]",
            ]
            .into_iter()
            .map(SweepPoint::single)
            .collect(),
            Study::Pooling => POOLING_GRID
                .iter()
                .map(|(m, n)| SweepPoint {
                    label: format!("{m}-{n}"),
                    values: vec![m.to_string(), n.to_string()],
                })
                .collect(),
            Study::ConnectionVariant => ["sd", "msg", "msg-sgeb3", "msg-sgeb3-sgeb4", "msg-sff"]
                .into_iter()
                .map(|v| SweepPoint::single(format!("\"{v}\"")))
                .collect(),
            Study::NormActivation => ["in-silu", "bn-relu"]
                .into_iter()
                .map(|v| SweepPoint::single(format!("\"{v}\"")))
                .collect(),
        }
    }

    /// Parses user-supplied points: `a,b,c` for single-key studies,
    /// `m-n,m-n` for pooling and `2+3+4,3+4` for feature layers.
    pub fn parse_points(self, spec: &str) -> Result<Vec<SweepPoint>> {
        let bad = |p: &str| Error::Usage(format!("invalid {} sweep point {p:?}", self.name()));
        spec.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| match self {
                Study::DdimSteps | Study::ForwardT => {
                    p.parse::<usize>().map_err(|_| bad(p))?;
                    Ok(SweepPoint::single(p.to_string()))
                }
                Study::FeatureLayers => {
                    let levels: Vec<usize> = p
                        .split('+')
                        .map(|x| x.trim().parse().map_err(|_| bad(p)))
                        .collect::<Result<_>>()?;
                    Ok(SweepPoint::single(format!("{levels:?}")))
                }
                Study::Pooling => {
                    let (m, n) = p.split_once('-').ok_or_else(|| bad(p))?;
                    let (m, n): (usize, usize) = (
                        m.parse().map_err(|_| bad(p))?,
                        n.parse().map_err(|_| bad(p))?,
                    );
                    Ok(SweepPoint {
                        label: format!("{m}-{n}"),
                        values: vec![m.to_string(), n.to_string()],
                    })
                }
                Study::ConnectionVariant | Study::NormActivation => {
                    Ok(SweepPoint::single(format!("\"{p}\"")))
                }
            })
            .collect()
    }
}

/// Iterations-kernel pairs of the global average pooling comparison.
pub const POOLING_GRID: [(usize, usize); 8] = [
    (1, 16),
    (4, 16),
    (5, 12),
    (6, 10),
    (8, 8),
    (10, 7),
    (15, 5),
    (20, 4),
];

/// One setting of a sweep: TOML values for the study's keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub values: Vec<String>,
}

impl SweepPoint {
    fn single(v: impl Into<String>) -> Self {
        let v = v.into();
        Self {
            label: v.trim_matches('"').replace(' ', ""),
            values: vec![v],
        }
    }

    fn overrides(&self, study: Study) -> Vec<String> {
        study
            .keys()
            .iter()
            .zip(&self.values)
            .map(|(k, v)| format!("{k}={v}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub study: String,
    pub point: String,
    pub values: Vec<String>,
    pub metrics: MetricsRow,
    pub wall_time: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub study: Study,
    pub rows: Vec<SweepRow>,
}

fn load_test(
    config: &RunConfig,
    manifest: &DatasetManifest,
) -> Result<(Vec<usize>, Vec<ImageTensor>, Vec<crate::dataset::Loaded>)> {
    let idx = manifest.indices("test", None);
    if idx.is_empty() {
        return Err(Error::Dataset("the test split is empty".into()));
    }
    let s = config.dataset.image_size;
    let loaded = load_batch(manifest, &idx, (s, s))?;
    let images = loaded.iter().map(|l| l.image.clone()).collect();
    Ok((idx, images, loaded))
}

fn row(
    study: Study,
    point: &SweepPoint,
    config: &RunConfig,
    results: Vec<ImageResult>,
    start: Instant,
) -> Result<SweepRow> {
    let report = evaluate_dataset(&records(&results), &config.metrics()?)?;
    Ok(SweepRow {
        study: study.name().into(),
        point: point.label.clone(),
        values: point
            .values
            .iter()
            .map(|v| v.trim_matches('"').replace(' ', ""))
            .collect(),
        metrics: MetricsRow::from(&report.mean),
        wall_time: start.elapsed().as_secs_f64(),
        config_hash: config.hash(),
    })
}

/// Scores fixed reconstructions under several scoring settings.
fn rescore(
    study: Study,
    run: &Run,
    models: &Models,
    manifest: &DatasetManifest,
    points: &[SweepPoint],
) -> Result<Vec<SweepRow>> {
    let (idx, images, loaded) = load_test(&run.config, manifest)?;
    let rec = DiffusionReconstructor {
        autoencoder: &models.autoencoder,
        assembly: &models.denoiser,
        schedule: &models.schedule,
        config: run.config.reconstruction(),
    };
    let bs = run.config.scoring.batch_size.max(1);
    let recon: Vec<ImageTensor> = images
        .par_chunks(bs)
        .map(|c| rec.reconstruct_batch(c).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut rows = Vec::new();
    for p in points {
        let start = Instant::now();
        let config = run.config.with_overrides(&p.overrides(study))?;
        let backbone = ToyBackbone::new(
            &config.scoring.backbone_widths,
            config.scoring.backbone_seed,
        )?;
        let scoring = config.scoring()?;
        let scored = images
            .par_chunks(bs)
            .zip(recon.par_chunks(bs))
            .map(|(x, r)| {
                score_reconstructions(x, r.to_vec(), &backbone, &scoring).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        let s = config.dataset.image_size;
        let results = idx
            .iter()
            .zip(&loaded)
            .zip(scored.into_iter().flatten())
            .map(|((&i, l), r)| {
                let entry = manifest.entries[i].clone();
                ImageResult {
                    label: entry.is_anomalous(),
                    mask: l
                        .mask
                        .clone()
                        .unwrap_or_else(|| diad_core::image::Grid::zeros(s, s)),
                    entry,
                    image_score: r.image_score,
                    pixel_map: r.pixel_map,
                    reconstruction: r.reconstruction,
                }
            })
            .collect();
        rows.push(row(study, p, &config, results, start)?);
    }
    Ok(rows)
}

/// Runs one study against the trained models of `run`. Architecture studies
/// retrain the SG phase per point under `out/<study>/<point>` on top of the
/// run's autoencoder and pretrained SD checkpoints.
pub fn run_study(
    run: &Run,
    study: Study,
    points: &[SweepPoint],
    out: &Path,
) -> Result<SweepResult> {
    if points.is_empty() {
        return Err(Error::Usage(format!(
            "the {} sweep has no points",
            study.name()
        )));
    }
    let manifest = run.manifest()?;
    let rows = match study {
        Study::FeatureLayers | Study::Pooling => {
            rescore(study, run, &run.load_models()?, &manifest, points)?
        }
        Study::DdimSteps | Study::ForwardT => {
            let models = run.load_models()?;
            let mut rows = Vec::new();
            for p in points {
                let start = Instant::now();
                let config = run.config.with_overrides(&p.overrides(study))?;
                let ev = evaluate(&config, &models, &manifest, None)?;
                rows.push(row(study, p, &config, ev.images, start)?);
            }
            rows
        }
        Study::ConnectionVariant | Study::NormActivation => {
            let mut rows = Vec::new();
            for p in points {
                let start = Instant::now();
                let config = run.config.with_overrides(&p.overrides(study))?;
                let dir = out.join(study.name()).join(&p.label);
                let variant = Run::new(config.clone(), &run.output_root, &dir);
                for phase in [Phase::TrainAutoencoder, Phase::PretrainSd] {
                    let dst = variant.checkpoint_path(phase);
                    if !dst.is_file() {
                        let src = run.checkpoint_path(phase);
                        if !src.is_file() {
                            return Err(Error::Missing(format!(
                                "phase {} has no checkpoint at {}",
                                phase.name(),
                                src.display()
                            )));
                        }
                        std::fs::create_dir_all(dst.parent().expect("checkpoint dir")).at(&dst)?;
                        std::fs::copy(&src, &dst).at(&dst)?;
                    }
                }
                variant.save_config()?;
                train_denoiser_phase(&variant, Phase::TrainSg, &TrainOptions::default())?;
                let ev = evaluate(&config, &variant.load_models()?, &manifest, None)?;
                rows.push(row(study, p, &config, ev.images, start)?);
            }
            rows
        }
    };
    Ok(SweepResult { study, rows })
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        let mut header: Vec<String> = vec!["study".into(), "point".into()];
        header.extend(
            self.study
                .keys()
                .iter()
                .map(|k| k.rsplit('.').next().unwrap_or(k).to_string()),
        );
        header.extend(
            [
                "image_auroc",
                "image_ap",
                "image_f1max",
                "pixel_auroc",
                "pixel_ap",
                "pixel_f1max",
                "pro",
                "dice",
                "wall_time_s",
                "config_hash",
            ]
            .map(String::from),
        );
        w.write_record(&header)
            .map_err(|e| Error::format(path, e))?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in &self.rows {
            let mut rec = vec![r.study.clone(), r.point.clone()];
            rec.extend(r.values.iter().cloned());
            let m = &r.metrics;
            rec.extend([
                m.image_auroc.to_string(),
                m.image_ap.to_string(),
                m.image_f1max.to_string(),
                opt(m.pixel_auroc),
                opt(m.pixel_ap),
                opt(m.pixel_f1max),
                opt(m.pro),
                opt(m.dice),
                format!("{:.3}", r.wall_time),
                r.config_hash.clone(),
            ]);
            w.write_record(&rec).map_err(|e| Error::format(path, e))?;
        }
        w.flush().at(path)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} | Image AUROC/AP/F1max | Pixel AUROC/AP/F1max | Wall time (s) |\n|---|---|---|---|\n",
            self.study.name()
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.1} |",
                r.point,
                r.metrics.image_cell(),
                r.metrics.pixel_cell(),
                r.wall_time
            );
        }
        s
    }

    /// Line plot of image and pixel AUROC against the sweep points.
    pub fn to_svg(&self) -> String {
        let (w, h, left, right, top, bottom) = (640.0, 360.0, 60.0, 20.0, 40.0, 60.0);
        let pw = w - left - right;
        let ph = h - top - bottom;
        let n = self.rows.len().max(1);
        let x = |i: usize| {
            left + if n == 1 {
                pw / 2.0
            } else {
                pw * i as f64 / (n - 1) as f64
            }
        };
        let series: [(&str, &str, Vec<Option<f64>>); 2] = [
            (
                "image AUROC",
                "#1f77b4",
                self.rows
                    .iter()
                    .map(|r| Some(r.metrics.image_auroc))
                    .collect(),
            ),
            (
                "pixel AUROC",
                "#d62728",
                self.rows.iter().map(|r| r.metrics.pixel_auroc).collect(),
            ),
        ];
        let values: Vec<f64> = series
            .iter()
            .flat_map(|s| s.2.iter().flatten().copied())
            .collect();
        let lo = values.iter().copied().fold(1.0f64, f64::min).min(0.5);
        let lo = (lo * 10.0).floor() / 10.0;
        let y = |v: f64| top + ph * (1.0 - (v - lo) / (1.0 - lo).max(1e-9));
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{} sweep</text>"#,
            w / 2.0,
            self.study.name()
        );
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/><line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            top + ph,
            top + ph,
            left + pw,
            top + ph
        );
        let steps = ((1.0 - lo) * 10.0).round() as usize;
        for k in 0..=steps {
            let v = lo + k as f64 / 10.0;
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{yy:.1}" x2="{}" y2="{yy:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
                left + pw,
                left - 6.0,
                y(v) + 4.0,
                yy = y(v)
            );
        }
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                x(i),
                top + ph + 18.0,
                r.point
            );
        }
        for (k, (name, color, vals)) in series.iter().enumerate() {
            let pts: Vec<String> = vals
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x(i), y(v))))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').expect("point");
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
            let ly = h - 20.0;
            let lx = left + 160.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// Writes `<study>.csv`, `<study>.md` and `<study>.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).at(dir)?;
        let name = self.study.name();
        let csv = dir.join(format!("{name}.csv"));
        self.write_csv(&csv)?;
        let md = dir.join(format!("{name}.md"));
        std::fs::write(&md, self.to_markdown()).at(&md)?;
        let svg = dir.join(format!("{name}.svg"));
        std::fs::write(&svg, self.to_svg()).at(&svg)?;
        Ok(vec![csv, md, svg])
    }
}
