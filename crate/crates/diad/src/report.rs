//! Evaluation artifacts: metric tables, the per-image manifest, maps and
//! heatmaps, and comparison of saved reports.

use std::path::{Path, PathBuf};

use diad_core::metrics::{format_cell, CategoryMetrics, MetricsReport};
use diad_core::synth::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::pipeline::Evaluation;
use crate::{gridfile, imageio};

/// Flat, serializable form of one metrics row. Values are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub category: String,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1max: f64,
    pub pixel_auroc: Option<f64>,
    pub pixel_ap: Option<f64>,
    pub pixel_f1max: Option<f64>,
    pub pro: Option<f64>,
    pub dice: Option<f64>,
}

impl From<&CategoryMetrics> for MetricsRow {
    fn from(c: &CategoryMetrics) -> Self {
        Self {
            category: c.category.clone(),
            image_auroc: c.image.auroc,
            image_ap: c.image.ap,
            image_f1max: c.image.f1max,
            pixel_auroc: c.pixel.map(|p| p.auroc),
            pixel_ap: c.pixel.map(|p| p.ap),
            pixel_f1max: c.pixel.map(|p| p.f1max),
            pro: c.pro,
            dice: c.dice,
        }
    }
}

impl MetricsRow {
    pub fn image_cell(&self) -> String {
        format_cell(self.image_auroc, self.image_ap, self.image_f1max)
    }

    pub fn pixel_cell(&self) -> String {
        match (self.pixel_auroc, self.pixel_ap, self.pixel_f1max) {
            (Some(a), Some(b), Some(c)) => format_cell(a, b, c),
            _ => "-".into(),
        }
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedReport {
    pub config_hash: String,
    pub categories: Vec<MetricsRow>,
    pub mean: MetricsRow,
    pub num_images: usize,
}

impl SavedReport {
    pub fn new(config_hash: &str, report: &MetricsReport, num_images: usize) -> Self {
        Self {
            config_hash: config_hash.into(),
            categories: report.categories.iter().map(MetricsRow::from).collect(),
            mean: MetricsRow::from(&report.mean),
            num_images,
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.categories.iter().chain(std::iter::once(&self.mean))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_markdown(&self) -> String {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0));
        let mut s = format!("config `{}`\n\n", self.config_hash);
        s.push_str("| Category | Image AUROC/AP/F1max | Pixel AUROC/AP/F1max | PRO | DICE |\n|---|---|---|---|---|\n");
        for r in self.rows() {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.category,
                r.image_cell(),
                r.pixel_cell(),
                pct(r.pro),
                pct(r.dice)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record([
            "category",
            "image_auroc",
            "image_ap",
            "image_f1max",
            "pixel_auroc",
            "pixel_ap",
            "pixel_f1max",
            "pro",
            "dice",
            "config_hash",
        ])
        .map_err(|e| Error::format(path, e))?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        for r in self.rows() {
            w.write_record([
                r.category.clone(),
                r.image_auroc.to_string(),
                r.image_ap.to_string(),
                r.image_f1max.to_string(),
                opt(r.pixel_auroc),
                opt(r.pixel_ap),
                opt(r.pixel_f1max),
                opt(r.pro),
                opt(r.dice),
                self.config_hash.clone(),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().at(path)
    }
}

/// One row of `per_image.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageRow {
    pub path: PathBuf,
    pub category: String,
    pub defect: String,
    pub label: u8,
    pub image_score: f64,
    pub map: PathBuf,
    pub heatmap: Option<PathBuf>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ArtifactOptions {
    pub heatmaps: bool,
    pub reconstructions: bool,
}

fn with_ext(p: &Path, ext: &str) -> PathBuf {
    p.with_extension(ext)
}

/// Writes `metrics.{json,csv,md}`, `per_image.csv`, float maps and, on
/// request, heatmap and reconstruction PNGs under `out`.
pub fn write_evaluation(ev: &Evaluation, out: &Path, opts: ArtifactOptions) -> Result<SavedReport> {
    std::fs::create_dir_all(out).at(out)?;
    let saved = SavedReport::new(&ev.config_hash, &ev.report, ev.images.len());
    let json = out.join("metrics.json");
    std::fs::write(
        &json,
        serde_json::to_string_pretty(&saved).expect("report serializes"),
    )
    .at(&json)?;
    saved.write_csv(&out.join("metrics.csv"))?;
    let md = out.join("metrics.md");
    std::fs::write(&md, saved.to_markdown()).at(&md)?;

    let (lo, hi) = ev
        .images
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.pixel_map.min()), hi.max(r.pixel_map.max()))
        });
    let per_image = out.join("per_image.csv");
    let mut w = csv::Writer::from_path(&per_image).map_err(|e| Error::format(&per_image, e))?;
    for r in &ev.images {
        let map = Path::new("maps").join(with_ext(&r.entry.path, "grid"));
        gridfile::write(&out.join(&map), &r.pixel_map)?;
        let heatmap = if opts.heatmaps {
            let p = Path::new("heatmaps").join(&r.entry.path);
            imageio::write_rgb(&out.join(&p), &imageio::heatmap(&r.pixel_map, lo, hi))?;
            Some(p)
        } else {
            None
        };
        if opts.reconstructions {
            let p = out.join("reconstructions").join(&r.entry.path);
            imageio::write_rgb(&p, &RgbImage::from_tensor(&r.reconstruction))?;
        }
        w.serialize(PerImageRow {
            path: r.entry.path.clone(),
            category: r.entry.category.clone(),
            defect: r.entry.defect.clone(),
            label: u8::from(r.label),
            image_score: r.image_score,
            map,
            heatmap,
            config_hash: ev.config_hash.clone(),
        })
        .map_err(|e| Error::format(&per_image, e))?;
    }
    w.flush().at(&per_image)?;
    Ok(saved)
}

pub fn read_per_image(path: &Path) -> Result<Vec<PerImageRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e)))
        .collect()
}

/// Locates `metrics.json` given either the file or its directory.
pub fn report_file(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("metrics.json")
    } else {
        p.to_path_buf()
    }
}

/// Side-by-side comparison of saved reports. All must come from the same
/// resolved configuration.
pub fn compare(reports: &[(String, SavedReport)]) -> Result<String> {
    let Some((_, first)) = reports.first() else {
        return Err(Error::Usage("no reports to compare".into()));
    };
    for (name, r) in reports {
        if r.config_hash != first.config_hash {
            return Err(Error::Config(format!(
                "{name} was produced by config {} but the first report by {}",
                r.config_hash, first.config_hash
            )));
        }
    }
    let mut s = format!("config `{}`\n\n| Category |", first.config_hash);
    for (name, _) in reports {
        s.push_str(&format!(" {name} image | {name} pixel |"));
    }
    s.push_str("\n|---|");
    s.push_str(&"---|---|".repeat(reports.len()));
    s.push('\n');
    for (i, row) in first.rows().enumerate() {
        s.push_str(&format!("| {} |", row.category));
        for (name, r) in reports {
            let other = r
                .rows()
                .nth(i)
                .filter(|o| o.category == row.category)
                .ok_or_else(|| Error::Config(format!("{name} has a different category list")))?;
            s.push_str(&format!(
                " {} | {} |",
                other.image_cell(),
                other.pixel_cell()
            ));
        }
        s.push('\n');
    }
    Ok(s)
}
