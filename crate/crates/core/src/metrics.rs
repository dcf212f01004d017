//! Exact ranking metrics for image- and pixel-level evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::error::{bad_config, invalid, Result};
use crate::image::Grid;

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(invalid!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.is_empty() {
        return Err(invalid!("no scores to evaluate"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid!("scores must be finite"));
    }
    Ok(())
}

/// Running confusion counts after each distinct threshold, highest first:
/// `(threshold, true positives, false positives)`.
fn sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp, fp));
    }
    out
}

/// Area under the ROC curve as the normalized Mann–Whitney statistic.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-interpolated average precision.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(invalid!("average precision needs at least one positive"));
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (_, tp, fp) in sweep(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Best F1 over thresholds `score ≥ t` at realized score values, with the
/// smallest maximizing threshold.
pub fn f1max(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(invalid!("F1max needs at least one positive"));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for (t, tp, fp) in sweep(scores, labels) {
        let f1 = (2 * tp) as f64 / (2 * tp + fp + (pos - tp)) as f64;
        if f1 >= best.0 {
            best = (f1, t);
        }
    }
    Ok(best)
}

fn check_binary(g: &Grid, what: &str) -> Result<()> {
    if g.is_binary() {
        Ok(())
    } else {
        Err(invalid!("{what} must contain only 0 and 1"))
    }
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(pred: &Grid, mask: &Grid) -> Result<f64> {
    if pred.dims() != mask.dims() {
        return Err(invalid!(
            "prediction {:?} and mask {:?} differ in shape",
            pred.dims(),
            mask.dims()
        ));
    }
    check_binary(pred, "prediction")?;
    check_binary(mask, "mask")?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &m) in pred.data().iter().zip(mask.data()) {
        let (p, m) = (p > 0.5, m > 0.5);
        a += p as usize;
        b += m as usize;
        inter += (p && m) as usize;
    }
    Ok(if a + b == 0 {
        1.0
    } else {
        (2 * inter) as f64 / (a + b) as f64
    })
}

/// 8-connected components of the positive pixels. Returns per-pixel labels
/// (`0` background, `1..=n` regions) and `n`.
pub fn connected_components(mask: &Grid) -> (Vec<usize>, usize) {
    let (h, w) = mask.dims();
    let mut labels = vec![0usize; h * w];
    let mut n = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] <= 0.5 || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data()[j] > 0.5 && labels[j] == 0 {
                        labels[j] = n;
                        stack.push(j);
                    }
                }
            }
        }
    }
    (labels, n)
}

/// Per-region overlap integrated over `FPR ∈ [0, fpr_limit]`, normalized by
/// the limit.
pub fn pro(maps: &[Grid], masks: &[Grid], fpr_limit: f64) -> Result<f64> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(invalid!("{} maps but {} masks", maps.len(), masks.len()));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(invalid!("fpr_limit must lie in (0, 1], got {fpr_limit}"));
    }
    // Every pixel carries its score and either a global region index or none.
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes: Vec<usize> = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(invalid!(
                "map {:?} and mask {:?} differ in shape",
                m.dims(),
                g.dims()
            ));
        }
        check_binary(g, "mask")?;
        if m.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid!("anomaly maps must be finite"));
        }
        let (labels, n) = connected_components(g);
        let base = region_sizes.len();
        region_sizes.extend(core::iter::repeat_n(0, n));
        for (&s, &l) in m.data().iter().zip(&labels) {
            let region = (l > 0).then(|| base + l - 1);
            if let Some(r) = region {
                region_sizes[r] += 1;
            }
            pixels.push((s, region));
        }
    }
    if region_sizes.is_empty() {
        return Err(invalid!("PRO needs at least one anomalous pixel"));
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(invalid!("PRO needs at least one normal pixel"));
    }
    pixels.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));
    let regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut overlap) = (0usize, 0.0);
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                Some(r) => overlap += 1.0 / (region_sizes[r] as f64 * regions),
                None => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / negatives as f64, overlap));
    }
    Ok(trapezoid_until(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoid area under a piecewise linear curve with non-decreasing `x`,
/// truncated at `limit` by linear interpolation.
pub fn trapezoid_until(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

/// One evaluated test image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub image_score: f64,
    pub pixel_map: Grid,
    pub gt_label: bool,
    /// `None` for datasets without pixel annotations.
    pub gt_mask: Option<Grid>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.gt_mask {
            if m.dims() != self.pixel_map.dims() {
                return Err(invalid!(
                    "mask {:?} and map {:?} differ in shape",
                    m.dims(),
                    self.pixel_map.dims()
                ));
            }
            check_binary(m, "mask")?;
            if (m.count_positive() > 0) != self.gt_label {
                return Err(invalid!(
                    "label {} disagrees with its mask",
                    self.gt_label as u8
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PixelAveraging {
    /// All pixels of a category form one ranking.
    #[default]
    Pooled,
    /// Metrics per anomalous image, then averaged.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsConfig {
    pub pro_fpr_limit: f64,
    pub pixel_averaging: PixelAveraging,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            pro_fpr_limit: 0.3,
            pixel_averaging: PixelAveraging::Pooled,
        }
    }
}

/// AUROC, AP and F1max of one ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple {
    pub auroc: f64,
    pub ap: f64,
    pub f1max: f64,
}

impl Triple {
    pub fn compute(scores: &[f64], labels: &[bool]) -> Result<(Self, f64)> {
        let (f1, thr) = f1max(scores, labels)?;
        Ok((
            Self {
                auroc: auroc(scores, labels)?,
                ap: average_precision(scores, labels)?,
                f1max: f1,
            },
            thr,
        ))
    }

    fn mean(items: &[Self]) -> Self {
        let n = items.len() as f64;
        Self {
            auroc: items.iter().map(|t| t.auroc).sum::<f64>() / n,
            ap: items.iter().map(|t| t.ap).sum::<f64>() / n,
            f1max: items.iter().map(|t| t.f1max).sum::<f64>() / n,
        }
    }

    /// Percentages with one decimal, e.g. `97.2/99.0/96.5`.
    pub fn cell(&self) -> String {
        format_cell(self.auroc, self.ap, self.f1max)
    }
}

pub fn format_cell(a: f64, b: f64, c: f64) -> String {
    format!("{:.1}/{:.1}/{:.1}", a * 100.0, b * 100.0, c * 100.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMetrics {
    pub category: String,
    pub image: Triple,
    pub pixel: Option<Triple>,
    pub pro: Option<f64>,
    pub dice: Option<f64>,
    /// Pixel threshold maximizing F1, used for DICE.
    pub pixel_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub categories: Vec<CategoryMetrics>,
    /// Unweighted average over categories; pixel fields are present only
    /// when every category has them.
    pub mean: CategoryMetrics,
}

fn pixel_metrics(
    records: &[&EvalRecord],
    config: &MetricsConfig,
) -> Result<(Triple, f64, f64, f64)> {
    let masks: Vec<&Grid> = records
        .iter()
        .map(|r| {
            r.gt_mask
                .as_ref()
                .ok_or_else(|| invalid!("pixel metrics require masks"))
        })
        .collect::<Result<_>>()?;
    let (triple, thr) = match config.pixel_averaging {
        PixelAveraging::Pooled => {
            let scores: Vec<f64> = records
                .iter()
                .flat_map(|r| r.pixel_map.data().iter().copied())
                .collect();
            let labels: Vec<bool> = masks
                .iter()
                .flat_map(|m| m.data().iter().map(|&v| v > 0.5))
                .collect();
            Triple::compute(&scores, &labels)?
        }
        PixelAveraging::PerImage => {
            let mut per = Vec::new();
            let mut thrs = Vec::new();
            for (r, m) in records.iter().zip(&masks) {
                let labels: Vec<bool> = m.data().iter().map(|&v| v > 0.5).collect();
                let pos = labels.iter().filter(|&&l| l).count();
                if pos == 0 || pos == labels.len() {
                    continue;
                }
                let (t, thr) = Triple::compute(r.pixel_map.data(), &labels)?;
                per.push(t);
                thrs.push(thr);
            }
            if per.is_empty() {
                return Err(invalid!("no image has both normal and anomalous pixels"));
            }
            let thr = thrs.iter().sum::<f64>() / thrs.len() as f64;
            (Triple::mean(&per), thr)
        }
    };
    let maps: Vec<Grid> = records.iter().map(|r| r.pixel_map.clone()).collect();
    let gts: Vec<Grid> = masks.iter().map(|&m| m.clone()).collect();
    let pro = pro(&maps, &gts, config.pro_fpr_limit)?;
    let mut dice_sum = 0.0;
    for (r, m) in records.iter().zip(&masks) {
        let (h, w) = r.pixel_map.dims();
        let pred = Grid::from_fn(h, w, |y, x| {
            f64::from(u8::from(r.pixel_map.get(y, x) >= thr))
        });
        dice_sum += dice(&pred, m)?;
    }
    Ok((triple, pro, dice_sum / records.len() as f64, thr))
}

/// Per-category image and pixel metrics plus their mean row. Pixel metrics
/// are computed only for categories whose records all carry masks.
pub fn evaluate_dataset(records: &[EvalRecord], config: &MetricsConfig) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(invalid!("no records to evaluate"));
    }
    if !(config.pro_fpr_limit > 0.0 && config.pro_fpr_limit <= 1.0) {
        return Err(bad_config!("pro_fpr_limit must lie in (0, 1]"));
    }
    let mut by_cat: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        r.validate()?;
        by_cat.entry(r.category.as_str()).or_default().push(r);
    }
    let mut categories = Vec::new();
    for (cat, recs) in by_cat {
        let scores: Vec<f64> = recs.iter().map(|r| r.image_score).collect();
        let labels: Vec<bool> = recs.iter().map(|r| r.gt_label).collect();
        let (image, _) = Triple::compute(&scores, &labels)?;
        let pixel = if recs.iter().all(|r| r.gt_mask.is_some()) {
            Some(pixel_metrics(&recs, config)?)
        } else {
            None
        };
        categories.push(CategoryMetrics {
            category: String::from(cat),
            image,
            pixel: pixel.map(|p| p.0),
            pro: pixel.map(|p| p.1),
            dice: pixel.map(|p| p.2),
            pixel_threshold: pixel.map(|p| p.3),
        });
    }
    let n = categories.len() as f64;
    let images: Vec<Triple> = categories.iter().map(|c| c.image).collect();
    let all_pixel = categories.iter().all(|c| c.pixel.is_some());
    let mean = CategoryMetrics {
        category: String::from("mean"),
        image: Triple::mean(&images),
        pixel: all_pixel.then(|| {
            Triple::mean(
                &categories
                    .iter()
                    .filter_map(|c| c.pixel)
                    .collect::<Vec<_>>(),
            )
        }),
        pro: all_pixel.then(|| categories.iter().filter_map(|c| c.pro).sum::<f64>() / n),
        dice: all_pixel.then(|| categories.iter().filter_map(|c| c.dice).sum::<f64>() / n),
        pixel_threshold: None,
    };
    Ok(MetricsReport { categories, mean })
}

impl MetricsReport {
    /// Markdown table with one row per category and a final mean row.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| Category | Image AUROC/AP/F1max | Pixel AUROC/AP/F1max | PRO | DICE |\n|---|---|---|---|---|\n",
        );
        let pct =
            |v: Option<f64>| v.map_or_else(|| String::from("-"), |v| format!("{:.1}", v * 100.0));
        for c in self.categories.iter().chain(core::iter::once(&self.mean)) {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} |",
                c.category,
                c.image.cell(),
                c.pixel.map_or_else(|| String::from("-"), |p| p.cell()),
                pct(c.pro),
                pct(c.dice)
            );
        }
        s
    }
}
