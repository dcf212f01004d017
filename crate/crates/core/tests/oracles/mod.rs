//! Brute-force reference implementations shared by the metric and scoring
//! tests. Deliberately naive: quadratic loops, explicit padding, no sorting
//! tricks.

#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

/// Fraction of (positive, negative) pairs ranked correctly, ties 0.5.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn distinct_desc(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.to_vec();
    t.sort_by(|a, b| b.partial_cmp(a).unwrap());
    t.dedup();
    t
}

fn counts(scores: &[f64], labels: &[bool], thr: f64) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= thr, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    (tp, fp, fneg)
}

/// Σ (Rₖ − Rₖ₋₁)·Pₖ with every threshold evaluated from scratch.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_desc(scores) {
        let (tp, fp, _) = counts(scores, labels, t);
        let recall = tp as f64 / pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Best F1 over every realized threshold, smallest threshold on ties.
pub fn f1max(scores: &[f64], labels: &[bool]) -> (f64, f64) {
    let mut ts = distinct_desc(scores);
    ts.reverse();
    let mut best = (-1.0, f64::NAN);
    for t in ts {
        let (tp, fp, fneg) = counts(scores, labels, t);
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fneg) as f64;
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    best
}

pub fn dice(pred: &[f64], mask: &[f64], w: usize) -> f64 {
    let set = |g: &[f64]| -> BTreeSet<(usize, usize)> {
        g.iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    };
    let (a, b) = (set(pred), set(mask));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    2.0 * a.intersection(&b).count() as f64 / (a.len() + b.len()) as f64
}

/// Regions of a binary `h × w` mask by breadth-first flood fill over the
/// eight neighbours; each region is a list of flat indices.
pub fn flood_regions(mask: &[f64], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for s in 0..h * w {
        if mask[s] != 1.0 || seen[s] {
            continue;
        }
        let mut region = Vec::new();
        let mut q = VecDeque::from([s]);
        seen[s] = true;
        while let Some(i) = q.pop_front() {
            region.push(i);
            let (y, x) = (i / w, i % w);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let j = ny * w + nx;
                    if mask[j] == 1.0 && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}

/// Area under `points` (already ordered) up to `limit`, interpolating the
/// crossing segment.
pub fn trapezoid(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for k in 1..points.len() {
        let (x0, y0) = points[k - 1];
        let (x1, y1) = points[k];
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit {
            (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0))
        } else {
            (x1, y1)
        };
        area += 0.5 * (xe - x0) * (y0 + ye);
    }
    area
}

/// PRO from scratch: threshold at every distinct map value, recompute FPR
/// and the mean per-region recall, integrate and normalize.
pub fn pro(maps: &[(Vec<f64>, Vec<f64>, usize, usize)], limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut negatives = 0usize;
    let mut all_scores = Vec::new();
    for (k, (m, g, h, w)) in maps.iter().enumerate() {
        for r in flood_regions(g, *h, *w) {
            regions.push((k, r));
        }
        negatives += g.iter().filter(|&&v| v == 0.0).count();
        all_scores.extend_from_slice(m);
    }
    let mut points = vec![(0.0, 0.0)];
    for t in distinct_desc(&all_scores) {
        let mut fp = 0usize;
        for (m, g, _, _) in maps {
            fp += m
                .iter()
                .zip(g)
                .filter(|(&s, &v)| v == 0.0 && s >= t)
                .count();
        }
        let mut overlap = 0.0;
        for (k, r) in &regions {
            let m = &maps[*k].0;
            overlap += r.iter().filter(|&&i| m[i] >= t).count() as f64 / r.len() as f64;
        }
        points.push((fp as f64 / negatives as f64, overlap / regions.len() as f64));
    }
    trapezoid(&points, limit) / limit
}

/// Mirror an out-of-range index back inside `0..n` (edge pixel repeated).
pub fn mirror(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Direct 2-D Gaussian correlation with an explicit 2-D kernel.
pub fn gaussian_smooth(map: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (4.0 * sigma).ceil() as i64;
    let mut k = Vec::new();
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            k.push((dy, dx, v));
            total += v;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, v) in &k {
                let sy = mirror(y as i64 + dy, h);
                let sx = mirror(x as i64 + dx, w);
                acc += v / total * map[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Stride-1 `k × k` box average, window `i − k/2 ..= i − k/2 + k − 1`.
pub fn box_mean(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let off = (k / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for a in 0..k as i64 {
                for b in 0..k as i64 {
                    acc += map[mirror(y as i64 - off + a, h) * w + mirror(x as i64 - off + b, w)];
                }
            }
            out[y * w + x] = acc / (k * k) as f64;
        }
    }
    out
}

pub fn pooled_max(map: &[f64], h: usize, w: usize, iterations: usize, k: usize) -> f64 {
    let mut m = map.to_vec();
    for _ in 0..iterations {
        m = box_mean(&m, h, w, k);
    }
    m.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Half-pixel-centred bilinear upsampling, computed per output pixel.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let a = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
        let b = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
        a * (1.0 - fy) + b * fy
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
            let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
            out.push(sample(sy, sx));
        }
    }
    out
}

/// `1 − cos` per location of two `c × h × w` feature grids.
pub fn cosine_map(a: &[f64], b: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..hw)
        .map(|p| {
            let va: Vec<f64> = (0..c).map(|ch| a[ch * hw + p]).collect();
            let vb: Vec<f64> = (0..c).map(|ch| b[ch * hw + p]).collect();
            let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
            match (na == 0.0, nb == 0.0) {
                (true, true) => 0.0,
                (true, false) | (false, true) => 1.0,
                _ => 1.0 - dot / (na * nb),
            }
        })
        .collect()
}
