//! Synthetic texture corpus with injected defects and exact masks.
//!
//! Images are produced directly as 8-bit RGB so that a mask marks exactly
//! the pixels that differ from the clean source after quantization.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bad_config, Result};
use crate::image::{Grid, ImageTensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    Sinusoidal,
    Checker,
    BlobNoise,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Sinusoidal, Texture::Checker, Texture::BlobNoise];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Sinusoidal => "sinusoidal",
            Texture::Checker => "checker",
            Texture::BlobNoise => "blob_noise",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injector {
    Rectangle,
    BlobStain,
    Scratch,
}

impl Injector {
    pub const ALL: [Injector; 3] = [Injector::Rectangle, Injector::BlobStain, Injector::Scratch];

    /// Defect-type directory name.
    pub fn name(self) -> &'static str {
        match self {
            Injector::Rectangle => "rectangle",
            Injector::BlobStain => "stain",
            Injector::Scratch => "scratch",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_categories: usize,
    pub image_size: usize,
    pub train_per_category: usize,
    pub test_good_per_category: usize,
    /// Defective test images per category, injectors used round-robin.
    pub test_defect_per_category: usize,
    /// Cycled over categories.
    pub textures: Vec<Texture>,
    pub injectors: Vec<Injector>,
    /// Rectangle area as a fraction of the image.
    pub rect_area: (f64, f64),
    /// Stain radius as a fraction of the image side.
    pub stain_radius: (f64, f64),
    /// Scratch half-width in pixels.
    pub scratch_width: (f64, f64),
    /// Minimum per-pixel change (largest channel difference) inside a mask.
    pub intensity_delta: u8,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_categories: 3,
            image_size: 64,
            train_per_category: 60,
            test_good_per_category: 12,
            test_defect_per_category: 12,
            textures: Texture::ALL.to_vec(),
            injectors: Injector::ALL.to_vec(),
            rect_area: (0.15, 0.3),
            stain_radius: (0.08, 0.16),
            scratch_width: (1.0, 2.0),
            intensity_delta: 40,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.image_size < 8 {
            return Err(bad_config!(
                "need at least one category and images of side >= 8"
            ));
        }
        if self.train_per_category == 0 || self.test_good_per_category == 0 {
            return Err(bad_config!("train and good test splits must be non-empty"));
        }
        if self.textures.is_empty() {
            return Err(bad_config!("at least one texture family is required"));
        }
        if self.test_defect_per_category > 0 && self.injectors.is_empty() {
            return Err(bad_config!(
                "defective test images requested without injectors"
            ));
        }
        let ok = |(lo, hi): (f64, f64), max: f64| lo > 0.0 && lo <= hi && hi <= max;
        if !ok(self.rect_area, 1.0)
            || !ok(self.stain_radius, 0.5)
            || !ok(self.scratch_width, self.image_size as f64)
        {
            return Err(bad_config!(
                "defect size ranges must be positive, ordered and in range"
            ));
        }
        if self.intensity_delta == 0 || self.intensity_delta > 127 {
            return Err(bad_config!("intensity_delta must lie in 1..=127"));
        }
        Ok(())
    }

    /// Category names: the texture name, suffixed with an index once the
    /// texture list wraps around.
    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_categories)
            .map(|i| {
                let t = self.textures[i % self.textures.len()].name();
                match i / self.textures.len() {
                    0 => String::from(t),
                    k => format!("{t}_{k}"),
                }
            })
            .collect()
    }

    pub fn total_images(&self) -> usize {
        self.num_categories
            * (self.train_per_category
                + self.test_good_per_category
                + self.test_defect_per_category)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Interleaved 8-bit RGB, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&p);
    }

    /// `3 × H × W` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> ImageTensor {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            f64::from(self.pixels[p * 3 + c]) / 255.0
        })
    }

    /// Quantizes a `[0, 1]` image tensor (values are clamped).
    pub fn from_tensor(t: &ImageTensor) -> Self {
        let (_, h, w) = t.dims3();
        let mut img = Self::new(h, w);
        for c in 0..3 {
            for p in 0..h * w {
                let v = t.data()[c * h * w + p].clamp(0.0, 1.0);
                img.pixels[p * 3 + c] = libm::round(v * 255.0) as u8;
            }
        }
        img
    }
}

/// One generated image.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub category: String,
    pub split: Split,
    /// `"good"` or the injector name.
    pub defect: String,
    /// Index within `(category, split, defect)`.
    pub index: usize,
    pub image: RgbImage,
    /// Defect-free source of a defective image.
    pub clean: Option<RgbImage>,
    /// Binary mask of the injected pixels.
    pub mask: Option<Grid>,
}

/// Per-category look: palette and texture parameters.
#[derive(Debug, Clone)]
struct Style {
    texture: Texture,
    colors: [[f64; 3]; 2],
    freq: f64,
    angle: f64,
    cell: usize,
    blob_grid: usize,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ]
}

fn style(texture: Texture, rng: &mut ChaCha8Rng) -> Style {
    let a = random_color(rng);
    let mut b = random_color(rng);
    // Keep the two palette colors clearly distinct.
    while (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() < 0.6 {
        b = random_color(rng);
    }
    Style {
        texture,
        colors: [a, b],
        freq: rng.random_range(3.0..6.0),
        angle: rng.random_range(0.0..PI),
        cell: rng.random_range(6..12),
        blob_grid: rng.random_range(3..6),
    }
}

fn clean_image(s: &Style, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = size as f64;
    let field: Vec<f64> = match s.texture {
        Texture::Sinusoidal => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let freq = s.freq * rng.random_range(0.95..1.05);
            let (ca, sa) = (libm::cos(s.angle), libm::sin(s.angle));
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    0.5 + 0.5 * libm::sin(2.0 * PI * freq * (x * ca + y * sa) / n + phase)
                })
                .collect()
        }
        Texture::Checker => {
            let (oy, ox) = (rng.random_range(0..s.cell), rng.random_range(0..s.cell));
            (0..size * size)
                .map(|i| {
                    let (y, x) = ((i / size + oy) / s.cell, (i % size + ox) / s.cell);
                    f64::from(u8::from((y + x) % 2 == 0))
                })
                .collect()
        }
        Texture::BlobNoise => {
            let g = s.blob_grid + 1;
            let knots: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
            let up = crate::image::resize_plane_bilinear(&knots, g, g, size, size);
            let smooth: Vec<f64> = up.iter().map(|&v| v * v * (3.0 - 2.0 * v)).collect();
            smooth
        }
    };
    let mut img = RgbImage::new(size, size);
    for (i, &v) in field.iter().enumerate() {
        let mut p = [0u8; 3];
        for (c, out) in p.iter_mut().enumerate() {
            let base = s.colors[0][c] * (1.0 - v) + s.colors[1][c] * v;
            let noise = rng.random_range(-0.012..0.012);
            *out = libm::round((base + noise).clamp(0.0, 1.0) * 255.0) as u8;
        }
        img.set(i / size, i % size, p);
    }
    img
}

/// Replacement color guaranteed to differ from `clean` by at least `delta`
/// in some channel.
fn enforce_delta(clean: [u8; 3], mut new: [u8; 3], delta: u8) -> [u8; 3] {
    let diff = (0..3).map(|c| clean[c].abs_diff(new[c])).max().unwrap_or(0);
    if diff >= delta {
        return new;
    }
    let c = (0..3)
        .max_by_key(|&c| clean[c].max(255 - clean[c]))
        .expect("three channels");
    new[c] = if clean[c] >= 128 {
        clean[c] - delta
    } else {
        clean[c] + delta
    };
    new
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)
}

/// Boolean coverage of a defect shape.
fn defect_shape(kind: Injector, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let size = spec.image_size;
    let n = size as f64;
    let mut cover = vec![false; size * size];
    match kind {
        Injector::Rectangle => {
            let area = rng.random_range(spec.rect_area.0..=spec.rect_area.1) * n * n;
            let aspect = rng.random_range(0.6..1.6);
            let rh = (libm::ceil(libm::sqrt(area * aspect)) as usize).clamp(1, size);
            let rw = (libm::ceil(area / rh as f64) as usize).clamp(1, size);
            let (y0, x0) = (
                rng.random_range(0..=size - rh),
                rng.random_range(0..=size - rw),
            );
            for y in y0..y0 + rh {
                cover[y * size + x0..y * size + x0 + rw].fill(true);
            }
        }
        Injector::BlobStain => {
            let r = rng.random_range(spec.stain_radius.0..=spec.stain_radius.1) * n;
            let (cy, cx) = (rng.random_range(r..n - r), rng.random_range(r..n - r));
            let k = rng.random_range(2..5) as f64;
            let wobble = rng.random_range(0.1..0.3);
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let theta = libm::atan2(dy, dx);
                    let radius = r * (1.0 + wobble * libm::sin(k * theta + phase));
                    cover[y * size + x] = dy * dy + dx * dx <= radius * radius;
                }
            }
        }
        Injector::Scratch => {
            let half = rng.random_range(spec.scratch_width.0..=spec.scratch_width.1) / 2.0;
            let (ay, ax) = (
                rng.random_range(0.1..0.9) * n,
                rng.random_range(0.1..0.9) * n,
            );
            let angle = rng.random_range(0.0..PI);
            let len = rng.random_range(0.4..0.8) * n;
            let (dy, dx) = (libm::sin(angle), libm::cos(angle));
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64 + 0.5 - ay, x as f64 + 0.5 - ax);
                    let along = py * dy + px * dx;
                    let across = (px * dy - py * dx).abs();
                    cover[y * size + x] = across <= half.max(0.5) && along.abs() <= len / 2.0;
                }
            }
        }
    }
    cover
}

/// Paints a defect over `clean`. Returns the defective image and its mask.
pub fn inject(
    clean: &RgbImage,
    kind: Injector,
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, Grid) {
    let size = clean.height;
    let mut cover = defect_shape(kind, spec, rng);
    if !cover.iter().any(|&c| c) {
        cover[(size / 2) * size + size / 2] = true;
    }
    let color = random_color(rng);
    let mut out = clean.clone();
    for (i, _) in cover.iter().enumerate().filter(|(_, &c)| c) {
        let (y, x) = (i / size, i % size);
        let src = clean.get(y, x);
        let paint = match kind {
            Injector::Rectangle | Injector::Scratch => to_u8(color),
            Injector::BlobStain => {
                let f = src.map(|v| f64::from(v) / 255.0);
                to_u8([0, 1, 2].map(|c| 0.35 * f[c] + 0.65 * color[c]))
            }
        };
        out.set(y, x, enforce_delta(src, paint, spec.intensity_delta));
    }
    let mask = Grid::from_vec(
        size,
        size,
        cover.iter().map(|&c| f64::from(u8::from(c))).collect(),
    )
    .expect("sizes agree");
    (out, mask)
}

/// Stream-separated generator for one `(category, purpose, index)`.
fn rng_for(seed: u64, category: usize, stream: u64, index: usize) -> ChaCha8Rng {
    let mut x = seed ^ 0x5851_f42d_4c95_7f2d;
    for v in [category as u64, stream, index as u64] {
        x = (x ^ v).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    ChaCha8Rng::seed_from_u64(x)
}

/// Generates the full corpus in category, split, defect, index order.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let names = spec.category_names();
    let mut out = Vec::with_capacity(spec.total_images());
    for (ci, name) in names.iter().enumerate() {
        let texture = spec.textures[ci % spec.textures.len()];
        let st = style(texture, &mut rng_for(spec.seed, ci, 0, 0));
        for i in 0..spec.train_per_category {
            out.push(SyntheticSample {
                category: name.clone(),
                split: Split::Train,
                defect: String::from("good"),
                index: i,
                image: clean_image(&st, spec.image_size, &mut rng_for(spec.seed, ci, 1, i)),
                clean: None,
                mask: None,
            });
        }
        let mut defects: Vec<SyntheticSample> = Vec::new();
        let mut per_kind = vec![0usize; spec.injectors.len()];
        for i in 0..spec.test_defect_per_category {
            let k = i % spec.injectors.len();
            let kind = spec.injectors[k];
            let clean = clean_image(&st, spec.image_size, &mut rng_for(spec.seed, ci, 3, i));
            let (image, mask) = inject(&clean, kind, spec, &mut rng_for(spec.seed, ci, 4, i));
            defects.push(SyntheticSample {
                category: name.clone(),
                split: Split::Test,
                defect: String::from(kind.name()),
                index: per_kind[k],
                image,
                clean: Some(clean),
                mask: Some(mask),
            });
            per_kind[k] += 1;
        }
        let goods = (0..spec.test_good_per_category).map(|i| SyntheticSample {
            category: name.clone(),
            split: Split::Test,
            defect: String::from("good"),
            index: i,
            image: clean_image(&st, spec.image_size, &mut rng_for(spec.seed, ci, 2, i)),
            clean: None,
            mask: None,
        });
        let mut test: Vec<SyntheticSample> = defects.into_iter().chain(goods).collect();
        test.sort_by(|a, b| a.defect.cmp(&b.defect).then(a.index.cmp(&b.index)));
        out.extend(test);
    }
    Ok(out)
}
