//! Inference: diffusion reconstruction, multi-scale feature comparison,
//! smoothing and the image-level score.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Autoencoder;
use crate::backbone::{Backbone, FeaturePyramid};
use crate::denoiser::{DenoiserAssembly, SgInput};
use crate::diffusion::{ddim_sample_from, forward_diffuse, LatentTensor, NoiseSchedule};
use crate::error::{bad_config, check_shape, invalid, Result};
use crate::image::{check_image, Grid, ImageTensor};
use crate::tensor::{Scalar, Tensor};
use crate::training::gaussian;

/// Lower bound on the norm product in the cosine denominator.
pub const COSINE_FLOOR: f64 = 1e-8;

/// `1 − cos(a[:, y, x], b[:, y, x])` at every location. Two zero vectors
/// give 0, exactly one zero vector gives 1.
pub fn anomaly_map_per_scale(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Grid> {
    check_shape(a.shape(), b.shape())?;
    if a.rank() != 3 {
        return Err(invalid!(
            "feature grids must be rank 3, got {:?}",
            a.shape()
        ));
    }
    let (c, h, w) = a.dims3();
    let hw = h * w;
    let (ad, bd) = (a.data(), b.data());
    let mut dot = vec![0.0; hw];
    let mut na = vec![0.0; hw];
    let mut nb = vec![0.0; hw];
    for ch in 0..c {
        let (ar, br) = (&ad[ch * hw..(ch + 1) * hw], &bd[ch * hw..(ch + 1) * hw]);
        for i in 0..hw {
            dot[i] += ar[i] * br[i];
            na[i] += ar[i] * ar[i];
            nb[i] += br[i] * br[i];
        }
    }
    let data = (0..hw)
        .map(|i| match (na[i] == 0.0, nb[i] == 0.0) {
            (true, true) => 0.0,
            (true, false) | (false, true) => 1.0,
            _ => {
                let denom = (libm::sqrt(na[i]) * libm::sqrt(nb[i])).max(COSINE_FLOOR);
                (1.0 - dot[i] / denom).clamp(0.0, 2.0)
            }
        })
        .collect();
    Grid::from_vec(h, w, data)
}

/// Bilinearly upsamples every map to `h × w` and sums them.
pub fn aggregate_maps(maps: &[Grid], h: usize, w: usize) -> Result<Grid> {
    if maps.is_empty() {
        return Err(invalid!("no anomaly maps to aggregate"));
    }
    let mut out = Grid::zeros(h, w);
    for m in maps {
        let up = m.resize_bilinear(h, w);
        out.data_mut()
            .iter_mut()
            .zip(up.data())
            .for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Half-sample symmetric reflection of index `i` into `0..n`
/// (`d c b a | a b c d | d c b a`), valid for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let p = 2 * n;
    let m = i.rem_euclid(p);
    (if m < n { m } else { p - 1 - m }) as usize
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈4σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid!("sigma must be positive, got {sigma}"));
    }
    let r = libm::ceil(4.0 * sigma) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| libm::exp(-((d * d) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Separable 1-D correlation along rows then columns with reflected borders.
fn separable(map: &Grid, taps: &[f64], offset: isize) -> Grid {
    let (h, w) = map.dims();
    let mut tmp = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * map.get(y, reflect_index(x as isize + k as isize + offset, w));
            }
            tmp.set(y, x, acc);
        }
    }
    let mut out = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * tmp.get(reflect_index(y as isize + k as isize + offset, h), x);
            }
            out.set(y, x, acc);
        }
    }
    out
}

pub fn gaussian_smooth(map: &Grid, sigma: f64) -> Result<Grid> {
    let taps = gaussian_kernel(sigma)?;
    let r = (taps.len() / 2) as isize;
    Ok(separable(map, &taps, -r))
}

/// `k × k` stride-1 mean filter with reflected borders. For even `k` the
/// window at `i` covers `i − k/2 ..= i + k/2 − 1`.
pub fn mean_filter(map: &Grid, k: usize) -> Result<Grid> {
    let (h, w) = map.dims();
    if k == 0 || k > h.min(w) {
        return Err(invalid!("pooling kernel {k} does not fit a {h}x{w} map"));
    }
    let taps = vec![1.0 / k as f64; k];
    Ok(separable(map, &taps, -((k / 2) as isize)))
}

/// `k × k` average pooling with stride `k` (trailing rows/columns that do
/// not fill a window are dropped).
pub fn average_pool(map: &Grid, k: usize) -> Result<Grid> {
    let (h, w) = map.dims();
    if k == 0 || k > h.min(w) {
        return Err(invalid!("pooling kernel {k} does not fit a {h}x{w} map"));
    }
    let (oh, ow) = (h / k, w / k);
    let norm = (k * k) as f64;
    Ok(Grid::from_fn(oh, ow, |y, x| {
        let mut s = 0.0;
        for dy in 0..k {
            for dx in 0..k {
                s += map.get(y * k + dy, x * k + dx);
            }
        }
        s / norm
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolingMode {
    /// Stride-1 mean filtering; the map keeps its size.
    #[default]
    Stride1,
    /// Stride-`k` average pooling. Once the map is smaller than the kernel
    /// each round pools over the whole remaining map.
    Downsample,
}

/// Maximum of the map after `iterations` rounds of `kernel × kernel`
/// averaging.
pub fn image_score_with(
    map: &Grid,
    iterations: usize,
    kernel: usize,
    mode: PoolingMode,
) -> Result<f64> {
    if iterations == 0 {
        return Err(invalid!("pooling needs at least one iteration"));
    }
    let (h, w) = map.dims();
    if kernel == 0 || kernel > h.min(w) {
        return Err(invalid!(
            "pooling kernel {kernel} does not fit a {h}x{w} map"
        ));
    }
    let mut m = map.clone();
    for _ in 0..iterations {
        m = match mode {
            PoolingMode::Stride1 => mean_filter(&m, kernel)?,
            PoolingMode::Downsample => {
                let k = kernel.min(m.height()).min(m.width());
                average_pool(&m, k)?
            }
        };
    }
    Ok(m.max())
}

pub fn image_score(map: &Grid, iterations: usize, kernel: usize) -> Result<f64> {
    image_score_with(map, iterations, kernel, PoolingMode::Stride1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    /// 1-based backbone levels compared between input and reconstruction.
    pub feature_levels: Vec<usize>,
    pub sigma: f64,
    pub pooling_iterations: usize,
    pub pooling_kernel: usize,
    pub pooling_mode: PoolingMode,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            feature_levels: vec![2, 3, 4],
            sigma: 5.0,
            pooling_iterations: 8,
            pooling_kernel: 8,
            pooling_mode: PoolingMode::Stride1,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self, backbone_levels: usize) -> Result<()> {
        if self.feature_levels.is_empty() {
            return Err(bad_config!("select at least one feature level"));
        }
        if let Some(l) = self
            .feature_levels
            .iter()
            .find(|&&l| l == 0 || l > backbone_levels)
        {
            return Err(bad_config!(
                "feature level {l} not in 1..={backbone_levels}"
            ));
        }
        if !(self.sigma > 0.0) || self.pooling_iterations == 0 || self.pooling_kernel == 0 {
            return Err(bad_config!(
                "sigma, pooling iterations and kernel must be positive"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    /// Aggregated, smoothed map at input resolution.
    pub pixel_map: Grid,
    pub image_score: f64,
    pub reconstruction: ImageTensor,
    /// `ℳⁿ` for each selected level, before upsampling.
    pub per_scale_maps: Vec<Grid>,
}

/// Produces reconstructions of input images.
pub trait Reconstructor: Sync {
    fn reconstruct_batch(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>>;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct_batch(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        Ok(images.to_vec())
    }
}

/// Diffusion parameters of a reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconstructionConfig {
    /// Number of forward noising steps; `T` noises all the way.
    pub forward_t: usize,
    pub ddim_steps: usize,
    pub seed: u64,
}

/// Noise the encoded input to `forward_t`, denoise with DDIM conditioned on
/// the input, decode.
pub struct DiffusionReconstructor<'a, F: Scalar = f32> {
    pub autoencoder: &'a Autoencoder<F>,
    pub assembly: &'a DenoiserAssembly<F>,
    pub schedule: &'a NoiseSchedule,
    pub config: ReconstructionConfig,
}

/// FNV-1a over the bit patterns of `t`.
fn content_hash(t: &Tensor<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Forward-process noise for one image: a function of the seed and the
/// image content only, so results do not depend on batching or order.
pub fn reconstruction_noise(image: &ImageTensor, seed: u64, shape: &[usize]) -> LatentTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ content_hash(image).rotate_left(17));
    gaussian(&mut rng, shape)
}

impl<F: Scalar> DiffusionReconstructor<'_, F> {
    fn start_step(&self) -> Result<usize> {
        let t = self.config.forward_t;
        if t == 0 || t > self.schedule.steps() {
            return Err(invalid!(
                "forward_t must lie in 1..={}, got {t}",
                self.schedule.steps()
            ));
        }
        Ok(t - 1)
    }
}

impl<F: Scalar> Reconstructor for DiffusionReconstructor<'_, F> {
    fn reconstruct_batch(&self, images: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for x in images {
            check_image(x)?;
        }
        let start = self.start_step()?;
        let z0 = self.autoencoder.diffusion_latents(images)?;
        let shape = z0[0].shape().to_vec();
        let mut noisy = Vec::with_capacity(images.len());
        for (x, z) in images.iter().zip(&z0) {
            let eps = reconstruction_noise(x, self.config.seed, &shape);
            noisy.push(forward_diffuse(z, start, &eps, self.schedule)?);
        }
        let batch = Tensor::stack(&noisy)?;
        let n = images.len();
        let clean = (self.assembly.net.config.sg_input == SgInput::Clean).then_some(z0.as_slice());
        let use_sg = self.assembly.net.config.connection.has_sg();
        let out = ddim_sample_from(
            &batch,
            |z, t| {
                let zs = z.unstack();
                let ts = vec![t; n];
                let x0 = use_sg.then_some(images);
                let eps = self
                    .assembly
                    .predict_noise_batch(&zs, &ts, x0, clean, self.schedule)?;
                Tensor::stack(&eps)
            },
            self.schedule,
            start,
            self.config.ddim_steps,
        )?;
        self.autoencoder.decode_diffusion_latents(&out.unstack())
    }
}

/// Single-image reconstruction.
pub fn reconstruct<F: Scalar>(
    x0: &ImageTensor,
    assembly: &DenoiserAssembly<F>,
    autoencoder: &Autoencoder<F>,
    schedule: &NoiseSchedule,
    config: ReconstructionConfig,
) -> Result<ImageTensor> {
    let r = DiffusionReconstructor {
        autoencoder,
        assembly,
        schedule,
        config,
    };
    Ok(r.reconstruct_batch(core::slice::from_ref(x0))?.remove(0))
}

/// Maps and score from an input and its reconstruction's feature pyramids.
pub fn score_features(
    input: &FeaturePyramid,
    recon: &FeaturePyramid,
    h: usize,
    w: usize,
    config: &ScoringConfig,
) -> Result<(Vec<Grid>, Grid, f64)> {
    let mut per_scale = Vec::with_capacity(config.feature_levels.len());
    for &n in &config.feature_levels {
        per_scale.push(anomaly_map_per_scale(input.level(n)?, recon.level(n)?)?);
    }
    let agg = aggregate_maps(&per_scale, h, w)?;
    let smooth = gaussian_smooth(&agg, config.sigma)?;
    let score = image_score_with(
        &smooth,
        config.pooling_iterations,
        config.pooling_kernel,
        config.pooling_mode,
    )?;
    Ok((per_scale, smooth, score))
}

/// Scores a batch: reconstruct, extract features of both, compare.
pub fn score_batch(
    images: &[ImageTensor],
    reconstructor: &dyn Reconstructor,
    backbone: &dyn Backbone,
    config: &ScoringConfig,
) -> Result<Vec<AnomalyResult>> {
    config.validate(backbone.num_levels())?;
    let recon = reconstructor.reconstruct_batch(images)?;
    score_reconstructions(images, recon, backbone, config)
}

/// Scores inputs against already computed reconstructions.
pub fn score_reconstructions(
    images: &[ImageTensor],
    recon: Vec<ImageTensor>,
    backbone: &dyn Backbone,
    config: &ScoringConfig,
) -> Result<Vec<AnomalyResult>> {
    config.validate(backbone.num_levels())?;
    if recon.len() != images.len() {
        return Err(invalid!(
            "{} reconstructions for {} images",
            recon.len(),
            images.len()
        ));
    }
    let fa = backbone.extract_batch(images)?;
    let fb = backbone.extract_batch(&recon)?;
    let mut out = Vec::with_capacity(images.len());
    for (((x, r), a), b) in images.iter().zip(recon).zip(&fa).zip(&fb) {
        check_shape(x.shape(), r.shape())?;
        let (_, h, w) = x.dims3();
        let (per_scale_maps, pixel_map, image_score) = score_features(a, b, h, w, config)?;
        out.push(AnomalyResult {
            pixel_map,
            image_score,
            reconstruction: r,
            per_scale_maps,
        });
    }
    Ok(out)
}

pub fn score_image(
    x0: &ImageTensor,
    reconstructor: &dyn Reconstructor,
    backbone: &dyn Backbone,
    config: &ScoringConfig,
) -> Result<AnomalyResult> {
    Ok(score_batch(core::slice::from_ref(x0), reconstructor, backbone, config)?.remove(0))
}
