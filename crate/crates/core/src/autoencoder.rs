//! Convolutional KL autoencoder mapping `3 × H × W` images to a
//! `c × H/d × W/d` latent grid and back.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::LatentTensor;
use crate::error::{bad_config, check_shape, invalid, Result};
use crate::graph::{Graph, Mode, Var};
use crate::image::{check_image, ImageTensor};
use crate::nn::{Conv2d, Norm, ParamBuilder, ResBlock};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Log-variance is clamped to this range before exponentiation.
pub const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    /// Residual blocks per resolution level.
    pub res_blocks: usize,
}

impl AutoencoderConfig {
    pub fn downsample_factor(&self) -> usize {
        1 << (self.channel_multipliers.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || self.res_blocks == 0 {
            return Err(bad_config!(
                "autoencoder widths and block counts must be positive"
            ));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(bad_config!(
                "channel multipliers must be a non-empty list of positive integers"
            ));
        }
        Ok(())
    }

    /// Latent shape for an `h × w` image.
    pub fn latent_shape(&self, h: usize, w: usize) -> Result<[usize; 3]> {
        let d = self.downsample_factor();
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(invalid!(
                "image size {h}x{w} is not divisible by the downsample factor {d}"
            ));
        }
        Ok([self.latent_channels, h / d, w / d])
    }
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: alloc::vec![1, 2, 4, 4],
            res_blocks: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Level {
    blocks: Vec<ResBlock>,
    resample: Option<Conv2d>,
}

/// Network layout; parameters live in the [`ParamStore`] it was built into.
#[derive(Debug, Clone)]
pub struct AutoencoderNet {
    pub config: AutoencoderConfig,
    enc_in: Conv2d,
    enc_levels: Vec<Level>,
    enc_mid: ResBlock,
    enc_norm: Norm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResBlock,
    dec_levels: Vec<Level>,
    dec_norm: Norm,
    dec_out: Conv2d,
}

impl AutoencoderNet {
    pub fn new<F: Scalar>(
        config: AutoencoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(store, rng, ParamGroup::Autoencoder);
        let base = config.base_channels;
        let widths: Vec<usize> = config
            .channel_multipliers
            .iter()
            .map(|m| m * base)
            .collect();
        let top = *widths.last().expect("validated non-empty");
        let last = widths.len() - 1;

        let enc_in = b.conv("ae.enc.conv_in", 3, base, 3, 1, true, false);
        let mut enc_levels = Vec::new();
        let mut ch = base;
        for (i, &w) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for r in 0..config.res_blocks {
                blocks.push(ResBlock::new(
                    &mut b,
                    &format!("ae.enc.{i}.res{r}"),
                    ch,
                    w,
                    None,
                ));
                ch = w;
            }
            let resample =
                (i < last).then(|| b.conv(&format!("ae.enc.{i}.down"), w, w, 3, 2, true, false));
            enc_levels.push(Level { blocks, resample });
        }
        let enc_mid = ResBlock::new(&mut b, "ae.enc.mid", top, top, None);
        let enc_norm = b.group_norm("ae.enc.norm_out", top);
        let enc_out = b.conv(
            "ae.enc.conv_out",
            top,
            2 * config.latent_channels,
            3,
            1,
            true,
            false,
        );

        let dec_in = b.conv(
            "ae.dec.conv_in",
            config.latent_channels,
            top,
            3,
            1,
            true,
            false,
        );
        let dec_mid = ResBlock::new(&mut b, "ae.dec.mid", top, top, None);
        let mut dec_levels = Vec::new();
        let mut ch = top;
        for (i, &w) in widths.iter().enumerate().rev() {
            let mut blocks = Vec::new();
            for r in 0..config.res_blocks {
                blocks.push(ResBlock::new(
                    &mut b,
                    &format!("ae.dec.{i}.res{r}"),
                    ch,
                    w,
                    None,
                ));
                ch = w;
            }
            let resample =
                (i > 0).then(|| b.conv(&format!("ae.dec.{i}.up"), w, w, 3, 1, true, false));
            dec_levels.push(Level { blocks, resample });
        }
        let dec_norm = b.group_norm("ae.dec.norm_out", base);
        let dec_out = b.conv("ae.dec.conv_out", base, 3, 3, 1, true, false);

        Ok(Self {
            config,
            enc_in,
            enc_levels,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_levels,
            dec_norm,
            dec_out,
        })
    }

    /// `x` is a `[n, 3, H, W]` batch in `[0, 1]`; returns `(mean, logvar)`.
    pub fn forward_encode<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = g.value(x).dims4();
        self.config.latent_shape(h, w)?;
        let x = g.scale(x, F::of(2.0));
        let x = g.add_scalar(x, F::of(-1.0));
        let mut h = self.enc_in.forward(g, x)?;
        for level in &self.enc_levels {
            for block in &level.blocks {
                h = block.forward(g, h, None)?;
            }
            if let Some(down) = &level.resample {
                h = down.forward(g, h)?;
            }
        }
        h = self.enc_mid.forward(g, h, None)?;
        h = self.enc_norm.forward(g, h)?;
        h = g.silu(h);
        let moments = self.enc_out.forward(g, h)?;
        let c = self.config.latent_channels;
        let mean = g.slice_channels(moments, 0, c)?;
        let logvar = g.slice_channels(moments, c, c)?;
        let logvar = g.clamp(logvar, F::of(LOGVAR_RANGE.0), F::of(LOGVAR_RANGE.1));
        Ok((mean, logvar))
    }

    /// Decodes `[n, c, h, w]` latents into unclamped `[n, 3, H, W]` images.
    pub fn forward_decode<F: Scalar>(&self, g: &mut Graph<'_, F>, z: Var) -> Result<Var> {
        let (_, c, _, _) = g.value(z).dims4();
        if c != self.config.latent_channels {
            return Err(invalid!(
                "latent has {c} channels, expected {}",
                self.config.latent_channels
            ));
        }
        let mut h = self.dec_in.forward(g, z)?;
        h = self.dec_mid.forward(g, h, None)?;
        for level in &self.dec_levels {
            for block in &level.blocks {
                h = block.forward(g, h, None)?;
            }
            if let Some(up) = &level.resample {
                let (_, _, hh, ww) = g.value(h).dims4();
                h = g.upsample_nearest(h, 2 * hh, 2 * ww);
                h = up.forward(g, h)?;
            }
        }
        h = self.dec_norm.forward(g, h)?;
        h = g.silu(h);
        let y = self.dec_out.forward(g, h)?;
        let y = g.add_scalar(y, F::one());
        Ok(g.scale(y, F::of(0.5)))
    }

    /// Reparameterized sample inside a graph, `mean + exp(logvar / 2) · noise`.
    pub fn forward_sample<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        mean: Var,
        logvar: Var,
        noise: Tensor<F>,
    ) -> Result<Var> {
        let half = g.scale(logvar, F::of(0.5));
        let std = g.exp(half);
        let n = g.input(noise);
        let s = g.mul(std, n)?;
        g.add(mean, s)
    }
}

/// Autoencoder layout together with its parameters.
#[derive(Debug, Clone)]
pub struct Autoencoder<F: Scalar = f32> {
    pub net: AutoencoderNet,
    pub store: ParamStore<F>,
    /// Multiplier applied to encoder means before diffusion so the latents
    /// have roughly unit variance.
    pub latent_scale: f64,
}

impl<F: Scalar> Autoencoder<F> {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = AutoencoderNet::new(config, &mut store, &mut rng)?;
        Ok(Self {
            net,
            store,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.net.config
    }

    pub fn cast<G: Scalar>(&self) -> Autoencoder<G> {
        Autoencoder {
            net: self.net.clone(),
            store: self.store.cast(),
            latent_scale: self.latent_scale,
        }
    }

    /// Encoder moments for a batch of images, returned per image.
    pub fn encode_batch(
        &self,
        images: &[ImageTensor],
    ) -> Result<Vec<(LatentTensor, LatentTensor)>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for x in images {
            check_image(x)?;
        }
        let batch = Tensor::stack(&images.iter().map(|x| x.cast::<F>()).collect::<Vec<_>>())?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch);
        let (m, lv) = self.net.forward_encode(&mut g, x)?;
        let means = g.value(m).unstack();
        let logvars = g.value(lv).unstack();
        Ok(means
            .into_iter()
            .zip(logvars)
            .map(|(m, lv)| (m.cast(), lv.cast()))
            .collect())
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<(LatentTensor, LatentTensor)> {
        Ok(self.encode_batch(core::slice::from_ref(x))?.remove(0))
    }

    /// Decodes latents to images clamped to `[0, 1]`.
    pub fn decode_batch(&self, latents: &[LatentTensor]) -> Result<Vec<ImageTensor>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for z in latents {
            if z.rank() != 3 {
                return Err(invalid!("latent must be rank 3, got shape {:?}", z.shape()));
            }
            check_shape(latents[0].shape(), z.shape())?;
        }
        let batch = Tensor::stack(&latents.iter().map(|z| z.cast::<F>()).collect::<Vec<_>>())?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = g.input(batch);
        let y = self.net.forward_decode(&mut g, z)?;
        Ok(g.value(y)
            .unstack()
            .into_iter()
            .map(|t| t.cast::<f64>().map(|v| v.clamp(0.0, 1.0)))
            .collect())
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        Ok(self.decode_batch(core::slice::from_ref(z))?.remove(0))
    }

    /// Encoder means multiplied by [`Self::latent_scale`]: the latents the
    /// diffusion model works on.
    pub fn diffusion_latents(&self, images: &[ImageTensor]) -> Result<Vec<LatentTensor>> {
        let s = self.latent_scale;
        Ok(self
            .encode_batch(images)?
            .into_iter()
            .map(|(m, _)| m.map(|v| v * s))
            .collect())
    }

    /// Inverse of [`Self::diffusion_latents`] followed by decoding.
    pub fn decode_diffusion_latents(&self, latents: &[LatentTensor]) -> Result<Vec<ImageTensor>> {
        let inv = 1.0 / self.latent_scale;
        let raw: Vec<_> = latents.iter().map(|z| z.map(|v| v * inv)).collect();
        self.decode_batch(&raw)
    }
}

/// `mean + exp(logvar / 2) · noise`.
pub fn sample_latent(
    mean: &LatentTensor,
    log_variance: &LatentTensor,
    noise: &LatentTensor,
) -> Result<LatentTensor> {
    check_shape(mean.shape(), log_variance.shape())?;
    check_shape(mean.shape(), noise.shape())?;
    let data = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .zip(noise.data())
        .map(|((&m, &lv), &n)| m + libm::exp(0.5 * lv) * n)
        .collect();
    Tensor::from_vec(mean.shape(), data)
}

/// Reconstruction, KL and weighted total of the autoencoder objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoencoderLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Pixel MSE plus the element-averaged KL divergence of
/// `N(mean, exp(logvar))` from the unit Gaussian.
pub fn autoencoder_loss(
    x0: &ImageTensor,
    x_rec: &ImageTensor,
    mean: &LatentTensor,
    log_variance: &LatentTensor,
    kl_weight: f64,
) -> Result<AutoencoderLoss> {
    if !(kl_weight >= 0.0) {
        return Err(invalid!("kl_weight must be non-negative, got {kl_weight}"));
    }
    check_shape(x0.shape(), x_rec.shape())?;
    check_shape(mean.shape(), log_variance.shape())?;
    let reconstruction = x0
        .data()
        .iter()
        .zip(x_rec.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x0.numel().max(1) as f64;
    let kl = mean
        .data()
        .iter()
        .zip(log_variance.data())
        .map(|(&m, &lv)| 0.5 * (m * m + libm::exp(lv) - 1.0 - lv))
        .sum::<f64>()
        / mean.numel().max(1) as f64;
    Ok(AutoencoderLoss {
        total: reconstruction + kl_weight * kl,
        reconstruction,
        kl,
    })
}

/// Graph version of [`autoencoder_loss`]; returns `(total, reconstruction, kl)`.
pub fn autoencoder_loss_graph<F: Scalar>(
    g: &mut Graph<'_, F>,
    x0: Var,
    x_rec: Var,
    mean: Var,
    logvar: Var,
    kl_weight: f64,
) -> Result<(Var, Var, Var)> {
    let rec = g.mse(x_rec, x0)?;
    let m2 = g.mul(mean, mean)?;
    let ev = g.exp(logvar);
    let s = g.add(m2, ev)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, F::of(-1.0));
    let s = g.scale(s, F::of(0.5));
    let kl = g.mean_all(s);
    let wkl = g.scale(kl, F::of(kl_weight));
    let total = g.add(rec, wkl)?;
    Ok((total, rec, kl))
}
