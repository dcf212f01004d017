//! The SD-style noise-prediction U-Net and the semantic-guided (SG)
//! branch grafted onto it.
//!
//! The SD network has four encoder blocks of `res_blocks_per_level + 1`
//! sublayers (an entry convolution followed by residual blocks), a middle
//! block and four decoder blocks that consume the encoder sublayer outputs
//! as skips, deepest first. The SG branch is a copy of the SD encoder and
//! middle block that additionally sees a hint embedding of the input
//! image; its outputs reach the SD network only through zero-initialized
//! connection convolutions, so a freshly built assembly computes exactly
//! what the SD network alone computes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{LatentTensor, NoisePrediction, NoiseSchedule};
use crate::error::{bad_config, check_shape, invalid, Error, Result};
use crate::graph::{Graph, Mode, Var};
use crate::image::{check_image, ImageTensor};
use crate::nn::{
    duplicate_module, timestep_embedding, Conv2d, Linear, Norm, ParamBuilder, ResBlock,
    SpatialAttention, VisitParams,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::sff::{sff_fuse, LayerSpec, SffBlock, SffNorm};
use crate::tensor::{Scalar, Tensor};

/// Which SG outputs are wired into the SD network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConnectionVariant {
    /// No SG branch at all.
    Sd,
    /// SG middle block added to the SD middle block.
    Msg,
    /// Middle block plus the third SG encoder block skip-connected into
    /// the matching SD decoder block.
    MsgSgeb3,
    /// Middle block plus the third and fourth SG encoder blocks.
    MsgSgeb3Sgeb4,
    /// Middle block plus the fourth SG encoder block fused with the third
    /// through an SFF block, added to the deepest SD decoder block.
    #[default]
    MsgSff,
}

impl ConnectionVariant {
    pub const ALL: [ConnectionVariant; 5] = [
        ConnectionVariant::Sd,
        ConnectionVariant::Msg,
        ConnectionVariant::MsgSgeb3,
        ConnectionVariant::MsgSgeb3Sgeb4,
        ConnectionVariant::MsgSff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConnectionVariant::Sd => "sd",
            ConnectionVariant::Msg => "msg",
            ConnectionVariant::MsgSgeb3 => "msg-sgeb3",
            ConnectionVariant::MsgSgeb3Sgeb4 => "msg-sgeb3-sgeb4",
            ConnectionVariant::MsgSff => "msg-sff",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }

    pub fn has_sg(self) -> bool {
        self != ConnectionVariant::Sd
    }

    fn sgeb3(self) -> bool {
        matches!(
            self,
            ConnectionVariant::MsgSgeb3 | ConnectionVariant::MsgSgeb3Sgeb4
        )
    }

    fn sgeb4(self) -> bool {
        matches!(
            self,
            ConnectionVariant::MsgSgeb3Sgeb4 | ConnectionVariant::MsgSff
        )
    }
}

/// Encoder weights used on the SG path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SgEncoderWeights {
    /// A trainable copy of the SD encoder.
    #[default]
    Clone,
    /// The frozen SD encoder itself.
    SharedSd,
}

/// Latent fed to the SG path (before the hint is added).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SgInput {
    /// The same noisy latent the SD path sees.
    #[default]
    Noisy,
    /// The clean latent of the conditioning image.
    Clean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Spatial size of the (square) latent grid.
    pub latent_size: usize,
    pub base_channels: usize,
    /// One multiplier per encoder block; exactly four.
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Encoder/decoder levels (0-based) that get self-attention after each
    /// residual block. The middle block always has attention.
    pub attention_levels: Vec<usize>,
    pub num_heads: usize,
    pub time_embed_dim: usize,
    /// Hint encoder widths: one full-resolution layer, then one per
    /// stride-2 layer.
    pub hint_channels: Vec<usize>,
    /// Pixel-to-latent size ratio the hint encoder has to bridge.
    pub hint_downsample: usize,
    pub connection: ConnectionVariant,
    pub sff_norm: SffNorm,
    pub sg_encoder: SgEncoderWeights,
    pub sg_input: SgInput,
    /// Size of the class vocabulary for the class-conditioned baseline;
    /// zero disables the class embedding.
    pub num_classes: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 8,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4, 4],
            res_blocks_per_level: 2,
            attention_levels: vec![3],
            num_heads: 4,
            time_embed_dim: 128,
            hint_channels: vec![16, 32, 64, 64],
            hint_downsample: 8,
            connection: ConnectionVariant::MsgSff,
            sff_norm: SffNorm::InstanceSilu,
            sg_encoder: SgEncoderWeights::Clone,
            sg_input: SgInput::Noisy,
            num_classes: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn block_widths(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.len() != 4 {
            return Err(bad_config!(
                "the denoiser has four encoder blocks, got {} channel multipliers",
                self.channel_multipliers.len()
            ));
        }
        if self.channel_multipliers.contains(&0)
            || self.latent_channels == 0
            || self.latent_size == 0
            || self.base_channels == 0
            || self.res_blocks_per_level == 0
        {
            return Err(bad_config!("denoiser sizes must be positive"));
        }
        if !self.base_channels.is_multiple_of(2) || self.time_embed_dim == 0 {
            return Err(bad_config!(
                "base channels must be even and the time embedding non-empty"
            ));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= 4) {
            return Err(bad_config!("attention level {l} does not exist"));
        }
        let widths = self.block_widths();
        let mut need_heads: Vec<usize> = self.attention_levels.iter().map(|&l| widths[l]).collect();
        need_heads.push(widths[3]);
        if self.num_heads == 0 || need_heads.iter().any(|c| c % self.num_heads != 0) {
            return Err(bad_config!(
                "{} attention heads do not divide every attended width",
                self.num_heads
            ));
        }
        let d = self.hint_downsample;
        if d == 0 || !d.is_power_of_two() {
            return Err(bad_config!(
                "hint downsample factor must be a power of two, got {d}"
            ));
        }
        if self.hint_channels.len() != d.trailing_zeros() as usize + 1
            || self.hint_channels.contains(&0)
        {
            return Err(bad_config!(
                "a {d}x hint encoder needs {} positive widths, got {:?}",
                d.trailing_zeros() + 1,
                self.hint_channels
            ));
        }
        Ok(())
    }

    /// `(channels, size)` of every encoder sublayer output, block by block.
    pub fn encoder_layout(&self) -> Vec<Vec<LayerSpec>> {
        let widths = self.block_widths();
        let mut size = self.latent_size;
        let mut out = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let entry_ch = if i == 0 { w } else { widths[i - 1] };
            if i > 0 {
                size = entry_size(size);
            }
            let mut block = vec![LayerSpec {
                channels: entry_ch,
                size,
            }];
            block.extend((0..self.res_blocks_per_level).map(|_| LayerSpec { channels: w, size }));
            out.push(block);
        }
        out
    }
}

/// Grids shrink by half per encoder block until they reach 2 pixels, so no
/// normalization ever sees a single position.
fn entry_stride(size: usize) -> usize {
    if size >= 4 {
        2
    } else {
        1
    }
}

fn entry_size(size: usize) -> usize {
    if entry_stride(size) == 2 {
        size.div_ceil(2)
    } else {
        size
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub entry: Conv2d,
    pub res: Vec<ResBlock>,
    pub attn: Vec<Option<SpatialAttention>>,
}

impl VisitParams for EncoderBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.entry.visit_params(f);
        self.res.visit_params(f);
        self.attn.visit_params(f);
    }
}

#[derive(Debug, Clone)]
pub struct MiddleBlock {
    pub res1: ResBlock,
    pub attn: SpatialAttention,
    pub res2: ResBlock,
}

impl MiddleBlock {
    fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var, temb: Var) -> Result<Var> {
        let h = self.res1.forward(g, x, Some(temb))?;
        let h = self.attn.forward(g, h)?;
        self.res2.forward(g, h, Some(temb))
    }
}

impl VisitParams for MiddleBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.res1.visit_params(f);
        self.attn.visit_params(f);
        self.res2.visit_params(f);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub res: Vec<ResBlock>,
    pub attn: Vec<Option<SpatialAttention>>,
    pub up: Option<Conv2d>,
}

/// The SD noise-prediction network.
#[derive(Debug, Clone)]
pub struct UNet {
    pub time_in: Linear,
    pub time_out: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub middle: MiddleBlock,
    pub decoder: Vec<DecoderBlock>,
    pub out_norm: Norm,
    pub out_conv: Conv2d,
}

fn attention<F: Scalar>(
    b: &mut ParamBuilder<'_, F>,
    name: &str,
    enabled: bool,
    ch: usize,
    heads: usize,
) -> Result<Option<SpatialAttention>> {
    if enabled {
        SpatialAttention::new(b, name, ch, heads).map(Some)
    } else {
        Ok(None)
    }
}

impl UNet {
    fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, cfg: &DenoiserConfig) -> Result<Self> {
        let widths = cfg.block_widths();
        let layout = cfg.encoder_layout();
        let temb = Some(cfg.time_embed_dim);
        let time_in = b.linear("sd.time.in", cfg.base_channels, cfg.time_embed_dim, true);
        let time_out = b.linear("sd.time.out", cfg.time_embed_dim, cfg.time_embed_dim, true);

        let mut encoder = Vec::new();
        let mut size = cfg.latent_size;
        for (i, &w) in widths.iter().enumerate() {
            let attn_here = cfg.attention_levels.contains(&i);
            let (entry, mut ch) = if i == 0 {
                (
                    b.conv("sd.enc.0.entry", cfg.latent_channels, w, 3, 1, true, false),
                    w,
                )
            } else {
                let c = widths[i - 1];
                let stride = entry_stride(size);
                size = entry_size(size);
                (
                    b.conv(&format!("sd.enc.{i}.entry"), c, c, 3, stride, true, false),
                    c,
                )
            };
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for r in 0..cfg.res_blocks_per_level {
                res.push(ResBlock::new(b, &format!("sd.enc.{i}.res{r}"), ch, w, temb));
                attn.push(attention(
                    b,
                    &format!("sd.enc.{i}.attn{r}"),
                    attn_here,
                    w,
                    cfg.num_heads,
                )?);
                ch = w;
            }
            encoder.push(EncoderBlock { entry, res, attn });
        }

        let top = widths[3];
        let middle = MiddleBlock {
            res1: ResBlock::new(b, "sd.mid.res1", top, top, temb),
            attn: SpatialAttention::new(b, "sd.mid.attn", top, cfg.num_heads)?,
            res2: ResBlock::new(b, "sd.mid.res2", top, top, temb),
        };

        let mut decoder = Vec::new();
        let mut ch = top;
        for i in (0..4).rev() {
            let w = widths[i];
            let attn_here = cfg.attention_levels.contains(&i);
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for (r, skip) in layout[i].iter().rev().enumerate() {
                res.push(ResBlock::new(
                    b,
                    &format!("sd.dec.{i}.res{r}"),
                    ch + skip.channels,
                    w,
                    temb,
                ));
                attn.push(attention(
                    b,
                    &format!("sd.dec.{i}.attn{r}"),
                    attn_here,
                    w,
                    cfg.num_heads,
                )?);
                ch = w;
            }
            let up = (i > 0).then(|| b.conv(&format!("sd.dec.{i}.up"), w, w, 3, 1, true, false));
            decoder.push(DecoderBlock { res, attn, up });
        }
        let out_norm = b.group_norm("sd.out.norm", widths[0]);
        let out_conv = b.conv(
            "sd.out.conv",
            widths[0],
            cfg.latent_channels,
            3,
            1,
            true,
            false,
        );
        Ok(Self {
            time_in,
            time_out,
            encoder,
            middle,
            decoder,
            out_norm,
            out_conv,
        })
    }

    /// Time embedding before its activation, `[n, time_embed_dim]`.
    fn time_embedding<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        t: &[usize],
        dim: usize,
    ) -> Result<Var> {
        let e = g.input(timestep_embedding(t, dim));
        let h = self.time_in.forward(g, e)?;
        let h = g.silu(h);
        self.time_out.forward(g, h)
    }
}

/// Runs encoder blocks, adding `hint` right after the first entry
/// convolution. Returns every sublayer output in order.
fn run_encoder<F: Scalar>(
    g: &mut Graph<'_, F>,
    blocks: &[EncoderBlock],
    z: Var,
    temb: Var,
    hint: Option<Var>,
) -> Result<Vec<Var>> {
    let mut outs = Vec::new();
    let mut h = z;
    for (i, blk) in blocks.iter().enumerate() {
        h = blk.entry.forward(g, h)?;
        if let (0, Some(hint)) = (i, hint) {
            h = g.add(h, hint)?;
        }
        outs.push(h);
        for (res, attn) in blk.res.iter().zip(&blk.attn) {
            h = res.forward(g, h, Some(temb))?;
            if let Some(a) = attn {
                h = a.forward(g, h)?;
            }
            outs.push(h);
        }
    }
    Ok(outs)
}

fn run_decoder<F: Scalar>(
    g: &mut Graph<'_, F>,
    net: &UNet,
    mid: Var,
    mut skips: Vec<Var>,
    temb: Var,
) -> Result<Var> {
    let mut h = mid;
    for blk in &net.decoder {
        for (res, attn) in blk.res.iter().zip(&blk.attn) {
            let s = skips
                .pop()
                .ok_or_else(|| invalid!("decoder ran out of skip connections"))?;
            h = g.concat(&[h, s])?;
            h = res.forward(g, h, Some(temb))?;
            if let Some(a) = attn {
                h = a.forward(g, h)?;
            }
        }
        if let Some(up) = &blk.up {
            let next = *skips
                .last()
                .ok_or_else(|| invalid!("decoder ran out of skip connections"))?;
            let (_, _, th, tw) = g.value(next).dims4();
            h = g.upsample_nearest(h, th, tw);
            h = up.forward(g, h)?;
        }
    }
    let h = net.out_norm.forward(g, h)?;
    let h = g.silu(h);
    net.out_conv.forward(g, h)
}

/// Conv-SiLU stack mapping an image onto the first encoder sublayer's shape.
#[derive(Debug, Clone)]
pub struct HintEncoder {
    pub layers: Vec<Conv2d>,
    pub out: Conv2d,
}

impl HintEncoder {
    fn new<F: Scalar>(b: &mut ParamBuilder<'_, F>, cfg: &DenoiserConfig) -> Self {
        let mut layers = Vec::new();
        let mut cin = 3;
        for (k, &c) in cfg.hint_channels.iter().enumerate() {
            let stride = if k == 0 { 1 } else { 2 };
            layers.push(b.conv(&format!("hint.{k}"), cin, c, 3, stride, true, false));
            cin = c;
        }
        let out = b.conv(
            "hint.out",
            cin,
            cfg.base_channels * cfg.channel_multipliers[0],
            3,
            1,
            true,
            true,
        );
        Self { layers, out }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let x = g.scale(x, F::of(2.0));
        let mut h = g.add_scalar(x, F::of(-1.0));
        for layer in &self.layers {
            h = layer.forward(g, h)?;
            h = g.silu(h);
        }
        self.out.forward(g, h)
    }
}

impl VisitParams for HintEncoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.layers.visit_params(f);
        self.out.visit_params(f);
    }
}

/// Trainable SG branch and its connections into the SD network.
#[derive(Debug, Clone)]
pub struct SgBranch {
    pub hint: HintEncoder,
    /// `None` when the SG path reuses the SD encoder weights.
    pub encoder: Option<Vec<EncoderBlock>>,
    pub middle: MiddleBlock,
    pub mid_conn: Conv2d,
    pub sgeb3_conn: Vec<Conv2d>,
    pub sgeb4_conn: Vec<Conv2d>,
    pub sff: Option<SffBlock>,
}

/// What the denoiser is conditioned on.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    /// Plain SD forward pass.
    None,
    /// SG conditioning on input images `x0`; `clean` is the clean latent
    /// batch, required when the SG path is configured to see it.
    Image { x0: Var, clean: Option<Var> },
    /// Class-embedding baseline.
    Class(&'a [usize]),
}

/// Network layout of an assembly.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    pub sd: UNet,
    pub class_embed: Option<Linear>,
    pub sg: Option<SgBranch>,
}

impl DenoiserNet {
    pub fn new<F: Scalar>(
        config: DenoiserConfig,
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(store, rng, ParamGroup::Sd);
        let sd = UNet::new(&mut b, &config)?;
        let class_embed = (config.num_classes > 0).then(|| {
            b.with_group(ParamGroup::ClassEmbed).linear(
                "class.embed",
                config.num_classes,
                config.time_embed_dim,
                false,
            )
        });
        let sg = if config.connection.has_sg() {
            Some(Self::build_sg(&config, &sd, &mut b)?)
        } else {
            None
        };
        Ok(Self {
            config,
            sd,
            class_embed,
            sg,
        })
    }

    fn build_sg<F: Scalar>(
        cfg: &DenoiserConfig,
        sd: &UNet,
        b: &mut ParamBuilder<'_, F>,
    ) -> Result<SgBranch> {
        let hint = HintEncoder::new(&mut b.with_group(ParamGroup::Hint), cfg);
        let encoder = match cfg.sg_encoder {
            SgEncoderWeights::Clone => Some(duplicate_module(
                &sd.encoder,
                b.store,
                ParamGroup::Sg,
                "sd.",
                "sg.",
            )),
            SgEncoderWeights::SharedSd => None,
        };
        let middle = duplicate_module(&sd.middle, b.store, ParamGroup::Sg, "sd.", "sg.");
        let layout = cfg.encoder_layout();
        let mut cb = b.with_group(ParamGroup::Connection);
        let top = cfg.block_widths()[3];
        let mid_conn = cb.conv("conn.mid", top, top, 1, 1, true, true);
        let zero_convs = |cb: &mut ParamBuilder<'_, F>, name: &str, specs: &[LayerSpec]| {
            specs
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    cb.conv(
                        &format!("{name}.{k}"),
                        s.channels,
                        s.channels,
                        1,
                        1,
                        true,
                        true,
                    )
                })
                .collect::<Vec<_>>()
        };
        let variant = cfg.connection;
        let sgeb3_conn = if variant.sgeb3() {
            zero_convs(&mut cb, "conn.sgeb3", &layout[2])
        } else {
            Vec::new()
        };
        let sgeb4_conn = if variant.sgeb4() {
            zero_convs(&mut cb, "conn.sgeb4", &layout[3])
        } else {
            Vec::new()
        };
        let sff = if variant == ConnectionVariant::MsgSff {
            Some(SffBlock::new(
                &mut b.with_group(ParamGroup::Sff),
                "sff",
                &layout[2],
                &layout[3],
                cfg.sff_norm,
            )?)
        } else {
            None
        };
        Ok(SgBranch {
            hint,
            encoder,
            middle,
            mid_conn,
            sgeb3_conn,
            sgeb4_conn,
            sff,
        })
    }

    fn check_latent<F: Scalar>(&self, g: &Graph<'_, F>, z: Var, t: &[usize]) -> Result<()> {
        let s = g.shape(z);
        let c = &self.config;
        if s.len() != 4
            || s[1] != c.latent_channels
            || s[2] != c.latent_size
            || s[3] != c.latent_size
        {
            return Err(Error::ShapeMismatch {
                expected: vec![
                    s.first().copied().unwrap_or(0),
                    c.latent_channels,
                    c.latent_size,
                    c.latent_size,
                ],
                actual: s.to_vec(),
            });
        }
        if t.len() != s[0] {
            return Err(invalid!("{} timesteps for a batch of {}", t.len(), s[0]));
        }
        Ok(())
    }

    /// Hint embedding of a `[n, 3, H, W]` image batch.
    pub fn hint_forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x0: Var) -> Result<Var> {
        let sg = self
            .sg
            .as_ref()
            .ok_or_else(|| bad_config!("the `sd` connection variant has no hint encoder"))?;
        let (_, _, h, w) = g.value(x0).dims4();
        let d = self.config.hint_downsample;
        let s = self.config.latent_size;
        if h != s * d || w != s * d {
            return Err(invalid!(
                "hint encoder expects {}x{} images, got {h}x{w}",
                s * d,
                s * d
            ));
        }
        sg.hint.forward(g, x0)
    }

    /// Predicted noise for the batch `z_t` at timesteps `t`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        z_t: Var,
        t: &[usize],
        cond: Conditioning<'_>,
    ) -> Result<Var> {
        self.check_latent(g, z_t, t)?;
        let mut temb = self.sd.time_embedding(g, t, self.config.base_channels)?;
        if let Conditioning::Class(ids) = cond {
            let embed = self
                .class_embed
                .as_ref()
                .ok_or_else(|| bad_config!("this assembly has no class embedding"))?;
            if ids.len() != t.len() {
                return Err(invalid!(
                    "{} class ids for a batch of {}",
                    ids.len(),
                    t.len()
                ));
            }
            let k = self.config.num_classes;
            let mut onehot = Tensor::zeros(&[ids.len(), k]);
            for (i, &id) in ids.iter().enumerate() {
                if id >= k {
                    return Err(Error::UnknownClass {
                        class_id: id,
                        num_classes: k,
                    });
                }
                onehot.data_mut()[i * k + id] = F::one();
            }
            let oh = g.input(onehot);
            let ce = embed.forward(g, oh)?;
            temb = g.add(temb, ce)?;
        }
        let temb = g.silu(temb);

        let mut skips = run_encoder(g, &self.sd.encoder, z_t, temb, None)?;
        let sd_last = *skips.last().expect("four encoder blocks");
        let mut mid = self.sd.middle.forward(g, sd_last, temb)?;

        if let Conditioning::Image { x0, clean } = cond {
            let sg = self.sg.as_ref().ok_or_else(|| {
                bad_config!("the `sd` connection variant cannot take image conditioning")
            })?;
            let hint = self.hint_forward(g, x0)?;
            let sg_in = match self.config.sg_input {
                SgInput::Noisy => z_t,
                SgInput::Clean => {
                    let c = clean
                        .ok_or_else(|| invalid!("the SG path is configured for clean latents"))?;
                    check_shape(g.shape(z_t), g.shape(c))?;
                    c
                }
            };
            let blocks = sg.encoder.as_deref().unwrap_or(&self.sd.encoder);
            let sg_layers = run_encoder(g, blocks, sg_in, temb, Some(hint))?;
            let sg_last = *sg_layers.last().expect("four encoder blocks");
            let sg_mid = sg.middle.forward(g, sg_last, temb)?;
            let m = sg.mid_conn.forward(g, sg_mid)?;
            mid = g.add(mid, m)?;

            let per = self.config.res_blocks_per_level + 1;
            let b3 = 2 * per..3 * per;
            let b4 = 3 * per..4 * per;
            for (conn, k) in sg.sgeb3_conn.iter().zip(b3.clone()) {
                let c = conn.forward(g, sg_layers[k])?;
                skips[k] = g.add(skips[k], c)?;
            }
            let deep: Vec<Var> = match &sg.sff {
                Some(sff) => sff_fuse(g, &sg_layers[b3], &sg_layers[b4.clone()], sff)?,
                None => sg_layers[b4.clone()].to_vec(),
            };
            for ((conn, k), q) in sg.sgeb4_conn.iter().zip(b4).zip(deep) {
                let c = conn.forward(g, q)?;
                skips[k] = g.add(skips[k], c)?;
            }
        }
        run_decoder(g, &self.sd, mid, skips, temb)
    }
}

/// Denoiser layout together with its parameters.
#[derive(Debug, Clone)]
pub struct DenoiserAssembly<F: Scalar = f32> {
    pub net: DenoiserNet,
    pub store: ParamStore<F>,
}

/// Builds the SD network from `seed`, copies it into the SG branch and
/// freezes the SD parameters.
pub fn build_assembly<F: Scalar>(config: DenoiserConfig, seed: u64) -> Result<DenoiserAssembly<F>> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenoiserNet::new(config, &mut store, &mut rng)?;
    store.set_frozen_by(|g| g == ParamGroup::Sd);
    Ok(DenoiserAssembly { net, store })
}

impl<F: Scalar> DenoiserAssembly<F> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    pub fn cast<G: Scalar>(&self) -> DenoiserAssembly<G> {
        DenoiserAssembly {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    /// Pairs of (SG parameter, SD parameter it was copied from).
    pub fn sg_sd_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let mut pairs = Vec::new();
        let Some(sg) = &self.net.sg else {
            return pairs;
        };
        let mut sd_ids = Vec::new();
        let mut sg_ids = Vec::new();
        if let Some(enc) = &sg.encoder {
            let mut a = self.net.sd.encoder.clone();
            a.visit_params(&mut |id| sd_ids.push(*id));
            let mut b = enc.clone();
            b.visit_params(&mut |id| sg_ids.push(*id));
        }
        let mut a = self.net.sd.middle.clone();
        a.visit_params(&mut |id| sd_ids.push(*id));
        let mut b = sg.middle.clone();
        b.visit_params(&mut |id| sg_ids.push(*id));
        pairs.extend(sg_ids.into_iter().zip(sd_ids));
        pairs
    }

    /// Overwrites every SG clone parameter with its SD source.
    pub fn sync_sg_from_sd(&mut self) {
        for (sg, sd) in self.sg_sd_pairs() {
            let v = self.store.value(sd).clone();
            *self.store.value_mut(sg) = v;
        }
    }

    fn latent_batch(&self, z: &[LatentTensor]) -> Result<Tensor<F>> {
        Tensor::stack(&z.iter().map(|t| t.cast::<F>()).collect::<Vec<_>>())
    }

    fn check_steps(t: &[usize], schedule: &NoiseSchedule) -> Result<()> {
        match t.iter().find(|&&s| s >= schedule.steps()) {
            Some(&step) => Err(Error::StepOutOfRange {
                step,
                total: schedule.steps(),
            }),
            None => Ok(()),
        }
    }

    /// Batched noise prediction. `x0` switches on SG conditioning; `clean`
    /// supplies clean latents for the clean-input SG configuration.
    pub fn predict_noise_batch(
        &self,
        z_t: &[LatentTensor],
        t: &[usize],
        x0: Option<&[ImageTensor]>,
        clean: Option<&[LatentTensor]>,
        schedule: &NoiseSchedule,
    ) -> Result<Vec<NoisePrediction>> {
        Self::check_steps(t, schedule)?;
        if z_t.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = g.input(self.latent_batch(z_t)?);
        let cond = match x0 {
            Some(images) => {
                for x in images {
                    check_image(x)?;
                }
                let xb = Tensor::stack(&images.iter().map(|x| x.cast::<F>()).collect::<Vec<_>>())?;
                let x0 = g.input(xb);
                let clean = match clean {
                    Some(c) => Some(g.input(self.latent_batch(c)?)),
                    None => None,
                };
                Conditioning::Image { x0, clean }
            }
            None => Conditioning::None,
        };
        let out = self.net.forward(&mut g, z, t, cond)?;
        Ok(g.value(out)
            .unstack()
            .into_iter()
            .map(|e| e.cast())
            .collect())
    }

    /// SG-conditioned noise prediction for one latent.
    pub fn predict_noise(
        &self,
        z_t: &LatentTensor,
        t: usize,
        x0: &ImageTensor,
        schedule: &NoiseSchedule,
    ) -> Result<NoisePrediction> {
        let clean = match self.net.config.sg_input {
            SgInput::Noisy => None,
            SgInput::Clean => {
                return Err(invalid!("clean-latent SG input needs predict_noise_batch"))
            }
        };
        let x = core::slice::from_ref(x0);
        let out = if self.net.config.connection.has_sg() {
            self.predict_noise_batch(core::slice::from_ref(z_t), &[t], Some(x), clean, schedule)?
        } else {
            self.predict_noise_batch(core::slice::from_ref(z_t), &[t], None, None, schedule)?
        };
        Ok(out.into_iter().next().expect("one output"))
    }

    /// Plain SD forward pass, ignoring the SG branch.
    pub fn predict_noise_sd(
        &self,
        z_t: &LatentTensor,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<NoisePrediction> {
        let out =
            self.predict_noise_batch(core::slice::from_ref(z_t), &[t], None, None, schedule)?;
        Ok(out.into_iter().next().expect("one output"))
    }

    /// SD forward pass with a class embedding added to the time embedding.
    pub fn predict_noise_ldm_baseline(
        &self,
        z_t: &LatentTensor,
        t: usize,
        class_id: usize,
        schedule: &NoiseSchedule,
    ) -> Result<NoisePrediction> {
        Self::check_steps(&[t], schedule)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let z = g.input(self.latent_batch(core::slice::from_ref(z_t))?);
        let ids = [class_id];
        let out = self
            .net
            .forward(&mut g, z, &[t], Conditioning::Class(&ids))?;
        Ok(g.value(out).unstack().remove(0).cast())
    }

    /// Hint embedding of one image, `base_channels × latent × latent`.
    pub fn hint_embed(&self, x0: &ImageTensor) -> Result<LatentTensor> {
        check_image(x0)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(Tensor::stack(&[x0.cast::<F>()])?);
        let h = self.net.hint_forward(&mut g, x)?;
        Ok(g.value(h).unstack().remove(0).cast())
    }
}
