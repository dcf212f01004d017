//! Layers built on [`Graph`]: convolutions, linear maps, normalization,
//! residual blocks and spatial self-attention.
//!
//! Layers only hold [`ParamId`]s, so one layer description works for any
//! scalar type the store is cast to.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bad_config, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Anything that owns parameter ids. Used to clone a sub-network into a
/// new parameter group with identical values.
pub trait VisitParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId));
}

impl<T: VisitParams> VisitParams for Vec<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.iter_mut().for_each(|m| m.visit_params(f));
    }
}

impl<T: VisitParams> VisitParams for Option<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        if let Some(m) = self {
            m.visit_params(f);
        }
    }
}

/// Copies every parameter of `module` into `group` (names get `from`
/// replaced by `to`) and returns the module rewired to the copies.
pub fn duplicate_module<M: Clone + VisitParams, F: Scalar>(
    module: &M,
    store: &mut ParamStore<F>,
    group: ParamGroup,
    from: &str,
    to: &str,
) -> M {
    let mut copy = module.clone();
    copy.visit_params(&mut |id| {
        let name = store.get(*id).name.replacen(from, to, 1);
        *id = store.duplicate(*id, name, group);
    });
    copy
}

/// Creates parameters in one group with a shared random stream.
pub struct ParamBuilder<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
}

impl<'a, F: Scalar> ParamBuilder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self { store, rng, group }
    }

    pub fn with_group(&mut self, group: ParamGroup) -> ParamBuilder<'_, F> {
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            group,
        }
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::of(rng.random_range(-bound..=bound)));
        self.store.push(name, self.group, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.push(name, self.group, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store
            .push(name, self.group, Tensor::full(shape, F::one()))
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store
            .push(name, ParamGroup::Buffer, Tensor::full(shape, F::of(value)))
    }

    /// Convolution with fan-in uniform initialization, or all zeros when
    /// `zero_init` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        zero_init: bool,
    ) -> Conv2d {
        let shape = [cout, cin, k, k];
        let bound = 1.0 / libm::sqrt((cin * k * k) as f64);
        let weight = if zero_init {
            self.zeros(format!("{name}.weight"), &shape)
        } else {
            self.uniform(format!("{name}.weight"), &shape, bound)
        };
        let bias = bias.then(|| {
            if zero_init {
                self.zeros(format!("{name}.bias"), &[cout])
            } else {
                self.uniform(format!("{name}.bias"), &[cout], bound)
            }
        });
        Conv2d {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Linear {
        let bound = 1.0 / libm::sqrt(din as f64);
        let weight = self.uniform(format!("{name}.weight"), &[dout, din], bound);
        let bias = bias.then(|| self.uniform(format!("{name}.bias"), &[dout], bound));
        Linear { weight, bias }
    }

    pub fn group_norm(&mut self, name: &str, channels: usize) -> Norm {
        Norm {
            kind: NormKind::Group(norm_groups(channels)),
            gamma: Some(self.ones(format!("{name}.gamma"), &[channels])),
            beta: Some(self.zeros(format!("{name}.beta"), &[channels])),
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, kind: NormChoice) -> Norm {
        let kind = match kind {
            NormChoice::Group => NormKind::Group(norm_groups(channels)),
            NormChoice::Instance => NormKind::Group(channels),
            NormChoice::Batch => NormKind::Batch {
                mean: self.buffer(format!("{name}.running_mean"), &[channels], 0.0),
                var: self.buffer(format!("{name}.running_var"), &[channels], 1.0),
            },
        };
        Norm {
            kind,
            gamma: Some(self.ones(format!("{name}.gamma"), &[channels])),
            beta: Some(self.zeros(format!("{name}.beta"), &[channels])),
        }
    }
}

/// Group count used by residual blocks: the largest divisor of `channels`
/// not above `min(32, channels / 4)`, so every group spans several channels.
pub fn norm_groups(channels: usize) -> usize {
    let cap = (channels / 4).clamp(1, 32);
    (1..=cap)
        .rev()
        .find(|d| channels.is_multiple_of(*d))
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels<F: Scalar>(&self, store: &ParamStore<F>) -> usize {
        store.value(self.weight).shape()[0]
    }
}

impl VisitParams for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

impl VisitParams for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Which normalization a configurable block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormChoice {
    Group,
    Instance,
    Batch,
}

#[derive(Debug, Clone)]
pub enum NormKind {
    Group(usize),
    Batch { mean: ParamId, var: ParamId },
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub kind: NormKind,
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
}

impl Norm {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let gamma = self.gamma.map(|p| g.param(p));
        let beta = self.beta.map(|p| g.param(p));
        match &self.kind {
            NormKind::Group(groups) => g.group_norm(x, gamma, beta, *groups, NORM_EPS),
            NormKind::Batch { mean, var } => g.batch_norm(x, gamma, beta, (*mean, *var), NORM_EPS),
        }
    }
}

impl VisitParams for Norm {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        if let NormKind::Batch { mean, var } = &mut self.kind {
            f(mean);
            f(var);
        }
        if let Some(p) = &mut self.gamma {
            f(p);
        }
        if let Some(p) = &mut self.beta {
            f(p);
        }
    }
}

/// Activation applied after a normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn apply<F: Scalar>(self, g: &mut Graph<'_, F>, x: Var) -> Var {
        match self {
            Activation::Silu => g.silu(x),
            Activation::Relu => g.relu(x),
        }
    }
}

/// Pre-activation residual block with optional timestep conditioning:
/// `skip(x) + conv2(silu(norm2(conv1(silu(norm1(x))) + temb)))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv2d,
    pub temb_proj: Option<Linear>,
    pub norm2: Norm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<F: Scalar>(
        b: &mut ParamBuilder<'_, F>,
        name: &str,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: b.group_norm(&format!("{name}.norm1"), cin),
            conv1: b.conv(&format!("{name}.conv1"), cin, cout, 3, 1, true, false),
            temb_proj: temb_dim.map(|d| b.linear(&format!("{name}.temb_proj"), d, cout, true)),
            norm2: b.group_norm(&format!("{name}.norm2"), cout),
            conv2: b.conv(&format!("{name}.conv2"), cout, cout, 3, 1, true, false),
            skip: (cin != cout)
                .then(|| b.conv(&format!("{name}.skip"), cin, cout, 1, 1, true, false)),
        }
    }

    /// `temb` must already be activated (`silu(time_embedding)`).
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        temb: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h)?;
        if let (Some(proj), Some(t)) = (&self.temb_proj, temb) {
            let e = proj.forward(g, t)?;
            h = g.add_nc(h, e)?;
        }
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

impl VisitParams for ResBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.norm1.visit_params(f);
        self.conv1.visit_params(f);
        self.temb_proj.visit_params(f);
        self.norm2.visit_params(f);
        self.conv2.visit_params(f);
        self.skip.visit_params(f);
    }
}

/// Multi-head self-attention over spatial positions, with a residual add.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: Norm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub heads: usize,
}

impl SpatialAttention {
    pub fn new<F: Scalar>(
        b: &mut ParamBuilder<'_, F>,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(bad_config!(
                "{} channels cannot split into {} heads",
                channels,
                heads
            ));
        }
        Ok(Self {
            norm: b.group_norm(&format!("{name}.norm"), channels),
            qkv: b.conv(
                &format!("{name}.qkv"),
                channels,
                3 * channels,
                1,
                1,
                true,
                false,
            ),
            proj: b.conv(
                &format!("{name}.proj"),
                channels,
                channels,
                1,
                1,
                true,
                false,
            ),
            heads,
        })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4();
        let l = h * w;
        let d = c / self.heads;
        let bh = n * self.heads;
        let hn = self.norm.forward(g, x)?;
        let qkv = self.qkv.forward(g, hn)?;
        let q = g.slice_channels(qkv, 0, c)?;
        let k = g.slice_channels(qkv, c, c)?;
        let v = g.slice_channels(qkv, 2 * c, c)?;
        let q = g.reshape(q, &[bh, d, l])?;
        let k = g.reshape(k, &[bh, d, l])?;
        let v = g.reshape(v, &[bh, d, l])?;
        let qt = g.transpose(q)?;
        let scores = g.bmm(qt, k)?;
        let scores = g.scale(scores, F::of(1.0 / libm::sqrt(d as f64)));
        let attn = g.softmax(scores);
        let attn_t = g.transpose(attn)?;
        let out = g.bmm(v, attn_t)?;
        let out = g.reshape(out, &[n, c, h, w])?;
        let out = self.proj.forward(g, out)?;
        g.add(x, out)
    }
}

impl VisitParams for SpatialAttention {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.norm.visit_params(f);
        self.qkv.visit_params(f);
        self.proj.visit_params(f);
    }
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding<F: Scalar>(steps: &[usize], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[steps.len(), dim]);
    let data = out.data_mut();
    for (i, &t) in steps.iter().enumerate() {
        for j in 0..half {
            let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half as f64);
            let arg = t as f64 * freq;
            data[i * dim + j] = F::of(libm::cos(arg));
            data[i * dim + half + j] = F::of(libm::sin(arg));
        }
    }
    out
}
