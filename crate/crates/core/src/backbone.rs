//! Multi-scale feature extractors.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Mode};
use crate::image::{check_image, ImageTensor};
use crate::nn::{Conv2d, ParamBuilder};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Feature grids `f₁ … f_N`, each `channels × h × w`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor<f64>>,
}

impl FeaturePyramid {
    /// Level `n`, counted from 1 as in `f₁ … f₅`.
    pub fn level(&self, n: usize) -> Result<&Tensor<f64>> {
        n.checked_sub(1)
            .and_then(|i| self.levels.get(i))
            .ok_or_else(|| invalid!("feature level {n} not in 1..={}", self.levels.len()))
    }

    /// Spatial `(h, w)` of every level.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.shape()[1], t.shape()[2]))
            .collect()
    }
}

/// A frozen feature extractor. Implementations must be deterministic.
pub trait Backbone: Sync {
    fn num_levels(&self) -> usize;

    /// Feature pyramids for a batch of `3 × H × W` images.
    fn extract_batch(&self, images: &[ImageTensor]) -> Result<Vec<FeaturePyramid>>;

    fn extract(&self, image: &ImageTensor) -> Result<FeaturePyramid> {
        Ok(self.extract_batch(core::slice::from_ref(image))?.remove(0))
    }
}

/// Seed-fixed random CNN with the usual five-level stride schedule: every
/// level is a stride-2 3×3 convolution followed by a 3×3 convolution, each
/// with a leaky ReLU, so level `n` has stride `2ⁿ`.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub widths: Vec<usize>,
    layers: Vec<(Conv2d, Conv2d)>,
    store: ParamStore<f32>,
}

impl ToyBackbone {
    pub const DEFAULT_WIDTHS: [usize; 5] = [16, 32, 64, 96, 128];

    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(invalid!(
                "backbone widths must be a non-empty list of positive integers"
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Buffer);
        let mut cin = 3;
        let mut layers = Vec::new();
        for (i, &w) in widths.iter().enumerate() {
            let down = b.conv(&format!("backbone.{i}.down"), cin, w, 3, 2, true, false);
            let conv = b.conv(&format!("backbone.{i}.conv"), w, w, 3, 1, true, false);
            layers.push((down, conv));
            cin = w;
        }
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            store,
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(&Self::DEFAULT_WIDTHS, seed).expect("default widths are valid")
    }
}

impl Backbone for ToyBackbone {
    fn num_levels(&self) -> usize {
        self.layers.len()
    }

    fn extract_batch(&self, images: &[ImageTensor]) -> Result<Vec<FeaturePyramid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let min = 1usize << self.layers.len();
        for x in images {
            check_image(x)?;
            let (_, h, w) = x.dims3();
            if h % min != 0
                || w % min != 0
                || h != images[0].shape()[1]
                || w != images[0].shape()[2]
            {
                return Err(invalid!(
                    "backbone needs equally sized images with sides divisible by {min}, got {h}x{w}"
                ));
            }
        }
        let batch = Tensor::stack(&images.iter().map(|x| x.cast::<f32>()).collect::<Vec<_>>())?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(batch);
        let x = g.scale(x, 2.0);
        let mut h = g.add_scalar(x, -1.0);
        let mut per_level = Vec::with_capacity(self.layers.len());
        for (down, conv) in &self.layers {
            h = down.forward(&mut g, h)?;
            h = g.leaky_relu(h, 0.2);
            h = conv.forward(&mut g, h)?;
            h = g.leaky_relu(h, 0.2);
            per_level.push(g.value(h).unstack());
        }
        let mut out: Vec<FeaturePyramid> = (0..images.len())
            .map(|_| FeaturePyramid {
                levels: Vec::with_capacity(per_level.len()),
            })
            .collect();
        for level in per_level {
            for (p, t) in out.iter_mut().zip(level) {
                p.levels.push(t.cast());
            }
        }
        Ok(out)
    }
}
