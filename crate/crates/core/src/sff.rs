//! Spatial-aware feature fusion: every low-scale sublayer output `P_i`
//! receives `Σ_j F_ij(H_j)` computed from the high-scale sublayer outputs.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Activation, Conv2d, Norm, NormChoice, ParamBuilder, VisitParams};
use crate::params::ParamId;
use crate::tensor::Scalar;

/// Normalization and activation inside each fusion unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SffNorm {
    /// Instance normalization followed by SiLU.
    #[default]
    InstanceSilu,
    /// Batch normalization followed by ReLU.
    BatchRelu,
}

impl SffNorm {
    fn parts(self) -> (NormChoice, Activation) {
        match self {
            SffNorm::InstanceSilu => (NormChoice::Instance, Activation::Silu),
            SffNorm::BatchRelu => (NormChoice::Batch, Activation::Relu),
        }
    }
}

/// One fusion unit: bias-free 3×3 convolution, normalization, activation.
#[derive(Debug, Clone)]
pub struct FusionUnit {
    pub conv: Conv2d,
    pub norm: Norm,
    pub act: Activation,
}

impl FusionUnit {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let h = self.conv.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        Ok(self.act.apply(g, h))
    }
}

impl VisitParams for FusionUnit {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }
}

/// `units[i][j]` maps high-scale layer `j` onto low-scale layer `i`.
#[derive(Debug, Clone)]
pub struct SffBlock {
    pub units: Vec<Vec<FusionUnit>>,
}

/// Channel count and spatial size of one sublayer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub size: usize,
}

impl SffBlock {
    /// Builds the `L × J` units. Convolutions start at zero so the block is
    /// the identity on `P` until trained.
    pub fn new<F: Scalar>(
        b: &mut ParamBuilder<'_, F>,
        name: &str,
        high: &[LayerSpec],
        low: &[LayerSpec],
        norm: SffNorm,
    ) -> Result<Self> {
        let (norm_kind, act) = norm.parts();
        let mut units = Vec::with_capacity(low.len());
        for (i, p) in low.iter().enumerate() {
            let mut row = Vec::with_capacity(high.len());
            for (j, h) in high.iter().enumerate() {
                let stride = match h.size / p.size.max(1) {
                    1 if h.size == p.size => 1,
                    2 if h.size == 2 * p.size => 2,
                    _ => {
                        return Err(invalid!(
                            "cannot fuse a {}-pixel layer into a {}-pixel layer",
                            h.size,
                            p.size
                        ))
                    }
                };
                let unit = format!("{name}.{i}.{j}");
                row.push(FusionUnit {
                    conv: b.conv(
                        &format!("{unit}.conv"),
                        h.channels,
                        p.channels,
                        3,
                        stride,
                        false,
                        true,
                    ),
                    norm: b.norm(&format!("{unit}.norm"), p.channels, norm_kind),
                    act,
                });
            }
            units.push(row);
        }
        Ok(Self { units })
    }

    pub fn num_low(&self) -> usize {
        self.units.len()
    }

    pub fn num_high(&self) -> usize {
        self.units.first().map_or(0, Vec::len)
    }
}

impl VisitParams for SffBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamId)) {
        self.units.visit_params(f);
    }
}

/// `Q_i = P_i + Σ_j F_ij(H_j)`.
pub fn sff_fuse<F: Scalar>(
    g: &mut Graph<'_, F>,
    high: &[Var],
    low: &[Var],
    sff: &SffBlock,
) -> Result<Vec<Var>> {
    if high.len() != sff.num_high() || low.len() != sff.num_low() {
        return Err(invalid!(
            "fusion block expects {} high-scale and {} low-scale layers, got {} and {}",
            sff.num_high(),
            sff.num_low(),
            high.len(),
            low.len()
        ));
    }
    let mut out = Vec::with_capacity(low.len());
    for (row, &p) in sff.units.iter().zip(low) {
        let mut q = p;
        for (unit, &h) in row.iter().zip(high) {
            let f = unit.forward(g, h)?;
            q = g.add(q, f)?;
        }
        out.push(q);
    }
    Ok(out)
}
