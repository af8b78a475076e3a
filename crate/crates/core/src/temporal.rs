//! Temporal convolution over the frame axis.
//!
//! Multi-scale mode runs four branches and concatenates them along the
//! channel axis in dilation order 1, 2, 3, 4. Each branch reduces `C` to
//! `C/4` channels with a 1×1 convolution, applies BN and ReLU, then a 3×1
//! convolution with its dilation and the layer stride, followed by BN.
//! Single mode is one 9×1 convolution followed by BN.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, NormLayout, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

pub const DILATIONS: [usize; 4] = [1, 2, 3, 4];
pub const BRANCH_KERNEL: usize = 3;
pub const SINGLE_KERNEL: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    #[default]
    Multiscale,
    Single,
}

#[derive(Clone, Debug)]
pub struct TemporalConv {
    prefix: String,
    channels: usize,
    stride: usize,
    mode: TemporalMode,
}

impl TemporalConv {
    pub fn new(
        prefix: impl Into<String>,
        channels: usize,
        stride: usize,
        mode: TemporalMode,
    ) -> Result<Self> {
        if channels == 0 || stride == 0 {
            return Err(Error::invalid(
                "temporal channels and stride must be positive",
            ));
        }
        if mode == TemporalMode::Multiscale && !channels.is_multiple_of(DILATIONS.len()) {
            return Err(Error::invalid(format!(
                "multi-scale temporal convolution needs channels divisible by 4, got {channels}"
            )));
        }
        Ok(TemporalConv {
            prefix: prefix.into(),
            channels,
            stride,
            mode,
        })
    }

    /// Output length for `t` input frames: `ceil(t / stride)`.
    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    fn branch(&self, d: usize, part: &str) -> String {
        format!("{}.d{d}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.channels;
        match self.mode {
            TemporalMode::Multiscale => {
                let q = c / DILATIONS.len();
                for d in DILATIONS {
                    store.init_conv(&self.branch(d, "reduce"), q, c, 1, rng)?;
                    store.init_norm(&self.branch(d, "reduce_bn"), q, true)?;
                    store.init_conv(&self.branch(d, "conv"), q, q, BRANCH_KERNEL, rng)?;
                    store.init_norm(&self.branch(d, "bn"), q, true)?;
                }
            }
            TemporalMode::Single => {
                store.init_conv(&format!("{}.conv", self.prefix), c, c, SINGLE_KERNEL, rng)?;
                store.init_norm(&format!("{}.bn", self.prefix), c, true)?;
            }
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.channels {
            return Err(Error::shape("temporal", &xs, &[0, self.channels, 0, 0]));
        }
        match self.mode {
            TemporalMode::Multiscale => {
                let mut parts = Vec::with_capacity(DILATIONS.len());
                for d in DILATIONS {
                    let h = ctx.conv(&self.branch(d, "reduce"), x, ConvGeom::POINTWISE)?;
                    let h = ctx.batch_norm(&self.branch(d, "reduce_bn"), h, NormLayout::Channel)?;
                    let h = ctx.tape.relu(h);
                    let h = ctx.conv(
                        &self.branch(d, "conv"),
                        h,
                        ConvGeom::same(BRANCH_KERNEL, d, self.stride),
                    )?;
                    parts.push(ctx.batch_norm(&self.branch(d, "bn"), h, NormLayout::Channel)?);
                }
                ctx.tape.concat(&parts, 1)
            }
            TemporalMode::Single => {
                let h = ctx.conv(
                    &format!("{}.conv", self.prefix),
                    x,
                    ConvGeom::same(SINGLE_KERNEL, 1, self.stride),
                )?;
                ctx.batch_norm(&format!("{}.bn", self.prefix), h, NormLayout::Channel)
            }
        }
    }
}
