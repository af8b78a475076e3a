//! Spatial graph convolution with hybrid relative-distance / relative-angle
//! attention masks.
//!
//! For each adjacency subset `s` and input `X: (N, C_in, T, V)`:
//!
//! ```text
//! F_b     = LayerNorm(W_c,b · X + B_c,b)             b ∈ {RD, RA}, C_inter channels
//! A_RD    = tanh(mean_T F_RD[i] − mean_T F_RD[j])
//! A_RA    = tanh(Σ_t F_RA[t, i] · F_RA[t, j])
//! A_h     = A_RD + α · A_RA
//! A_final = A_h + A_s                                  broadcast over channels
//! M       = W_A · A_final + B_A                         C_out masks
//! Y_s     = M ⊛ (W_v · X + B_v)                         Y_s[c,t,i] = Σ_j M[c,i,j] · Val[c,t,j]
//! ```
//!
//! and the layer output is `ReLU(Σ_s Y_s)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Var};
use crate::error::{Error, Result};
use crate::graph::{GraphSpec, Subset};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// One of the two attention branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Rd,
    Ra,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Rd, Branch::Ra];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Rd => "rd",
            Branch::Ra => "ra",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rd" => Ok(Branch::Rd),
            "ra" => Ok(Branch::Ra),
            _ => Err(Error::invalid(format!(
                "unknown attention branch `{s}` (expected ra or rd)"
            ))),
        }
    }
}

/// Which attention branches the layer is built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branches {
    /// `A_RD + α·A_RA`.
    #[default]
    Hybrid,
    RdOnly,
    RaOnly,
}

impl Branches {
    pub fn has(self, b: Branch) -> bool {
        !matches!(
            (self, b),
            (Branches::RdOnly, Branch::Ra) | (Branches::RaOnly, Branch::Rd)
        )
    }
}

/// `max(C_in / 8, 4)`.
pub fn inter_channels(c_in: usize) -> usize {
    (c_in / 8).max(4)
}

/// Masks of one subset at one layer, each `(N, C_inter, V, V)`.
#[derive(Clone, Debug)]
pub struct CapturedMasks {
    pub layer: usize,
    pub subset: Subset,
    pub rd: Option<Tensor>,
    pub ra: Option<Tensor>,
    pub hybrid: Tensor,
    pub final_mask: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SubsetMasks {
    pub rd: Option<Var>,
    pub ra: Option<Var>,
    pub hybrid: Var,
    pub final_mask: Var,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    prefix: String,
    layer: usize,
    c_in: usize,
    c_inter: usize,
    c_out: usize,
    branches: Branches,
    extension: bool,
    adjacency: [Tensor; 3],
}

impl SpatialAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: impl Into<String>,
        layer: usize,
        c_in: usize,
        c_inter: usize,
        c_out: usize,
        graph: &GraphSpec,
        branches: Branches,
        extension: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_inter == 0 || c_out == 0 {
            return Err(Error::invalid("attention channel counts must be positive"));
        }
        Ok(SpatialAttention {
            prefix: prefix.into(),
            layer,
            c_in,
            c_inter,
            c_out,
            branches,
            extension,
            adjacency: Subset::ALL.map(|s| graph.subset(s).clone()),
        })
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_inter(&self) -> usize {
        self.c_inter
    }

    fn name(&self, s: Subset, rest: &str) -> String {
        format!("{}.{}.{rest}", self.prefix, s.name())
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for s in Subset::ALL {
            for b in Branch::ALL.into_iter().filter(|&b| self.branches.has(b)) {
                store.init_conv(
                    &self.name(s, &format!("{b}.compress")),
                    self.c_inter,
                    self.c_in,
                    1,
                    rng,
                )?;
                store.init_norm(&self.name(s, &format!("{b}.ln")), self.c_inter, false)?;
            }
            if self.branches == Branches::Hybrid {
                store.insert_param(self.name(s, "alpha"), Tensor::zeros(&[1]), false)?;
            }
            if self.extension {
                store.init_conv(&self.name(s, "extend"), self.c_out, self.c_inter, 1, rng)?;
            }
            store.init_conv(&self.name(s, "value"), self.c_out, self.c_in, 1, rng)?;
        }
        Ok(())
    }

    /// Compressed, layer-normalized features of one branch: `(N, C_inter, T, V)`.
    pub fn compress(&self, ctx: &mut Ctx, x: Var, s: Subset, b: Branch) -> Result<Var> {
        let f = ctx.conv(
            &self.name(s, &format!("{b}.compress")),
            x,
            ConvGeom::POINTWISE,
        )?;
        ctx.layer_norm(&self.name(s, &format!("{b}.ln")), f)
    }

    pub fn subset_masks(&self, ctx: &mut Ctx, x: Var, s: Subset) -> Result<SubsetMasks> {
        let xs = ctx.tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.c_in || xs[3] != self.adjacency[0].shape()[0] {
            return Err(Error::shape(
                "spatial attention",
                &xs,
                &[0, self.c_in, 0, self.adjacency[0].shape()[0]],
            ));
        }
        let (n, v) = (xs[0], xs[3]);
        let disable = ctx.disable();
        let active = |b: Branch| self.branches.has(b) && disable != Some(b);
        let rd = if active(Branch::Rd) {
            let f = self.compress(ctx, x, s, Branch::Rd)?;
            let m = ctx.tape.mean_axis(f, 2)?;
            let d = ctx.tape.pairwise_diff(m);
            Some(ctx.tape.tanh(d))
        } else {
            None
        };
        let ra = if active(Branch::Ra) {
            let f = self.compress(ctx, x, s, Branch::Ra)?;
            let g = ctx.tape.temporal_gram(f)?;
            Some(ctx.tape.tanh(g))
        } else {
            None
        };
        let ra_term = match ra {
            Some(a) if self.branches == Branches::Hybrid => {
                let alpha = ctx.param(&self.name(s, "alpha"))?;
                Some(ctx.tape.scale_by(a, alpha)?)
            }
            other => other,
        };
        let hybrid = match (rd, ra_term) {
            (Some(a), Some(b)) => ctx.tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => ctx.tape.constant(Tensor::zeros(&[n, self.c_inter, v, v])),
        };
        let adj = ctx.tape.constant(self.adjacency[subset_index(s)].clone());
        let final_mask = ctx.tape.add_suffix(hybrid, adj)?;
        Ok(SubsetMasks {
            rd,
            ra,
            hybrid,
            final_mask,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(3);
        for s in Subset::ALL {
            let masks = self.subset_masks(ctx, x, s)?;
            if ctx.should_capture(self.layer) {
                let get = |v: Option<Var>| v.map(|v| ctx.tape.value(v).clone());
                let cap = CapturedMasks {
                    layer: self.layer,
                    subset: s,
                    rd: get(masks.rd),
                    ra: get(masks.ra),
                    hybrid: ctx.tape.value(masks.hybrid).clone(),
                    final_mask: ctx.tape.value(masks.final_mask).clone(),
                };
                ctx.push_capture(cap);
            }
            let m = if self.extension {
                ctx.conv(
                    &self.name(s, "extend"),
                    masks.final_mask,
                    ConvGeom::POINTWISE,
                )?
            } else {
                let shape = ctx.tape.shape(masks.final_mask).to_vec();
                let avg = ctx.tape.mean_axis(masks.final_mask, 1)?;
                ctx.tape.reshape(avg, &[shape[0], 1, shape[2], shape[3]])?
            };
            let val = ctx.conv(&self.name(s, "value"), x, ConvGeom::POINTWISE)?;
            outs.push(ctx.tape.graph_mix(m, val)?);
        }
        let sum = ctx.tape.add_n(&outs)?;
        Ok(ctx.tape.relu(sum))
    }
}

fn subset_index(s: Subset) -> usize {
    Subset::ALL
        .iter()
        .position(|&t| t == s)
        .expect("listed subset")
}
