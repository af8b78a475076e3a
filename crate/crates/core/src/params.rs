//! Named parameter storage and the per-forward binding context.
//!
//! Layers own no tensors. They register parameters under stable dotted
//! paths in a [`ParamStore`] and look them up through a [`Ctx`] while
//! recording a forward pass on a [`Tape`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Branch, CapturedMasks};
use crate::autodiff::{BatchStats, ConvGeom, Gradients, NormLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
/// Weight on the newest batch statistics in running-stat updates.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        decay: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, decay });
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate buffer `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer `{name}`")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total count of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn update_running_stats(
        &mut self,
        stats: &[(String, BatchStats)],
        momentum: f64,
    ) -> Result<()> {
        for (prefix, s) in stats {
            for (suffix, fresh) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self.buffer_mut(&format!("{prefix}.{suffix}"))?;
                for (r, &f) in buf.data_mut().iter_mut().zip(fresh.iter()) {
                    *r = (1.0 - momentum) * *r + momentum * f;
                }
            }
        }
        Ok(())
    }

    /// `(C_out, C_in, k, 1)` kernel and `(C_out)` bias, uniform in `±1/√(C_in·k)`.
    pub fn init_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        self.insert_param(
            format!("{prefix}.w"),
            Tensor::rand_uniform(&[c_out, c_in, k, 1], -bound, bound, rng),
            true,
        )?;
        self.insert_param(
            format!("{prefix}.b"),
            Tensor::rand_uniform(&[c_out], -bound, bound, rng),
            true,
        )
    }

    /// Affine `gamma = 1`, `beta = 0`; with `running`, also batch-norm buffers.
    pub fn init_norm(&mut self, prefix: &str, features: usize, running: bool) -> Result<()> {
        self.insert_param(format!("{prefix}.gamma"), Tensor::ones(&[features]), false)?;
        self.insert_param(format!("{prefix}.beta"), Tensor::zeros(&[features]), false)?;
        if running {
            self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[features]))?;
            self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[features]))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Per-forward state: parameter bindings, mode switches and side outputs.
pub struct Ctx<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_grads: bool,
    disable: Option<Branch>,
    dropout_rng: Option<ChaCha8Rng>,
    bn_stats: Vec<(String, BatchStats)>,
    capture_layer: Option<usize>,
    captured: Vec<CapturedMasks>,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            bound: HashMap::new(),
            mode,
            track_grads: false,
            disable: None,
            dropout_rng: None,
            bn_stats: Vec::new(),
            capture_layer: None,
            captured: Vec::new(),
        }
    }

    /// Parameters become differentiable leaves.
    pub fn with_grads(mut self) -> Self {
        self.track_grads = true;
        self
    }

    pub fn with_disable(mut self, disable: Option<Branch>) -> Self {
        self.disable = disable;
        self
    }

    /// Enables dropout (train mode only) with masks drawn from `seed`.
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Records attention masks of block `layer`.
    pub fn with_capture(mut self, layer: usize) -> Self {
        self.capture_layer = Some(layer);
        self
    }

    /// Uses `var` for parameter `name` instead of a copy of the stored value.
    pub fn bind(&mut self, name: impl Into<String>, var: Var) {
        self.bound.insert(name.into(), var);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn disable(&self) -> Option<Branch> {
        self.disable
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut t = self.store.param(name)?.value.clone();
        t.requires_grad = self.track_grads;
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.store.param(name).is_ok()
    }

    /// Convolution with the `{prefix}.w` kernel and `{prefix}.b` bias.
    pub fn conv(&mut self, prefix: &str, x: Var, geom: ConvGeom) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.conv2d(x, w, Some(b), geom)
    }

    /// Batch norm: batch statistics in train mode, running statistics in eval.
    pub fn batch_norm(&mut self, prefix: &str, x: Var, layout: NormLayout) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm(x, g, b, layout, NORM_EPS)?;
                self.bn_stats.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.store.buffer(&format!("{prefix}.running_mean"))?.data();
                let rv = self.store.buffer(&format!("{prefix}.running_var"))?.data();
                self.tape.batch_norm_eval(x, g, b, rm, rv, layout, NORM_EPS)
            }
        }
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b, NORM_EPS)
    }

    /// Inverted dropout; identity in eval mode or without a dropout seed.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode == Mode::Eval || rate <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate >= 1.0 {
            return Err(Error::invalid(format!(
                "dropout rate {rate} must be below 1"
            )));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.tape.value(x).numel();
        let mask = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        self.tape.mul_const(x, mask)
    }

    pub fn should_capture(&self, layer: usize) -> bool {
        self.capture_layer == Some(layer)
    }

    pub fn push_capture(&mut self, masks: CapturedMasks) {
        self.captured.push(masks);
    }

    pub fn take_captured(&mut self) -> Vec<CapturedMasks> {
        std::mem::take(&mut self.captured)
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradient of every bound parameter, zeros where none flowed.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.param(name).is_ok())
            .map(|(name, &v)| {
                (
                    name.clone(),
                    grads.get_or_zeros(v, self.tape.value(v).numel()),
                )
            })
            .collect()
    }
}
