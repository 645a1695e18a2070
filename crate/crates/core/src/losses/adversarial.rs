//! Patch discriminator and the log-likelihood GAN objectives.
//!
//! Discriminators return raw logits `s`; with `D = σ(s)` the losses are
//! written with `softplus` so they stay finite for any score:
//! `−log D = softplus(−s)` and `−log(1 − D) = softplus(s)`.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{instance_norm, leaky_relu, softplus};
use crate::nn::{Conv2d, ConvSpec, Ctx, VarStore};

pub trait Discriminator {
    /// Grid of real/fake logits for a batch `(N, 3, H, W)`.
    fn logits(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor>;

    /// Learnable parameters (empty for fixed discriminators).
    fn var_store(&self) -> Option<&VarStore>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub base_channels: usize,
    /// Number of stride-2 blocks after the first (unnormalised) one.
    pub n_layers: usize,
}

impl Default for PatchConfig {
    /// The 70×70-receptive-field configuration.
    fn default() -> Self {
        PatchConfig {
            base_channels: 64,
            n_layers: 3,
        }
    }
}

/// `C64 → C128 → C256 → C512 → 1` with 4×4 kernels: stride 2 for the first
/// `n_layers` convolutions, stride 1 for the last hidden one and the head;
/// instance norm on every hidden layer but the first, LeakyReLU(0.2).
#[derive(Debug)]
pub struct PatchDiscriminator {
    vs: VarStore,
    first: Conv2d,
    hidden: Vec<Conv2d>,
    head: Conv2d,
}

const SLOPE: f64 = 0.2;

impl PatchDiscriminator {
    pub fn new(cfg: &PatchConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.base_channels == 0 || cfg.n_layers == 0 {
            return Err(Error::Config(format!("invalid discriminator config {cfg:?}")));
        }
        let vs = VarStore::new(seed, dtype, device);
        let p = vs.root();
        let spec = |c_in, c_out, stride| ConvSpec::same(c_in, c_out, 4).stride(stride).padding(1);
        let first = Conv2d::new(&p.sub("model.0"), spec(3, cfg.base_channels, 2))?;
        let mut hidden = Vec::new();
        let mut c = cfg.base_channels;
        for i in 1..=cfg.n_layers {
            let out = cfg.base_channels * (1 << i.min(3));
            let stride = if i < cfg.n_layers { 2 } else { 1 };
            hidden.push(Conv2d::new(
                &p.sub(format!("model.{i}")),
                spec(c, out, stride).no_bias(),
            )?);
            c = out;
        }
        let head = Conv2d::new(&p.sub("head"), spec(c, 1, 1))?;
        Ok(PatchDiscriminator {
            vs,
            first,
            hidden,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.vs.num_parameters()
    }
}

impl Discriminator for PatchDiscriminator {
    fn logits(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mut y = leaky_relu(&self.first.forward(x, ctx)?, SLOPE)?;
        for conv in &self.hidden {
            y = leaky_relu(&instance_norm(&conv.forward(&y, ctx)?, 1e-5)?, SLOPE)?;
        }
        self.head.forward(&y, ctx)
    }

    fn var_store(&self) -> Option<&VarStore> {
        Some(&self.vs)
    }
}

/// A discriminator emitting the same logit everywhere (a 1×1 grid per
/// sample); used to pin `D` to a fixed probability.
#[derive(Debug, Clone, Copy)]
pub struct ConstantDiscriminator {
    pub logit: f64,
}

impl ConstantDiscriminator {
    /// Logit whose sigmoid equals `p` (probabilities 0 and 1 map to ∓1e3,
    /// where `softplus` already rounds to exact 0).
    pub fn with_probability(p: f64) -> Self {
        let logit = if p >= 1.0 {
            1e3
        } else if p <= 0.0 {
            -1e3
        } else {
            (p / (1.0 - p)).ln()
        };
        ConstantDiscriminator { logit }
    }
}

impl Discriminator for ConstantDiscriminator {
    fn logits(&self, x: &Tensor, _ctx: Ctx) -> Result<Tensor> {
        let n = x.dim(0)?;
        Ok((Tensor::ones((n, 1, 1, 1), x.dtype(), x.device())? * self.logit)?)
    }

    fn var_store(&self) -> Option<&VarStore> {
        None
    }
}

/// Generator objective: mean of `−log D(pred)` over batch and patch grid.
pub fn adversarial_loss(pred: &Tensor, d: &dyn Discriminator, ctx: Ctx) -> Result<Tensor> {
    Ok(softplus(&d.logits(pred, ctx)?.neg()?)?.mean_all()?)
}

/// Discriminator objective: `mean(−log D(real)) + mean(−log(1 − D(fake)))`.
pub fn discriminator_loss(real: &Tensor, fake: &Tensor, d: &dyn Discriminator, ctx: Ctx) -> Result<Tensor> {
    if real.dims() != fake.dims() {
        return Err(Error::Dimension(format!(
            "real {:?} and fake {:?} differ in shape",
            real.dims(),
            fake.dims()
        )));
    }
    let real_term = softplus(&d.logits(real, ctx)?.neg()?)?.mean_all()?;
    let fake_term = softplus(&d.logits(fake, ctx)?)?.mean_all()?;
    Ok((real_term + fake_term)?)
}
