//! Decoder half of the transfer-learning branch: four ×2 pixel-shuffle
//! stages, each followed by feature attention, then a multi-scale enhancer.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::layers::{avg_pool_k, global_avg_pool, leaky_relu, pixel_shuffle, sigmoid, upsample_nearest_k};
use crate::nn::{Conv2d, ConvSpec, Ctx, VarPath};

use super::res2net::{EncoderFeatures, STAGE_CHANNELS, STEM_CHANNELS};

/// Squeeze-and-excitation style channel gate: `x · σ(W₂ relu(W₁ gap(x)))`.
#[derive(Debug)]
pub struct ChannelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub fn new(p: &VarPath, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            squeeze: Conv2d::new(&p.sub(0), ConvSpec::same(channels, hidden, 1))?,
            excite: Conv2d::new(&p.sub(2), ConvSpec::same(hidden, channels, 1))?,
        })
    }

    /// The per-channel weights in `(0, 1)`, shaped `(N, C, 1, 1)`.
    pub fn gate(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let s = self.squeeze.forward(&global_avg_pool(x)?, ctx)?.relu()?;
        sigmoid(&self.excite.forward(&s, ctx)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.gate(x, ctx)?)?)
    }
}

/// Per-pixel gate: `x · σ(W₂ relu(W₁ x))` with a single-channel output.
#[derive(Debug)]
pub struct PixelAttention {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl PixelAttention {
    pub fn new(p: &VarPath, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        Ok(PixelAttention {
            squeeze: Conv2d::new(&p.sub(0), ConvSpec::same(channels, hidden, 1))?,
            excite: Conv2d::new(&p.sub(2), ConvSpec::same(hidden, 1, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let s = self.squeeze.forward(x, ctx)?.relu()?;
        Ok(x.broadcast_mul(&sigmoid(&self.excite.forward(&s, ctx)?)?)?)
    }
}

const FA_REDUCTION: usize = 8;

#[derive(Debug)]
struct UpStage {
    up: Conv2d,
    fuse: Conv2d,
    ca: ChannelAttention,
    pa: PixelAttention,
}

impl UpStage {
    fn new(p: &VarPath, c_in: usize, skip: usize, c_out: usize) -> Result<Self> {
        Ok(UpStage {
            up: Conv2d::new(&p.sub("up"), ConvSpec::same(c_in, 4 * c_out, 3))?,
            fuse: Conv2d::new(&p.sub("fuse"), ConvSpec::same(c_out + skip, c_out, 3))?,
            ca: ChannelAttention::new(&p.sub("ca"), c_out, FA_REDUCTION)?,
            pa: PixelAttention::new(&p.sub("pa"), c_out, FA_REDUCTION)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, ctx: Ctx) -> Result<Tensor> {
        let y = pixel_shuffle(&self.up.forward(x, ctx)?, 2)?;
        let y = match skip {
            Some(s) => Tensor::cat(&[&y, s], 1)?,
            None => y,
        };
        let y = self.fuse.forward(&y, ctx)?.relu()?;
        self.pa.forward(&self.ca.forward(&y, ctx)?, ctx)
    }
}

/// Four ×2 stages taking the stride-16 features back to full resolution.
/// Stage `i` consumes the encoder feature at its output resolution as a skip
/// (strides 8, 4 and 2); the final full-resolution stage has none.
#[derive(Debug)]
pub struct Decoder {
    stages: Vec<UpStage>,
}

impl Decoder {
    pub fn new(p: &VarPath, channels: &[usize]) -> Result<Self> {
        if channels.len() != 4 {
            return Err(Error::Config(format!(
                "decoder needs 4 stage widths for ×16 upsampling, got {}",
                channels.len()
            )));
        }
        let skips = [STAGE_CHANNELS[1], STAGE_CHANNELS[0], STEM_CHANNELS, 0];
        let mut c_in = STAGE_CHANNELS[2];
        let mut stages = Vec::with_capacity(4);
        for (i, (&c, &skip)) in channels.iter().zip(&skips).enumerate() {
            stages.push(UpStage::new(&p.sub(i), c_in, skip, c)?);
            c_in = c;
        }
        Ok(Decoder { stages })
    }

    pub fn forward(&self, feats: &EncoderFeatures, ctx: Ctx) -> Result<Tensor> {
        let skips = [Some(&feats.stages[1]), Some(&feats.stages[0]), Some(&feats.stem), None];
        let mut y = feats.stages[2].clone();
        for (stage, skip) in self.stages.iter().zip(skips) {
            y = stage.forward(&y, skip, ctx)?;
        }
        Ok(y)
    }
}

const ENHANCER_WIDTH: usize = 20;
const ENHANCER_POOLS: [usize; 2] = [8, 16];

/// Multi-scale refinement: two average-pooled context paths (÷8, ÷16) are
/// squeezed to one channel each, upsampled back and concatenated with the
/// refined features before a final convolution and `tanh`.
#[derive(Debug)]
pub struct Enhancer {
    refine1: Conv2d,
    refine2: Conv2d,
    pooled: Vec<Conv2d>,
    refine3: Conv2d,
}

impl Enhancer {
    pub fn new(p: &VarPath, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Enhancer {
            refine1: Conv2d::new(&p.sub("refine1"), ConvSpec::same(c_in, ENHANCER_WIDTH, 3))?,
            refine2: Conv2d::new(&p.sub("refine2"), ConvSpec::same(ENHANCER_WIDTH, ENHANCER_WIDTH, 3))?,
            pooled: ENHANCER_POOLS
                .iter()
                .map(|k| Conv2d::new(&p.sub(format!("pool{k}")), ConvSpec::same(ENHANCER_WIDTH, 1, 1)))
                .collect::<Result<_>>()?,
            refine3: Conv2d::new(
                &p.sub("refine3"),
                ConvSpec::same(ENHANCER_WIDTH + ENHANCER_POOLS.len(), c_out, 3),
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = leaky_relu(&self.refine1.forward(x, ctx)?, 0.2)?;
        let y = leaky_relu(&self.refine2.forward(&y, ctx)?, 0.2)?;
        let mut parts = Vec::with_capacity(ENHANCER_POOLS.len() + 1);
        for (k, conv) in ENHANCER_POOLS.iter().zip(&self.pooled) {
            let p = leaky_relu(&conv.forward(&avg_pool_k(&y, *k)?, ctx)?, 0.2)?;
            parts.push(upsample_nearest_k(&p, *k)?);
        }
        parts.push(y);
        Ok(self.refine3.forward(&Tensor::cat(&parts, 1)?, ctx)?.tanh()?)
    }
}
