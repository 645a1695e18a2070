//! Res2Net-v1b backbone (26w×4s) truncated after the stride-16 stage.
//!
//! Parameter keys follow the published PyTorch checkpoints exactly
//! (`conv1.0.weight`, `layer3.22.convs.2.weight`, `layer2.0.downsample.1.weight`,
//! ...), so an ImageNet state dict loads without re-mapping; the `layer4` and
//! `fc` entries of such a checkpoint are simply not consumed.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{avg_pool3x3, avg_pool_k, max_pool3x3_s2_nonneg};
use crate::nn::{BatchNorm2d, Conv2d, ConvSpec, Ctx, VarPath};

const BASE_WIDTH: usize = 26;
const SCALE: usize = 4;
const EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(rename = "res2net50-v1b")]
    Res2Net50V1b,
    #[serde(rename = "res2net101-v1b")]
    Res2Net101V1b,
}

impl EncoderVariant {
    /// Blocks per stage for the three stages that are kept.
    pub fn stage_depths(self) -> [usize; 3] {
        match self {
            EncoderVariant::Res2Net50V1b => [3, 4, 6],
            EncoderVariant::Res2Net101V1b => [3, 4, 23],
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::Res2Net50V1b => "res2net50-v1b",
            EncoderVariant::Res2Net101V1b => "res2net101-v1b",
        })
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "res2net50-v1b" => Ok(EncoderVariant::Res2Net50V1b),
            "res2net101-v1b" => Ok(EncoderVariant::Res2Net101V1b),
            other => Err(Error::Config(format!("unknown encoder variant `{other}`"))),
        }
    }
}

/// Output channels of the stem and the three kept stages.
pub const STEM_CHANNELS: usize = 64;
pub const STAGE_CHANNELS: [usize; 3] = [256, 512, 1024];

#[derive(Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new(conv: &VarPath, bn: &VarPath, spec: ConvSpec) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::kaiming(conv, spec.no_bias())?,
            bn: BatchNorm2d::new(bn, spec.c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x, ctx)?, ctx)
    }
}

#[derive(Debug)]
struct Downsample {
    pool: usize,
    proj: ConvBn,
}

#[derive(Debug)]
struct Bottle2neck {
    width: usize,
    stage: bool,
    stride: usize,
    reduce: ConvBn,
    splits: Vec<ConvBn>,
    expand: ConvBn,
    downsample: Option<Downsample>,
}

impl Bottle2neck {
    fn new(p: &VarPath, inplanes: usize, planes: usize, stride: usize, first: bool) -> Result<Self> {
        let width = planes * BASE_WIDTH / 64;
        let reduce = ConvBn::new(
            &p.sub("conv1"),
            &p.sub("bn1"),
            ConvSpec::same(inplanes, width * SCALE, 1),
        )?;
        let splits = (0..SCALE - 1)
            .map(|i| {
                ConvBn::new(
                    &p.sub("convs").sub(i),
                    &p.sub("bns").sub(i),
                    ConvSpec::same(width, width, 3).stride(stride),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let expand = ConvBn::new(
            &p.sub("conv3"),
            &p.sub("bn3"),
            ConvSpec::same(width * SCALE, planes * EXPANSION, 1),
        )?;
        let downsample = if first && (stride != 1 || inplanes != planes * EXPANSION) {
            let d = p.sub("downsample");
            Some(Downsample {
                pool: stride,
                proj: ConvBn::new(&d.sub(1), &d.sub(2), ConvSpec::same(inplanes, planes * EXPANSION, 1))?,
            })
        } else {
            None
        };
        Ok(Bottle2neck {
            width,
            stage: first,
            stride,
            reduce,
            splits,
            expand,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let out = self.reduce.forward(x, ctx)?.relu()?;
        let parts: Vec<Tensor> = (0..SCALE)
            .map(|i| out.narrow(1, i * self.width, self.width))
            .collect::<candle_core::Result<_>>()?;
        let mut outs = Vec::with_capacity(SCALE);
        let mut sp: Option<Tensor> = None;
        for (i, conv) in self.splits.iter().enumerate() {
            let input = match (&sp, self.stage) {
                (Some(prev), false) => (prev + &parts[i])?,
                _ => parts[i].clone(),
            };
            let y = conv.forward(&input, ctx)?.relu()?;
            outs.push(y.clone());
            sp = Some(y);
        }
        let last = &parts[SCALE - 1];
        outs.push(if self.stage {
            avg_pool3x3(last, self.stride)?
        } else {
            last.clone()
        });
        let out = self.expand.forward(&Tensor::cat(&outs, 1)?, ctx)?;
        let residual = match &self.downsample {
            Some(d) => {
                let pooled = if d.pool > 1 { avg_pool_k(x, d.pool)? } else { x.clone() };
                d.proj.forward(&pooled, ctx)?
            }
            None => x.clone(),
        };
        Ok((out + residual)?.relu()?)
    }
}

/// Multi-resolution features produced by [`Res2NetEncoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderFeatures {
    /// Stride 2, 64 channels (stem output before max pooling).
    pub stem: Tensor,
    /// Strides 4, 8 and 16 with 256, 512 and 1024 channels.
    pub stages: [Tensor; 3],
}

#[derive(Debug)]
pub struct Res2NetEncoder {
    stem: Vec<ConvBn>,
    stages: Vec<Vec<Bottle2neck>>,
}

impl Res2NetEncoder {
    pub fn new(p: &VarPath, variant: EncoderVariant) -> Result<Self> {
        let c1 = p.sub("conv1");
        let stem = vec![
            ConvBn::new(&c1.sub(0), &c1.sub(1), ConvSpec::same(3, 32, 3).stride(2))?,
            ConvBn::new(&c1.sub(3), &c1.sub(4), ConvSpec::same(32, 32, 3))?,
            ConvBn::new(&c1.sub(6), &p.sub("bn1"), ConvSpec::same(32, STEM_CHANNELS, 3))?,
        ];
        let mut inplanes = STEM_CHANNELS;
        let mut stages = Vec::new();
        for (s, depth) in variant.stage_depths().into_iter().enumerate() {
            let planes = 64 << s;
            let stride = if s == 0 { 1 } else { 2 };
            let lp = p.sub(format!("layer{}", s + 1));
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let first = b == 0;
                blocks.push(Bottle2neck::new(
                    &lp.sub(b),
                    inplanes,
                    planes,
                    if first { stride } else { 1 },
                    first,
                )?);
                inplanes = planes * EXPANSION;
            }
            stages.push(blocks);
        }
        Ok(Res2NetEncoder { stem, stages })
    }

    /// Input `(N, 3, H, W)` with `H` and `W` divisible by 16.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<EncoderFeatures> {
        let (_, _, h, w) = x.dims4()?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Dimension(format!(
                "encoder input must be divisible by 16, got {h}x{w}"
            )));
        }
        let mut y = x.clone();
        // the published stem applies ReLU after every BN, including bn1
        for cb in &self.stem {
            y = cb.forward(&y, ctx)?.relu()?;
        }
        let stem = y;
        let mut y = max_pool3x3_s2_nonneg(&stem)?;
        let mut feats = Vec::with_capacity(3);
        for blocks in &self.stages {
            for block in blocks {
                y = block.forward(&y, ctx)?;
            }
            feats.push(y.clone());
        }
        let [a, b, c]: [Tensor; 3] = feats.try_into().expect("three stages");
        Ok(EncoderFeatures {
            stem,
            stages: [a, b, c],
        })
    }
}
