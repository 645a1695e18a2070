//! Fusion tail: maps the concatenated branch features to an RGB image.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, VarPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionTailVariant {
    /// Reflection-padded 7×7 convolution straight to RGB, then `tanh`.
    #[default]
    SingleConvTanh,
    /// Two 3×3 convolutions (64 wide, ReLU) before the 7×7 output conv.
    ThreeConvs,
    /// A 3×3 projection to 64 channels, three residual blocks, then the 7×7
    /// output conv.
    ThreeResidualBlocks,
}

impl FusionTailVariant {
    pub const ALL: [FusionTailVariant; 3] = [
        FusionTailVariant::SingleConvTanh,
        FusionTailVariant::ThreeConvs,
        FusionTailVariant::ThreeResidualBlocks,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionTailVariant::SingleConvTanh => "single_conv_tanh",
            FusionTailVariant::ThreeConvs => "three_convs",
            FusionTailVariant::ThreeResidualBlocks => "three_residual_blocks",
        }
    }
}

impl fmt::Display for FusionTailVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionTailVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionTailVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion tail variant `{s}`")))
    }
}

const TAIL_WIDTH: usize = 64;

#[derive(Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

#[derive(Debug)]
enum Body {
    None,
    Convs(Vec<Conv2d>),
    Residual { proj: Conv2d, blocks: Vec<ResBlock> },
}

#[derive(Debug)]
pub struct FusionTail {
    body: Body,
    out: Conv2d,
}

impl FusionTail {
    pub fn new(p: &VarPath, c_in: usize, variant: FusionTailVariant) -> Result<Self> {
        let out_spec = |c| ConvSpec::same(c, 3, 7).reflect();
        Ok(match variant {
            FusionTailVariant::SingleConvTanh => FusionTail {
                body: Body::None,
                out: Conv2d::new(&p.sub("out"), out_spec(c_in))?,
            },
            FusionTailVariant::ThreeConvs => FusionTail {
                body: Body::Convs(vec![
                    Conv2d::new(&p.sub("body.0"), ConvSpec::same(c_in, TAIL_WIDTH, 3))?,
                    Conv2d::new(&p.sub("body.1"), ConvSpec::same(TAIL_WIDTH, TAIL_WIDTH, 3))?,
                ]),
                out: Conv2d::new(&p.sub("out"), out_spec(TAIL_WIDTH))?,
            },
            FusionTailVariant::ThreeResidualBlocks => FusionTail {
                body: Body::Residual {
                    proj: Conv2d::new(&p.sub("proj"), ConvSpec::same(c_in, TAIL_WIDTH, 3))?,
                    blocks: (0..3)
                        .map(|i| {
                            let b = p.sub("blocks").sub(i);
                            Ok(ResBlock {
                                conv1: Conv2d::new(&b.sub("conv1"), ConvSpec::same(TAIL_WIDTH, TAIL_WIDTH, 3))?,
                                conv2: Conv2d::new(&b.sub("conv2"), ConvSpec::same(TAIL_WIDTH, TAIL_WIDTH, 3))?,
                            })
                        })
                        .collect::<Result<_>>()?,
                },
                out: Conv2d::new(&p.sub("out"), out_spec(TAIL_WIDTH))?,
            },
        })
    }

    /// Concatenates the available branch features and maps them to `(0, 1)`
    /// through `(tanh(z) + 1) / 2`.
    pub fn forward(&self, features: &[&Tensor], ctx: Ctx) -> Result<Tensor> {
        let first = features
            .first()
            .ok_or_else(|| Error::Dimension("fusion tail needs at least one feature map".into()))?;
        let (_, _, h, w) = first.dims4()?;
        for f in features {
            let (_, _, fh, fw) = f.dims4()?;
            if (fh, fw) != (h, w) {
                return Err(Error::Dimension(format!(
                    "fusion inputs differ spatially: {h}x{w} vs {fh}x{fw}"
                )));
            }
        }
        let mut x = if features.len() == 1 {
            (*first).clone()
        } else {
            Tensor::cat(features, 1)?
        };
        match &self.body {
            Body::None => {}
            Body::Convs(convs) => {
                for c in convs {
                    x = c.forward(&x, ctx)?.relu()?;
                }
            }
            Body::Residual { proj, blocks } => {
                x = proj.forward(&x, ctx)?.relu()?;
                for b in blocks {
                    let r = b.conv2.forward(&b.conv1.forward(&x, ctx)?.relu()?, ctx)?;
                    x = (x + r)?;
                }
            }
        }
        Ok(((self.out.forward(&x, ctx)?.tanh()? + 1.0)? * 0.5)?)
    }
}
