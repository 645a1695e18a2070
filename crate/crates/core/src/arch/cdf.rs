//! Current-data-fitting branch: residual channel-attention blocks at full
//! resolution, with no down- or up-sampling anywhere.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, VarPath};

use super::decoder::ChannelAttention;

/// `x + CA(conv(relu(conv(x))))`.
#[derive(Debug)]
pub struct Rcab {
    channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelAttention,
}

impl Rcab {
    pub fn new(p: &VarPath, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Rcab {
            channels,
            conv1: Conv2d::new(&p.sub("body.0"), ConvSpec::same(channels, channels, 3))?,
            conv2: Conv2d::new(&p.sub("body.2"), ConvSpec::same(channels, channels, 3))?,
            ca: ChannelAttention::new(&p.sub("ca"), channels, reduction)?,
        })
    }

    /// The two convolutions on the residual path; zeroing the second one
    /// makes the block an exact identity.
    pub fn residual_convs(&self) -> [&Conv2d; 2] {
        [&self.conv1, &self.conv2]
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "RCAB expects {} channels, got {c}",
                self.channels
            )));
        }
        let r = self.conv2.forward(&self.conv1.forward(x, ctx)?.relu()?, ctx)?;
        Ok((x + self.ca.forward(&r, ctx)?)?)
    }
}

#[derive(Debug)]
pub struct CdfBranch {
    head: Conv2d,
    blocks: Vec<Rcab>,
    tail: Conv2d,
}

/// Minimum spatial extent accepted by the CDF branch.
pub const CDF_MIN_SIZE: usize = 8;

impl CdfBranch {
    pub fn new(p: &VarPath, channels: usize, num_blocks: usize, reduction: usize) -> Result<Self> {
        if num_blocks == 0 || channels < 8 {
            return Err(Error::Config(format!(
                "CDF branch needs >= 1 block and >= 8 channels, got {num_blocks} / {channels}"
            )));
        }
        Ok(CdfBranch {
            head: Conv2d::new(&p.sub("head"), ConvSpec::same(3, channels, 3))?,
            blocks: (0..num_blocks)
                .map(|i| Rcab::new(&p.sub("body").sub(i), channels, reduction))
                .collect::<Result<_>>()?,
            tail: Conv2d::new(&p.sub("tail"), ConvSpec::same(channels, channels, 3))?,
        })
    }

    pub fn blocks(&self) -> &[Rcab] {
        &self.blocks
    }

    pub fn out_channels(&self) -> usize {
        self.tail.out_channels()
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.run(x, ctx, &mut |_, _| {})
    }

    /// Forward pass that also reports the shape of every internal activation.
    pub fn forward_traced(&self, x: &Tensor, ctx: Ctx) -> Result<(Tensor, Vec<(String, Vec<usize>)>)> {
        let mut trace = Vec::new();
        let y = self.run(x, ctx, &mut |name, t| trace.push((name.to_string(), t.dims().to_vec())))?;
        Ok((y, trace))
    }

    fn run(&self, x: &Tensor, ctx: Ctx, observe: &mut dyn FnMut(&str, &Tensor)) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < CDF_MIN_SIZE || w < CDF_MIN_SIZE {
            return Err(Error::Dimension(format!(
                "CDF branch needs at least {CDF_MIN_SIZE}x{CDF_MIN_SIZE}, got {h}x{w}"
            )));
        }
        let head = self.head.forward(x, ctx)?;
        observe("head", &head);
        let mut y = head.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.forward(&y, ctx)?;
            observe(&format!("body.{i}"), &y);
        }
        let y = self.tail.forward(&y, ctx)?;
        observe("tail", &y);
        let y = (y + head)?;
        observe("out", &y);
        Ok(y)
    }
}
