//! Building blocks shared by the dehazing network, the discriminator and the
//! perceptual feature extractor.

use candle_core::{DType, Tensor, Var, D};

use crate::error::Result;
use crate::nn::conv::conv2d;
use crate::nn::store::{Init, VarPath};

/// Forward-pass mode.
///
/// In [`Ctx::train`] parameters participate in autograd and batch norm uses
/// batch statistics (updating its running estimates). In [`Ctx::eval`]
/// parameters are detached, so no graph is retained and memory stays flat on
/// large inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    pub train: bool,
}

impl Ctx {
    pub fn train() -> Self {
        Ctx { train: true }
    }

    pub fn eval() -> Self {
        Ctx { train: false }
    }

    #[inline]
    pub fn w(&self, v: &Var) -> Tensor {
        if self.train {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zeros,
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    pad_mode: PadMode,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    /// Stride-1 "same" convolution with bias.
    pub fn same(c_in: usize, c_out: usize, kernel: usize) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: true,
            pad_mode: PadMode::Zeros,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn reflect(mut self) -> Self {
        self.pad_mode = PadMode::Reflect;
        self
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.c_out * self.kernel * self.kernel
    }
}

impl Conv2d {
    /// PyTorch's default initialisation: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for both weight and bias.
    pub fn new(p: &VarPath, spec: ConvSpec) -> Result<Self> {
        let bound = 1.0 / (spec.fan_in() as f64).sqrt();
        Self::with_init(p, spec, Init::Uniform(bound), Init::Uniform(bound))
    }

    /// Kaiming-normal (fan-out, ReLU gain) weights and zero bias.
    pub fn kaiming(p: &VarPath, spec: ConvSpec) -> Result<Self> {
        let std = (2.0 / spec.fan_out() as f64).sqrt();
        Self::with_init(p, spec, Init::Normal(std), Init::Zeros)
    }

    pub fn with_init(p: &VarPath, spec: ConvSpec, weight: Init, bias: Init) -> Result<Self> {
        let w = p.param("weight", &[spec.c_out, spec.c_in, spec.kernel, spec.kernel], weight)?;
        let b = if spec.bias {
            Some(p.param("bias", &[spec.c_out], bias)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight: w,
            bias: b,
            stride: spec.stride,
            padding: spec.padding,
            pad_mode: spec.pad_mode,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = match self.pad_mode {
            PadMode::Zeros => conv2d(x, &ctx.w(&self.weight), self.stride, self.padding)?,
            PadMode::Reflect => {
                let p = self.padding;
                let x = reflect_pad(x, p, p, p, p)?;
                conv2d(&x, &ctx.w(&self.weight), self.stride, 0)?
            }
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ctx.w(b).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalisation over `(N, H, W)` per channel, PyTorch semantics
/// (`eps = 1e-5`, `momentum = 0.1`, unbiased running variance).
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(p: &VarPath, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: p.param("weight", &[channels], Init::Ones)?,
            bias: p.param("bias", &[channels], Init::Zeros)?,
            running_mean: p.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: p.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if ctx.train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor().detach() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let scale = ctx.w(&self.weight).reshape((1, c, 1, 1))?.mul(&inv_std)?;
        let shift = ctx.w(&self.bias).reshape((1, c, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Per-sample, per-channel normalisation without affine parameters.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim((2, 3))?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim((2, 3))?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?)
}

/// Mirror index for reflection padding; valid for any offset when `n >= 2`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn reflect_dim(x: &Tensor, dim: usize, before: usize, after: usize) -> Result<Tensor> {
    if before == 0 && after == 0 {
        return Ok(x.clone());
    }
    let n = x.dim(dim)?;
    let idx: Vec<u32> = (-(before as isize)..(n + after) as isize)
        .map(|i| reflect_index(i, n) as u32)
        .collect();
    let idx = Tensor::from_vec(idx, n + before + after, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Reflection padding of the two trailing (spatial) dims, as `ReflectionPad2d`
/// but also defined when the pad exceeds the extent (repeated mirroring).
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let rank = x.rank();
    let x = reflect_dim(x, rank - 2, top, bottom)?;
    reflect_dim(&x, rank - 1, left, right)
}

/// Depth-to-space: `(N, C·r², H, W) → (N, C, H·r, W·r)`, matching `nn.PixelShuffle`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(crate::error::Error::Dimension(format!(
            "pixel shuffle by {r} needs channels divisible by {}, got {c}",
            r * r
        )));
    }
    let oc = c / (r * r);
    Ok(x.reshape((n, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((n, oc, h * r, w * r))?)
}

/// 3×3 average pooling with padding 1, padded zeros counted in the mean
/// (`nn.AvgPool2d(3, stride, padding=1)`).
pub fn avg_pool3x3(x: &Tensor, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let kernel = (Tensor::ones((1, 1, 3, 3), x.dtype(), x.device())? / 9.0)?;
    let y = conv2d(&x.reshape((n * c, 1, h, w))?, &kernel, stride, 1)?;
    let (_, _, oh, ow) = y.dims4()?;
    Ok(y.reshape((n, c, oh, ow))?)
}

/// 3×3 / stride-2 / padding-1 max pooling for non-negative inputs: zero
/// padding coincides with `-inf` padding when every value is `>= 0`.
pub fn max_pool3x3_s2_nonneg(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
    // pad so every window start 2·o + k (k < 3) has room for the strided split
    let padded = x
        .pad_with_zeros(2, 1, 2 * oh + 1 - h)?
        .pad_with_zeros(3, 1, 2 * ow + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for ky in 0..3 {
        let rows = padded
            .narrow(2, ky, 2 * oh)?
            .reshape((n, c, oh, 2, 2 * ow + 2))?
            .narrow(3, 0, 1)?
            .squeeze(3)?;
        for kx in 0..3 {
            let v = rows
                .narrow(3, kx, 2 * ow)?
                .reshape((n, c, oh, ow, 2))?
                .narrow(4, 0, 1)?
                .squeeze(4)?;
            out = Some(match out {
                None => v,
                Some(m) => m.maximum(&v)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

/// Non-overlapping `k×k` average pooling; spatial dims must be divisible by `k`.
pub fn avg_pool_k(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % k != 0 || w % k != 0 {
        return Err(crate::error::Error::Dimension(format!(
            "{k}x{k} pooling needs dims divisible by {k}, got {h}x{w}"
        )));
    }
    Ok(x.reshape((n, c, h / k, k, w / k, k))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest_k(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, k, w, k))?
        .reshape((n, c, h * k, w * k))?)
}

/// Mean over every dim except the batch dim.
pub fn mean_per_sample(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(D::Minus1)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.sum(0)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::store::VarStore;
    use candle_core::Device;

    fn arange(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::arange(0f64, n as f64, &Device::Cpu)
            .unwrap()
            .reshape(shape)
            .unwrap()
    }

    #[test]
    fn reflect_pad_matches_torch_convention() {
        // ReflectionPad2d((2,2,0,0)) on [0,1,2,3] -> [2,1,0,1,2,3,2,1]
        let x = arange(&[1, 1, 1, 4]);
        let y = reflect_pad(&x, 0, 0, 2, 2).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn reflect_index_handles_wide_pads() {
        let idx: Vec<usize> = (-5..8).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(idx, vec![1, 0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1]);
    }

    #[test]
    fn pixel_shuffle_layout() {
        // channel c*r^2 + i*r + j lands at (h*r + i, w*r + j)
        let x = arange(&[1, 4, 1, 1]);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn max_pool_matches_brute_force() {
        for (h, w) in [(8, 8), (7, 9), (4, 6)] {
            let x = arange(&[2, 3, h, w]).sin().unwrap().abs().unwrap();
            let y = max_pool3x3_s2_nonneg(&x).unwrap();
            let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
            assert_eq!(y.dims(), &[2, 3, oh, ow]);
            let xs = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let ys = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for b in 0..6 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    m = m.max(xs[b * h * w + iy as usize * w + ix as usize]);
                                }
                            }
                        }
                        assert_eq!(ys[b * oh * ow + oy * ow + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_counts_padding() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = avg_pool3x3(&x, 2).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 2]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // top-left window sees 4 of 9 inside the image
        assert!((v[0] - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let vs = VarStore::new(0, DType::F64, &Device::Cpu);
        let bn = BatchNorm2d::new(&vs.root(), 2).unwrap();
        let x = arange(&[2, 2, 3, 3]);
        let y = bn.forward(&x, Ctx::eval()).unwrap();
        // running mean 0, var 1: identity up to eps
        let d = scalar_f64(
            &(y - &x)
                .unwrap()
                .abs()
                .unwrap()
                .max_keepdim(3)
                .unwrap()
                .max_keepdim(2)
                .unwrap()
                .max_keepdim(1)
                .unwrap()
                .max_keepdim(0)
                .unwrap(),
        )
        .unwrap();
        assert!(d < 1e-3);
        let ytrain = bn.forward(&x, Ctx::train()).unwrap();
        let m = ytrain
            .mean_keepdim((0, 2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-12));
        let rm = vs.get("running_mean").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        let x = Tensor::new(&[-1000f64, 0.0, 1000.0], &Device::Cpu).unwrap();
        let v = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v[2], 1000.0);
    }

    #[test]
    fn pool_then_upsample_round_trips_block_means() {
        let x = arange(&[1, 1, 4, 4]);
        let p = avg_pool_k(&x, 2).unwrap();
        assert_eq!(
            p.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![2.5, 4.5, 10.5, 12.5]
        );
        let u = upsample_nearest_k(&p, 2).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        assert_eq!(
            u.flatten_all().unwrap().to_vec1::<f64>().unwrap()[..4],
            [2.5, 2.5, 4.5, 4.5]
        );
        assert!(avg_pool_k(&arange(&[1, 1, 3, 4]), 2).is_err());
    }
}
