//! Gaussian-window SSIM and the multi-scale MS-SSIM loss.
//!
//! Local statistics use a separable Gaussian window over a reflection-padded
//! image ("same" output size). Everything is differentiable, so the same
//! kernel serves as the training loss and as the evaluation metric.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv2d;
use crate::nn::layers::{avg_pool_k, reflect_pad};

/// Canonical MS-SSIM scale weights, finest scale first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Floor applied to per-scale means before the fractional powers, keeping
/// the product real and finite when a scale's structure term goes negative.
pub const MS_SSIM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimConfig {
    pub window_size: usize,
    pub gaussian_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    /// `β_j` per scale; its length is the number of scales `M`.
    pub scale_weights: Vec<f64>,
    /// Exponent of the coarsest-scale luminance term.
    pub alpha: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window_size: 11,
            gaussian_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
            scale_weights: MS_SSIM_WEIGHTS.to_vec(),
            alpha: MS_SSIM_WEIGHTS[4],
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    pub fn num_scales(&self) -> usize {
        self.scale_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 3 || self.window_size % 2 == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.gaussian_sigma > 0.0) || !(self.c1() > 0.0) || !(self.c2() > 0.0) {
            return Err(Error::Config("SSIM sigma and stabilisers must be positive".into()));
        }
        if self.scale_weights.is_empty() || self.scale_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!(
                "MS-SSIM needs >= 1 non-negative scale weight, got {:?}",
                self.scale_weights
            )));
        }
        Ok(())
    }

    /// Smallest side an image may have for all configured scales.
    pub fn min_side(&self) -> usize {
        self.window_size << (self.num_scales() - 1)
    }

    /// Keeps as many leading scales as an `h×w` image supports and
    /// renormalises their weights to sum to one (`α` becomes the last kept
    /// weight). Returns `self` unchanged when every scale fits.
    pub fn fitted_to(&self, h: usize, w: usize) -> Result<SsimConfig> {
        let side = h.min(w);
        let mut m = self.num_scales();
        while m > 0 && side < self.window_size << (m - 1) {
            m -= 1;
        }
        if m == 0 {
            return Err(Error::Dimension(format!(
                "{h}x{w} is smaller than the {0}x{0} SSIM window",
                self.window_size
            )));
        }
        if m == self.num_scales() {
            return Ok(self.clone());
        }
        let kept = &self.scale_weights[..m];
        let total: f64 = kept.iter().sum();
        let weights: Vec<f64> = kept.iter().map(|w| w / total).collect();
        Ok(SsimConfig {
            alpha: weights[m - 1],
            scale_weights: weights,
            ..self.clone()
        })
    }

    /// Normalised 1-D Gaussian taps.
    pub fn gaussian_taps(&self) -> Vec<f64> {
        let r = (self.window_size / 2) as f64;
        let taps: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - r;
                (-(d * d) / (2.0 * self.gaussian_sigma * self.gaussian_sigma)).exp()
            })
            .collect();
        let s: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / s).collect()
    }
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    Ok(pred.dims4()?)
}

/// Gaussian-filters every `(n, c)` plane of `x: (N, C, H, W)`.
fn gaussian_filter(x: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let r = cfg.window_size / 2;
    let taps = Tensor::new(cfg.gaussian_taps(), x.device())?.to_dtype(x.dtype())?;
    let kx = taps.reshape((1, 1, 1, cfg.window_size))?;
    let ky = taps.reshape((1, 1, cfg.window_size, 1))?;
    let planes = reflect_pad(&x.reshape((n * c, 1, h, w))?, r, r, r, r)?;
    let y = conv2d(&conv2d(&planes, &kx, 1, 0)?, &ky, 1, 0)?;
    Ok(y.reshape((n, c, h, w))?)
}

/// Per-pixel luminance and contrast-structure maps, each `(N, C, H, W)`.
fn ssim_maps(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    if h < cfg.window_size || w < cfg.window_size {
        return Err(Error::Dimension(format!(
            "{h}x{w} is smaller than the {0}x{0} SSIM window",
            cfg.window_size
        )));
    }
    let stacked = Tensor::cat(&[x, y, &x.sqr()?, &y.sqr()?, &(x * y)?], 0)?;
    let f = gaussian_filter(&stacked, cfg)?;
    let part = |i: usize| f.narrow(0, i * n, n);
    let (mu_x, mu_y) = (part(0)?, part(1)?);
    let (mu_xx, mu_yy, mu_xy) = (mu_x.sqr()?, mu_y.sqr()?, (&mu_x * &mu_y)?);
    let var_x = (part(2)? - &mu_xx)?;
    let var_y = (part(3)? - &mu_yy)?;
    let cov = (part(4)? - &mu_xy)?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let lum = ((mu_xy * 2.0)? + c1)?.div(&((mu_xx + mu_yy)? + c1)?)?;
    let cs = ((cov * 2.0)? + c2)?.div(&((var_x + var_y)? + c2)?)?;
    debug_assert_eq!(lum.dims(), &[n, c, h, w]);
    Ok((lum, cs))
}

/// Mean SSIM over all pixels, channels and samples (a scalar tensor).
pub fn ssim(pred: &Tensor, gt: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    check_pair(pred, gt)?;
    cfg.validate()?;
    let (lum, cs) = ssim_maps(pred, gt, cfg)?;
    Ok((lum * cs)?.mean_all()?)
}

fn halve(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    avg_pool_k(&x.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?, 2)
}

/// `1 − mean_{n,c}[ (l·cs)_M^α · ∏_{j<M} cs_j^{β_j} ]`, where each factor
/// is the spatial mean of its map at scale `j` (scale 1 is full
/// resolution, each next scale is a 2×2 average-pooled copy).
pub fn ms_ssim_loss(pred: &Tensor, gt: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let (_, _, h, w) = check_pair(pred, gt)?;
    cfg.validate()?;
    if h.min(w) < cfg.min_side() {
        return Err(Error::Dimension(format!(
            "{h}x{w} is too small for {} MS-SSIM scales with an {}-pixel window (need >= {})",
            cfg.num_scales(),
            cfg.window_size,
            cfg.min_side()
        )));
    }
    let m = cfg.num_scales();
    let (mut x, mut y) = (pred.clone(), gt.clone());
    let mut log_prod: Option<Tensor> = None;
    for j in 0..m {
        let (lum, cs) = ssim_maps(&x, &y, cfg)?;
        let (term, exponent) = if j + 1 == m {
            ((lum * cs)?, cfg.alpha)
        } else {
            (cs, cfg.scale_weights[j])
        };
        let mean = term.mean((2, 3))?.clamp(MS_SSIM_FLOOR, f64::INFINITY)?;
        let weighted = (mean.log()? * exponent)?;
        log_prod = Some(match log_prod {
            None => weighted,
            Some(acc) => (acc + weighted)?,
        });
        if j + 1 < m {
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    let ms = log_prod.expect("at least one scale").exp()?;
    Ok((ms.mean_all()?.neg()? + 1.0)?)
}

/// Scalar value of a loss or metric tensor.
pub fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
