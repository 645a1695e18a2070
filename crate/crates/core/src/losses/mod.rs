//! Training objective: smooth L1, MS-SSIM, perceptual and adversarial terms
//! and their weighted sum.

pub mod adversarial;
pub mod perceptual;
pub mod ssim;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Ctx;

pub use adversarial::{
    adversarial_loss, discriminator_loss, ConstantDiscriminator, Discriminator, PatchConfig, PatchDiscriminator,
};
pub use perceptual::{perceptual_loss, PerceptualConfig, Vgg16Features, WeightSource};
pub use ssim::{ms_ssim_loss, ssim, value, SsimConfig};

/// Mean of the Huber-style penalty with unit threshold:
/// `0.5·z²` for `|z| < 1`, `|z| − 0.5` otherwise, where `z = gt − pred`.
pub fn smooth_l1(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let a = (gt - pred)?.abs()?;
    // with s = min(|z|, 1): s·(|z| − s/2) covers both pieces
    let s = a.clamp(0.0, 1.0)?;
    Ok((&s * (a - (&s * 0.5)?)?)?.mean_all()?)
}

/// The four loss coefficients `γ1..γ4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub gamma4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma1: 1.0,
            gamma2: 0.5,
            gamma3: 0.01,
            gamma4: 0.0005,
        }
    }
}

impl LossWeights {
    pub fn new(gamma1: f64, gamma2: f64, gamma3: f64, gamma4: f64) -> Result<Self> {
        let w = LossWeights {
            gamma1,
            gamma2,
            gamma3,
            gamma4,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma1, self.gamma2, self.gamma3, self.gamma4];
        if all.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Everything besides the discriminator that the objective needs.
#[derive(Debug)]
pub struct LossSuite {
    pub ssim: SsimConfig,
    pub vgg: Vgg16Features,
}

/// The four terms and their weighted total as graph-carrying tensors.
/// Terms whose weight is zero are computed on a detached prediction, so they
/// are reported but contribute no gradient.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l1: Tensor,
    pub msssim: Tensor,
    pub perc: Tensor,
    pub adv: Tensor,
    pub total: Tensor,
}

/// Plain numbers for logging, in the column order of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l1: f64,
    pub msssim: f64,
    pub perc: f64,
    pub adv: f64,
    pub total: f64,
}

impl LossRecord {
    pub const COLUMNS: [&'static str; 5] = ["l1", "msssim", "perc", "adv", "total"];

    pub fn values(&self) -> [f64; 5] {
        [self.l1, self.msssim, self.perc, self.adv, self.total]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::COLUMNS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

impl LossBreakdown {
    pub fn record(&self) -> Result<LossRecord> {
        Ok(LossRecord {
            l1: value(&self.l1)?,
            msssim: value(&self.msssim)?,
            perc: value(&self.perc)?,
            adv: value(&self.adv)?,
            total: value(&self.total)?,
        })
    }
}

/// `γ1·L1 + γ2·L_MS-SSIM + γ3·L_perc + γ4·L_adv`.
pub fn total_loss(
    pred: &Tensor,
    gt: &Tensor,
    d: &dyn Discriminator,
    weights: &LossWeights,
    suite: &LossSuite,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let detached = pred.detach();
    let input = |g: f64| if g > 0.0 { pred } else { &detached };
    let (_, _, h, w) = pred.dims4()?;
    let ssim_cfg = suite.ssim.fitted_to(h, w)?;
    let l1 = smooth_l1(input(weights.gamma1), gt)?;
    let msssim = ms_ssim_loss(input(weights.gamma2), gt, &ssim_cfg)?;
    let perc = perceptual_loss(input(weights.gamma3), gt, &suite.vgg)?;
    // discriminator weights are frozen for the generator step
    let adv = adversarial_loss(input(weights.gamma4), d, Ctx::eval())?;
    let total = ((((&l1 * weights.gamma1)? + (&msssim * weights.gamma2)?)? + (&perc * weights.gamma3)?)?
        + (&adv * weights.gamma4)?)?;
    Ok(LossBreakdown {
        l1,
        msssim,
        perc,
        adv,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn full(v: f64) -> Tensor {
        (Tensor::ones((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap() * v).unwrap()
    }

    #[test]
    fn smooth_l1_pieces() {
        let gt = full(0.0);
        for (z, want) in [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)] {
            let got = value(&smooth_l1(&full(z), &gt).unwrap()).unwrap();
            assert!((got - want).abs() < 1e-15, "z={z}: {got}");
        }
        let below = value(&smooth_l1(&full(1.0 - 1e-6), &gt).unwrap()).unwrap();
        let above = value(&smooth_l1(&full(1.0 + 1e-6), &gt).unwrap()).unwrap();
        assert!((below - above).abs() < 1e-5);
        assert!(smooth_l1(
            &full(0.0),
            &Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap()
        )
        .is_err());
    }

    #[test]
    fn weights_reject_negatives() {
        assert!(LossWeights::new(1.0, -0.1, 0.0, 0.0).is_err());
        assert_eq!(
            LossWeights::new(1.0, 0.5, 0.01, 0.0005).unwrap(),
            LossWeights::default()
        );
    }

    fn suite() -> LossSuite {
        LossSuite {
            ssim: SsimConfig::default(),
            vgg: Vgg16Features::random(&PerceptualConfig::default(), 0, DType::F64, &Device::Cpu).unwrap(),
        }
    }

    fn pair() -> (Tensor, Tensor) {
        let pred = Tensor::rand(0f64, 1.0, (1, 3, 48, 48), &Device::Cpu).unwrap();
        let gt = Tensor::rand(0f64, 1.0, (1, 3, 48, 48), &Device::Cpu).unwrap();
        (pred, gt)
    }

    #[test]
    fn total_recomposes_from_terms() {
        let s = suite();
        let (pred, gt) = pair();
        let d = ConstantDiscriminator::with_probability(0.3);
        let w = LossWeights::default();
        let b = total_loss(&pred, &gt, &d, &w, &s).unwrap().record().unwrap();
        let cfg = s.ssim.fitted_to(48, 48).unwrap();
        let l1 = value(&smooth_l1(&pred, &gt).unwrap()).unwrap();
        let ms = value(&ms_ssim_loss(&pred, &gt, &cfg).unwrap()).unwrap();
        let pc = value(&perceptual_loss(&pred, &gt, &s.vgg).unwrap()).unwrap();
        let adv = value(&adversarial_loss(&pred, &d, Ctx::eval()).unwrap()).unwrap();
        let want = w.gamma1 * l1 + w.gamma2 * ms + w.gamma3 * pc + w.gamma4 * adv;
        assert!((b.total - want).abs() < 1e-7);
        assert_eq!((b.l1, b.msssim, b.perc, b.adv), (l1, ms, pc, adv));

        let only_l1 = total_loss(&pred, &gt, &d, &LossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap(), &s)
            .unwrap()
            .record()
            .unwrap();
        assert_eq!(only_l1.total, only_l1.l1);
    }

    #[test]
    fn zero_at_equality_with_fooled_discriminator() {
        let s = suite();
        let (_, gt) = pair();
        let d = ConstantDiscriminator::with_probability(1.0);
        let r = total_loss(&gt, &gt, &d, &LossWeights::default(), &s)
            .unwrap()
            .record()
            .unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-6), "{r:?}");
    }

    #[test]
    fn linear_in_each_weight() {
        let s = suite();
        let (pred, gt) = pair();
        let d = ConstantDiscriminator::with_probability(0.2);
        let at = |g3: f64| {
            let w = LossWeights::new(1.0, 0.5, g3, 0.0005).unwrap();
            total_loss(&pred, &gt, &d, &w, &s).unwrap().record().unwrap().total
        };
        let (a, b, c) = (at(0.0), at(1.0), at(2.0));
        assert!(((c - b) - (b - a)).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_terms_carry_no_gradient() {
        let s = suite();
        let (pred, gt) = pair();
        let var = candle_core::Var::from_tensor(&pred).unwrap();
        let d = ConstantDiscriminator::with_probability(0.2);
        let only_adv = LossWeights::new(0.0, 0.0, 0.0, 0.0).unwrap();
        let b = total_loss(var.as_tensor(), &gt, &d, &only_adv, &s).unwrap();
        let grads = b.total.backward().unwrap();
        assert!(grads.get(var.as_tensor()).is_none());
    }
}
