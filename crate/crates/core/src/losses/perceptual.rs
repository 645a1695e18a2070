//! VGG-16 feature-space loss.
//!
//! Only the `features` stack up to the deepest requested tap is built. Keys
//! match torchvision's `vgg16().features` (`features.0.weight`, ...), so the
//! published ImageNet checkpoint loads directly.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, Ctx, ParameterStore, VarStore};

/// `features` layout of VGG-16 up to `relu4_3`: a number is a 3×3 conv to
/// that many channels (followed by a ReLU), `0` is a 2×2 max pool.
const LAYOUT: [usize; 13] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Module {
    Conv(usize),
    Relu,
    MaxPool,
}

fn modules() -> Vec<Module> {
    let mut out = Vec::new();
    for &c in &LAYOUT {
        if c == 0 {
            out.push(Module::MaxPool);
        } else {
            out.push(Module::Conv(c));
            out.push(Module::Relu);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    /// Indices into torchvision's `vgg16().features`; the output of each
    /// listed module is compared.
    pub feature_layer_ids: Vec<usize>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        // relu1_2, relu2_2, relu3_3
        PerceptualConfig {
            feature_layer_ids: vec![3, 8, 15],
        }
    }
}

impl PerceptualConfig {
    pub fn validate(&self) -> Result<()> {
        let n = modules().len();
        if self.feature_layer_ids.is_empty() {
            return Err(Error::Config("perceptual loss needs at least one tap".into()));
        }
        if let Some(bad) = self.feature_layer_ids.iter().find(|&&i| i >= n) {
            return Err(Error::Config(format!(
                "VGG-16 feature layer {bad} is out of range (0..{n} supported)"
            )));
        }
        Ok(())
    }
}

/// Where the feature extractor's weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Pretrained(String),
    /// Seeded random initialisation; the loss is then only a fixed random
    /// feature projection, not a perceptual metric.
    RandomInit {
        seed: u64,
    },
}

#[derive(Debug)]
pub struct Vgg16Features {
    vs: VarStore,
    layers: Vec<(Module, Option<Conv2d>)>,
    taps: Vec<usize>,
    source: WeightSource,
}

impl Vgg16Features {
    /// Randomly initialised extractor (`seed` fixes the weights).
    pub fn random(cfg: &PerceptualConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let vs = VarStore::new(seed, dtype, device);
        let p = vs.root().sub("features");
        let last = *cfg.feature_layer_ids.iter().max().expect("validated non-empty");
        let mut c_in = 3;
        let mut layers = Vec::new();
        for (i, m) in modules().into_iter().take(last + 1).enumerate() {
            let conv = match m {
                Module::Conv(c) => {
                    let conv = Conv2d::kaiming(&p.sub(i), ConvSpec::same(c_in, c, 3))?;
                    c_in = c;
                    Some(conv)
                }
                _ => None,
            };
            layers.push((m, conv));
        }
        let mut taps = cfg.feature_layer_ids.clone();
        taps.sort_unstable();
        taps.dedup();
        Ok(Vgg16Features {
            vs,
            layers,
            taps,
            source: WeightSource::RandomInit { seed },
        })
    }

    /// Loads torchvision VGG-16 weights (`.pth` or `.safetensors`). Keys may
    /// be prefixed `features.` as in the full model state dict.
    pub fn pretrained(cfg: &PerceptualConfig, path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let mut net = Self::random(cfg, 0, dtype, device)?;
        let store = ParameterStore::load(path)?;
        net.vs.load(&store, true)?;
        net.source = WeightSource::Pretrained(path.display().to_string());
        Ok(net)
    }

    /// Pretrained weights when `path` is given and exists; otherwise a
    /// seeded random extractor, with a warning.
    pub fn from_optional_path(
        cfg: &PerceptualConfig,
        path: Option<&Path>,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        match path {
            Some(p) if p.exists() => Self::pretrained(cfg, p, dtype, device),
            other => {
                if let Some(p) = other {
                    log::warn!("VGG-16 weights not found at {}; using random features", p.display());
                } else {
                    log::warn!("no VGG-16 weights configured; perceptual loss uses random features");
                }
                Self::random(cfg, seed, dtype, device)
            }
        }
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    /// Tapped activations for `x` in `[0, 1]`, after ImageNet normalisation.
    /// Weights are always frozen; gradients flow to `x` only.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let ctx = Ctx::eval();
        let mean = Tensor::new(&IMAGENET_MEAN, x.device())?
            .to_dtype(x.dtype())?
            .reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, x.device())?
            .to_dtype(x.dtype())?
            .reshape((1, 3, 1, 1))?;
        let mut y = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let mut out = Vec::with_capacity(self.taps.len());
        for (i, (m, conv)) in self.layers.iter().enumerate() {
            y = match m {
                Module::Conv(_) => conv.as_ref().expect("conv module").forward(&y, ctx)?,
                Module::Relu => y.relu()?,
                Module::MaxPool => {
                    let (_, _, h, w) = y.dims4()?;
                    y.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?.max_pool2d(2)?
                }
            };
            if self.taps.contains(&i) {
                out.push(y.clone());
            }
        }
        Ok(out)
    }
}

/// `(1/N) Σ_j ‖φ_j(pred) − φ_j(gt)‖² / (C_j H_j W_j)`, averaged over the batch.
pub fn perceptual_loss(pred: &Tensor, gt: &Tensor, net: &Vgg16Features) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            gt.dims()
        )));
    }
    let fp = net.features(pred)?;
    let fg = net.features(&gt.detach())?;
    feature_distance(&fp, &fg)
}

/// Mean over taps of the per-element mean squared difference.
pub fn feature_distance(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension("feature lists differ in length".into()));
    }
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        let term = (x - y)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok((total.expect("non-empty") / a.len() as f64)?)
}
