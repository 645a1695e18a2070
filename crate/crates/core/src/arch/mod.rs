//! The two-branch dehazing network.
//!
//! ```text
//!            ┌─ TL: Res2Net encoder → pixel-shuffle decoder (+FA) → enhancer ─┐
//!  image ────┤                                                                 ├─ concat → fusion tail → image
//!            └─ CDF: head conv → RCAB × n → tail conv (+ long skip) ──────────┘
//! ```
//!
//! Parameter keys are rooted at `tl.encoder.*` (published Res2Net naming),
//! `tl.decoder.*`, `tl.enhancer.*`, `cdf.*` and `fusion.*`.

pub mod cdf;
pub mod decoder;
pub mod fusion;
pub mod res2net;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::reflect_pad;
use crate::nn::store::assign;
use crate::nn::{Ctx, ParameterStore, VarStore};

pub use cdf::{CdfBranch, Rcab};
pub use decoder::{ChannelAttention, Decoder, Enhancer, PixelAttention};
pub use fusion::{FusionTail, FusionTailVariant};
pub use res2net::{EncoderFeatures, EncoderVariant, Res2NetEncoder};

/// Spatial factor the transfer-learning branch needs (four ×2 stages).
pub const TL_MULTIPLE: usize = 16;

pub const ENCODER_PREFIX: &str = "tl.encoder.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_variant: EncoderVariant,
    /// Widths of the four decoder stages, coarse to fine; the last one is
    /// also the TL branch's output width.
    pub decoder_channels: Vec<usize>,
    pub cdf_num_blocks: usize,
    pub cdf_channels: usize,
    pub cdf_reduction: usize,
    pub fusion_tail_variant: FusionTailVariant,
    pub tl_branch: bool,
    pub cdf_branch: bool,
    /// Reflect-pad inputs to a multiple of 16 (and crop back) instead of
    /// rejecting them.
    pub pad_to_multiple: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_variant: EncoderVariant::Res2Net101V1b,
            decoder_channels: vec![384, 256, 128, 32],
            cdf_num_blocks: 12,
            cdf_channels: 64,
            cdf_reduction: 16,
            fusion_tail_variant: FusionTailVariant::SingleConvTanh,
            tl_branch: true,
            cdf_branch: true,
            pad_to_multiple: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tl_branch && !self.cdf_branch {
            return Err(Error::Config("at least one branch must be enabled".into()));
        }
        if self.cdf_num_blocks < 1 || self.cdf_channels < 8 || self.cdf_reduction < 1 {
            return Err(Error::Config(format!(
                "invalid CDF settings: {} blocks, {} channels, reduction {}",
                self.cdf_num_blocks, self.cdf_channels, self.cdf_reduction
            )));
        }
        if self.decoder_channels.len() != 4 || self.decoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "decoder_channels must list 4 positive widths, got {:?}",
                self.decoder_channels
            )));
        }
        Ok(())
    }

    /// Channels entering the fusion tail.
    pub fn fusion_in_channels(&self) -> usize {
        let tl = if self.tl_branch { self.decoder_channels[3] } else { 0 };
        let cdf = if self.cdf_branch { self.cdf_channels } else { 0 };
        tl + cdf
    }
}

#[derive(Debug)]
pub struct TransferBranch {
    pub encoder: Res2NetEncoder,
    pub decoder: Decoder,
    pub enhancer: Enhancer,
}

impl TransferBranch {
    fn new(vs: &VarStore, cfg: &ModelConfig) -> Result<Self> {
        let p = vs.root().sub("tl");
        let out = cfg.decoder_channels[3];
        Ok(TransferBranch {
            encoder: Res2NetEncoder::new(&p.sub("encoder"), cfg.encoder_variant)?,
            decoder: Decoder::new(&p.sub("decoder"), &cfg.decoder_channels)?,
            enhancer: Enhancer::new(&p.sub("enhancer"), out, out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let feats = self.encoder.forward(x, ctx)?;
        let y = self.decoder.forward(&feats, ctx)?;
        self.enhancer.forward(&y, ctx)
    }
}

/// Which keys a pretrained-encoder load consumed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// Encoder keys (without the `tl.encoder.` prefix) whose values were replaced.
    pub loaded: Vec<String>,
    /// Keys of the supplied store that the encoder does not use.
    pub skipped: Vec<String>,
    /// Encoder keys absent from the supplied store (only possible when not strict).
    pub missing: Vec<String>,
}

#[derive(Debug)]
pub struct TwoBranchNet {
    config: ModelConfig,
    vs: VarStore,
    tl: Option<TransferBranch>,
    cdf: Option<CdfBranch>,
    fusion: FusionTail,
}

impl TwoBranchNet {
    /// Builds a freshly initialised model; `seed` fully determines the weights.
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vs = VarStore::new(seed, dtype, device);
        let tl = if config.tl_branch {
            Some(TransferBranch::new(&vs, config)?)
        } else {
            None
        };
        let cdf = if config.cdf_branch {
            Some(CdfBranch::new(
                &vs.root().sub("cdf"),
                config.cdf_channels,
                config.cdf_num_blocks,
                config.cdf_reduction,
            )?)
        } else {
            None
        };
        let fusion = FusionTail::new(
            &vs.root().sub("fusion"),
            config.fusion_in_channels(),
            config.fusion_tail_variant,
        )?;
        Ok(TwoBranchNet {
            config: config.clone(),
            vs,
            tl,
            cdf,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn dtype(&self) -> DType {
        self.vs.dtype()
    }

    pub fn device(&self) -> &Device {
        self.vs.device()
    }

    pub fn transfer_branch(&self) -> Option<&TransferBranch> {
        self.tl.as_ref()
    }

    pub fn cdf_branch(&self) -> Option<&CdfBranch> {
        self.cdf.as_ref()
    }

    /// Exact number of learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.vs.num_parameters()
    }

    pub fn count_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.vs.num_parameters_with_prefix(prefix)
    }

    /// TL branch on an input whose dims are already multiples of 16.
    pub fn transfer_branch_forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.tl
            .as_ref()
            .ok_or_else(|| Error::Config("transfer-learning branch is disabled".into()))?
            .forward(x, ctx)
    }

    pub fn cdf_branch_forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.cdf
            .as_ref()
            .ok_or_else(|| Error::Config("current-data-fitting branch is disabled".into()))?
            .forward(x, ctx)
    }

    /// Fuses the enabled branches' features; pass `None` for a disabled branch.
    pub fn fusion_tail_forward(&self, tl: Option<&Tensor>, cdf: Option<&Tensor>, ctx: Ctx) -> Result<Tensor> {
        if tl.is_some() != self.tl.is_some() || cdf.is_some() != self.cdf.is_some() {
            return Err(Error::Config("fusion inputs must match the enabled branches".into()));
        }
        let feats: Vec<&Tensor> = tl.into_iter().chain(cdf).collect();
        self.fusion.forward(&feats, ctx)
    }

    /// Full network on `(N, 3, H, W)`; output has the input's spatial dims.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("expected (N, 3, H, W), got {:?}", x.dims())));
        }
        let (ph, pw) = (h.next_multiple_of(TL_MULTIPLE), w.next_multiple_of(TL_MULTIPLE));
        let padded = if self.tl.is_some() && (ph, pw) != (h, w) {
            if !self.config.pad_to_multiple {
                return Err(Error::Dimension(format!(
                    "input {h}x{w} is not divisible by {TL_MULTIPLE} and padding is disabled"
                )));
            }
            reflect_pad(x, 0, ph - h, 0, pw - w)?
        } else {
            x.clone()
        };
        let tl = match &self.tl {
            Some(b) => Some(b.forward(&padded, ctx)?),
            None => None,
        };
        let cdf = match &self.cdf {
            Some(b) => Some(b.forward(&padded, ctx)?),
            None => None,
        };
        let y = self.fusion_tail_forward(tl.as_ref(), cdf.as_ref(), ctx)?;
        if y.dims()[2..] == [h, w] {
            Ok(y)
        } else {
            Ok(y.narrow(2, 0, h)?.narrow(3, 0, w)?)
        }
    }

    /// Inference on a single image, in evaluation mode.
    pub fn dehaze(&self, image: &Image) -> Result<Image> {
        let x = image.to_tensor(self.dtype(), self.device())?;
        Image::from_tensor(&self.forward(&x, Ctx::eval())?)
    }

    /// Replaces encoder weights with those in `store`, keyed by the published
    /// Res2Net names (an optional `tl.encoder.` prefix is also accepted).
    /// Nothing is modified unless every shape matches and, with `strict`,
    /// every encoder key is present.
    pub fn load_pretrained_encoder(&self, store: &ParameterStore, strict: bool) -> Result<LoadReport> {
        if self.tl.is_none() {
            return Err(Error::Config("no encoder: transfer-learning branch is disabled".into()));
        }
        let lookup = |key: &str| store.get(key).or_else(|| store.get(&format!("{ENCODER_PREFIX}{key}")));
        let mut report = LoadReport::default();
        let mut pending = Vec::new();
        let vars = self.vs.trainable_with_prefix(ENCODER_PREFIX).into_iter().chain(
            self.vs
                .buffers()
                .into_iter()
                .filter(|(k, _)| k.starts_with(ENCODER_PREFIX)),
        );
        for (full, var) in vars {
            let key = full[ENCODER_PREFIX.len()..].to_string();
            match lookup(&key) {
                Some(t) if t.dims() != var.dims() => {
                    return Err(Error::ShapeMismatch {
                        key,
                        expected: var.dims().to_vec(),
                        found: t.dims().to_vec(),
                    })
                }
                Some(t) => pending.push((key, var, t.clone())),
                None if strict => {
                    return Err(Error::Load {
                        key,
                        reason: "missing from pretrained store".into(),
                    })
                }
                None => report.missing.push(key),
            }
        }
        for (key, var, t) in pending {
            assign(&key, &var, &t)?;
            report.loaded.push(key);
        }
        report.loaded.sort();
        let used: std::collections::HashSet<&str> = report.loaded.iter().map(String::as_str).collect();
        report.skipped = store
            .keys()
            .filter(|k| !used.contains(k.strip_prefix(ENCODER_PREFIX).unwrap_or(k)))
            .cloned()
            .collect();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: FusionTailVariant) -> ModelConfig {
        ModelConfig {
            encoder_variant: EncoderVariant::Res2Net50V1b,
            decoder_channels: vec![32, 16, 16, 8],
            cdf_num_blocks: 2,
            cdf_channels: 16,
            cdf_reduction: 4,
            fusion_tail_variant: variant,
            ..ModelConfig::default()
        }
    }

    fn model(cfg: &ModelConfig) -> TwoBranchNet {
        TwoBranchNet::new(cfg, 3, DType::F32, &Device::Cpu).unwrap()
    }

    fn input(h: usize, w: usize, seed: u64) -> Tensor {
        let v: Vec<f32> = (0..3 * h * w)
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f32) / 1000.0)
            .collect();
        Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn transfer_branch_shapes() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let x = input(64, 64, 0);
        let y = m.transfer_branch_forward(&x, Ctx::eval()).unwrap();
        assert_eq!(y.dims(), &[1, 8, 64, 64]);
        let feats = m.transfer_branch().unwrap().encoder.forward(&x, Ctx::eval()).unwrap();
        assert_eq!(feats.stages[2].dims(), &[1, 1024, 4, 4]);
        assert_eq!(feats.stem.dims(), &[1, 64, 32, 32]);
        assert!(matches!(
            m.transfer_branch_forward(&input(48, 40, 0), Ctx::eval()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn padding_policy() {
        let cfg = small(FusionTailVariant::SingleConvTanh);
        let m = model(&cfg);
        let y = m.forward(&input(50, 37, 1), Ctx::eval()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 50, 37]);
        let strict = model(&ModelConfig {
            pad_to_multiple: false,
            ..cfg
        });
        assert!(matches!(
            strict.forward(&input(50, 50, 1), Ctx::eval()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn cdf_keeps_full_resolution() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let cdf = m.cdf_branch().unwrap();
        for (h, w) in [(100, 100), (8, 8), (9, 13)] {
            let (y, trace) = cdf.forward_traced(&input(h, w, 2), Ctx::eval()).unwrap();
            assert_eq!(y.dims(), &[1, 16, h, w]);
            assert_eq!(trace.len(), 2 + 2 + 1);
            assert!(trace.iter().all(|(_, d)| d[2..] == [h, w]));
        }
        assert!(matches!(
            cdf.forward(&input(7, 8, 0), Ctx::eval()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rcab_identities() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let block = &m.cdf_branch().unwrap().blocks()[0];
        let x = Tensor::randn(0f32, 1.0, (1, 16, 9, 9), &Device::Cpu).unwrap();
        let y = block.forward(&x, Ctx::eval()).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert_ne!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        // gate forced shut: a huge negative bias saturates the sigmoid at exactly 0
        let vs = m.var_store();
        let b = vs.get("cdf.body.0.ca.2.bias").unwrap();
        b.set(&(b.ones_like().unwrap() * -1e4).unwrap()).unwrap();
        let y = block.forward(&x, Ctx::eval()).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        assert!(matches!(
            block.forward(
                &Tensor::zeros((1, 8, 9, 9), DType::F32, &Device::Cpu).unwrap(),
                Ctx::eval()
            ),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fusion_rejects_misaligned_features() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let a = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 16, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            m.fusion_tail_forward(Some(&a), Some(&b), Ctx::eval()),
            Err(Error::Dimension(_))
        ));
        let b = Tensor::zeros((1, 16, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = m.fusion_tail_forward(Some(&a), Some(&b), Ctx::eval()).unwrap();
        assert_eq!(y.dims(), &[1, 3, 16, 16]);
    }

    #[test]
    fn output_range_and_sensitivity() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let x = input(32, 32, 5);
        let y = m
            .forward(&x, Ctx::eval())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let mut v = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        v[100] += 0.05;
        let x2 = Tensor::from_vec(v, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let y2 = m
            .forward(&x2, Ctx::eval())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_ne!(y, y2);
    }

    #[test]
    fn variant_names_agree_between_serde_and_display() {
        for v in [EncoderVariant::Res2Net50V1b, EncoderVariant::Res2Net101V1b] {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{v}\""));
            assert_eq!(v.to_string().parse::<EncoderVariant>().unwrap(), v);
        }
        for v in FusionTailVariant::ALL {
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
    }

    #[test]
    fn fusion_variants_grow_in_size() {
        let counts: Vec<usize> = FusionTailVariant::ALL
            .iter()
            .map(|v| model(&small(*v)).count_parameters_with_prefix("fusion."))
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }

    #[test]
    fn single_branch_models_shrink_the_fusion_input() {
        let tl_only = model(&ModelConfig {
            cdf_branch: false,
            ..small(FusionTailVariant::SingleConvTanh)
        });
        assert_eq!(tl_only.count_parameters_with_prefix("cdf."), 0);
        assert_eq!(
            tl_only.var_store().get("fusion.out.weight").unwrap().dims(),
            &[3, 8, 7, 7]
        );
        let cdf_only = model(&ModelConfig {
            tl_branch: false,
            ..small(FusionTailVariant::SingleConvTanh)
        });
        assert_eq!(cdf_only.count_parameters_with_prefix("tl."), 0);
        // no TL branch, so no divisibility constraint and no padding
        assert_eq!(
            cdf_only.forward(&input(10, 11, 0), Ctx::eval()).unwrap().dims(),
            &[1, 3, 10, 11]
        );
        assert!(ModelConfig {
            tl_branch: false,
            cdf_branch: false,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn published_key_layout() {
        let m = model(&ModelConfig {
            encoder_variant: EncoderVariant::Res2Net101V1b,
            ..small(FusionTailVariant::SingleConvTanh)
        });
        let vs = m.var_store();
        for key in [
            "tl.encoder.conv1.0.weight",
            "tl.encoder.conv1.6.weight",
            "tl.encoder.bn1.running_var",
            "tl.encoder.layer1.0.downsample.1.weight",
            "tl.encoder.layer2.0.downsample.2.bias",
            "tl.encoder.layer3.22.convs.2.weight",
            "tl.encoder.layer3.22.bns.2.running_mean",
        ] {
            assert!(vs.get(key).is_some(), "missing {key}");
        }
        assert_eq!(
            vs.get("tl.encoder.layer3.0.convs.0.weight").unwrap().dims(),
            &[104, 104, 3, 3]
        );
        assert!(vs.get("tl.encoder.layer1.1.downsample.1.weight").is_none());
    }

    fn encoder_store(m: &TwoBranchNet, scale: f32) -> ParameterStore {
        m.var_store()
            .snapshot()
            .unwrap()
            .strip_prefix(ENCODER_PREFIX)
            .iter()
            .map(|(k, t)| (k.clone(), (t * scale as f64).unwrap()))
            .collect()
    }

    #[test]
    fn pretrained_loading() {
        let m = model(&small(FusionTailVariant::SingleConvTanh));
        let count = m.count_parameters();
        let mut store = encoder_store(&m, 0.5);
        store.insert(
            "fc.weight".into(),
            Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap(),
        );
        let decoder_before = m
            .var_store()
            .get("tl.decoder.0.up.weight")
            .unwrap()
            .as_tensor()
            .copy()
            .unwrap();

        let report = m.load_pretrained_encoder(&store, true).unwrap();
        assert_eq!(report.skipped, vec!["fc.weight".to_string()]);
        assert!(report.missing.is_empty());
        assert_eq!(m.count_parameters(), count);
        let once = m.var_store().snapshot().unwrap().checksum().unwrap();
        m.load_pretrained_encoder(&store, true).unwrap();
        assert_eq!(m.var_store().snapshot().unwrap().checksum().unwrap(), once);
        let decoder_after = m.var_store().get("tl.decoder.0.up.weight").unwrap();
        assert_eq!(
            decoder_before.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            decoder_after.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        // one truncated array fails strictly, naming the key, and writes nothing
        let mut bad = store.clone();
        bad.insert(
            "layer2.1.conv3.weight".into(),
            Tensor::zeros((3, 3), DType::F32, &Device::Cpu).unwrap(),
        );
        bad.insert(
            "conv1.0.weight".into(),
            Tensor::zeros((32, 3, 3, 3), DType::F32, &Device::Cpu).unwrap(),
        );
        match m.load_pretrained_encoder(&bad, true) {
            Err(Error::ShapeMismatch { key, .. }) => assert_eq!(key, "layer2.1.conv3.weight"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        assert_eq!(m.var_store().snapshot().unwrap().checksum().unwrap(), once);

        let decoder_only: ParameterStore = m
            .var_store()
            .snapshot()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with("tl.decoder."))
            .map(|(k, t)| (k.clone(), t.clone()))
            .collect();
        assert!(matches!(
            m.load_pretrained_encoder(&decoder_only, true),
            Err(Error::Load { .. })
        ));
        let report = m.load_pretrained_encoder(&decoder_only, false).unwrap();
        assert!(report.loaded.is_empty());
        assert_eq!(report.skipped.len(), decoder_only.len());
    }
}
