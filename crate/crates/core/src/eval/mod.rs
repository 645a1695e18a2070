//! Image-quality metrics, dataset evaluation, study runners and profiling.

pub mod profile;
pub mod study;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::arch::TwoBranchNet;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{ssim, value, SsimConfig};

pub use profile::{median, profile, ProfileReport};
pub use study::{
    run_ablation, run_fusion_tail_study, AblationPreset, Budget, EncoderWeights, StudyRow, StudySetup, StudyTable,
};

/// Reported for identical images, where the exact PSNR is infinite.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `10·log10(1/MSE)` over all pixels and channels of `[0, 1]` images,
/// capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_dims(gt, "PSNR inputs")?;
    let n = pred.data().len() as f64;
    let mse = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Single-scale SSIM with the loss module's kernel and default window
/// (11×11 Gaussian, σ = 1.5), evaluated in f64.
pub fn ssim_metric(pred: &Image, gt: &Image) -> Result<f64> {
    pred.ensure_same_dims(gt, "SSIM inputs")?;
    let dev = Device::Cpu;
    let p = pred.to_tensor(DType::F64, &dev)?;
    let g = gt.to_tensor(DType::F64, &dev)?;
    value(&ssim(&p, &g, &SsimConfig::default())?)
}

/// Anything that maps a hazy image to a dehazed one of the same size.
pub trait Dehazer {
    fn dehaze(&self, hazy: &Image) -> Result<Image>;

    fn num_parameters(&self) -> Option<usize> {
        None
    }
}

impl Dehazer for TwoBranchNet {
    fn dehaze(&self, hazy: &Image) -> Result<Image> {
        TwoBranchNet::dehaze(self, hazy)
    }

    fn num_parameters(&self) -> Option<usize> {
        Some(self.count_parameters())
    }
}

/// Returns its input; the no-op baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Dehazer for Passthrough {
    fn dehaze(&self, hazy: &Image) -> Result<Image> {
        Ok(hazy.clone())
    }

    fn num_parameters(&self) -> Option<usize> {
        Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rows: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub num_parameters: Option<usize>,
    /// Filled by the caller from a separate [`profile`] run.
    pub runtime_seconds_1600x1200: Option<f64>,
    pub config_fingerprint: String,
}

/// Arithmetic mean accumulated in row order.
pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ImageMetrics>, num_parameters: Option<usize>, fingerprint: &str) -> Self {
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mean_psnr: mean(rows.iter().map(|r| r.psnr_db)),
            mean_ssim: mean(rows.iter().map(|r| r.ssim)),
            rows,
            num_parameters,
            runtime_seconds_1600x1200: None,
            config_fingerprint: fingerprint.to_string(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<24} {:>10} {:>8}\n", "id", "PSNR (dB)", "SSIM");
        for r in &self.rows {
            out += &format!("{:<24} {:>10.4} {:>8.4}\n", r.id, r.psnr_db, r.ssim);
        }
        out += &format!("{:<24} {:>10.4} {:>8.4}\n", "mean", self.mean_psnr, self.mean_ssim);
        if let Some(p) = self.num_parameters {
            out += &format!("parameters: {p}\n");
        }
        if let Some(s) = self.runtime_seconds_1600x1200 {
            out += &format!("runtime per 1600x1200 image: {s:.3} s\n");
        }
        out + &format!("config: {}\n", self.config_fingerprint)
    }
}

/// Full-resolution inference on every pair, then per-image and mean metrics.
pub fn evaluate(model: &dyn Dehazer, dataset: &[ImagePair], fingerprint: &str) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let rows = dataset
        .iter()
        .map(|pair| {
            let out = model.dehaze(&pair.hazy)?;
            Ok(ImageMetrics {
                id: pair.id.clone(),
                psnr_db: psnr(&out, &pair.clean)?,
                ssim: ssim_metric(&out, &pair.clean)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows, model.num_parameters(), fingerprint))
}

/// SHA-256 of a value's JSON form, shortened to 16 hex digits.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value)?;
    Ok(format!("{:x}", Sha256::digest(&json))[..16].to_string())
}
