//! Controlled comparisons: the branch/pretraining ablation and the fusion
//! tail study. Every row trains from the same seed, data and step budget and
//! is evaluated on the same held-out pairs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, fingerprint, REPORT_SCHEMA_VERSION};
use crate::arch::{FusionTailVariant, ENCODER_PREFIX};
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::haze::DepthMode;
use crate::nn::ParameterStore;
use crate::train::presets::ablation_data;
use crate::train::{train, DataSource, Preset, Recorder, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Tiny,
    Small,
    Paper,
}

impl Budget {
    pub fn name(self) -> &'static str {
        match self {
            Budget::Tiny => "tiny",
            Budget::Small => "small",
            Budget::Paper => "paper",
        }
    }

    pub fn preset(self) -> Preset {
        match self {
            Budget::Tiny => Preset::AblationTiny,
            Budget::Small => Preset::AblationSmall,
            Budget::Paper => Preset::Nh2021PaperScale,
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Budget::Tiny),
            "small" => Ok(Budget::Small),
            "paper" => Ok(Budget::Paper),
            other => Err(Error::Config(format!("unknown budget `{other}` (tiny, small, paper)"))),
        }
    }
}

/// The five configurations of the branch/pretraining ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationPreset {
    TlNoPretrain,
    TlPretrain,
    Cdf,
    TlCdfNoPretrain,
    Full,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 5] = [
        AblationPreset::TlNoPretrain,
        AblationPreset::TlPretrain,
        AblationPreset::Cdf,
        AblationPreset::TlCdfNoPretrain,
        AblationPreset::Full,
    ];

    pub fn id(self) -> &'static str {
        match self {
            AblationPreset::TlNoPretrain => "TL-no-pretrain",
            AblationPreset::TlPretrain => "TL-pretrain",
            AblationPreset::Cdf => "CDF",
            AblationPreset::TlCdfNoPretrain => "TL+CDF-no-pretrain",
            AblationPreset::Full => "full",
        }
    }

    /// Row label in the published table.
    pub fn method(self) -> &'static str {
        match self {
            AblationPreset::TlNoPretrain | AblationPreset::TlPretrain => "TL",
            AblationPreset::Cdf => "CDF",
            AblationPreset::TlCdfNoPretrain => "TL + CDF",
            AblationPreset::Full => "Ours",
        }
    }

    pub fn pretrained(self) -> bool {
        matches!(self, AblationPreset::TlPretrain | AblationPreset::Full)
    }

    pub fn two_branch(self) -> bool {
        matches!(self, AblationPreset::TlCdfNoPretrain | AblationPreset::Full)
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (tl, cdf) = match self {
            AblationPreset::TlNoPretrain | AblationPreset::TlPretrain => (true, false),
            AblationPreset::Cdf => (false, true),
            AblationPreset::TlCdfNoPretrain | AblationPreset::Full => (true, true),
        };
        TrainConfig {
            enable_tl_branch: tl,
            enable_cdf_branch: cdf,
            use_pretrained_encoder: self.pretrained(),
            ..cfg.clone()
        }
    }
}

impl FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation preset `{s}`")))
    }
}

/// Backbone weights for the pretrained rows.
#[derive(Debug, Clone)]
pub struct EncoderWeights {
    /// Keys without the `tl.encoder.` prefix.
    pub store: ParameterStore,
    pub source: String,
    /// True when the weights are not the published ImageNet backbone.
    pub stand_in: bool,
}

impl EncoderWeights {
    pub fn published(store: ParameterStore, source: impl Into<String>) -> Self {
        EncoderWeights {
            store,
            source: source.into(),
            stand_in: false,
        }
    }

    /// Proxy pretraining when the published backbone is unavailable: a
    /// TL-only network is trained for `steps` on a disjoint synthetic source
    /// (other scenes, linear-ramp haze, different airlight) and its encoder
    /// is kept. This exercises the transfer mechanics; it is not ImageNet.
    pub fn stand_in(base: &TrainConfig, steps: usize) -> Result<Self> {
        let side = match &base.data {
            Some(DataSource::Synthetic(s)) => s.height.max(s.width),
            _ => base.augmentation.crop_size,
        };
        let source = crate::data::SyntheticSpec {
            mode: DepthMode::LinearRamp,
            airlight: 0.75,
            beta: 1.5,
            seed: 0x5EED_0001,
            ..ablation_data(side)
        };
        let cfg = TrainConfig {
            max_steps: steps,
            enable_tl_branch: true,
            enable_cdf_branch: false,
            use_pretrained_encoder: false,
            checkpoint_every: 0,
            val_data: None,
            data: Some(DataSource::Synthetic(source)),
            extra_data: None,
            seed: base.seed ^ 0xA5A5,
            ..base.clone()
        };
        let pairs = cfg.load_training_pairs()?;
        let trainer = train(cfg, None, &pairs, None, &mut Recorder::default())?;
        let store = trainer.model().var_store().snapshot()?.strip_prefix(ENCODER_PREFIX);
        Ok(EncoderWeights {
            store,
            source: format!("stand-in: encoder from {steps} steps of TL-only training on disjoint synthetic data"),
            stand_in: true,
        })
    }
}

/// Shared protocol of a study.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub budget: Budget,
    pub base: TrainConfig,
    pub train: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
    pub encoder: Option<EncoderWeights>,
}

impl StudySetup {
    /// Base config and data of the budget's preset, with `seed` applied.
    pub fn for_budget(budget: Budget, seed: u64) -> Result<Self> {
        let base = TrainConfig {
            seed,
            ..budget.preset().config()
        };
        Self::from_config(budget, base)
    }

    pub fn from_config(budget: Budget, base: TrainConfig) -> Result<Self> {
        let train = base.load_training_pairs()?;
        let test = base
            .val_data
            .as_ref()
            .ok_or_else(|| Error::Config("studies need held-out data (val_data)".into()))?
            .load()?;
        Ok(StudySetup {
            budget,
            base,
            train,
            test,
            encoder: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub label: String,
    pub preset: String,
    /// Published-table pretraining column (`None` where it does not apply).
    pub pretraining: Option<bool>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub num_parameters: usize,
    pub final_train_loss: f64,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub schema_version: u32,
    pub study: String,
    pub budget: Budget,
    pub seed: u64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub encoder_source: Option<String>,
    pub config_fingerprint: String,
    pub rows: Vec<StudyRow>,
    /// Directional comparisons, reported rather than enforced.
    pub trends: Vec<Trend>,
    pub complete: bool,
}

impl StudyTable {
    fn new(study: &str, setup: &StudySetup) -> Result<Self> {
        Ok(StudyTable {
            schema_version: REPORT_SCHEMA_VERSION,
            study: study.into(),
            budget: setup.budget,
            seed: setup.base.seed,
            max_steps: setup.base.max_steps,
            batch_size: setup.base.batch_size,
            crop_size: setup.base.augmentation.crop_size,
            train_pairs: setup.train.len(),
            test_pairs: setup.test.len(),
            encoder_source: setup.encoder.as_ref().map(|e| e.source.clone()),
            config_fingerprint: fingerprint(&setup.base)?,
            rows: Vec::new(),
            trends: Vec::new(),
            complete: false,
        })
    }

    pub fn row(&self, preset: &str) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    pub fn to_text(&self) -> String {
        let with_flag = self.rows.iter().any(|r| r.pretraining.is_some());
        let mut out = format!(
            "{} study — budget {}, seed {}, {} steps, batch {}, crop {}, {} train / {} test pairs\n",
            self.study,
            self.budget,
            self.seed,
            self.max_steps,
            self.batch_size,
            self.crop_size,
            self.train_pairs,
            self.test_pairs
        );
        if let Some(src) = &self.encoder_source {
            out += &format!("encoder weights: {src}\n");
        }
        let head = if with_flag { "Pre-training" } else { "" };
        out += &format!(
            "{:<32} {:>12} {:>10} {:>8} {:>12}\n",
            "Method", head, "PSNR", "SSIM", "Parameters"
        );
        for r in &self.rows {
            let flag = match r.pretraining {
                Some(true) => "✓",
                Some(false) => "-",
                None => "",
            };
            out += &format!(
                "{:<32} {:>12} {:>10.3} {:>8.4} {:>12}\n",
                r.label, flag, r.psnr_db, r.ssim, r.num_parameters
            );
        }
        for t in &self.trends {
            out += &format!(
                "trend: {} — {}\n",
                t.claim,
                if t.holds { "holds" } else { "does not hold" }
            );
        }
        if !self.complete {
            out += "INCOMPLETE: rows above are the finished ones (run in progress, or a configuration failed)\n";
        }
        out
    }
}

fn run_row(
    cfg: TrainConfig,
    setup: &StudySetup,
    label: &str,
    preset: &str,
    pretraining: Option<bool>,
) -> Result<StudyRow> {
    let encoder = if cfg.use_pretrained_encoder {
        Some(
            &setup
                .encoder
                .as_ref()
                .ok_or_else(|| Error::Config(format!("`{preset}` needs encoder weights")))?
                .store,
        )
    } else {
        None
    };
    let start = Instant::now();
    let mut rec = Recorder::default();
    log::info!("training `{preset}` for {} steps", cfg.max_steps);
    let fp = fingerprint(&cfg)?;
    let trainer = train(cfg, encoder, &setup.train, None, &mut rec)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let report = evaluate(trainer.model(), &setup.test, &fp)?;
    log::info!("`{preset}`: {:.3} dB / {:.4}", report.mean_psnr, report.mean_ssim);
    Ok(StudyRow {
        label: label.into(),
        preset: preset.into(),
        pretraining,
        psnr_db: report.mean_psnr,
        ssim: report.mean_ssim,
        num_parameters: trainer.model().count_parameters(),
        final_train_loss: rec.losses.last().map_or(f64::NAN, |r| r.total),
        train_seconds,
    })
}

fn ablation_trends(t: &StudyTable) -> Vec<Trend> {
    let psnr = |p: AblationPreset| t.row(p.id()).map(|r| r.psnr_db);
    let mut out = Vec::new();
    if let (Some(pre), Some(rand)) = (psnr(AblationPreset::TlPretrain), psnr(AblationPreset::TlNoPretrain)) {
        out.push(Trend {
            claim: format!("pretrained TL beats random TL in PSNR ({pre:.3} vs {rand:.3})"),
            holds: pre > rand,
        });
    }
    let (two, one): (Vec<_>, Vec<_>) = AblationPreset::ALL
        .into_iter()
        .filter_map(|p| psnr(p).map(|v| (p, v)))
        .partition(|(p, _)| p.two_branch());
    if !two.is_empty() && !one.is_empty() {
        let worst_two = two.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
        let best_one = one.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        out.push(Trend {
            claim: format!(
                "every two-branch row beats every single-branch row in PSNR ({worst_two:.3} vs {best_one:.3})"
            ),
            holds: worst_two > best_one,
        });
    }
    out
}

/// Trains and evaluates each preset in order. `on_row` sees the table after
/// every finished row (use it to persist partial results); on failure the
/// error is returned after `on_row` has seen the table marked incomplete.
pub fn run_ablation(
    setup: &StudySetup,
    presets: &[AblationPreset],
    on_row: &mut dyn FnMut(&StudyTable) -> Result<()>,
) -> Result<StudyTable> {
    let mut table = StudyTable::new("ablation", setup)?;
    for &p in presets {
        let cfg = p.apply(&setup.base);
        match run_row(cfg, setup, p.method(), p.id(), Some(p.pretrained())) {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                table.trends = ablation_trends(&table);
                on_row(&table)?;
                return Err(e);
            }
        }
        table.trends = ablation_trends(&table);
        on_row(&table)?;
    }
    table.complete = true;
    on_row(&table)?;
    Ok(table)
}

fn tail_label(v: FusionTailVariant) -> &'static str {
    match v {
        FusionTailVariant::ThreeResidualBlocks => "three stacked residual blocks",
        FusionTailVariant::ThreeConvs => "three convolution layers",
        FusionTailVariant::SingleConvTanh => "Ours",
    }
}

/// The full model with each fusion tail; the default tail is always included.
/// Uses the pretrained backbone when `setup.encoder` is present.
pub fn run_fusion_tail_study(
    setup: &StudySetup,
    variants: &[FusionTailVariant],
    on_row: &mut dyn FnMut(&StudyTable) -> Result<()>,
) -> Result<StudyTable> {
    let mut list: Vec<FusionTailVariant> = Vec::new();
    for v in variants.iter().copied().chain([FusionTailVariant::SingleConvTanh]) {
        if !list.contains(&v) {
            list.push(v);
        }
    }
    let mut table = StudyTable::new("fusion_tail", setup)?;
    for v in list {
        let mut cfg = TrainConfig {
            enable_tl_branch: true,
            enable_cdf_branch: true,
            use_pretrained_encoder: setup.encoder.is_some(),
            ..setup.base.clone()
        };
        cfg.model.fusion_tail_variant = v;
        match run_row(cfg, setup, tail_label(v), v.as_str(), None) {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                on_row(&table)?;
                return Err(e);
            }
        }
        on_row(&table)?;
    }
    table.complete = true;
    on_row(&table)?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::tests::{tiny_config, tiny_data};

    fn setup() -> StudySetup {
        let base = TrainConfig {
            max_steps: 1,
            val_data: Some(DataSource::Synthetic(crate::data::SyntheticSpec {
                count: 2,
                seed: 99,
                height: 32,
                width: 32,
                ..tiny_data()
            })),
            ..tiny_config()
        };
        StudySetup::from_config(Budget::Tiny, base).unwrap()
    }

    #[test]
    fn ablation_rows_and_labels() {
        let mut s = setup();
        s.encoder = Some(EncoderWeights::stand_in(&s.base, 1).unwrap());
        let mut seen = 0;
        let t = run_ablation(&s, &AblationPreset::ALL, &mut |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 6);
        let labels: Vec<(&str, Option<bool>)> = t.rows.iter().map(|r| (r.label.as_str(), r.pretraining)).collect();
        assert_eq!(
            labels,
            [
                ("TL", Some(false)),
                ("TL", Some(true)),
                ("CDF", Some(false)),
                ("TL + CDF", Some(false)),
                ("Ours", Some(true))
            ]
        );
        assert!(t.rows.iter().all(|r| r.psnr_db.is_finite() && r.ssim.is_finite()));
        assert!(t.complete && t.trends.len() == 2);
        assert!(t.to_text().contains("TL + CDF"));
    }

    #[test]
    fn failure_keeps_partial_rows() {
        let s = setup(); // no encoder: the pretrained row must fail
        let mut last: Option<StudyTable> = None;
        let err = run_ablation(&s, &AblationPreset::ALL, &mut |t| {
            last = Some(t.clone());
            Ok(())
        });
        assert!(matches!(err, Err(Error::Config(_))));
        let partial = last.unwrap();
        assert_eq!(partial.rows.len(), 1);
        assert!(!partial.complete);
    }

    #[test]
    fn fusion_study_always_has_default_row_and_growing_tails() {
        let s = setup();
        let t = run_fusion_tail_study(
            &s,
            &[FusionTailVariant::ThreeResidualBlocks, FusionTailVariant::ThreeConvs],
            &mut |_| Ok(()),
        )
        .unwrap();
        let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            ["three stacked residual blocks", "three convolution layers", "Ours"]
        );
        let params = |l: &str| t.rows.iter().find(|r| r.label == l).unwrap().num_parameters;
        assert!(params("Ours") < params("three convolution layers"));
        assert!(params("three convolution layers") < params("three stacked residual blocks"));
    }
}
