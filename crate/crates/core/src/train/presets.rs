//! Named training recipes.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::{DataSource, TrainConfig};
use crate::data::{AugmentationConfig, DatasetSpec, Split, SplitRule, SyntheticSpec};
use crate::error::{Error, Result};
use crate::haze::DepthMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two synthetic 128×128 pairs, full-image crops, batch 1, up to 2000 steps:
    /// the trainability check.
    OverfitSanity,
    /// 20 synthetic 96×96 radial-haze pairs (plus 5 held out), 64×64 crops,
    /// batch 1, 300 steps per run.
    AblationTiny,
    /// The same data, batch 2, 1000 steps per run.
    AblationSmall,
    /// NH-HAZE 2021 (first 20 official pairs), 256×256 crops, pretrained
    /// backbone. Requires the challenge data and a long runtime; not for CI.
    Nh2021PaperScale,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::OverfitSanity,
        Preset::AblationTiny,
        Preset::AblationSmall,
        Preset::Nh2021PaperScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OverfitSanity => "overfit-sanity",
            Preset::AblationTiny => "ablation-tiny",
            Preset::AblationSmall => "ablation-small",
            Preset::Nh2021PaperScale => "nh2021-paper-scale",
        }
    }

    pub fn config(self) -> TrainConfig {
        match self {
            Preset::OverfitSanity => TrainConfig {
                max_steps: 2000,
                seed: 7,
                batch_size: 1,
                checkpoint_every: 500,
                augmentation: AugmentationConfig {
                    crop_size: 128,
                    ..AugmentationConfig::default()
                },
                data: Some(DataSource::Synthetic(SyntheticSpec {
                    count: 2,
                    height: 128,
                    width: 128,
                    beta: 1.0,
                    airlight: 0.9,
                    mode: DepthMode::Radial,
                    seed: 2021,
                })),
                ..TrainConfig::default()
            },
            Preset::AblationTiny => ablation(300, 64, 1),
            Preset::AblationSmall => ablation(1000, 64, 2),
            Preset::Nh2021PaperScale => TrainConfig {
                max_steps: 100_000,
                batch_size: 4,
                checkpoint_every: 5000,
                val_every: 5000,
                use_pretrained_encoder: true,
                pretrained_encoder_path: Some(PathBuf::from("weights/res2net101d.pth")),
                vgg_weights_path: Some(PathBuf::from("weights/vgg16.pth")),
                augmentation: AugmentationConfig::default(),
                data: Some(DataSource::Directory(nh2021(Split::Train))),
                val_data: Some(DataSource::Directory(nh2021(Split::Test))),
                ..TrainConfig::default()
            },
        }
    }
}

/// Synthetic radial-haze source shared by the ablation budgets.
pub fn ablation_data(side: usize) -> SyntheticSpec {
    SyntheticSpec {
        count: 20,
        height: side,
        width: side,
        beta: 1.0,
        airlight: 0.9,
        mode: DepthMode::Radial,
        seed: 2021,
    }
}

fn ablation(steps: usize, crop: usize, batch_size: usize) -> TrainConfig {
    let side = 96;
    TrainConfig {
        max_steps: steps,
        batch_size,
        augmentation: AugmentationConfig {
            crop_size: crop,
            ..AugmentationConfig::default()
        },
        data: Some(DataSource::Synthetic(ablation_data(side))),
        // five held-out pairs from a disjoint seed
        val_data: Some(DataSource::Synthetic(SyntheticSpec {
            count: 5,
            seed: 2022,
            ..ablation_data(side)
        })),
        ..TrainConfig::default()
    }
}

fn nh2021(split: Split) -> DatasetSpec {
    DatasetSpec::new("data/NH-HAZE-2021", split, SplitRule::First20Last5).with_suffixes("_hazy", "_GT")
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::Config(format!("unknown preset `{s}` (available: {})", names.join(", ")))
        })
    }
}
