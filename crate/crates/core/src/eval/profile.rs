//! Parameter count and wall-clock inference time.

use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::arch::TwoBranchNet;
use crate::error::{Error, Result};
use crate::nn::Ctx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub height: usize,
    pub width: usize,
    pub num_parameters: usize,
    pub warmup: usize,
    /// Every timed repeat, in run order.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
}

/// Median of the values (mean of the two middle ones for even counts).
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Times `repeats` inference passes on a random `height × width` input after
/// `warmup` untimed passes.
pub fn profile(
    model: &TwoBranchNet,
    height: usize,
    width: usize,
    warmup: usize,
    repeats: usize,
) -> Result<ProfileReport> {
    if height == 0 || width == 0 || repeats == 0 {
        return Err(Error::Config(format!(
            "profile needs positive dims and repeats, got {height}x{width}, {repeats} repeats"
        )));
    }
    let x = Tensor::rand(0f32, 1.0, (1, 3, height, width), model.device())?.to_dtype(model.dtype())?;
    let run = || -> Result<f64> {
        let start = Instant::now();
        let y = model.forward(&x, Ctx::eval()).map_err(|e| match e {
            Error::Tensor(inner) => Error::Dimension(format!("inference at {height}x{width} failed: {inner}")),
            other => other,
        })?;
        // force completion before stopping the clock
        let _ = y.dims();
        Ok(start.elapsed().as_secs_f64())
    };
    for _ in 0..warmup {
        run()?;
    }
    let seconds = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
    Ok(ProfileReport {
        height,
        width,
        num_parameters: model.count_parameters(),
        warmup,
        median_seconds: median(&seconds),
        seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    proptest! {
        #[test]
        fn median_ignores_order(mut v in prop::collection::vec(0.0f64..10.0, 1..20), seed in any::<u64>()) {
            let m = median(&v);
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(m, median(&v));
        }
    }
}
