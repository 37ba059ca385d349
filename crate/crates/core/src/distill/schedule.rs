use std::f64::consts::PI;

use crate::distill::TrainConfig;
use crate::error::{Error, Result};

/// Warmup-stable-decay: linear 0 → peak over the warmup, flat until
/// `decay_start_iter`, then linear down to `lr_min_ratio * peak`.
pub fn wsd_lr(step: u64, config: &TrainConfig) -> Result<f64> {
    let total = config.total_iters;
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    let peak = config.lr_peak;
    let (w, d) = (config.warmup_iters, config.decay_start_iter);
    Ok(if step < w {
        peak * step as f64 / w as f64
    } else if step <= d {
        peak
    } else {
        let frac = (step - d) as f64 / (total - d) as f64;
        peak * (1.0 - frac * (1.0 - config.lr_min_ratio))
    })
}

/// Half-cosine from `peak` at step 0 to `min_ratio * peak` at `total`.
pub fn cosine_lr(step: u64, total: u64, peak: f64, min_ratio: f64) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if total == 0 {
        return Ok(peak);
    }
    let c = 0.5 * (1.0 + (PI * step as f64 / total as f64).cos());
    Ok(peak * (min_ratio + (1.0 - min_ratio) * c))
}
