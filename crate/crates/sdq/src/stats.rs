//! Standard-deviation estimates feeding the quantizer thresholds.
//!
//! Weights are treated as zero-mean, so their σ is a plain RMS recomputed
//! from the current weights at every use. Activation σ is estimated from the
//! strictly positive entries (the distribution is assumed symmetric, so the
//! positive half mirrored around zero determines the spread) and smoothed
//! with a slow exponential running average.

use thiserror::Error;

use crate::tensor::Tensor;

/// Effective-σ floor applied by quantizers so a dead tensor (σ = 0) cannot
/// produce a zero-width threshold.
pub const SIGMA_FLOOR: f64 = 1e-8;

pub const DEFAULT_SIGMA_MOMENTUM: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sigma of an empty tensor is undefined")]
    EmptyTensor,
    #[error("sigma observation must be >= 0, got {0}")]
    NegativeSigma(f64),
}

/// RMS of all entries (zero-mean assumption).
pub fn weight_sigma(w: &Tensor) -> Result<f64, StatsError> {
    if w.numel() == 0 {
        return Err(StatsError::EmptyTensor);
    }
    let sum2: f64 = w.data().iter().map(|&v| v * v).sum();
    Ok((sum2 / w.numel() as f64).sqrt())
}

/// RMS over the strictly positive entries; zero when there are none.
///
/// Mirroring the positive half `{p} ∪ {-p}` gives a zero-mean set whose
/// standard deviation equals this RMS. Exact zeros are excluded: the input
/// here is the raw pre-quantizer tensor, where zeros carry no information
/// about the spread.
pub fn activation_sigma(x: &Tensor) -> f64 {
    let mut sum2 = 0.0;
    let mut count = 0usize;
    for &v in x.data() {
        if v > 0.0 {
            sum2 += v * v;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum2 / count as f64).sqrt()
    }
}

/// One step of the exponential running average:
/// `sigma_hat <- (1 - momentum)*sigma_hat + momentum*sigma_t`.
pub fn update_running_sigma(
    sigma_hat: f64,
    sigma_t: f64,
    momentum: f64,
) -> Result<f64, StatsError> {
    if sigma_t < 0.0 {
        return Err(StatsError::NegativeSigma(sigma_t));
    }
    Ok((1.0 - momentum) * sigma_hat + momentum * sigma_t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    Weights,
    Activations,
}

/// Running σ estimate for one quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaTracker {
    pub sigma_hat: f64,
    pub momentum: f64,
    pub mode: SigmaMode,
    /// False until the first observation; the first σ_t is adopted directly
    /// instead of being averaged against the meaningless initial zero.
    pub initialized: bool,
}

impl SigmaTracker {
    pub fn new(mode: SigmaMode) -> SigmaTracker {
        SigmaTracker {
            sigma_hat: 0.0,
            momentum: DEFAULT_SIGMA_MOMENTUM,
            mode,
            initialized: false,
        }
    }

    /// Feeds one batch estimate into the running average.
    pub fn observe(&mut self, sigma_t: f64) -> Result<f64, StatsError> {
        if sigma_t < 0.0 {
            return Err(StatsError::NegativeSigma(sigma_t));
        }
        if self.initialized {
            self.sigma_hat = update_running_sigma(self.sigma_hat, sigma_t, self.momentum)?;
        } else {
            self.sigma_hat = sigma_t;
            self.initialized = true;
        }
        Ok(self.sigma_hat)
    }
}
