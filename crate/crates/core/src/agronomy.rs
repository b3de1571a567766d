//! Ear-level kernel estimates from side images and the yield component
//! method (bushels per acre from stand count and kernels per ear).

use serde::{Deserialize, Serialize};

use crate::dataio::round2;
use crate::error::{Error, Result};

pub const DEFAULT_SIDE_MULTIPLIER: f64 = 2.10;
pub const DEFAULT_KERNELS_PER_BUSHEL: f64 = 90_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarCountConfig {
    /// Whole-ear kernels per kernel visible on one side.
    pub side_multiplier: f64,
}

impl Default for EarCountConfig {
    fn default() -> Self {
        Self {
            side_multiplier: DEFAULT_SIDE_MULTIPLIER,
        }
    }
}

impl EarCountConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.side_multiplier > 0.0 && self.side_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "ear.side_multiplier must be positive, got {}",
                self.side_multiplier
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YieldInput {
    /// Plants (ears) per acre.
    pub stand_count: f64,
    pub avg_kernels_per_ear: f64,
    pub kernels_per_bushel: f64,
}

impl YieldInput {
    pub fn new(stand_count: f64, avg_kernels_per_ear: f64) -> Self {
        Self {
            stand_count,
            avg_kernels_per_ear,
            kernels_per_bushel: DEFAULT_KERNELS_PER_BUSHEL,
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::arg(format!("{name} must be a non-negative count, got {v}")));
    }
    Ok(())
}

pub fn ear_estimate_single_side(raw_side_count: f64, config: &EarCountConfig) -> Result<f64> {
    non_negative("side count", raw_side_count)?;
    config.validate()?;
    Ok(raw_side_count * config.side_multiplier)
}

pub fn ear_estimate_both_sides(front_raw: f64, back_raw: f64) -> Result<f64> {
    non_negative("front count", front_raw)?;
    non_negative("back count", back_raw)?;
    Ok(front_raw + back_raw)
}

/// Invert a single-side ear estimate back to the raw side count.
pub fn raw_from_estimate(estimate: f64, config: &EarCountConfig) -> Result<f64> {
    non_negative("ear estimate", estimate)?;
    config.validate()?;
    Ok(estimate / config.side_multiplier)
}

/// Bushels per acre, rounded half-up to two decimals.
pub fn estimate_yield(input: &YieldInput) -> Result<f64> {
    for (name, v) in [
        ("stand_count", input.stand_count),
        ("avg_kernels_per_ear", input.avg_kernels_per_ear),
        ("kernels_per_bushel", input.kernels_per_bushel),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::arg(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(round2(input.stand_count * input.avg_kernels_per_ear / input.kernels_per_bushel))
}
