//! Dilation factor schedules for the atrous convolution blocks.
//!
//! Stacking convolutions with one constant dilation factor samples the input
//! on a sparse grid and skips pixels (the gridding effect); a cascade of
//! increasing factors centered on a base rate avoids it.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dilation factors for one block of stacked atrous convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationSchedule {
    base: u32,
    factors: Vec<u32>,
}

/// Builds the length-`n` schedule centered on base rate `r`:
/// `factors[i] = max(1, round(r - n/2 + i))` with ties rounded away from
/// zero.
pub fn dilation_schedule(r: u32, n: u32) -> Result<DilationSchedule> {
    if r < 1 {
        return Err(Error::InvalidArgument(format!(
            "base dilation must be >= 1, got {r}"
        )));
    }
    if n < 1 {
        return Err(Error::InvalidArgument(format!(
            "block size must be >= 1, got {n}"
        )));
    }
    let factors = (0..n)
        .map(|i| {
            let raw = (f64::from(r) - f64::from(n) / 2.0 + f64::from(i)).round();
            (raw as i64).max(1) as u32
        })
        .collect();
    Ok(DilationSchedule { base: r, factors })
}

impl DilationSchedule {
    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn factors(&self) -> &[u32] {
        &self.factors
    }

    /// Effective spatial extent `k + (k-1)(d-1)` of a `k`-tap kernel at each
    /// factor: the span a single dilated convolution covers.
    pub fn effective_extents(&self, kernel: u32) -> Vec<u32> {
        self.factors
            .iter()
            .map(|&d| kernel + (kernel - 1) * (d - 1))
            .collect()
    }
}
