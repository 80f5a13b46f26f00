//! The segmentation network: a dilated residual encoder, a multi-scale
//! context block, and an additive-skip decoder, built from scratch on
//! hand-written tensor ops so training and inference are fully deterministic.

pub mod ops;
pub mod schedule;

mod net;

pub use net::{ParamEntry, SegmentationModel, Tape};
pub use schedule::{dilation_schedule, DilationSchedule};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network hyperparameters.
///
/// Stage `i` of the encoder runs a residual block into `stage_widths[i]`
/// channels, then `blocks_per_stage` dilated convolutions whose factors
/// follow the schedule for base rate `base_dilations[i]`, then a 2x
/// downsample. The context block pools the encoder output at each of
/// `hd_scales`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub patch_size: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: u32,
    pub base_dilations: Vec<u32>,
    pub hd_scales: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            num_classes: 6,
            patch_size: 350,
            stage_widths: vec![32, 64, 128, 256],
            blocks_per_stage: 3,
            base_dilations: vec![1, 2, 3, 4],
            hd_scales: vec![1, 2, 3, 6],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Total spatial downsampling across the encoder.
    pub fn downsample_factor(&self) -> usize {
        1 << self.stages()
    }

    /// Input size after padding up to a multiple of the downsample factor.
    pub fn padded_patch_size(&self) -> usize {
        let f = self.downsample_factor();
        self.patch_size.div_ceil(f) * f
    }

    /// Spatial resolution of the encoder output feeding the context block.
    pub fn encoder_resolution(&self) -> usize {
        self.padded_patch_size() / self.downsample_factor()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.patch_size == 0 {
            return fail("patch_size must be positive".into());
        }
        if self.stages() < 2 {
            return fail(format!(
                "need at least 2 encoder stages, got {}",
                self.stages()
            ));
        }
        if self.base_dilations.len() != self.stages() {
            return fail(format!(
                "base_dilations has {} entries for {} stages",
                self.base_dilations.len(),
                self.stages()
            ));
        }
        if self.stage_widths.contains(&0) {
            return fail("stage widths must be positive".into());
        }
        if self.base_dilations.contains(&0) {
            return fail("base dilations must be positive".into());
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be positive".into());
        }
        if self.padded_patch_size() - self.patch_size >= self.patch_size {
            return fail(format!(
                "patch_size {} is too small for {} downsampling stages",
                self.patch_size,
                self.stages()
            ));
        }
        if self.hd_scales.is_empty() {
            return fail("hd_scales must not be empty".into());
        }
        let res = self.encoder_resolution();
        if let Some(&bad) = self.hd_scales.iter().find(|&&s| s == 0 || s > res) {
            return fail(format!(
                "hd_scale {bad} does not fit the {res}x{res} encoder output"
            ));
        }
        let top = *self.stage_widths.last().expect("validated nonempty");
        if !top.is_multiple_of(self.hd_scales.len()) {
            return fail(format!(
                "last stage width {top} is not divisible by {} context scales",
                self.hd_scales.len()
            ));
        }
        Ok(())
    }
}

/// Largest prefix of the preferred pyramid scales that fits an encoder
/// output of the given resolution and keeps the per-branch channel budget
/// integral (used to derive configs for small patches).
pub fn fit_hd_scales(
    preferred: &[usize],
    encoder_resolution: usize,
    top_width: usize,
) -> Vec<usize> {
    let mut scales: Vec<usize> = preferred
        .iter()
        .map(|&s| s.min(encoder_resolution).max(1))
        .collect();
    scales.dedup();
    while scales.len() > 1 && !top_width.is_multiple_of(scales.len()) {
        scales.pop();
    }
    scales
}
