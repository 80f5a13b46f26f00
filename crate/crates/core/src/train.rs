//! Training loop with ADADELTA, split evaluation, whole-scan inference, and
//! the loss-ablation harness.
//!
//! Training is deterministic given the config seed under single-threaded
//! execution: model initialization, epoch shuffling, and optimizer state all
//! derive from fixed seeds.

use crate::error::{Error, Result};
use crate::grading::{
    self, GradingReport, DEFAULT_THRESHOLD_WITHOUT_POSTPROCESS, DEFAULT_THRESHOLD_WITH_POSTPROCESS,
};
use crate::labels::{ClassMap, GradeGroup, Rgb};
use crate::loss::{self, ExampleTensors, LossKind, LossWeights};
use crate::metrics::{ClassificationTally, ConfusionAccumulator};
use crate::model::{ModelConfig, SegmentationModel};
use crate::morph::{postprocess_pipeline, MorphologyConfig};
use crate::raster::Raster;
use crate::synth::{DatasetManifest, Split};
use crate::tiling;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::PathBuf;

/// ADADELTA hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1.0,
            decay_rate: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: u32,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub manifest_path: PathBuf,
    pub checkpoint_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Hybrid,
            weights: LossWeights::default(),
            batch_size: 8,
            epochs: 200,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            manifest_path: PathBuf::new(),
            checkpoint_dir: PathBuf::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        let lr = self.optimizer.learning_rate;
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {lr}"
            )));
        }
        let decay = self.optimizer.decay_rate;
        if !decay.is_finite() || decay <= 0.0 || decay >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "decay_rate must lie in (0, 1), got {decay}"
            )));
        }
        if !self.optimizer.epsilon.is_finite() || self.optimizer.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "optimizer epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// ADADELTA state: leaky averages of squared gradients and squared steps.
pub struct AdaDelta {
    avg_sq_grad: Vec<f64>,
    avg_sq_step: Vec<f64>,
    learning_rate: f64,
    decay_rate: f64,
    epsilon: f64,
}

impl AdaDelta {
    pub fn new(num_params: usize, cfg: &OptimizerConfig) -> Self {
        AdaDelta {
            avg_sq_grad: vec![0.0; num_params],
            avg_sq_step: vec![0.0; num_params],
            learning_rate: cfg.learning_rate,
            decay_rate: cfg.decay_rate,
            epsilon: cfg.epsilon,
        }
    }

    /// One update: rescales each gradient by the ratio of step and gradient
    /// running magnitudes, then applies it.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        debug_assert_eq!(params.len(), grads.len());
        let rho = self.decay_rate;
        for i in 0..params.len() {
            let g = f64::from(grads[i]);
            self.avg_sq_grad[i] = rho * self.avg_sq_grad[i] + (1.0 - rho) * g * g;
            let step = -((self.avg_sq_step[i] + self.epsilon).sqrt()
                / (self.avg_sq_grad[i] + self.epsilon).sqrt())
                * g;
            self.avg_sq_step[i] = rho * self.avg_sq_step[i] + (1.0 - rho) * step * step;
            params[i] += (self.learning_rate * step) as f32;
        }
    }
}

/// One loaded training/evaluation example.
pub struct Example {
    pub input: Array3<f32>,
    pub mask: Raster<u8>,
    pub one_hot: Array2<f64>,
}

/// Converts an RGB raster to a channel-first float tensor in `[0, 1]`.
pub fn image_to_chw(image: &Raster<Rgb>) -> Array3<f32> {
    Array3::from_shape_fn((3, image.height(), image.width()), |(c, y, x)| {
        f32::from(image.get(x, y)[c]) / 255.0
    })
}

/// One-hot target rows `(pixels, classes)` from a class-index mask.
pub fn one_hot_targets(mask: &Raster<u8>, num_classes: usize) -> Result<Array2<f64>> {
    let mut t = Array2::zeros((mask.len(), num_classes));
    for (i, &c) in mask.pixels().iter().enumerate() {
        let c = usize::from(c);
        if c >= num_classes {
            return Err(Error::ClassIndexOutOfRange {
                index: c,
                num_classes,
            });
        }
        t[[i, c]] = 1.0;
    }
    Ok(t)
}

/// Reshapes channel-first probabilities to loss-layout rows `(pixels, classes)`.
fn probs_to_rows(probs: &Array3<f32>) -> Array2<f64> {
    let (c, h, w) = probs.dim();
    Array2::from_shape_fn((h * w, c), |(pix, cls)| {
        f64::from(probs[[cls, pix / w, pix % w]])
    })
}

/// Scaled adjoint of [`probs_to_rows`]: gradient rows back to channel-first.
fn rows_to_chw(rows: &Array2<f64>, c: usize, h: usize, w: usize, scale: f64) -> Array3<f32> {
    Array3::from_shape_fn((c, h, w), |(cls, y, x)| {
        (scale * rows[[y * w + x, cls]]) as f32
    })
}

/// Per-pixel argmax over channel-first probabilities; ties pick the lowest
/// class index.
pub fn argmax_mask(probs: &Array3<f32>) -> Raster<u8> {
    let (c, h, w) = probs.dim();
    let mut mask = Raster::filled(w, h, 0u8);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            for cls in 1..c {
                if probs[[cls, y, x]] > probs[[best, y, x]] {
                    best = cls;
                }
            }
            mask.set(x, y, best as u8);
        }
    }
    mask
}

/// Loads one split of a manifest into memory, validating patch shapes
/// against the model geometry.
pub fn load_examples(
    manifest: &DatasetManifest,
    split: Split,
    map: &ClassMap,
    model_cfg: &ModelConfig,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for entry in manifest.split_entries(split) {
        let (image, mask) = manifest.load_pair(entry, map)?;
        if image.width() != model_cfg.patch_size || image.height() != model_cfg.patch_size {
            return Err(Error::ShapeMismatch(format!(
                "{}: patch is {}x{}, model expects {}",
                entry.scan_id,
                image.width(),
                image.height(),
                model_cfg.patch_size
            )));
        }
        let one_hot = one_hot_targets(&mask, model_cfg.num_classes)?;
        out.push(Example {
            input: image_to_chw(&image),
            mask,
            one_hot,
        });
    }
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_mean_dice: Option<f64>,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_val_dice: Option<f64>,
}

fn mean_dice_of(model: &SegmentationModel<f32>, set: &[Example]) -> Result<Option<f64>> {
    let mut acc = ConfusionAccumulator::new(model.config().num_classes)?;
    for ex in set {
        let probs = model.forward_one(&ex.input)?;
        acc.accumulate(&argmax_mask(&probs), &ex.mask)?;
    }
    Ok(acc.mean_dice(false).ok())
}

/// Trains a model per the config and writes `final.ckpt` plus the
/// best-validation `best.ckpt` under the checkpoint directory.
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(&cfg.manifest_path)?;
    let map = ClassMap::default();
    let train_set = load_examples(&manifest, Split::Train, &map, model_cfg)?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split has no patches".into()));
    }
    let val_set = load_examples(&manifest, Split::Val, &map, model_cfg)?;

    let mut model = SegmentationModel::<f32>::new(model_cfg.clone())?;
    let mut optimizer = AdaDelta::new(model.num_params(), &cfg.optimizer);
    fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(|e| Error::io(cfg.checkpoint_dir.display().to_string(), e))?;
    let best_path = cfg.checkpoint_dir.join("best.ckpt");
    let final_path = cfg.checkpoint_dir.join("final.ckpt");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<f64> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = vec![0f32; model.num_params()];
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let ex = &train_set[idx];
                let (probs, tape) = model.forward_traced(&ex.input)?;
                let tensors = ExampleTensors::new(ex.one_hot.clone(), probs_to_rows(&probs))?;
                loss_sum += loss::example_loss(&tensors, &cfg.weights, cfg.loss)?;
                // differentiate through the softmax in one step: the fused
                // form keeps gradients alive on saturated pixels
                let dz = loss::logit_gradient(&tensors, &cfg.weights, cfg.loss)?;
                let (c, h, w) = probs.dim();
                let dlogits = rows_to_chw(&dz, c, h, w, scale);
                let g = model.backward_from_logits(&tape, &dlogits)?;
                for (acc, v) in grads.iter_mut().zip(&g) {
                    *acc += v;
                }
            }
            optimizer.step(model.params_mut(), &grads);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_mean_dice = if val_set.is_empty() {
            None
        } else {
            mean_dice_of(&model, &val_set)?
        };
        if let Some(v) = val_mean_dice {
            if best.is_none_or(|b| v > b) {
                best = Some(v);
                model.save_checkpoint(&best_path)?;
            }
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_mean_dice,
        });
    }
    model.save_checkpoint(&final_path)?;
    if best.is_none() {
        // no validation split: the final model doubles as the best one
        model.save_checkpoint(&best_path)?;
    }
    Ok(TrainOutcome {
        log,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_val_dice: best,
    })
}

/// Per-grade segmentation scores for grades present in the evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub grade: GradeGroup,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub truth_pixels: u64,
}

/// Split-level segmentation evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub split: Split,
    pub patches: usize,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub per_class: Vec<ClassScore>,
}

/// Evaluates a model over one split of a manifest.
pub fn evaluate(
    model: &SegmentationModel<f32>,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<EvaluationReport> {
    let map = ClassMap::default();
    let set = load_examples(manifest, split, &map, model.config())?;
    if set.is_empty() {
        return Err(Error::EmptyInput(format!("split {split} has no patches")));
    }
    let mut acc = ConfusionAccumulator::new(model.config().num_classes)?;
    for ex in &set {
        let probs = model.forward_one(&ex.input)?;
        acc.accumulate(&argmax_mask(&probs), &ex.mask)?;
    }
    let iou = acc.iou_per_class();
    let dice = acc.dice_per_class();
    let per_class = GradeGroup::TUMOR
        .iter()
        .filter_map(|&g| {
            let j = g.index();
            let truth_pixels: u64 = (0..acc.num_classes()).map(|p| acc.count(j, p)).sum();
            (truth_pixels > 0).then(|| ClassScore {
                grade: g,
                iou: iou[j],
                dice: dice[j],
                truth_pixels,
            })
        })
        .collect();
    Ok(EvaluationReport {
        split,
        patches: set.len(),
        mean_iou: acc.mean_iou(false).ok(),
        mean_dice: acc.mean_dice(false).ok(),
        per_class,
    })
}

/// Inference-time options for whole-scan segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub postprocess: bool,
    pub morphology: MorphologyConfig,
    /// Pixel-count threshold for scan grading; defaults by `postprocess`.
    pub presence_threshold: Option<u64>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            postprocess: true,
            morphology: MorphologyConfig::default(),
            presence_threshold: None,
        }
    }
}

/// A segmented and graded scan.
pub struct ScanInference {
    pub mask: Raster<u8>,
    pub report: GradingReport,
}

/// Tiles a scan, segments each patch, optionally cleans the patch masks,
/// stitches the result back to scan size, and grades the scan.
pub fn infer_scan(
    model: &SegmentationModel<f32>,
    scan_id: &str,
    image: &Raster<Rgb>,
    opts: &InferenceOptions,
) -> Result<ScanInference> {
    if image.is_empty() {
        return Err(Error::EmptyInput("scan image has no pixels".into()));
    }
    let plan = tiling::plan_grid(
        image.width() as u32,
        image.height() as u32,
        model.config().patch_size as u32,
    )?;
    let records = tiling::extract_patches(scan_id, image, &plan, tiling::IMAGE_FILL)?;
    let mut masks = Vec::with_capacity(records.len());
    for record in &records {
        let probs = model.forward_one(&image_to_chw(&record.pixels))?;
        let mut mask = argmax_mask(&probs);
        if opts.postprocess {
            mask = postprocess_pipeline(&mask, &opts.morphology)?;
        }
        masks.push(mask);
    }
    let threshold = opts.presence_threshold.unwrap_or(if opts.postprocess {
        DEFAULT_THRESHOLD_WITH_POSTPROCESS
    } else {
        DEFAULT_THRESHOLD_WITHOUT_POSTPROCESS
    });
    let report = grading::grade_scan(scan_id, &masks, threshold)?;
    let mask = tiling::stitch(&masks, &plan)?;
    Ok(ScanInference { mask, report })
}

/// Grades every scan of a split with the model and tallies predictions
/// against the manifest's scan-level ground truth.
pub fn evaluate_scan_grading(
    model: &SegmentationModel<f32>,
    manifest: &DatasetManifest,
    split: Split,
    opts: &InferenceOptions,
) -> Result<(Vec<GradingReport>, ClassificationTally)> {
    let map = ClassMap::default();
    let entries = manifest.split_entries(split);
    if entries.is_empty() {
        return Err(Error::EmptyInput(format!("split {split} has no patches")));
    }
    let mut by_scan: std::collections::BTreeMap<&str, Vec<&crate::synth::ManifestEntry>> =
        std::collections::BTreeMap::new();
    for entry in entries {
        by_scan
            .entry(entry.scan_id.as_str())
            .or_default()
            .push(entry);
    }
    let threshold = opts.presence_threshold.unwrap_or(if opts.postprocess {
        DEFAULT_THRESHOLD_WITH_POSTPROCESS
    } else {
        DEFAULT_THRESHOLD_WITHOUT_POSTPROCESS
    });
    let full_truth = manifest.scan_truth();
    let mut reports = Vec::with_capacity(by_scan.len());
    let mut predicted = std::collections::BTreeMap::new();
    let mut truth = std::collections::BTreeMap::new();
    for (scan_id, scan_entries) in by_scan {
        let mut masks = Vec::with_capacity(scan_entries.len());
        for entry in scan_entries {
            let (image, _) = manifest.load_pair(entry, &map)?;
            let probs = model.forward_one(&image_to_chw(&image))?;
            let mut mask = argmax_mask(&probs);
            if opts.postprocess {
                mask = postprocess_pipeline(&mask, &opts.morphology)?;
            }
            masks.push(mask);
        }
        let report = grading::grade_scan(scan_id, &masks, threshold)?;
        predicted.insert(scan_id.to_string(), report.assigned_grade);
        truth.insert(scan_id.to_string(), full_truth[scan_id]);
        reports.push(report);
    }
    let tally = grading::evaluate_grading(&predicted, &truth)?;
    Ok((reports, tally))
}

/// One ablation row: a loss selector and its evaluation scores.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub loss: LossKind,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub final_train_loss: f64,
}

/// Loss-ablation comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub split: Split,
    pub rows: Vec<AblationRow>,
}

/// Trains one model per loss selector with shared seed and data, then
/// evaluates each best checkpoint on the held-out split.
pub fn run_loss_ablation(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    losses: &[LossKind],
) -> Result<AblationTable> {
    if losses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "ablation needs at least two loss selectors, got {}",
            losses.len()
        )));
    }
    let manifest = DatasetManifest::load(&base.manifest_path)?;
    let split = if manifest.split_entries(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let mut rows = Vec::with_capacity(losses.len());
    for (i, &kind) in losses.iter().enumerate() {
        let cfg = TrainConfig {
            loss: kind,
            checkpoint_dir: base.checkpoint_dir.join(format!("ablation_{i}_{kind}")),
            ..base.clone()
        };
        let outcome = train(model_cfg, &cfg)?;
        let model = SegmentationModel::<f32>::load_checkpoint(&outcome.best_checkpoint)?;
        let report = evaluate(&model, &manifest, split)?;
        rows.push(AblationRow {
            loss: kind,
            mean_iou: report.mean_iou,
            mean_dice: report.mean_dice,
            final_train_loss: outcome.log.last().expect("epochs >= 1").train_loss,
        });
    }
    Ok(AblationTable { split, rows })
}
