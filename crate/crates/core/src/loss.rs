//! Per-example segmentation losses and their hybrid combination.
//!
//! An example is one patch: the class-indexed sums run over all pixels and
//! all classes of that patch, flattened into rows of an `(elements, classes)`
//! matrix. Batch reduction is the mean over examples.
//!
//! All three losses are differentiable with respect to the predictions;
//! [`loss_gradient`] returns the analytic gradient, which the test suite
//! checks against central finite differences.

use crate::error::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Weights and stabilizers for the loss family.
///
/// `alpha1..3` weight the cross-entropy, Dice, and focal Tversky terms of the
/// hybrid loss; `beta1`/`beta2` are the Tversky false-positive/false-negative
/// penalties; `gamma` is the focusing parameter (the focal exponent is
/// `1/gamma`); `epsilon` stabilizes denominators and the log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    /// Equal-weight hybrid; beta 0.5/0.5 makes Tversky reduce to Dice;
    /// gamma 4/3 follows the focal Tversky literature.
    fn default() -> Self {
        LossWeights {
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta1: 0.5,
            beta2: 0.5,
            gamma: 4.0 / 3.0,
            epsilon: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.alpha1 + self.alpha2 + self.alpha3 <= 0.0 {
            return Err(Error::InvalidConfig(
                "alpha1+alpha2+alpha3 must be positive".into(),
            ));
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Which loss to compute or differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Dice,
    FocalTversky,
    Hybrid,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::Dice,
        LossKind::FocalTversky,
        LossKind::Hybrid,
    ];

    /// Short label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "L_c",
            LossKind::Dice => "L_d",
            LossKind::FocalTversky => "L_ft",
            LossKind::Hybrid => "L_h",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross_entropy" | "ce" | "l_c" | "lc" => Ok(LossKind::CrossEntropy),
            "dice" | "l_d" | "ld" => Ok(LossKind::Dice),
            "focal_tversky" | "ft" | "l_ft" | "lft" => Ok(LossKind::FocalTversky),
            "hybrid" | "l_h" | "lh" => Ok(LossKind::Hybrid),
            other => Err(Error::UnknownLossSelector(other.to_string())),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Dice => "dice",
            LossKind::FocalTversky => "focal_tversky",
            LossKind::Hybrid => "hybrid",
        };
        f.write_str(s)
    }
}

/// True one-hot labels and predicted probabilities for one example,
/// shaped `(elements, classes)`.
///
/// Rows of `t` are expected to be one-hot and rows of `p` to lie on the
/// probability simplex; that is the caller's contract and is not enforced,
/// so that finite-difference perturbations remain representable.
#[derive(Debug, Clone)]
pub struct ExampleTensors {
    t: Array2<f64>,
    p: Array2<f64>,
}

impl ExampleTensors {
    pub fn new(t: Array2<f64>, p: Array2<f64>) -> Result<Self> {
        if t.dim() != p.dim() {
            return Err(Error::ShapeMismatch(format!(
                "labels {:?} vs predictions {:?}",
                t.dim(),
                p.dim()
            )));
        }
        Ok(ExampleTensors { t, p })
    }

    pub fn labels(&self) -> &Array2<f64> {
        &self.t
    }

    pub fn predictions(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn predictions_mut(&mut self) -> &mut Array2<f64> {
        &mut self.p
    }
}

/// Categorical cross entropy: `-sum(t * log(clip(p, eps, 1)))`.
pub fn cross_entropy_loss(ex: &ExampleTensors, w: &LossWeights) -> f64 {
    let mut acc = 0.0;
    for (&t, &p) in ex.t.iter().zip(ex.p.iter()) {
        if t != 0.0 {
            acc -= t * p.clamp(w.epsilon, 1.0).ln();
        }
    }
    acc
}

/// Dice loss: `1 - (2*sum(t*p) + eps) / (sum(t^2) + sum(p^2) + eps)`.
pub fn dice_loss(ex: &ExampleTensors, w: &LossWeights) -> f64 {
    let mut tp = 0.0;
    let mut tt = 0.0;
    let mut pp = 0.0;
    for (&t, &p) in ex.t.iter().zip(ex.p.iter()) {
        tp += t * p;
        tt += t * t;
        pp += p * p;
    }
    1.0 - (2.0 * tp + w.epsilon) / (tt + pp + w.epsilon)
}

/// Tversky index numerator/denominator sums for one example.
fn tversky_sums(ex: &ExampleTensors, w: &LossWeights) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for (&t, &p) in ex.t.iter().zip(ex.p.iter()) {
        let tp = t * p;
        num += tp;
        den += tp + w.beta1 * (1.0 - t) * p + w.beta2 * t * (1.0 - p);
    }
    (num, den)
}

/// Focal Tversky loss: `(1 - TI)^(1/gamma)` with
/// `TI = (sum(t*p) + eps) / (sum(t*p + b1*t'*p + b2*t*p') + eps)`.
pub fn focal_tversky_loss(ex: &ExampleTensors, w: &LossWeights) -> Result<f64> {
    if w.gamma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {}",
            w.gamma
        )));
    }
    let (num, den) = tversky_sums(ex, w);
    let ti = (num + w.epsilon) / (den + w.epsilon);
    Ok((1.0 - ti).max(0.0).powf(1.0 / w.gamma))
}

/// Per-example hybrid objective `a1*L_c + a2*L_d + a3*L_ft`.
pub fn hybrid_example_loss(ex: &ExampleTensors, w: &LossWeights) -> Result<f64> {
    Ok(w.alpha1 * cross_entropy_loss(ex, w)
        + w.alpha2 * dice_loss(ex, w)
        + w.alpha3 * focal_tversky_loss(ex, w)?)
}

/// Batch hybrid loss: mean over examples of the weighted three-term sum.
pub fn hybrid_loss(batch: &[ExampleTensors], w: &LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput(
            "hybrid_loss requires a nonempty batch".into(),
        ));
    }
    let mut acc = 0.0;
    for ex in batch {
        acc += hybrid_example_loss(ex, w)?;
    }
    Ok(acc / batch.len() as f64)
}

/// Per-example value of a selected loss.
pub fn example_loss(ex: &ExampleTensors, w: &LossWeights, which: LossKind) -> Result<f64> {
    match which {
        LossKind::CrossEntropy => Ok(cross_entropy_loss(ex, w)),
        LossKind::Dice => Ok(dice_loss(ex, w)),
        LossKind::FocalTversky => focal_tversky_loss(ex, w),
        LossKind::Hybrid => hybrid_example_loss(ex, w),
    }
}

fn cross_entropy_grad(ex: &ExampleTensors, w: &LossWeights) -> Array2<f64> {
    let mut g = Array2::zeros(ex.p.dim());
    for ((gt, &t), &p) in g.iter_mut().zip(ex.t.iter()).zip(ex.p.iter()) {
        // log(clip(p, eps, 1)) is flat below eps and above 1
        if t != 0.0 && p > w.epsilon && p <= 1.0 {
            *gt = -t / p;
        }
    }
    g
}

fn dice_grad(ex: &ExampleTensors, w: &LossWeights) -> Array2<f64> {
    let mut tp = 0.0;
    let mut tt = 0.0;
    let mut pp = 0.0;
    for (&t, &p) in ex.t.iter().zip(ex.p.iter()) {
        tp += t * p;
        tt += t * t;
        pp += p * p;
    }
    let num = 2.0 * tp + w.epsilon;
    let den = tt + pp + w.epsilon;
    let mut g = Array2::zeros(ex.p.dim());
    for ((gt, &t), &p) in g.iter_mut().zip(ex.t.iter()).zip(ex.p.iter()) {
        *gt = -(2.0 * t * den - num * 2.0 * p) / (den * den);
    }
    g
}

fn focal_tversky_grad(ex: &ExampleTensors, w: &LossWeights) -> Array2<f64> {
    let (num, den) = tversky_sums(ex, w);
    let nume = num + w.epsilon;
    let dene = den + w.epsilon;
    let ti = nume / dene;
    let inv_gamma = 1.0 / w.gamma;
    // d/dTI of (1-TI)^(1/gamma); gamma > 1 makes the true derivative
    // unbounded as TI -> 1, so the base is floored, capping the focal
    // amplification once the overlap sits within 1e-3 of perfect — an
    // almost-mastered class otherwise keeps receiving an arbitrarily
    // large coherent pull on every pixel, which destabilizes the tail
    // of training instead of refining it
    let outer = -inv_gamma * (1.0 - ti).max(1e-3).powf(inv_gamma - 1.0);
    let mut g = Array2::zeros(ex.p.dim());
    for ((gt, &t), &p) in g.iter_mut().zip(ex.t.iter()).zip(ex.p.iter()) {
        let _ = p;
        let dden = t + w.beta1 * (1.0 - t) - w.beta2 * t;
        let dti = (t * dene - nume * dden) / (dene * dene);
        *gt = outer * dti;
    }
    g
}

/// Analytic gradient of the selected loss with respect to the predictions.
///
/// For `Hybrid` this is the per-example gradient
/// `a1*grad(L_c) + a2*grad(L_d) + a3*grad(L_ft)`; batch averaging is the
/// caller's reduction.
pub fn loss_gradient(ex: &ExampleTensors, w: &LossWeights, which: LossKind) -> Result<Array2<f64>> {
    match which {
        LossKind::CrossEntropy => Ok(cross_entropy_grad(ex, w)),
        LossKind::Dice => Ok(dice_grad(ex, w)),
        LossKind::FocalTversky => {
            if w.gamma <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "gamma must be positive, got {}",
                    w.gamma
                )));
            }
            Ok(focal_tversky_grad(ex, w))
        }
        LossKind::Hybrid => {
            let mut g = cross_entropy_grad(ex, w);
            g.mapv_inplace(|v| v * w.alpha1);
            g.scaled_add(w.alpha2, &dice_grad(ex, w));
            g.scaled_add(w.alpha3, &focal_tversky_grad(ex, w));
            Ok(g)
        }
    }
}

/// Pulls a prediction-space gradient back through a per-row softmax whose
/// output was `p`: `dz = p * (dp - <dp, p>)` row by row.
fn softmax_pullback(dp: &Array2<f64>, p: &Array2<f64>) -> Array2<f64> {
    let (rows, classes) = p.dim();
    let mut dz = Array2::zeros((rows, classes));
    for r in 0..rows {
        let mut dot = 0.0;
        for c in 0..classes {
            dot += dp[[r, c]] * p[[r, c]];
        }
        for c in 0..classes {
            dz[[r, c]] = p[[r, c]] * (dp[[r, c]] - dot);
        }
    }
    dz
}

/// Cross entropy composed with softmax, differentiated in closed form:
/// `dz = sum(t_row) * p - t`, which stays finite and full-strength even
/// where the softmax output has rounded all the way to 0 or 1.
fn cross_entropy_logit_grad(ex: &ExampleTensors) -> Array2<f64> {
    let (rows, classes) = ex.p.dim();
    let mut dz = Array2::zeros((rows, classes));
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..classes {
            s += ex.t[[r, c]];
        }
        for c in 0..classes {
            dz[[r, c]] = s * ex.p[[r, c]] - ex.t[[r, c]];
        }
    }
    dz
}

/// Analytic gradient of the selected loss applied to `softmax(logits)`,
/// taken with respect to the logits; `ex.predictions()` must hold the
/// softmax output itself.
///
/// The cross-entropy term uses its algebraically reduced form instead of
/// chaining [`loss_gradient`] through the softmax Jacobian: the two agree
/// wherever the probabilities are representable, but the reduced form keeps
/// a unit-scale gradient on confidently misclassified pixels whose true
/// class has underflowed to an exact floating-point zero, where the chained
/// product would vanish and training would stall.
pub fn logit_gradient(
    ex: &ExampleTensors,
    w: &LossWeights,
    which: LossKind,
) -> Result<Array2<f64>> {
    match which {
        LossKind::CrossEntropy => Ok(cross_entropy_logit_grad(ex)),
        LossKind::Dice => Ok(softmax_pullback(&dice_grad(ex, w), &ex.p)),
        LossKind::FocalTversky => {
            if w.gamma <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "gamma must be positive, got {}",
                    w.gamma
                )));
            }
            Ok(softmax_pullback(&focal_tversky_grad(ex, w), &ex.p))
        }
        LossKind::Hybrid => {
            let mut dz = cross_entropy_logit_grad(ex);
            dz.mapv_inplace(|v| v * w.alpha1);
            let mut dp = dice_grad(ex, w);
            dp.mapv_inplace(|v| v * w.alpha2);
            dp.scaled_add(w.alpha3, &focal_tversky_grad(ex, w));
            dz += &softmax_pullback(&dp, &ex.p);
            Ok(dz)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ex(t: Array2<f64>, p: Array2<f64>) -> ExampleTensors {
        ExampleTensors::new(t, p).unwrap()
    }

    fn w() -> LossWeights {
        LossWeights::default()
    }

    /// Random soft example: rows of `p` on the simplex, entries kept away
    /// from 0/1 so finite differences stay inside the clip region.
    pub(crate) fn random_soft_example(
        rng: &mut ChaCha8Rng,
        elements: usize,
        classes: usize,
    ) -> ExampleTensors {
        let mut t = Array2::zeros((elements, classes));
        let mut p = Array2::zeros((elements, classes));
        for i in 0..elements {
            let true_cls = rng.random_range(0..classes);
            t[[i, true_cls]] = 1.0;
            let mut row: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in &mut row {
                *v /= sum;
            }
            for (j, v) in row.into_iter().enumerate() {
                p[[i, j]] = v;
            }
        }
        ex(t, p)
    }

    pub(crate) fn random_binary_example(
        rng: &mut ChaCha8Rng,
        elements: usize,
        classes: usize,
    ) -> ExampleTensors {
        let mut t = Array2::zeros((elements, classes));
        let mut p = Array2::zeros((elements, classes));
        for i in 0..elements {
            t[[i, rng.random_range(0..classes)]] = 1.0;
            p[[i, rng.random_range(0..classes)]] = 1.0;
        }
        ex(t, p)
    }

    #[test]
    fn cross_entropy_examples() {
        let e = ex(array![[1.0, 0.0]], array![[1.0, 0.0]]);
        assert_abs_diff_eq!(cross_entropy_loss(&e, &w()), 0.0, epsilon = 1e-12);

        let e = ex(array![[1.0, 0.0]], array![[0.5, 0.5]]);
        assert_abs_diff_eq!(
            cross_entropy_loss(&e, &w()),
            std::f64::consts::LN_2,
            epsilon = 1e-6
        );

        let e = ex(array![[0.0, 1.0]], array![[0.25, 0.75]]);
        assert_abs_diff_eq!(cross_entropy_loss(&e, &w()), 0.287682, epsilon = 1e-6);
    }

    #[test]
    fn dice_examples() {
        let e = ex(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
        );
        assert!(dice_loss(&e, &w()).abs() <= 1e-6);

        let e = ex(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        assert!(dice_loss(&e, &w()) > 0.999);

        let e = ex(array![[1.0, 0.0]], array![[0.5, 0.5]]);
        assert_abs_diff_eq!(dice_loss(&e, &w()), 1.0 / 3.0, epsilon = 1e-5);
    }

    #[test]
    fn focal_tversky_examples() {
        let mut weights = w();
        weights.beta1 = 0.5;
        weights.beta2 = 0.5;
        weights.gamma = 1.0;

        let e = ex(
            array![[1.0, 0.0], [0.0, 1.0]],
            array![[1.0, 0.0], [0.0, 1.0]],
        );
        assert!(focal_tversky_loss(&e, &weights).unwrap().abs() <= 1e-6);

        let e = ex(array![[1.0, 0.0]], array![[0.5, 0.5]]);
        assert_abs_diff_eq!(
            focal_tversky_loss(&e, &weights).unwrap(),
            0.5,
            epsilon = 1e-5
        );

        weights.gamma = -1.0;
        assert!(focal_tversky_loss(&e, &weights).is_err());
    }

    #[test]
    fn focal_tversky_equals_dice_on_binary_masks() {
        let mut weights = w();
        weights.beta1 = 0.5;
        weights.beta2 = 0.5;
        weights.gamma = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let e = random_binary_example(&mut rng, 64 * 64, 6);
            let d = dice_loss(&e, &weights);
            let ft = focal_tversky_loss(&e, &weights).unwrap();
            assert!((d - ft).abs() < 1e-9, "dice {d} vs ft {ft}");
        }
    }

    #[test]
    fn focal_exponent_monotonicity_in_gamma() {
        // fixed TI in (0,1): larger gamma shrinks the exponent 1/gamma and
        // pushes (1-TI)^(1/gamma) toward 1
        for &ti in &[0.2, 0.5, 0.8] {
            let base: f64 = 1.0 - ti;
            let mut prev = base.powf(1.0 / 0.5);
            for &gamma in &[1.0, 4.0 / 3.0, 2.0, 4.0] {
                let cur = base.powf(1.0 / gamma);
                assert!(cur > prev, "gamma {gamma} ti {ti}");
                prev = cur;
            }
        }
    }

    #[test]
    fn hybrid_weight_selection_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<_> = (0..3)
            .map(|_| random_soft_example(&mut rng, 16, 4))
            .collect();

        let mut ce_only = w();
        ce_only.alpha1 = 1.0;
        ce_only.alpha2 = 0.0;
        ce_only.alpha3 = 0.0;
        let got = hybrid_loss(&batch, &ce_only).unwrap();
        let want: f64 = batch
            .iter()
            .map(|e| cross_entropy_loss(e, &ce_only))
            .sum::<f64>()
            / batch.len() as f64;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);

        let weights = w();
        let got = hybrid_loss(&batch, &weights).unwrap();
        let want: f64 = batch
            .iter()
            .map(|e| {
                cross_entropy_loss(e, &weights)
                    + dice_loss(e, &weights)
                    + focal_tversky_loss(e, &weights).unwrap()
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn hybrid_loss_rejects_empty_batch() {
        assert!(hybrid_loss(&[], &w()).is_err());
    }

    #[test]
    fn hybrid_linearity_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_soft_example(&mut rng, 32, 6);
        let mut weights = w();
        weights.alpha1 = 0.3;
        weights.alpha2 = 1.7;
        weights.alpha3 = 0.9;
        let combined = hybrid_example_loss(&e, &weights).unwrap();
        let manual = weights.alpha1 * cross_entropy_loss(&e, &weights)
            + weights.alpha2 * dice_loss(&e, &weights)
            + weights.alpha3 * focal_tversky_loss(&e, &weights).unwrap();
        assert!((combined - manual).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_grad_at_perfect_prediction() {
        let e = ex(array![[1.0, 0.0]], array![[1.0, 0.0]]);
        let g = loss_gradient(&e, &w(), LossKind::CrossEntropy).unwrap();
        assert_abs_diff_eq!(g[[0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_selector_parsing() {
        assert_eq!("L_h".parse::<LossKind>().unwrap(), LossKind::Hybrid);
        assert_eq!(
            "cross_entropy".parse::<LossKind>().unwrap(),
            LossKind::CrossEntropy
        );
        assert_eq!("dice".parse::<LossKind>().unwrap(), LossKind::Dice);
        assert_eq!("L_ft".parse::<LossKind>().unwrap(), LossKind::FocalTversky);
        assert!(matches!(
            "bogus".parse::<LossKind>(),
            Err(Error::UnknownLossSelector(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let t = Array2::zeros((4, 3));
        let p = Array2::zeros((4, 2));
        assert!(ExampleTensors::new(t, p).is_err());
    }

    /// Central finite differences of a selected loss with respect to `p`.
    pub(crate) fn fd_gradient(
        ex0: &ExampleTensors,
        weights: &LossWeights,
        which: LossKind,
        step: f64,
    ) -> Array2<f64> {
        let mut work = ex0.clone();
        let dim = ex0.predictions().dim();
        let mut g = Array2::zeros(dim);
        for i in 0..dim.0 {
            for j in 0..dim.1 {
                let orig = work.predictions()[[i, j]];
                work.predictions_mut()[[i, j]] = orig + step;
                let plus = example_loss(&work, weights, which).unwrap();
                work.predictions_mut()[[i, j]] = orig - step;
                let minus = example_loss(&work, weights, which).unwrap();
                work.predictions_mut()[[i, j]] = orig;
                g[[i, j]] = (plus - minus) / (2.0 * step);
            }
        }
        g
    }

    pub(crate) fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let na = a.mapv(|v| v * v).sum().sqrt();
        let nb = b.mapv(|v| v * v).sum().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for which in LossKind::ALL {
            for _ in 0..4 {
                let e = random_soft_example(&mut rng, 8 * 8, 2);
                let analytic = loss_gradient(&e, &w(), which).unwrap();
                let numeric = fd_gradient(&e, &w(), which, 1e-5);
                let rel = relative_error(&analytic, &numeric);
                assert!(rel < 1e-4, "{which}: relative error {rel}");
            }
        }
    }

    /// Row-wise softmax used to tie the logit-space tests to the
    /// probability-space API.
    fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
        let (rows, classes) = z.dim();
        let mut p = z.clone();
        for r in 0..rows {
            let max = (0..classes)
                .map(|c| p[[r, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (p[[r, c]] - max).exp();
                p[[r, c]] = e;
                sum += e;
            }
            for c in 0..classes {
                p[[r, c]] /= sum;
            }
        }
        p
    }

    #[test]
    fn logit_gradient_matches_finite_differences_through_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for which in LossKind::ALL {
            let (rows, classes) = (24, 6);
            let mut t = Array2::zeros((rows, classes));
            let mut z = Array2::zeros((rows, classes));
            for r in 0..rows {
                t[[r, rng.random_range(0..classes)]] = 1.0;
                for c in 0..classes {
                    z[[r, c]] = rng.random_range(-2.0..2.0);
                }
            }
            let analytic = logit_gradient(&ex(t.clone(), softmax_rows(&z)), &w(), which).unwrap();

            let step = 1e-5;
            let mut numeric = Array2::zeros(z.dim());
            for r in 0..rows {
                for c in 0..classes {
                    let orig = z[[r, c]];
                    z[[r, c]] = orig + step;
                    let plus = example_loss(&ex(t.clone(), softmax_rows(&z)), &w(), which).unwrap();
                    z[[r, c]] = orig - step;
                    let minus =
                        example_loss(&ex(t.clone(), softmax_rows(&z)), &w(), which).unwrap();
                    z[[r, c]] = orig;
                    numeric[[r, c]] = (plus - minus) / (2.0 * step);
                }
            }
            let rel = relative_error(&analytic, &numeric);
            assert!(rel < 1e-4, "{which}: relative error {rel}");
        }
    }

    #[test]
    fn logit_gradient_survives_saturated_softmax_output() {
        // The true class has rounded to an exact zero, as a low-precision
        // softmax produces once the logit gap grows wide enough. Chaining
        // the probability-space gradient through the softmax Jacobian
        // vanishes there; the reduced form keeps a unit-scale pull.
        let e = ex(array![[1.0, 0.0]], array![[0.0, 1.0]]);
        let chained = softmax_pullback(
            &loss_gradient(&e, &w(), LossKind::CrossEntropy).unwrap(),
            e.predictions(),
        );
        assert_eq!(chained, Array2::<f64>::zeros((1, 2)));

        let fused = logit_gradient(&e, &w(), LossKind::CrossEntropy).unwrap();
        assert_abs_diff_eq!(fused[[0, 0]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fused[[0, 1]], 1.0, epsilon = 1e-12);

        let hybrid = logit_gradient(&e, &w(), LossKind::Hybrid).unwrap();
        assert_abs_diff_eq!(hybrid[[0, 0]], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn hybrid_gradient_is_linear_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e = random_soft_example(&mut rng, 16, 6);
        let mut weights = w();
        weights.alpha1 = 0.25;
        weights.alpha2 = 2.0;
        weights.alpha3 = 0.75;
        let gh = loss_gradient(&e, &weights, LossKind::Hybrid).unwrap();
        let gc = loss_gradient(&e, &weights, LossKind::CrossEntropy).unwrap();
        let gd = loss_gradient(&e, &weights, LossKind::Dice).unwrap();
        let gf = loss_gradient(&e, &weights, LossKind::FocalTversky).unwrap();
        let manual = &(&gc * weights.alpha1) + &(&gd * weights.alpha2) + &(&gf * weights.alpha3);
        let max_diff = gh
            .iter()
            .zip(manual.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "max diff {max_diff}");
    }

    #[test]
    fn losses_are_nonnegative_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let e = random_soft_example(&mut rng, 25, 6);
            let weights = w();
            assert!(cross_entropy_loss(&e, &weights) >= 0.0);
            let d = dice_loss(&e, &weights);
            assert!((0.0..=1.0 + 1e-9).contains(&d));
            let ft = focal_tversky_loss(&e, &weights).unwrap();
            assert!((0.0..=1.0 + 1e-9).contains(&ft));
        }
    }
}
