//! Multi-task detection loss: log-loss classification, smooth-L1 box
//! regression gated by the anchor label, per-pixel binary cross-entropy
//! for masks, their sum, and a central-difference gradient checker.
//!
//! Every loss takes probabilities (not logits) and returns its analytic
//! gradient alongside the value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clamp.
pub const DEFAULT_EPS: f64 = 1e-12;
/// Central-difference step.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Denominator floor of the relative gradient error.
pub const REL_ERR_FLOOR: f64 = 1e-8;
/// Gradient agreement required by the verification suite.
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite loss or gradient at coordinate {coordinate:?}")]
    NonFiniteLoss { coordinate: Option<usize> },
    #[error("negative loss component {0}")]
    NegativeComponent(f64),
}

/// `-ln(q)` with `q = p` for label 1 and `1 - p` for label 0, `q` clamped to
/// `[eps, 1 - eps]`. Returns `(value, d/dp)`.
pub fn cls_log_loss(p: f64, label: bool, eps: f64) -> (f64, f64) {
    let q = if label { p } else { 1.0 - p };
    let clamped = q.clamp(eps, 1.0 - eps);
    let value = -clamped.ln();
    // the clamp is flat outside its interval
    let dq = if q > eps && q < 1.0 - eps { -1.0 / q } else { 0.0 };
    let grad = if label { dq } else { -dq };
    (value, grad)
}

/// `0.5·d²` for `|d| < 1`, else `|d| − 0.5`. Returns `(value, d/dd)`.
pub fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Anchor mini-batch for the classification + regression loss.
///
/// Delta entries of anchors with label 0 are carried but never contribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsRegBatch {
    /// Predicted object probability per anchor.
    pub probs: Vec<f64>,
    /// Ground-truth class per anchor.
    pub labels: Vec<bool>,
    pub pred_deltas: Vec<[f64; 4]>,
    pub target_deltas: Vec<[f64; 4]>,
    /// Mini-batch size normalizer.
    pub n_cls: usize,
    /// Anchor-location normalizer.
    pub n_reg: usize,
    pub lambda: f64,
}

impl ClsRegBatch {
    pub fn validate(&self) -> Result<(), LossError> {
        let k = self.probs.len();
        if self.labels.len() != k || self.pred_deltas.len() != k || self.target_deltas.len() != k {
            return Err(LossError::InvalidBatch(format!(
                "lengths differ: {k} probs, {} labels, {} predicted and {} target deltas",
                self.labels.len(),
                self.pred_deltas.len(),
                self.target_deltas.len()
            )));
        }
        if self.n_cls == 0 || self.n_reg == 0 {
            return Err(LossError::InvalidBatch("N_cls and N_reg must be >= 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(LossError::InvalidBatch(format!("lambda {} must be positive", self.lambda)));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LossError::InvalidBatch(format!("probability {p} outside [0, 1]")));
        }
        let finite = self
            .pred_deltas
            .iter()
            .chain(&self.target_deltas)
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err(LossError::InvalidBatch("non-finite box delta".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsRegOutput {
    /// `e_cls + e_reg`
    pub value: f64,
    /// Classification term, averaged over `n_cls`.
    pub e_cls: f64,
    /// Regression term, including the `λ / n_reg` factor.
    pub e_reg: f64,
    pub d_probs: Vec<f64>,
    pub d_pred_deltas: Vec<[f64; 4]>,
}

/// `(1/N_cls) Σ_k L_cls(p_k, y_k) + λ (1/N_reg) Σ_k y_k Σ_i smoothL1(b_ki − b*_ki)`
pub fn cls_reg_loss(batch: &ClsRegBatch, eps: f64) -> Result<ClsRegOutput, LossError> {
    batch.validate()?;
    let inv_cls = 1.0 / batch.n_cls as f64;
    let reg_scale = batch.lambda / batch.n_reg as f64;

    let mut cls_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut d_probs = Vec::with_capacity(batch.probs.len());
    let mut d_pred_deltas = Vec::with_capacity(batch.probs.len());
    for k in 0..batch.probs.len() {
        let (v, g) = cls_log_loss(batch.probs[k], batch.labels[k], eps);
        cls_sum += v;
        d_probs.push(g * inv_cls);

        let mut grad = [0.0; 4];
        if batch.labels[k] {
            let (pred, target) = (&batch.pred_deltas[k], &batch.target_deltas[k]);
            for (slot, (p, t)) in grad.iter_mut().zip(pred.iter().zip(target)) {
                let (v, g) = smooth_l1(p - t);
                reg_sum += v;
                *slot = g * reg_scale;
            }
        }
        d_pred_deltas.push(grad);
    }
    let e_cls = cls_sum * inv_cls;
    let e_reg = reg_sum * reg_scale;
    Ok(ClsRegOutput {
        value: e_cls + e_reg,
        e_cls,
        e_reg,
        d_probs,
        d_pred_deltas,
    })
}

/// Predicted mask probabilities and binary ground truth on an `H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
    pub targets: Vec<bool>,
}

impl MaskPair {
    pub fn new(
        width: usize,
        height: usize,
        probs: Vec<f64>,
        targets: Vec<bool>,
    ) -> Result<Self, LossError> {
        let n = width * height;
        if n == 0 || probs.len() != n || targets.len() != n {
            return Err(LossError::InvalidBatch(format!(
                "{width}x{height} mask with {} probabilities and {} targets",
                probs.len(),
                targets.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(LossError::InvalidBatch(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            probs,
            targets,
        })
    }

    /// Same probability everywhere.
    pub fn uniform(width: usize, height: usize, p: f64, target: bool) -> Result<Self, LossError> {
        let n = width * height;
        Self::new(width, height, vec![p; n], vec![target; n])
    }
}

/// Mean per-pixel binary cross-entropy,
/// `-(1/(W·H)) Σ [y ln p + (1 − y) ln(1 − p)]`, with its gradient grid.
pub fn mask_bce_loss(pair: &MaskPair, eps: f64) -> (f64, Vec<f64>) {
    let inv_n = 1.0 / (pair.width * pair.height) as f64;
    let mut sum = 0.0;
    let grad = pair
        .probs
        .iter()
        .zip(&pair.targets)
        .map(|(&p, &y)| {
            let (v, g) = cls_log_loss(p, y, eps);
            sum += v;
            g * inv_n
        })
        .collect();
    (sum * inv_n, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub e_cls: f64,
    pub e_reg: f64,
    pub e_mask: f64,
    pub total: f64,
}

pub fn total_loss(e_cls: f64, e_reg: f64, e_mask: f64) -> Result<LossBreakdown, LossError> {
    for c in [e_cls, e_reg, e_mask] {
        if !c.is_finite() {
            return Err(LossError::NonFiniteLoss { coordinate: None });
        }
        if c < 0.0 {
            return Err(LossError::NegativeComponent(c));
        }
    }
    Ok(LossBreakdown {
        e_cls,
        e_reg,
        e_mask,
        total: e_cls + e_reg + e_mask,
    })
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of `f` at `x` against central differences
/// with step `h` and returns the largest relative error over coordinates.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> Result<f64, LossError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(x);
    if !value.is_finite() {
        return Err(LossError::NonFiniteLoss { coordinate: None });
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let a = analytic[i];
        probe[i] = x[i] + h;
        let plus = f(&probe).0;
        probe[i] = x[i] - h;
        let minus = f(&probe).0;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * h);
        if !a.is_finite() || !numeric.is_finite() {
            return Err(LossError::NonFiniteLoss { coordinate: Some(i) });
        }
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// One row of the gradient verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

// keep evaluation points this far (in units of h) from kinks and clamps
const KINK_MARGIN: f64 = 10.0;

fn smooth_difference<R: Rng>(rng: &mut R, h: f64) -> f64 {
    loop {
        let d: f64 = rng.random_range(-3.0..3.0);
        if (d.abs() - 1.0).abs() >= KINK_MARGIN * h {
            return d;
        }
    }
}

fn probability<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(0.05..0.95)
}

/// Random anchor batch whose regression residuals avoid `|d| = 1`.
pub fn random_cls_reg_batch<R: Rng>(rng: &mut R, h: f64) -> ClsRegBatch {
    let k = rng.random_range(1..=8);
    let labels: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
    let probs = (0..k).map(|_| probability(rng)).collect();
    let target_deltas: Vec<[f64; 4]> = (0..k)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let pred_deltas = target_deltas
        .iter()
        .map(|t| std::array::from_fn(|i| t[i] + smooth_difference(rng, h)))
        .collect();
    ClsRegBatch {
        probs,
        labels,
        pred_deltas,
        target_deltas,
        n_cls: k,
        n_reg: rng.random_range(1..=k),
        lambda: rng.random_range(0.1..4.0),
    }
}

fn check_cls_reg(batch: &ClsRegBatch, h: f64) -> Result<f64, LossError> {
    let k = batch.probs.len();
    let mut x: Vec<f64> = batch.probs.clone();
    x.extend(batch.pred_deltas.iter().flatten());
    let eval = |x: &[f64]| {
        let mut b = batch.clone();
        b.probs.copy_from_slice(&x[..k]);
        for (j, d) in b.pred_deltas.iter_mut().enumerate() {
            d.copy_from_slice(&x[k + 4 * j..k + 4 * j + 4]);
        }
        let out = cls_reg_loss(&b, DEFAULT_EPS).expect("perturbed batch stays valid");
        let mut grad = out.d_probs;
        grad.extend(out.d_pred_deltas.iter().flatten());
        (out.value, grad)
    };
    grad_check(eval, &x, h)
}

fn check_mask(pair: &MaskPair, h: f64) -> Result<f64, LossError> {
    let eval = |x: &[f64]| {
        let p = MaskPair {
            probs: x.to_vec(),
            ..pair.clone()
        };
        mask_bce_loss(&p, DEFAULT_EPS)
    };
    grad_check(eval, &pair.probs, h)
}

/// Runs `trials` random central-difference checks of each loss and reports
/// the worst relative error per operation.
pub fn run_gradient_suite(trials: usize, seed: u64, h: f64) -> Result<Vec<GradCheckReport>, LossError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4];

    for _ in 0..trials {
        let d = smooth_difference(&mut rng, h);
        worst[0] = worst[0].max(grad_check(|x| {
            let (v, g) = smooth_l1(x[0]);
            (v, vec![g])
        }, &[d], h)?);

        let p = probability(&mut rng);
        let label = rng.random_bool(0.5);
        worst[1] = worst[1].max(grad_check(|x| {
            let (v, g) = cls_log_loss(x[0], label, DEFAULT_EPS);
            (v, vec![g])
        }, &[p], h)?);

        let batch = random_cls_reg_batch(&mut rng, h);
        worst[2] = worst[2].max(check_cls_reg(&batch, h)?);

        let (w, ht) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let probs = (0..w * ht).map(|_| probability(&mut rng)).collect();
        let targets = (0..w * ht).map(|_| rng.random_bool(0.5)).collect();
        let pair = MaskPair::new(w, ht, probs, targets)?;
        worst[3] = worst[3].max(check_mask(&pair, h)?);
    }

    Ok(["smooth_l1", "cls_log_loss", "cls_reg_loss", "mask_bce_loss"]
        .iter()
        .zip(worst)
        .map(|(op, max_rel_err)| GradCheckReport {
            op: (*op).to_owned(),
            trials,
            max_rel_err,
            pass: max_rel_err <= GRAD_TOLERANCE,
        })
        .collect())
}
