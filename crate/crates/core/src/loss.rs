//! Terms of the multi-task objective and their weighted composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sigmoid, Grid, SoftMask};

/// Weights of the objective
/// `w_seg·L_seg + w_cls·L_cls + α·L_cons + α·λ_nt·NTP + β·‖u‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_cls: f64,
    pub alpha: f64,
    pub lambda_nt: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_seg: 0.9,
            w_cls: 0.1,
            alpha: 0.17,
            lambda_nt: 0.5,
            beta: 0.001,
        }
    }
}

impl LossWeights {
    /// Plain multi-task objective: no consistency, no penalty, no L2.
    pub fn baseline() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("w_seg", self.w_seg),
            ("w_cls", self.w_cls),
            ("alpha", self.alpha),
            ("lambda_nt", self.lambda_nt),
            ("beta", self.beta),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which side of the consistency term receives its gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyFlow {
    /// Both the classifier output and the morphology graph.
    #[default]
    Both,
    /// Only `p̂`; `φ` is treated as a constant target.
    PredictionOnly,
    /// Only `φ`; `p̂` is treated as a constant target.
    PriorOnly,
}

impl ConsistencyFlow {
    pub fn to_prediction(self) -> bool {
        matches!(self, Self::Both | Self::PredictionOnly)
    }

    pub fn to_prior(self) -> bool {
        matches!(self, Self::Both | Self::PriorOnly)
    }
}

/// Supervision for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTargets {
    pub mask_gt: Grid,
    /// 0 benign, 1 malignant.
    pub label: u8,
}

impl SampleTargets {
    pub fn new(mask_gt: Grid, label: u8) -> Result<Self> {
        if mask_gt.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("ground-truth mask must be binary"));
        }
        if label > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self { mask_gt, label })
    }

    pub fn has_tumor(&self) -> bool {
        self.mask_gt.as_slice().iter().any(|&v| v > 0.0)
    }
}

/// Unweighted values of the five addends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub seg: f64,
    pub cls: f64,
    pub consistency: f64,
    pub no_tumor: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(flatten)]
    pub terms: LossTerms,
    pub total: f64,
    #[serde(skip)]
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn compose(terms: LossTerms, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let w = weights;
        let total = w.w_seg * terms.seg
            + w.w_cls * terms.cls
            + w.alpha * terms.consistency
            + w.alpha * w.lambda_nt * terms.no_tumor
            + w.beta * terms.l2;
        Ok(Self {
            terms,
            total,
            weights,
        })
    }

    /// Averages the per-sample data terms in slice order and adds the
    /// parameter penalty once.
    pub fn batch(per_sample: &[LossTerms], l2: f64, weights: LossWeights) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = per_sample.len() as f64;
        let mut acc = LossTerms::default();
        for t in per_sample {
            acc.seg += t.seg;
            acc.cls += t.cls;
            acc.consistency += t.consistency;
            acc.no_tumor += t.no_tumor;
        }
        let terms = LossTerms {
            seg: acc.seg / n,
            cls: acc.cls / n,
            consistency: acc.consistency / n,
            no_tumor: acc.no_tumor / n,
            l2,
        };
        Self::compose(terms, weights)
    }
}

/// `max(s,0) - s·t + ln(1 + e^{-|s|})`, one element.
#[inline]
pub fn bce_logit(s: f64, t: f64) -> f64 {
    s.max(0.0) - s * t + (-s.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over all elements.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::invalid(format!(
            "bce: {} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::invalid("bce: empty input"));
    }
    let sum: f64 = logits.iter().zip(targets).map(|(&s, &t)| bce_logit(s, t)).sum();
    Ok(sum / logits.len() as f64)
}

/// Gradient of [`bce_with_logits`] w.r.t. each logit: `(σ(s) - t) / n`.
pub fn bce_with_logits_grad(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&s, &t)| (sigmoid(s) - t) / n)
        .collect()
}

pub fn consistency_loss(p_hat: f64, phi: f64) -> f64 {
    (p_hat - phi) * (p_hat - phi)
}

/// Mean activation on tumor-free images, exactly zero otherwise.
pub fn no_tumor_penalty(mask: &SoftMask, targets: &SampleTargets) -> f64 {
    if targets.has_tumor() {
        0.0
    } else {
        mask.grid().mean()
    }
}
