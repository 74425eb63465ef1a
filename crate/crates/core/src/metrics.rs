//! Per-image Dice, ROC AUC and the paired Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grid::{Grid, SoftMask};

pub const DICE_THRESHOLD: f64 = 0.5;

/// Sample sizes up to this use the exact null distribution.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Dice between two binary grids; two empty masks agree perfectly.
pub fn dice_binary(a: &Grid, b: &Grid) -> Result<f64> {
    a.check_same_shape(b, "dice")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        match (x > 0.5, y > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Binarizes `pred` at `threshold` (inclusive) and compares against `gt`.
pub fn dice(pred: &SoftMask, gt: &Grid, threshold: f64) -> Result<f64> {
    let bin = pred.grid().map(|v| if v >= threshold { 1.0 } else { 0.0 });
    dice_binary(&bin, gt)
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..j hold ranks i+1..=j.
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Mann–Whitney AUC: `P(score⁺ > score⁻) + ½·P(tie)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("auc: scores and labels differ in length"));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("auc: labels must be 0 or 1"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative samples".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

/// Paired two-sided signed-rank test on `x - y`. Zero differences are
/// dropped; the exact null distribution is used for up to
/// [`WILCOXON_EXACT_MAX_N`] remaining pairs.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(x, y, None)
}

/// As [`wilcoxon_signed_rank`], optionally forcing the method.
pub fn wilcoxon_signed_rank_with(
    x: &[f64],
    y: &[f64],
    method: Option<WilcoxonMethod>,
) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::invalid("wilcoxon: samples differ in length"));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n < 5 {
        return Err(Error::InsufficientData(format!(
            "{n} non-zero paired differences, at least 5 required"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let statistic = w_plus.min(w_minus);

    let method = method.unwrap_or(if n <= WILCOXON_EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    });
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(&ranks, statistic),
        WilcoxonMethod::NormalApprox => normal_p(&abs, n, statistic),
    };
    Ok(WilcoxonResult {
        statistic,
        w_plus,
        w_minus,
        p_value,
        n_effective: n,
        method,
    })
}

/// `min(1, 2·P(W⁺ ≤ w))` under the sign-flip null, by counting subsets of
/// doubled ranks (average ranks are multiples of ½).
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for k in (0..=reach).rev() {
            let c = counts[k];
            if c != 0.0 {
                counts[k + r] += c;
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let below: f64 = counts[..=limit.min(max)].iter().sum();
    (2.0 * below / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn normal_p(abs: &[f64], n: usize, w: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = (((w - mean).abs() - 0.5) / var.sqrt()).max(0.0);
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Summary of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image_dice: Vec<f64>,
    pub mean_dice: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    pub n_benign: usize,
    pub n_malignant: usize,
}

impl EvalReport {
    pub fn new(per_image_dice: Vec<f64>, scores: &[f64], labels: &[u8]) -> Result<Self> {
        if per_image_dice.is_empty() {
            return Err(Error::invalid("empty evaluation set"));
        }
        let mean_dice = per_image_dice.iter().sum::<f64>() / per_image_dice.len() as f64;
        let auc = match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        let n_malignant = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            per_image_dice,
            mean_dice,
            auc,
            n_benign: labels.len() - n_malignant,
            n_malignant,
        })
    }
}
