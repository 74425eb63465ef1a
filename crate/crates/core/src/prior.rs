//! Composite malignancy prior `φ = wᵀf` with `w = softmax(u)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;

/// Initial weights for `(A, R, C, T)`: roughness dominates, area is weakest.
pub const DEFAULT_PRIOR_WEIGHTS: [f64; 4] = [0.15, 0.35, 0.25, 0.25];

pub const FEATURE_NAMES: [&str; 4] = ["w_A", "w_R", "w_C", "w_T"];

/// Learnable logits `u`; the mixing weights are `softmax(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub logits: [f64; 4],
}

impl Default for PriorWeights {
    fn default() -> Self {
        Self::init(DEFAULT_PRIOR_WEIGHTS).expect("default prior weights are valid")
    }
}

impl PriorWeights {
    /// Inverts the softmax in the zero-mean gauge: `u = log t - mean(log t)`.
    pub fn init(target: [f64; 4]) -> Result<Self> {
        if target.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::invalid(format!(
                "prior weights must be strictly positive, got {target:?}"
            )));
        }
        let total: f64 = target.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "prior weights must sum to 1, got {total}"
            )));
        }
        let logs = target.map(f64::ln);
        let mean = logs.iter().sum::<f64>() / 4.0;
        Ok(Self {
            logits: logs.map(|l| l - mean),
        })
    }

    pub fn from_logits(logits: [f64; 4]) -> Self {
        Self { logits }
    }

    pub fn weights(&self) -> [f64; 4] {
        softmax(&self.logits)
    }

    /// `‖u‖²`; the caller applies the regularization strength.
    pub fn penalty(&self) -> f64 {
        self.logits.iter().map(|u| u * u).sum()
    }
}

pub fn softmax(u: &[f64; 4]) -> [f64; 4] {
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = u.map(|v| (v - max).exp());
    let z: f64 = e.iter().sum();
    e.map(|v| v / z)
}

/// The prior value together with the vector it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorScore {
    pub phi: f64,
    pub inputs: [f64; 4],
    pub weights: [f64; 4],
}

impl PriorScore {
    /// `∂φ/∂u_j = w_j (f_j - φ)`.
    pub fn grad_logits(&self) -> [f64; 4] {
        let mut g = [0.0; 4];
        for j in 0..4 {
            g[j] = self.weights[j] * (self.inputs[j] - self.phi);
        }
        g
    }

    /// `∂φ/∂(A, R, C, T)`; compactness enters with a minus sign.
    pub fn grad_features(&self) -> [f64; 4] {
        let w = self.weights;
        [w[0], w[1], -w[2], w[3]]
    }
}

pub fn composite_score(fv: &FeatureVector, pw: &PriorWeights) -> PriorScore {
    let inputs = fv.prior_input();
    let weights = pw.weights();
    let phi = inputs.iter().zip(&weights).map(|(f, w)| f * w).sum();
    PriorScore {
        phi,
        inputs,
        weights,
    }
}

pub fn weight_penalty(pw: &PriorWeights) -> f64 {
    pw.penalty()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(a: f64, r: f64, c: f64, t: f64) -> FeatureVector {
        FeatureVector {
            area: a,
            roughness: r,
            compactness: c,
            texture: t,
            perimeter: 0.0,
        }
    }

    #[test]
    fn uniform_target_gives_zero_logits() {
        let pw = PriorWeights::init([0.25; 4]).unwrap();
        assert!(pw.logits.iter().all(|u| u.abs() < 1e-15));
    }

    #[test]
    fn init_round_trips() {
        for target in [DEFAULT_PRIOR_WEIGHTS, [0.7, 0.1, 0.1, 0.1]] {
            let pw = PriorWeights::init(target).unwrap();
            for (w, t) in pw.weights().iter().zip(target) {
                assert!((w - t).abs() < 1e-12);
            }
            assert!(pw.logits.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn init_rejects_bad_targets() {
        assert!(PriorWeights::init([0.5, 0.5, 0.0, 0.0]).is_err());
        assert!(PriorWeights::init([0.3, 0.3, 0.3, 0.3]).is_err());
        assert!(PriorWeights::init([-0.1, 0.5, 0.3, 0.3]).is_err());
    }

    #[test]
    fn score_examples() {
        let any = PriorWeights::from_logits([0.3, -1.0, 2.0, 0.1]);
        assert!((composite_score(&fv(1.0, 1.0, 0.0, 1.0), &any).phi - 1.0).abs() < 1e-15);

        let uniform = PriorWeights::init([0.25; 4]).unwrap();
        // f = (0.2, 0.4, 1 - 0.4, 0.8)
        let s = composite_score(&fv(0.2, 0.4, 0.4, 0.8), &uniform);
        assert!((s.phi - 0.5).abs() < 1e-15);

        let s = composite_score(&fv(0.5, 1.0, 1.0, 0.5), &PriorWeights::default());
        assert!((s.phi - 0.55).abs() < 1e-12);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(PriorWeights::from_logits([0.0; 4]).penalty(), 0.0);
        assert_eq!(PriorWeights::from_logits([1.0, -1.0, 0.0, 0.0]).penalty(), 2.0);
        let logs = DEFAULT_PRIOR_WEIGHTS.map(f64::ln);
        let mean = (logs[0] + logs[1] + logs[2] + logs[3]) / 4.0;
        let mut oracle = 0.0;
        for l in logs {
            oracle += (l - mean) * (l - mean);
        }
        assert!((PriorWeights::default().penalty() - oracle).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(u in proptest::array::uniform4(-5.0f64..5.0), k in -10.0f64..10.0) {
            let a = softmax(&u);
            let b = softmax(&u.map(|v| v + k));
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&w| w > 0.0));
        }

        #[test]
        fn phi_bounded_and_monotone(
            u in proptest::array::uniform4(-3.0f64..3.0),
            f in proptest::array::uniform4(0.0f64..=1.0),
            d in 0.0f64..0.5,
        ) {
            let pw = PriorWeights::from_logits(u);
            let base = composite_score(&fv(f[0], f[1], f[2], f[3]), &pw).phi;
            prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
            let up = |i: usize| {
                let mut g = f;
                g[i] = (g[i] + d).min(1.0);
                composite_score(&fv(g[0], g[1], g[2], g[3]), &pw).phi
            };
            prop_assert!(up(0) >= base);
            prop_assert!(up(1) >= base);
            prop_assert!(up(2) <= base);
            prop_assert!(up(3) >= base);
        }
    }
}
