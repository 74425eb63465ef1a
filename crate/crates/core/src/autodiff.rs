//! Analytic gradients of the per-sample loss graph and a central
//! finite-difference checker for them.
//!
//! The graph for one sample is
//!
//! ```text
//! s ──σ──> ŷ ──> (A, R_raw, C, T_raw) ──norm──> f ──(u)──> φ ─┐
//! │                                                           ├─> L_cons
//! m ──σ──> p̂ ─────────────────────────────────────────────────┘
//! ```
//!
//! plus the BCE terms on `s` and `m`, the no-tumor penalty on `ŷ` and the
//! L2 penalty on `u`. Normalizer statistics are constants here.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EmaNormalizer, FeatureNormalizers, FeatureVector, MorphologyPass, RawFeatureGrads};
use crate::grid::{sigmoid, sigmoid_grid, GrayImage, Grid, LogitGrid, SoftMask};
use crate::loss::{
    bce_logit, bce_with_logits, bce_with_logits_grad, consistency_loss, no_tumor_penalty,
    ConsistencyFlow, LossBreakdown, LossTerms, LossWeights, SampleTargets,
};
use crate::prior::{composite_score, PriorScore, PriorWeights};

/// Scalars of the graph that can be differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScalarTarget {
    #[serde(rename = "A")]
    Area,
    #[serde(rename = "R_raw")]
    RoughnessRaw,
    #[serde(rename = "C")]
    Compactness,
    #[serde(rename = "T_raw")]
    TextureRaw,
    #[serde(rename = "phi")]
    Prior,
    #[serde(rename = "L_seg")]
    SegLoss,
    #[serde(rename = "L_cls")]
    ClsLoss,
    #[serde(rename = "L_cons")]
    Consistency,
    #[serde(rename = "NTP")]
    NoTumor,
    #[serde(rename = "total")]
    Total,
}

impl ScalarTarget {
    pub const ALL: [ScalarTarget; 10] = [
        Self::Area,
        Self::RoughnessRaw,
        Self::Compactness,
        Self::TextureRaw,
        Self::Prior,
        Self::SegLoss,
        Self::ClsLoss,
        Self::Consistency,
        Self::NoTumor,
        Self::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Area => "A",
            Self::RoughnessRaw => "R_raw",
            Self::Compactness => "C",
            Self::TextureRaw => "T_raw",
            Self::Prior => "phi",
            Self::SegLoss => "L_seg",
            Self::ClsLoss => "L_cls",
            Self::Consistency => "L_cons",
            Self::NoTumor => "NTP",
            Self::Total => "total",
        }
    }
}

/// Differentiable inputs of the sample graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wrt {
    Logits,
    MalignancyLogit,
    PriorLogits,
    /// The grayscale image is data, never a parameter.
    Image,
}

/// Everything one sample's loss depends on.
#[derive(Debug, Clone)]
pub struct SampleGraph<'a> {
    pub logits: &'a LogitGrid,
    pub malignancy_logit: f64,
    pub image: &'a GrayImage,
    pub targets: &'a SampleTargets,
    pub prior: &'a PriorWeights,
    pub normalizers: &'a FeatureNormalizers,
    pub weights: LossWeights,
    pub flow: ConsistencyFlow,
}

/// Forward values of every node of the sample graph.
#[derive(Debug, Clone)]
pub struct SampleForward {
    pub mask: SoftMask,
    pub morphology: MorphologyPass,
    pub features: FeatureVector,
    pub prior: PriorScore,
    pub p_hat: f64,
    pub terms: LossTerms,
}

impl SampleForward {
    pub fn breakdown(&self, weights: LossWeights) -> Result<LossBreakdown> {
        LossBreakdown::compose(self.terms, weights)
    }
}

/// Upstream sensitivities seeded onto the graph's scalar nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Seeds {
    pub seg: f64,
    pub cls: f64,
    pub consistency: f64,
    pub no_tumor: f64,
    pub l2: f64,
    pub prior: f64,
    pub raw: RawFeatureGrads,
}

impl Seeds {
    pub fn for_target(target: ScalarTarget, w: LossWeights) -> Self {
        let mut s = Seeds::default();
        match target {
            ScalarTarget::Area => s.raw.area = 1.0,
            ScalarTarget::RoughnessRaw => s.raw.roughness = 1.0,
            ScalarTarget::Compactness => s.raw.compactness = 1.0,
            ScalarTarget::TextureRaw => s.raw.texture = 1.0,
            ScalarTarget::Prior => s.prior = 1.0,
            ScalarTarget::SegLoss => s.seg = 1.0,
            ScalarTarget::ClsLoss => s.cls = 1.0,
            ScalarTarget::Consistency => s.consistency = 1.0,
            ScalarTarget::NoTumor => s.no_tumor = 1.0,
            ScalarTarget::Total => {
                s.seg = w.w_seg;
                s.cls = w.w_cls;
                s.consistency = w.alpha;
                s.no_tumor = w.alpha * w.lambda_nt;
                s.l2 = w.beta;
            }
        }
        s
    }

    /// Per-sample seeds for a batch-mean objective; the L2 seed is left at
    /// zero since the penalty is added once per batch.
    pub fn batch_mean(w: LossWeights, batch_size: usize) -> Self {
        let k = 1.0 / batch_size as f64;
        Seeds {
            seg: w.w_seg * k,
            cls: w.w_cls * k,
            consistency: w.alpha * k,
            no_tumor: w.alpha * w.lambda_nt * k,
            ..Seeds::default()
        }
    }
}

/// Gradients of a scalar with respect to every parameter of the sample graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGradients {
    pub logits: Grid,
    pub malignancy_logit: f64,
    pub prior_logits: [f64; 4],
}

/// Gradient of one scalar with respect to one parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOf {
    pub target: ScalarTarget,
    pub wrt: Wrt,
    pub shape: (usize, usize),
    pub values: Vec<f64>,
}

impl<'a> SampleGraph<'a> {
    pub fn forward(&self) -> Result<SampleForward> {
        self.targets
            .mask_gt
            .check_same_shape(self.logits.grid(), "ground-truth mask")?;
        let mask = sigmoid_grid(self.logits)?;
        let morphology = MorphologyPass::new(&mask, Some(self.image))?;
        let features = self.normalizers.normalize(&morphology.raw())?;
        let prior = composite_score(&features, self.prior);
        let p_hat = sigmoid(self.malignancy_logit);
        let seg = bce_with_logits(
            self.logits.grid().as_slice(),
            self.targets.mask_gt.as_slice(),
        )?;
        let cls = bce_logit(self.malignancy_logit, f64::from(self.targets.label));
        let terms = LossTerms {
            seg,
            cls,
            consistency: consistency_loss(p_hat, prior.phi),
            no_tumor: no_tumor_penalty(&mask, self.targets),
            l2: self.prior.penalty(),
        };
        Ok(SampleForward {
            mask,
            morphology,
            features,
            prior,
            p_hat,
            terms,
        })
    }

    pub fn value(&self, target: ScalarTarget) -> Result<f64> {
        let fw = self.forward()?;
        let raw = fw.morphology.raw();
        Ok(match target {
            ScalarTarget::Area => raw.area,
            ScalarTarget::RoughnessRaw => raw.roughness,
            ScalarTarget::Compactness => raw.compactness,
            ScalarTarget::TextureRaw => raw.texture,
            ScalarTarget::Prior => fw.prior.phi,
            ScalarTarget::SegLoss => fw.terms.seg,
            ScalarTarget::ClsLoss => fw.terms.cls,
            ScalarTarget::Consistency => fw.terms.consistency,
            ScalarTarget::NoTumor => fw.terms.no_tumor,
            ScalarTarget::Total => fw.breakdown(self.weights)?.total,
        })
    }

    /// Reverse pass for an arbitrary combination of seeds.
    pub fn backward_seeded(&self, fw: &SampleForward, seeds: Seeds) -> Result<SampleGradients> {
        let p = fw.p_hat;
        let phi = fw.prior.phi;

        let mut d_m = seeds.cls * (p - f64::from(self.targets.label));
        let mut d_phi = seeds.prior;
        if seeds.consistency != 0.0 {
            if self.flow.to_prediction() {
                d_m += seeds.consistency * 2.0 * (p - phi) * p * (1.0 - p);
            }
            if self.flow.to_prior() {
                d_phi += seeds.consistency * -2.0 * (p - phi);
            }
        }

        let mut d_u = [0.0; 4];
        let mut raw = seeds.raw;
        if d_phi != 0.0 {
            let gu = fw.prior.grad_logits();
            for j in 0..4 {
                d_u[j] += d_phi * gu[j];
            }
            let gf = fw.prior.grad_features();
            let r = fw.morphology.raw();
            raw.area += d_phi * gf[0];
            raw.roughness +=
                d_phi * gf[1] * self.normalizers.roughness.apply_derivative(r.roughness)?;
            raw.compactness += d_phi * gf[2];
            raw.texture += d_phi * gf[3] * self.normalizers.texture.apply_derivative(r.texture)?;
        }
        if seeds.l2 != 0.0 {
            for (d, u) in d_u.iter_mut().zip(&self.prior.logits) {
                *d += seeds.l2 * 2.0 * u;
            }
        }

        let mut d_mask = fw.morphology.backward(Some(self.image), raw)?;
        if seeds.no_tumor != 0.0 && !self.targets.has_tumor() {
            let k = seeds.no_tumor / d_mask.len() as f64;
            for v in d_mask.as_mut_slice() {
                *v += k;
            }
        }

        // Through σ: dŷ/ds = ŷ(1 - ŷ).
        let mut d_logits = d_mask;
        for (d, &y) in d_logits.as_mut_slice().iter_mut().zip(fw.mask.as_slice()) {
            *d *= y * (1.0 - y);
        }
        if seeds.seg != 0.0 {
            let g = bce_with_logits_grad(
                self.logits.grid().as_slice(),
                self.targets.mask_gt.as_slice(),
            );
            for (d, gi) in d_logits.as_mut_slice().iter_mut().zip(g) {
                *d += seeds.seg * gi;
            }
        }

        Ok(SampleGradients {
            logits: d_logits,
            malignancy_logit: d_m,
            prior_logits: d_u,
        })
    }

    pub fn backward(&self, target: ScalarTarget) -> Result<SampleGradients> {
        let fw = self.forward()?;
        self.backward_seeded(&fw, Seeds::for_target(target, self.weights))
    }

    pub fn gradient_of(&self, target: ScalarTarget, wrt: Wrt) -> Result<GradientOf> {
        if wrt == Wrt::Image {
            return Err(Error::UnsupportedGraph(
                "the grayscale image is an input, not a parameter".into(),
            ));
        }
        let g = self.backward(target)?;
        let (shape, values) = match wrt {
            Wrt::Logits => (g.logits.shape(), g.logits.into_vec()),
            Wrt::MalignancyLogit => ((1, 1), vec![g.malignancy_logit]),
            Wrt::PriorLogits => ((1, 4), g.prior_logits.to_vec()),
            Wrt::Image => unreachable!(),
        };
        Ok(GradientOf {
            target,
            wrt,
            shape,
            values,
        })
    }

    /// Flattened parameter vector `[s..., m, u...]`.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut x = self.logits.grid().as_slice().to_vec();
        x.push(self.malignancy_logit);
        x.extend_from_slice(&self.prior.logits);
        x
    }

    /// Evaluates `target` at a flattened parameter vector laid out like
    /// [`flat_parameters`](Self::flat_parameters).
    pub fn value_at(&self, target: ScalarTarget, x: &[f64]) -> Result<f64> {
        let n = self.logits.grid().len();
        if x.len() != n + 5 {
            return Err(Error::invalid("flat parameter vector has the wrong length"));
        }
        let (h, w) = self.logits.grid().shape();
        let logits = LogitGrid::new(Grid::new(h, w, x[..n].to_vec())?)?;
        let prior = PriorWeights::from_logits([x[n + 1], x[n + 2], x[n + 3], x[n + 4]]);
        let g = SampleGraph {
            logits: &logits,
            malignancy_logit: x[n],
            prior: &prior,
            ..self.clone()
        };
        g.value(target)
    }

    pub fn flat_gradient(&self, target: ScalarTarget) -> Result<Vec<f64>> {
        let g = self.backward(target)?;
        let mut out = g.logits.into_vec();
        out.push(g.malignancy_logit);
        out.extend_from_slice(&g.prior_logits);
        Ok(out)
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probed_entries: usize,
    pub step: f64,
    /// Largest relative error among entries whose absolute error exceeds
    /// [`NEAR_ZERO_ABS_TOL`]; this is the quantity the pass/fail rule uses.
    pub max_rel_err_significant: f64,
}

/// Relative tolerance for analytic-vs-numeric agreement in 64-bit.
pub const GRADCHECK_REL_TOL: f64 = 1e-4;
/// Entries whose absolute disagreement stays below this pass regardless of
/// relative error.
pub const NEAR_ZERO_ABS_TOL: f64 = 1e-7;
pub const GRADCHECK_STEP: f64 = 1e-5;

impl FiniteDiffReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err_significant < rel_tol
    }

    /// Combines reports of several instances into their worst case.
    pub fn worst(reports: &[FiniteDiffReport]) -> Option<FiniteDiffReport> {
        let first = reports.first()?.clone();
        Some(reports.iter().skip(1).fold(first, |acc, r| FiniteDiffReport {
            max_abs_err: acc.max_abs_err.max(r.max_abs_err),
            max_rel_err: acc.max_rel_err.max(r.max_rel_err),
            probed_entries: acc.probed_entries + r.probed_entries,
            step: acc.step,
            max_rel_err_significant: acc.max_rel_err_significant.max(r.max_rel_err_significant),
        }))
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
///
/// When `probes` is at least `x.len()` every coordinate is checked; otherwise
/// `probes` distinct coordinates are drawn from a generator seeded with `seed`.
pub fn finite_diff_check<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    step: f64,
    probes: usize,
    seed: u64,
) -> Result<FiniteDiffReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if probes == 0 {
        return Err(Error::invalid("at least one probe is required"));
    }
    if x.len() != analytic.len() || x.is_empty() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    let coords: Vec<usize> = if probes >= x.len() {
        (0..x.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = sample(&mut rng, x.len(), probes).into_vec();
        c.sort_unstable();
        c
    };

    let eval = |p: &[f64]| -> Result<f64> {
        let v = f(p)?;
        if !v.is_finite() {
            return Err(Error::invalid("non-finite value during finite differencing"));
        }
        Ok(v)
    };
    eval(x)?;

    let mut probe = x.to_vec();
    let mut report = FiniteDiffReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        probed_entries: coords.len(),
        step,
        max_rel_err_significant: 0.0,
    };
    for &i in &coords {
        probe[i] = x[i] + step;
        let plus = eval(&probe)?;
        probe[i] = x[i] - step;
        let minus = eval(&probe)?;
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        if abs > NEAR_ZERO_ABS_TOL {
            report.max_rel_err_significant = report.max_rel_err_significant.max(rel);
        }
    }
    Ok(report)
}

/// Finite-difference check of one target over the full flattened parameter
/// vector of a sample graph.
pub fn check_sample_graph(
    graph: &SampleGraph<'_>,
    target: ScalarTarget,
    step: f64,
    probes: usize,
    seed: u64,
) -> Result<FiniteDiffReport> {
    let x = graph.flat_parameters();
    let analytic = graph.flat_gradient(target)?;
    finite_diff_check(|p| graph.value_at(target, p), &x, &analytic, step, probes, seed)
}

/// A self-contained random sample graph for gradient checking.
#[derive(Debug, Clone)]
pub struct GradcheckInstance {
    pub logits: LogitGrid,
    pub malignancy_logit: f64,
    pub image: GrayImage,
    pub targets: SampleTargets,
    pub prior: PriorWeights,
    pub normalizers: FeatureNormalizers,
    pub weights: LossWeights,
}

impl GradcheckInstance {
    /// Logits in `[-3, 3)`, a uniform random image, a random rectangular
    /// lesion when `has_tumor`, perturbed prior logits and fixed normalizer
    /// statistics wide enough that no feature is clipped.
    pub fn random(seed: u64, size: usize, has_tumor: bool) -> Result<Self> {
        if size < 4 {
            return Err(Error::invalid("gradient-check grids must be at least 4x4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = LogitGrid::new(Grid::from_fn(size, size, |_, _| rng.random_range(-3.0..3.0)))?;
        let image = GrayImage::new(Grid::from_fn(size, size, |_, _| rng.random::<f64>()))?;
        let (r0, c0) = (rng.random_range(0..size / 2), rng.random_range(0..size / 2));
        let (r1, c1) = (
            rng.random_range(r0 + 2..=size),
            rng.random_range(c0 + 2..=size),
        );
        let gt = Grid::from_fn(size, size, |r, c| {
            f64::from(u8::from(has_tumor && (r0..r1).contains(&r) && (c0..c1).contains(&c)))
        });
        let base = PriorWeights::default().logits;
        let prior = PriorWeights::from_logits(base.map(|u| u + rng.random_range(-0.3..0.3)));
        let area = (size * size) as f64;
        Ok(Self {
            logits,
            malignancy_logit: rng.random_range(-2.0..2.0),
            image,
            targets: SampleTargets::new(gt, u8::from(has_tumor))?,
            prior,
            normalizers: FeatureNormalizers {
                roughness: EmaNormalizer::with_stats(0.0, 16.0 * area.sqrt()),
                texture: EmaNormalizer::with_stats(0.0, 0.2),
            },
            weights: LossWeights::default(),
        })
    }

    pub fn graph(&self) -> SampleGraph<'_> {
        SampleGraph {
            logits: &self.logits,
            malignancy_logit: self.malignancy_logit,
            image: &self.image,
            targets: &self.targets,
            prior: &self.prior,
            normalizers: &self.normalizers,
            weights: self.weights,
            flow: ConsistencyFlow::Both,
        }
    }
}

/// Worst-case finite-difference agreement of one target over all instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCheck {
    pub target: ScalarTarget,
    pub instances: usize,
    pub report: FiniteDiffReport,
    pub passed: bool,
}

/// Checks every [`ScalarTarget`] on `instances` random graphs of
/// `size`x`size` logits, alternating tumor and tumor-free targets.
pub fn gradcheck_suite(
    instances: usize,
    size: usize,
    probes: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<Vec<TargetCheck>> {
    if instances == 0 {
        return Err(Error::invalid("at least one instance is required"));
    }
    if !(rel_tol > 0.0 && rel_tol.is_finite()) {
        return Err(Error::invalid(format!("tolerance must be positive, got {rel_tol}")));
    }
    let graphs = (0..instances)
        .map(|i| GradcheckInstance::random(seed.wrapping_add(i as u64), size, i % 2 == 0))
        .collect::<Result<Vec<_>>>()?;
    ScalarTarget::ALL
        .iter()
        .map(|&target| {
            let reports = graphs
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    check_sample_graph(&g.graph(), target, GRADCHECK_STEP, probes, seed ^ i as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = FiniteDiffReport::worst(&reports).expect("non-empty");
            Ok(TargetCheck {
                target,
                instances,
                passed: report.passes(rel_tol),
                report,
            })
        })
        .collect()
}
