//! Training loop, evaluation and consistency-strength sweep.
//!
//! Optimization uses Adam with decoupled weight decay, a per-epoch cosine
//! learning-rate schedule and early stopping on the validation objective.
//! Per-sample work runs in parallel but gradients are reduced in batch order,
//! so a run is bitwise reproducible for a given seed regardless of thread
//! count.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SampleGraph, Seeds};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{FeatureNormalizers, MorphologyPass, RawFeatures};
use crate::grid::sigmoid_grid;
use crate::io::{load_dataset, Sample};
use crate::loss::{ConsistencyFlow, LossBreakdown, LossTerms, LossWeights};
use crate::metrics::{dice, EvalReport, DICE_THRESHOLD};
use crate::model::{NetConfig, ToyNet};
use crate::prior::{PriorWeights, DEFAULT_PRIOR_WEIGHTS};
use crate::synth::{make_dataset, ClassMix, Domain, GeneratorProfile};

/// Adam with decoupled weight decay: the decay shrinks parameters directly and
/// never enters the moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `base · ½(1 + cos(π·epoch / max_epochs))`.
pub fn cosine_lr(base: f64, epoch: usize, max_epochs: usize) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / max_epochs as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain multi-task training: consistency strength forced to zero.
    Baseline,
    Proposed,
}

/// Where one split's samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum SplitSource {
    Synthetic {
        n: usize,
        seed: u64,
        domain: Domain,
        #[serde(default)]
        mix: ClassMix,
    },
    Manifest {
        path: PathBuf,
    },
}

impl SplitSource {
    pub fn load(&self, profile: &GeneratorProfile, prefix: &str) -> Result<Vec<Sample>> {
        match self {
            SplitSource::Synthetic {
                n,
                seed,
                domain,
                mix,
            } => make_dataset(*n, *mix, *domain, *seed, profile)?
                .iter()
                .enumerate()
                .map(|(i, s)| Sample::from_synthetic(format!("{prefix}{i:04}"), s))
                .collect(),
            SplitSource::Manifest { path } => load_dataset(path),
        }
    }
}

/// Data used by a run. The defaults are the desk-scale synthetic splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train: SplitSource,
    pub val: SplitSource,
    pub test: SplitSource,
    pub profile: GeneratorProfile,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = |n, seed, domain| SplitSource::Synthetic {
            n,
            seed,
            domain,
            mix: ClassMix::default(),
        };
        Self {
            train: synth(200, 101, Domain::Source),
            val: synth(40, 202, Domain::Source),
            test: synth(100, 303, Domain::Shifted),
            profile: GeneratorProfile::default(),
        }
    }
}

impl DataConfig {
    pub fn load_train(&self) -> Result<Vec<Sample>> {
        self.train.load(&self.profile, "train")
    }

    pub fn load_val(&self) -> Result<Vec<Sample>> {
        self.val.load(&self.profile, "val")
    }

    pub fn load_test(&self) -> Result<Vec<Sample>> {
        self.test.load(&self.profile, "test")
    }
}

/// Every knob of a training run. Unspecified JSON fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub w_seg: f64,
    pub w_cls: f64,
    pub alpha: f64,
    pub lambda_nt: f64,
    pub beta: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub consistency_flow: ConsistencyFlow,
    pub prior_init: [f64; 4],
    pub net: NetConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            learning_rate: 9.2e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            max_epochs: 60,
            patience: 10,
            w_seg: w.w_seg,
            w_cls: w.w_cls,
            alpha: w.alpha,
            lambda_nt: w.lambda_nt,
            beta: w.beta,
            seed: 0,
            mode: TrainMode::Proposed,
            consistency_flow: ConsistencyFlow::Both,
            prior_init: DEFAULT_PRIOR_WEIGHTS,
            net: NetConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config_error(name, format!("must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("w_seg", self.w_seg),
            ("w_cls", self.w_cls),
            ("alpha", self.alpha),
            ("lambda_nt", self.lambda_nt),
            ("beta", self.beta),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config_error(name, format!("must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(config_error("max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(config_error("patience", "must be at least 1"));
        }
        PriorWeights::init(self.prior_init).map_err(|e| config_error("prior_init", e.to_string()))?;
        self.net
            .validate()
            .map_err(|e| config_error("net", e.to_string()))?;
        Ok(())
    }

    /// Objective weights; baseline mode zeroes the consistency strength.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_seg: self.w_seg,
            w_cls: self.w_cls,
            alpha: match self.mode {
                TrainMode::Baseline => 0.0,
                TrainMode::Proposed => self.alpha,
            },
            lambda_nt: self.lambda_nt,
            beta: self.beta,
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_seg")]
    pub seg: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_cons")]
    pub consistency: f64,
    #[serde(rename = "NTP")]
    pub no_tumor: f64,
    #[serde(rename = "L2")]
    pub l2: f64,
    pub total: f64,
    pub w_a: f64,
    pub w_r: f64,
    pub w_c: f64,
    pub w_t: f64,
}

/// End-of-epoch validation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub val_seg: f64,
    pub val_cls: f64,
    pub val_cons: f64,
    pub val_ntp: f64,
    pub val_total: f64,
    pub val_auc: f64,
    pub val_dice: f64,
    pub w_a: f64,
    pub w_r: f64,
    pub w_c: f64,
    pub w_t: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest validation objective.
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::invalid(format!("csv serialization: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::invalid(format!("csv serialization: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl TrainOutcome {
    pub fn history_csv(&self) -> Result<String> {
        to_csv(&self.steps)
    }

    pub fn epochs_csv(&self) -> Result<String> {
        to_csv(&self.epochs)
    }
}

/// Per-image evaluation row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub name: String,
    pub label: u8,
    pub dice: f64,
    pub p_hat: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub images: Vec<ImageResult>,
    pub loss: LossBreakdown,
}

impl Evaluation {
    pub fn images_csv(&self) -> Result<String> {
        to_csv(&self.images)
    }
}

/// Evaluates a checkpoint with frozen normalizer statistics.
pub fn evaluate(
    ck: &Checkpoint,
    samples: &[Sample],
    weights: LossWeights,
    flow: ConsistencyFlow,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    if !ck.normalizers.is_initialized() {
        return Err(Error::UninitializedNormalizer);
    }
    let per: Vec<(LossTerms, ImageResult)> = samples
        .par_iter()
        .map(|s| {
            let out = ck.net.forward(&s.image)?;
            let graph = SampleGraph {
                logits: &out.logits,
                malignancy_logit: out.malignancy_logit,
                image: &s.image,
                targets: &s.targets,
                prior: &ck.prior,
                normalizers: &ck.normalizers,
                weights,
                flow,
            };
            let fw = graph.forward()?;
            let d = dice(&fw.mask, &s.targets.mask_gt, DICE_THRESHOLD)?;
            Ok((
                fw.terms,
                ImageResult {
                    name: s.name.clone(),
                    label: s.targets.label,
                    dice: d,
                    p_hat: fw.p_hat,
                },
            ))
        })
        .collect::<Result<_>>()?;
    let terms: Vec<LossTerms> = per.iter().map(|(t, _)| *t).collect();
    let images: Vec<ImageResult> = per.into_iter().map(|(_, r)| r).collect();
    let scores: Vec<f64> = images.iter().map(|r| r.p_hat).collect();
    let labels: Vec<u8> = images.iter().map(|r| r.label).collect();
    let report = EvalReport::new(images.iter().map(|r| r.dice).collect(), &scores, &labels)?;
    let loss = LossBreakdown::batch(&terms, ck.prior.penalty(), weights)?;
    Ok(Evaluation {
        report,
        images,
        loss,
    })
}

fn check_disjoint(train: &[Sample], val: &[Sample]) -> Result<()> {
    for v in val {
        if train
            .iter()
            .any(|t| t.image == v.image && t.targets == v.targets)
        {
            return Err(Error::invalid(format!(
                "validation sample `{}` also appears in the training set",
                v.name
            )));
        }
    }
    Ok(())
}

struct StepResult {
    terms: LossTerms,
    net_grad: Vec<f64>,
    prior_grad: [f64; 4],
}

/// Trains one model and returns the best-validation checkpoint.
pub fn train(config: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    check_disjoint(train_set, val_set)?;

    let weights = config.loss_weights();
    let flow = config.consistency_flow;
    let mut net = ToyNet::new(config.net, config.seed)?;
    let mut prior = PriorWeights::init(config.prior_init)?;
    let mut norms = FeatureNormalizers::default();
    let n_net = net.num_parameters();
    let mut opt = AdamW::new(n_net + 4, config.weight_decay);
    let mut flat = vec![0.0; n_net + 4];

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_5a3d);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step: u64 = 0;
    let mut best: Option<(f64, Checkpoint, usize)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.max_epochs);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_total = 0.0;
        let mut batches = 0usize;

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let forward: Vec<_> = batch
                .par_iter()
                .map(|s| {
                    let (out, cache) = net.forward_cached(&s.image)?;
                    let mask = sigmoid_grid(&out.logits)?;
                    let raw = MorphologyPass::new(&mask, Some(&s.image))?.raw();
                    Ok((out, cache, raw))
                })
                .collect::<Result<_>>()?;
            let raws: Vec<RawFeatures> = forward.iter().map(|f| f.2).collect();
            norms.observe(&raws)?;

            let seeds = Seeds::batch_mean(weights, batch.len());
            let results: Vec<StepResult> = forward
                .par_iter()
                .zip(batch.par_iter())
                .map(|((out, cache, _), s)| {
                    let graph = SampleGraph {
                        logits: &out.logits,
                        malignancy_logit: out.malignancy_logit,
                        image: &s.image,
                        targets: &s.targets,
                        prior: &prior,
                        normalizers: &norms,
                        weights,
                        flow,
                    };
                    let fw = graph.forward()?;
                    let g = graph.backward_seeded(&fw, seeds)?;
                    Ok(StepResult {
                        terms: fw.terms,
                        net_grad: net.backward(cache, &g.logits, g.malignancy_logit),
                        prior_grad: g.prior_logits,
                    })
                })
                .collect::<Result<_>>()?;

            // Fixed-order reduction.
            let mut grad = vec![0.0; n_net + 4];
            let mut terms = Vec::with_capacity(results.len());
            for r in &results {
                for (g, v) in grad[..n_net].iter_mut().zip(&r.net_grad) {
                    *g += v;
                }
                for j in 0..4 {
                    grad[n_net + j] += r.prior_grad[j];
                }
                terms.push(r.terms);
            }
            for j in 0..4 {
                grad[n_net + j] += weights.beta * 2.0 * prior.logits[j];
            }
            let breakdown = LossBreakdown::batch(&terms, prior.penalty(), weights)?;
            if !breakdown.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at step {step}"
                )));
            }

            flat[..n_net].copy_from_slice(net.parameters());
            flat[n_net..].copy_from_slice(&prior.logits);
            opt.step(&mut flat, &grad, lr);
            net.parameters_mut().copy_from_slice(&flat[..n_net]);
            prior.logits.copy_from_slice(&flat[n_net..]);

            step += 1;
            epoch_total += breakdown.total;
            batches += 1;
            let w = prior.weights();
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                seg: breakdown.terms.seg,
                cls: breakdown.terms.cls,
                consistency: breakdown.terms.consistency,
                no_tumor: breakdown.terms.no_tumor,
                l2: breakdown.terms.l2,
                total: breakdown.total,
                w_a: w[0],
                w_r: w[1],
                w_c: w[2],
                w_t: w[3],
            });
        }

        let ck = Checkpoint {
            net: net.clone(),
            prior,
            normalizers: norms,
            step,
            seed: config.seed,
        };
        let val = evaluate(&ck, val_set, weights, flow)?;
        let val_total = val.loss.total;
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_total < *b);
        let w = prior.weights();
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_total: epoch_total / batches as f64,
            val_seg: val.loss.terms.seg,
            val_cls: val.loss.terms.cls,
            val_cons: val.loss.terms.consistency,
            val_ntp: val.loss.terms.no_tumor,
            val_total,
            val_auc: val.report.auc.unwrap_or(f64::NAN),
            val_dice: val.report.mean_dice,
            w_a: w[0],
            w_r: w[1],
            w_c: w[2],
            w_t: w[3],
            improved,
        });
        if improved {
            best = Some((val_total, ck, epoch));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (_, checkpoint, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint,
        best_epoch,
        stopped_early,
        steps,
        epochs,
    })
}

/// Validation metrics of one sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub val_auc: f64,
    pub val_dice: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
    pub outcomes: Vec<TrainOutcome>,
    /// Index of the run with the highest validation AUC.
    pub best_cls: usize,
    /// Index of the run with the highest validation Dice.
    pub best_seg: usize,
}

impl SweepResult {
    pub fn records_csv(&self) -> Result<String> {
        to_csv(&self.records)
    }
}

/// Argmax of `metric` over `records`; NaN never wins and ties go to the
/// smaller consistency strength.
pub fn select_best(records: &[SweepRecord], metric: impl Fn(&SweepRecord) -> f64) -> usize {
    let mut best = 0;
    for (i, r) in records.iter().enumerate().skip(1) {
        let (m, b) = (metric(r), metric(&records[best]));
        let better = match (m.is_nan(), b.is_nan()) {
            (true, _) => false,
            (false, true) => true,
            _ => m > b || (m == b && r.alpha < records[best].alpha),
        };
        if better {
            best = i;
        }
    }
    best
}

/// Trains one proposed-mode model per consistency strength and applies the
/// selection rule: best classification AUC and best segmentation Dice on the
/// validation set. Up to `jobs` runs execute concurrently.
pub fn alpha_sweep(
    grid: &[f64],
    base: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    jobs: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("empty consistency-strength grid"));
    }
    let run = |&alpha: &f64| -> Result<(SweepRecord, TrainOutcome)> {
        let config = TrainConfig {
            alpha,
            mode: TrainMode::Proposed,
            ..base.clone()
        };
        let outcome = train(&config, train_set, val_set)?;
        let val = evaluate(
            &outcome.checkpoint,
            val_set,
            config.loss_weights(),
            config.consistency_flow,
        )?;
        Ok((
            SweepRecord {
                alpha,
                val_auc: val.report.auc.unwrap_or(f64::NAN),
                val_dice: val.report.mean_dice,
                best_epoch: outcome.best_epoch,
            },
            outcome,
        ))
    };
    let runs: Vec<(SweepRecord, TrainOutcome)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| grid.par_iter().map(run).collect::<Result<_>>())?
    } else {
        grid.iter().map(run).collect::<Result<_>>()?
    };
    let (records, outcomes): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let best_cls = select_best(&records, |r| r.val_auc);
    let best_seg = select_best(&records, |r| r.val_dice);
    Ok(SweepResult {
        records,
        outcomes,
        best_cls,
        best_seg,
    })
}
