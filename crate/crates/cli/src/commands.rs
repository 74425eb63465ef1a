use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use morphcons::autodiff::gradcheck_suite;
use morphcons::checkpoint::Checkpoint;
use morphcons::features::MorphologyPass;
use morphcons::grid::SoftMask;
use morphcons::io::{load_dataset, read_csv_column, read_gray, write_synthetic_dataset};
use morphcons::loss::ConsistencyFlow;
use morphcons::metrics::wilcoxon_signed_rank;
use morphcons::prior::{composite_score, FEATURE_NAMES};
use morphcons::synth::{make_dataset, ClassMix, Domain, GeneratorProfile};
use morphcons::train::{alpha_sweep, evaluate, train as run_training, SplitSource, TrainConfig, TrainMode};
use morphcons::Error;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::manifest::RunManifest;
use crate::{
    CompareArgs, DomainArg, EvalArgs, FeaturesArgs, FlowArg, GradcheckArgs, ModeArg, SweepArgs,
    SynthArgs, TrainArgs, TrainOverrides, OUTPUT_ROOT_ENV,
};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_NUMERICAL: u8 = 5;

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    /// A gradient check exceeded its tolerance.
    Check(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Check(msg) => write!(f, "gradient check failed: {msg}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Config { .. } | Error::InvalidSpec(_)) => EXIT_CONFIG,
            Failure::Core(Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_)) => EXIT_IO,
            Failure::Core(
                Error::Numerical(_)
                | Error::UndefinedMetric(_)
                | Error::InsufficientData(_)
                | Error::UninitializedNormalizer,
            )
            | Failure::Check(_) => EXIT_NUMERICAL,
            Failure::Core(_) => EXIT_OTHER,
        }
    }
}

fn setting_error(field: &str, reason: &str) -> Failure {
    Failure::Core(Error::Config {
        field: field.to_string(),
        reason: reason.to_string(),
    })
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Resolves `out` against the output root and creates it.
fn output_dir(out: &Path) -> Result<PathBuf, Failure> {
    let dir = match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        let reason = e.to_string();
        // serde names the offending field in backticks.
        let field = reason
            .split('`')
            .nth(1)
            .unwrap_or("config")
            .to_string();
        Failure::Core(Error::Config { field, reason })
    })
}

fn resolve_config(seed: u64, o: &TrainOverrides) -> Result<TrainConfig, Failure> {
    let mut c = match &o.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    c.seed = seed;
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = o.$field {
                c.$field = v;
            }
        )*};
    }
    set!(learning_rate, weight_decay, batch_size, max_epochs, patience, w_seg, w_cls, alpha, lambda_nt, beta);
    if let Some(m) = o.mode {
        c.mode = match m {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Proposed => TrainMode::Proposed,
        };
    }
    if let Some(f) = o.flow {
        c.consistency_flow = match f {
            FlowArg::Both => ConsistencyFlow::Both,
            FlowArg::PredictionOnly => ConsistencyFlow::PredictionOnly,
            FlowArg::PriorOnly => ConsistencyFlow::PriorOnly,
        };
    }
    if let Some(ch) = o.in_channels {
        c.net.in_channels = ch;
    }
    if let Some(p) = &o.train_manifest {
        c.data.train = SplitSource::Manifest { path: p.clone() };
    }
    if let Some(p) = &o.val_manifest {
        c.data.val = SplitSource::Manifest { path: p.clone() };
    }
    c.validate()?;
    Ok(c)
}

fn manifest_inputs(c: &TrainConfig) -> Vec<PathBuf> {
    [&c.data.train, &c.data.val]
        .into_iter()
        .filter_map(|s| match s {
            SplitSource::Manifest { path } => Some(path.clone()),
            SplitSource::Synthetic { .. } => None,
        })
        .collect()
}

pub fn features(a: FeaturesArgs) -> Result<(), Failure> {
    let mask_img = read_gray(&a.mask)?;
    let mask = SoftMask::from_probabilities(mask_img.grid().clone())?;
    let image = a.image.as_deref().map(read_gray).transpose()?;
    let raw = MorphologyPass::new(&mask, image.as_ref())?.raw();

    let mut out = Map::new();
    out.insert("A".into(), json!(raw.area));
    out.insert("P".into(), json!(raw.perimeter));
    out.insert("R_raw".into(), json!(raw.roughness));
    out.insert("C".into(), json!(raw.compactness));
    if image.is_some() {
        out.insert("T_raw".into(), json!(raw.texture));
    }
    if let Some(path) = &a.checkpoint {
        let ck = Checkpoint::load(path)?;
        let fv = ck.normalizers.normalize(&raw)?;
        out.insert("R".into(), json!(fv.roughness));
        if image.is_some() {
            out.insert("T".into(), json!(fv.texture));
            let score = composite_score(&fv, &ck.prior);
            out.insert("phi".into(), json!(score.phi));
            let weights: Map<String, Value> = FEATURE_NAMES
                .iter()
                .zip(score.weights)
                .map(|(n, w)| (n.to_string(), json!(w)))
                .collect();
            out.insert("weights".into(), Value::Object(weights));
        }
    }
    let out = Value::Object(out);
    print_json(&out);

    if let Some(dir) = &a.out {
        let dir = output_dir(dir)?;
        let file = dir.join("features.json");
        write_json(&file, &out)?;
        let mut m = RunManifest::new("features", None, a.seed);
        m.inputs = [Some(a.mask), a.image, a.checkpoint].into_iter().flatten().collect();
        m.outputs = vec![file];
        m.write(&dir)?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mix = ClassMix {
        benign: a.benign,
        malignant: a.malignant,
        no_tumor: a.no_tumor,
    };
    let domain = match a.domain {
        DomainArg::Source => Domain::Source,
        DomainArg::Shifted => Domain::Shifted,
    };
    let profile = GeneratorProfile {
        size: a.size,
        ..GeneratorProfile::default()
    };
    let samples = make_dataset(a.n, mix, domain, a.seed, &profile)?;
    let dir = output_dir(&a.out)?;
    let manifest = write_synthetic_dataset(&dir, &a.prefix, &samples)?;
    let mut m = RunManifest::new("synth", None, Some(a.seed));
    m.outputs = vec![manifest.clone()];
    m.write(&dir)?;
    print_json(&json!({ "manifest": manifest, "samples": samples.len() }));
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let config = resolve_config(a.seed, &a.overrides)?;
    let train_set = config.data.load_train()?;
    let val_set = config.data.load_val()?;
    let outcome = run_training(&config, &train_set, &val_set)?;

    let dir = output_dir(&a.out)?;
    let files = [
        dir.join("checkpoint.mckp"),
        dir.join("history.csv"),
        dir.join("epochs.csv"),
        dir.join("config.json"),
        dir.join("summary.json"),
    ];
    outcome.checkpoint.save(&files[0])?;
    write_text(&files[1], &outcome.history_csv()?)?;
    write_text(&files[2], &outcome.epochs_csv()?)?;
    write_json(&files[3], &config)?;
    let best = &outcome.epochs[outcome.best_epoch];
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs.len(),
        "stopped_early": outcome.stopped_early,
        "val_total": best.val_total,
        "val_auc": best.val_auc,
        "val_dice": best.val_dice,
    });
    write_json(&files[4], &summary)?;

    let mut m = RunManifest::new("train", a.overrides.config.as_deref(), Some(a.seed));
    m.inputs = manifest_inputs(&config);
    m.outputs = files.to_vec();
    m.write(&dir)?;
    print_json(&summary);
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let config = resolve_config(a.seed, &a.overrides)?;
    let train_set = config.data.load_train()?;
    let val_set = config.data.load_val()?;
    let result = alpha_sweep(&a.alphas, &config, &train_set, &val_set, a.jobs.max(1))?;

    let dir = output_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut run_dirs = Vec::new();
    for (record, outcome) in result.records.iter().zip(&result.outcomes) {
        let run_dir = dir.join(format!("alpha_{}", record.alpha));
        fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
        outcome.checkpoint.save(&run_dir.join("checkpoint.mckp"))?;
        write_text(&run_dir.join("history.csv"), &outcome.history_csv()?)?;
        write_text(&run_dir.join("epochs.csv"), &outcome.epochs_csv()?)?;
        outputs.push(run_dir.clone());
        run_dirs.push(run_dir);
    }
    let csv_path = dir.join("sweep.csv");
    write_text(&csv_path, &result.records_csv()?)?;
    let pick = |i: usize| {
        json!({
            "alpha": result.records[i].alpha,
            "val_auc": result.records[i].val_auc,
            "val_dice": result.records[i].val_dice,
            "run_dir": run_dirs[i],
        })
    };
    let summary = json!({
        "records": result.records,
        "best_cls": pick(result.best_cls),
        "best_seg": pick(result.best_seg),
    });
    let json_path = dir.join("sweep.json");
    write_json(&json_path, &summary)?;
    outputs.extend([csv_path, json_path]);

    let mut m = RunManifest::new("sweep", a.overrides.config.as_deref(), Some(a.seed));
    m.inputs = manifest_inputs(&config);
    m.outputs = outputs;
    m.write(&dir)?;
    print_json(&summary);
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut config = match &a.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let samples = match &a.manifest {
        Some(p) => load_dataset(p)?,
        None => {
            if let (Some(seed), SplitSource::Synthetic { seed: s, .. }) = (a.seed, &mut config.data.test) {
                *s = seed;
            }
            config.data.load_test()?
        }
    };
    let ev = evaluate(&ck, &samples, config.loss_weights(), config.consistency_flow)?;

    let dir = output_dir(&a.out)?;
    let csv_path = dir.join("per_image.csv");
    write_text(&csv_path, &ev.images_csv()?)?;
    let report = json!({
        "mean_dice": ev.report.mean_dice,
        "auc": ev.report.auc,
        "n_benign": ev.report.n_benign,
        "n_malignant": ev.report.n_malignant,
        "loss": ev.loss,
    });
    let json_path = dir.join("report.json");
    write_json(&json_path, &report)?;

    let mut m = RunManifest::new("eval", a.config.as_deref(), a.seed);
    m.inputs = [Some(a.checkpoint), a.manifest].into_iter().flatten().collect();
    m.outputs = vec![csv_path, json_path];
    m.write(&dir)?;
    print_json(&report);
    Ok(())
}

pub fn compare(a: CompareArgs) -> Result<(), Failure> {
    let (names_a, xa) = read_csv_column(&a.a, &a.column)?;
    let (names_b, xb) = read_csv_column(&a.b, &a.column)?;
    if xa.len() != xb.len() {
        return Err(Error::InvalidInput(format!(
            "{} has {} rows but {} has {}",
            a.a.display(),
            xa.len(),
            a.b.display(),
            xb.len()
        ))
        .into());
    }
    if let Some(i) = (0..names_a.len()).find(|&i| names_a[i] != names_b[i]) {
        return Err(Error::InvalidInput(format!(
            "row {} pairs `{}` with `{}`",
            i + 1,
            names_a[i],
            names_b[i]
        ))
        .into());
    }
    let w = wilcoxon_signed_rank(&xa, &xb)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let out = json!({
        "column": a.column,
        "n": xa.len(),
        "mean_a": mean(&xa),
        "mean_b": mean(&xb),
        "wilcoxon": w,
    });
    print_json(&out);
    if let Some(dir) = &a.out {
        let dir = output_dir(dir)?;
        let file = dir.join("compare.json");
        write_json(&file, &out)?;
        let mut m = RunManifest::new("compare", None, a.seed);
        m.inputs = vec![a.a, a.b];
        m.outputs = vec![file];
        m.write(&dir)?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if !(a.tolerance > 0.0 && a.tolerance.is_finite()) {
        return Err(setting_error("tolerance", "must be a positive number"));
    }
    if a.instances == 0 || a.size < 4 {
        let field = if a.instances == 0 { "instances" } else { "size" };
        return Err(setting_error(field, "too small"));
    }
    let probes = a.probes.unwrap_or(usize::MAX);
    let checks = gradcheck_suite(a.instances, a.size, probes, a.seed, a.tolerance)?;
    let passed = checks.iter().all(|c| c.passed);
    let out = json!({
        "passed": passed,
        "tolerance": a.tolerance,
        "instances": a.instances,
        "size": a.size,
        "seed": a.seed,
        "targets": checks,
    });
    print_json(&out);
    if let Some(dir) = &a.out {
        let dir = output_dir(dir)?;
        let file = dir.join("gradcheck.json");
        write_json(&file, &out)?;
        let mut m = RunManifest::new("gradcheck", None, Some(a.seed));
        m.outputs = vec![file];
        m.write(&dir)?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.target.name())
            .collect();
        Err(Failure::Check(format!(
            "{} above tolerance {}",
            failed.join(", "),
            a.tolerance
        )))
    }
}
