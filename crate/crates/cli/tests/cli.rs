use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use morphcons::grid::{GrayImage, Grid, SoftMask};
use morphcons::io::{write_gray_pgm, write_mask_pgm};
use morphcons::synth::{generate, LesionSpec};
use serde_json::Value;

fn morphcons(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphcons"))
        .args(args)
        .env_remove("MORPHCONS_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: stdout {:?} stderr {:?}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "max_epochs": 2,
  "batch_size": 6,
  "net": { "in_channels": 1, "widths": [4, 4, 4] },
  "data": {
    "train": { "source": "synthetic", "n": 12, "seed": 1, "domain": "source" },
    "val": { "source": "synthetic", "n": 6, "seed": 2, "domain": "source" },
    "test": { "source": "synthetic", "n": 6, "seed": 3, "domain": "shifted" }
  }
}"#;

#[test]
fn gradcheck_defaults_pass() {
    let o = morphcons(&["gradcheck", "--probes", "50", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["passed"], true);
    assert_eq!(v["targets"].as_array().unwrap().len(), 10);
}

#[test]
fn gradcheck_rejects_bad_settings() {
    for arg in ["--tolerance=0", "--tolerance=-1", "--instances=0", "--size=3"] {
        let o = morphcons(&["gradcheck", "--probes", "5", arg]);
        assert_eq!(o.status.code(), Some(3), "{arg}");
    }
}

#[test]
fn features_of_disc_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let disc = generate(&LesionSpec::centered_disc(64, 12.0)).unwrap();
    let mask = dir.path().join("mask.pgm");
    let image = dir.path().join("image.pgm");
    write_mask_pgm(&mask, &disc.mask_gt).unwrap();
    write_gray_pgm(&image, &GrayImage::new(Grid::filled(64, 64, 0.4)).unwrap()).unwrap();

    let o = morphcons(&["features", "--mask", path(&mask), "--image", path(&image)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert!(v["T_raw"].as_f64().unwrap().abs() < 1e-12);
    let expected = morphcons::features::compactness(&SoftMask::from_probabilities(disc.mask_gt.clone()).unwrap()).unwrap();
    assert_eq!(v["C"].as_f64().unwrap(), expected);
    assert!(v.get("R").is_none());

    let o = morphcons(&["features", "--mask", path(&mask)]);
    let v = stdout_json(&o);
    for key in ["T_raw", "R", "T", "phi"] {
        assert!(v.get(key).is_none(), "{key}");
    }
    for key in ["A", "P", "R_raw", "C"] {
        assert!(v[key].is_number(), "{key}");
    }
}

#[test]
fn missing_file_names_the_path() {
    let o = morphcons(&["features", "--mask", "/no/such/mask.pgm"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/mask.pgm"));
}

#[test]
fn usage_errors() {
    let o = morphcons(&["train", "--seed", "1", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    let o = morphcons(&["train"]);
    assert_eq!(o.status.code(), Some(2), "--seed is mandatory");
    let o = morphcons(&["synth", "--n", "3"]);
    assert_eq!(o.status.code(), Some(2), "--seed is mandatory");
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"alpah": 0.2}"#).unwrap();
    let o = morphcons(&["train", "--seed", "1", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));

    let o = morphcons(&["train", "--seed", "1", "--patience", "0", "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("patience"));
}

#[test]
fn help_documents_defaults() {
    let o = morphcons(&["train", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["9.2e-4", "1e-4", "0.9", "0.17", "0.5", "0.001", "--seed", "--config"] {
        assert!(text.contains(needle), "{needle} missing from:\n{text}");
    }
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = morphcons(&["synth", "--seed", "4", "--n", "10", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().next().unwrap(), "filename,mask,label,kind,seed");
    assert_eq!(manifest.lines().count(), 11);
    let run: Value = serde_json::from_str(&fs::read_to_string(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(run["subcommand"], "synth");
    assert_eq!(run["seed"], 4);
    assert_eq!(run["tool_version"], env!("CARGO_PKG_VERSION"));

    let again = dir.path().join("again");
    morphcons(&["synth", "--seed", "4", "--n", "10", "--out", path(&again)]);
    for f in ["manifest.csv", "s0000_image.pgm", "s0009_mask.pgm"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_compare_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY_CONFIG).unwrap();

    let run = |out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_morphcons"))
            .args(["train", "--seed", "1", "--config", path(&cfg), "--out", out])
            .env("MORPHCONS_OUTPUT_ROOT", dir.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(fs::read(a.join("history.csv")).unwrap(), fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("checkpoint.mckp")).unwrap(), fs::read(b.join("checkpoint.mckp")).unwrap());
    assert!(a.join("run_manifest.json").exists());

    let eval = |out: &Path| {
        let o = morphcons(&[
            "eval",
            "--checkpoint",
            path(&a.join("checkpoint.mckp")),
            "--config",
            path(&cfg),
            "--out",
            path(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout_json(&o)
    };
    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let r1 = eval(&e1);
    let r2 = eval(&e2);
    assert_eq!(r1, r2);
    let csv1 = e1.join("per_image.csv");
    assert_eq!(fs::read(&csv1).unwrap(), fs::read(e2.join("per_image.csv")).unwrap());

    let o = morphcons(&["compare", path(&csv1), path(&e2.join("per_image.csv"))]);
    assert_eq!(o.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&o.stderr).contains("insufficient data"));
}
