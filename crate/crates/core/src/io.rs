//! Image files, dataset manifests and the labelled-sample type the trainer
//! consumes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid};
use crate::loss::SampleTargets;
use crate::synth::SyntheticSample;

/// An image with its supervision, ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: GrayImage,
    pub targets: SampleTargets,
}

impl Sample {
    pub fn from_synthetic(name: impl Into<String>, s: &SyntheticSample) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            image: s.image.clone(),
            targets: SampleTargets::new(s.mask_gt.clone(), s.label)?,
        })
    }
}

/// Reads an 8-bit grayscale PGM (P5) or PNG; pixel `k` becomes `k / 255`.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let luma = match img {
        image::DynamicImage::ImageLuma8(l) => l,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = luma.dimensions();
    GrayImage::from_u8(h as usize, w as usize, luma.as_raw())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Reads a mask image and binarizes it at mid-gray.
pub fn read_binary_mask(path: &Path) -> Result<Grid> {
    let g = read_gray(path)?;
    Ok(g.grid().map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Writes a binary PGM (P5).
pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(pixels).map_err(|e| Error::io(path, e))
}

pub fn write_gray_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let (h, w) = image.grid().shape();
    write_pgm(path, h, w, &image.to_u8())
}

pub fn write_mask_pgm(path: &Path, mask: &Grid) -> Result<()> {
    let px: Vec<u8> = mask
        .as_slice()
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    write_pgm(path, mask.height(), mask.width(), &px)
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub filename: String,
    pub mask: String,
    pub label: u8,
    pub kind: String,
    pub seed: u64,
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ManifestRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

/// Loads every sample listed in a manifest.
pub fn load_dataset(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let image = read_gray(&base.join(&row.filename))?;
            let mask = read_binary_mask(&base.join(&row.mask))?;
            if mask.shape() != image.grid().shape() {
                return Err(Error::format(
                    base.join(&row.mask),
                    "mask and image differ in size",
                ));
            }
            Ok(Sample {
                name: row.filename,
                image,
                targets: SampleTargets::new(mask, row.label)?,
            })
        })
        .collect()
}

/// Writes samples as `<stem>_image.pgm` / `<stem>_mask.pgm` pairs plus
/// `manifest.csv` in `dir`. Returns the manifest path.
pub fn write_synthetic_dataset(dir: &Path, prefix: &str, samples: &[SyntheticSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image = format!("{prefix}{i:04}_image.pgm");
        let mask = format!("{prefix}{i:04}_mask.pgm");
        write_gray_pgm(&dir.join(&image), &s.image)?;
        write_mask_pgm(&dir.join(&mask), &s.mask_gt)?;
        rows.push(ManifestRow {
            filename: image,
            mask,
            label: s.label,
            kind: s.spec.kind.name().to_string(),
            seed: s.spec.seed,
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

/// Reads one numeric column of a headed CSV, with the `name` column when
/// present (empty strings otherwise).
pub fn read_csv_column(path: &Path, column: &str) -> Result<(Vec<String>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| Error::format(path, format!("no column `{column}`")))?;
    let name_idx = headers.iter().position(|h| h == "name");
    let (mut names, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let v: f64 = rec[idx].trim().parse().map_err(|_| {
            Error::format(path, format!("row {}: `{}` is not a number", line + 1, &rec[idx]))
        })?;
        values.push(v);
        names.push(name_idx.map(|i| rec[i].to_string()).unwrap_or_default());
    }
    Ok((names, values))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}
