//! Differentiable morphology features computed from a soft mask.
//!
//! Four scalars describe a lesion candidate:
//!
//! * area `A = mean(ŷ)`
//! * roughness `R = P / sqrt(Σŷ + ε)`, with `P = Σ E` the summed Sobel edge magnitude
//! * compactness `C = clip(4π Σŷ / (P² + ε), 0, 1)`
//! * texture `T`, the mask-weighted variance of the raw grayscale image
//!
//! `R` and `T` are rescaled to `[0, 1]` with running min/max statistics
//! ([`EmaNormalizer`]). Those statistics are constants as far as gradients are
//! concerned.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sobel, sobel_adjoint, GrayImage, Grid, SobelResponse, SoftMask};

/// The single stability constant used in every feature denominator.
pub const FEATURE_EPS: f64 = 1e-6;

/// Momentum of the running min/max statistics.
pub const EMA_MOMENTUM: f64 = 0.99;

/// Whether running statistics may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Un-normalized feature values of one mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawFeatures {
    #[serde(rename = "A")]
    pub area: f64,
    #[serde(rename = "P")]
    pub perimeter: f64,
    #[serde(rename = "R_raw")]
    pub roughness: f64,
    #[serde(rename = "C")]
    pub compactness: f64,
    #[serde(rename = "T_raw")]
    pub texture: f64,
}

/// Upstream gradients on the raw features.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RawFeatureGrads {
    pub area: f64,
    pub roughness: f64,
    pub compactness: f64,
    pub texture: f64,
}

/// Forward pass over one mask, keeping what the backward pass needs.
#[derive(Debug, Clone)]
pub struct MorphologyPass {
    mask: Grid,
    sobel: SobelResponse,
    mask_sum: f64,
    compactness_unclipped: f64,
    texture_mean: Option<f64>,
    raw: RawFeatures,
}

impl MorphologyPass {
    /// Computes all four raw features. Without an image the texture is 0 and
    /// receives no gradient.
    pub fn new(mask: &SoftMask, image: Option<&GrayImage>) -> Result<Self> {
        let grid = mask.grid();
        if let Some(img) = image {
            grid.check_same_shape(img.grid(), "texture image")?;
        }
        let sobel = sobel(grid)?;
        let mask_sum = grid.sum();
        let perimeter = sobel.magnitude.grid().sum();
        let area = mask_sum / grid.len() as f64;
        let roughness = perimeter / (mask_sum + FEATURE_EPS).sqrt();
        let compactness_unclipped = 4.0 * PI * mask_sum / (perimeter * perimeter + FEATURE_EPS);
        let compactness = compactness_unclipped.clamp(0.0, 1.0);

        let (texture_mean, texture) = match image {
            Some(img) => {
                let (mu, var) = weighted_moments(grid.as_slice(), img.grid().as_slice(), mask_sum);
                (Some(mu), var)
            }
            None => (None, 0.0),
        };

        Ok(Self {
            mask: grid.clone(),
            sobel,
            mask_sum,
            compactness_unclipped,
            texture_mean,
            raw: RawFeatures {
                area,
                perimeter,
                roughness,
                compactness,
                texture,
            },
        })
    }

    pub fn raw(&self) -> RawFeatures {
        self.raw
    }

    pub fn mask_sum(&self) -> f64 {
        self.mask_sum
    }

    pub fn compactness_unclipped(&self) -> f64 {
        self.compactness_unclipped
    }

    /// Gradient of `Σ_k grads_k · feature_k` with respect to the mask values.
    pub fn backward(&self, image: Option<&GrayImage>, grads: RawFeatureGrads) -> Result<Grid> {
        let n = self.mask.len() as f64;
        let s = self.mask_sum;
        let p = self.raw.perimeter;
        let root = (s + FEATURE_EPS).sqrt();

        // Accumulate scalar sensitivities to Σŷ and P first.
        let mut d_sum = grads.area / n;
        let mut d_perimeter = 0.0;

        d_perimeter += grads.roughness / root;
        d_sum += grads.roughness * (-0.5 * p / (root * root * root));

        // Subgradient of the clip: 1 strictly inside (0, 1), 0 elsewhere.
        let c = self.compactness_unclipped;
        if grads.compactness != 0.0 && c > 0.0 && c < 1.0 {
            let denom = p * p + FEATURE_EPS;
            d_sum += grads.compactness * 4.0 * PI / denom;
            d_perimeter += grads.compactness * (-8.0 * PI * s * p / (denom * denom));
        }

        let mut out = if d_perimeter != 0.0 {
            let mag = self.sobel.magnitude.grid();
            let gx = Grid::new(
                mag.height(),
                mag.width(),
                self.sobel
                    .gx
                    .as_slice()
                    .iter()
                    .zip(mag.as_slice())
                    .map(|(x, e)| d_perimeter * x / e)
                    .collect(),
            )?;
            let gy = Grid::new(
                mag.height(),
                mag.width(),
                self.sobel
                    .gy
                    .as_slice()
                    .iter()
                    .zip(mag.as_slice())
                    .map(|(y, e)| d_perimeter * y / e)
                    .collect(),
            )?;
            sobel_adjoint(&gx, &gy)
        } else {
            Grid::filled(self.mask.height(), self.mask.width(), 0.0)
        };
        for v in out.as_mut_slice() {
            *v += d_sum;
        }

        if grads.texture != 0.0 {
            let (img, mu) = match (image, self.texture_mean) {
                (Some(img), Some(mu)) => (img, mu),
                _ => {
                    return Err(Error::UnsupportedGraph(
                        "texture gradient requested without the grayscale image".into(),
                    ))
                }
            };
            let d = s + FEATURE_EPS;
            let t = self.raw.texture;
            // Σŷ(g-μ) = με exactly, so the μ-path contributes -2με(g_k-μ)/D².
            for (o, &g) in out.as_mut_slice().iter_mut().zip(img.grid().as_slice()) {
                let dev = g - mu;
                let dk = (dev * dev - 2.0 * mu * FEATURE_EPS * dev / d) / d - t / d;
                *o += grads.texture * dk;
            }
        }
        Ok(out)
    }
}

fn weighted_moments(mask: &[f64], image: &[f64], mask_sum: f64) -> (f64, f64) {
    let d = mask_sum + FEATURE_EPS;
    let mu = mask.iter().zip(image).map(|(y, g)| y * g).sum::<f64>() / d;
    let var = mask
        .iter()
        .zip(image)
        .map(|(y, g)| y * (g - mu) * (g - mu))
        .sum::<f64>()
        / d;
    (mu, var)
}

pub fn area(mask: &SoftMask) -> f64 {
    mask.grid().mean()
}

/// Returns `(P, R_raw)`.
pub fn roughness_raw(mask: &SoftMask) -> Result<(f64, f64)> {
    let r = MorphologyPass::new(mask, None)?.raw();
    Ok((r.perimeter, r.roughness))
}

pub fn compactness(mask: &SoftMask) -> Result<f64> {
    Ok(MorphologyPass::new(mask, None)?.raw().compactness)
}

/// Raw mask-weighted variance of `image`.
pub fn texture(mask: &SoftMask, image: &GrayImage) -> Result<f64> {
    mask.grid().check_same_shape(image.grid(), "texture image")?;
    let sum = mask.grid().sum();
    Ok(weighted_moments(mask.as_slice(), image.grid().as_slice(), sum).1)
}

/// Running min/max statistics mapping a raw feature onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaNormalizer {
    pub running_min: f64,
    pub running_max: f64,
    pub momentum: f64,
    pub initialized: bool,
}

impl Default for EmaNormalizer {
    fn default() -> Self {
        Self::new(EMA_MOMENTUM)
    }
}

impl EmaNormalizer {
    pub fn new(momentum: f64) -> Self {
        Self {
            running_min: 0.0,
            running_max: 0.0,
            momentum,
            initialized: false,
        }
    }

    /// Already-initialized statistics, mostly for tests and checkpoint loading.
    pub fn with_stats(running_min: f64, running_max: f64) -> Self {
        Self {
            running_min,
            running_max,
            momentum: EMA_MOMENTUM,
            initialized: true,
        }
    }

    /// Folds one batch into the statistics. The first batch seeds them directly.
    pub fn update(&mut self, batch_values: &[f64]) -> Result<()> {
        if batch_values.is_empty() {
            return Err(Error::invalid("normalizer update with an empty batch"));
        }
        if batch_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("normalizer update with non-finite value"));
        }
        let lo = batch_values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = batch_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if self.initialized {
            let m = self.momentum;
            self.running_min = m * self.running_min + (1.0 - m) * lo;
            self.running_max = m * self.running_max + (1.0 - m) * hi;
        } else {
            self.running_min = lo;
            self.running_max = hi;
            self.initialized = true;
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.running_max - self.running_min + FEATURE_EPS
    }

    pub fn apply(&self, value: f64) -> Result<f64> {
        if !self.initialized {
            return Err(Error::UninitializedNormalizer);
        }
        Ok(((value - self.running_min) / self.scale()).clamp(0.0, 1.0))
    }

    /// Derivative of [`apply`](Self::apply) with the statistics held fixed.
    pub fn apply_derivative(&self, value: f64) -> Result<f64> {
        if !self.initialized {
            return Err(Error::UninitializedNormalizer);
        }
        let z = (value - self.running_min) / self.scale();
        Ok(if z > 0.0 && z < 1.0 { 1.0 / self.scale() } else { 0.0 })
    }
}

/// One normalizer for roughness and one for texture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizers {
    pub roughness: EmaNormalizer,
    pub texture: EmaNormalizer,
}

impl FeatureNormalizers {
    pub fn is_initialized(&self) -> bool {
        self.roughness.initialized && self.texture.initialized
    }

    /// Updates both statistics from the batch's raw values.
    pub fn observe(&mut self, batch: &[RawFeatures]) -> Result<()> {
        let r: Vec<f64> = batch.iter().map(|f| f.roughness).collect();
        let t: Vec<f64> = batch.iter().map(|f| f.texture).collect();
        self.roughness.update(&r)?;
        self.texture.update(&t)
    }

    pub fn normalize(&self, raw: &RawFeatures) -> Result<FeatureVector> {
        Ok(FeatureVector {
            area: raw.area,
            roughness: self.roughness.apply(raw.roughness)?,
            compactness: raw.compactness,
            texture: self.texture.apply(raw.texture)?,
            perimeter: raw.perimeter,
        })
    }
}

/// Normalized features; every field but `perimeter` lies in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub area: f64,
    pub roughness: f64,
    pub compactness: f64,
    pub texture: f64,
    pub perimeter: f64,
}

impl FeatureVector {
    /// Prior input `[A, R, 1 - C, T]`, oriented so larger means more suspicious.
    pub fn prior_input(&self) -> [f64; 4] {
        [
            self.area,
            self.roughness,
            1.0 - self.compactness,
            self.texture,
        ]
    }
}

/// Computes the normalized feature vector of a single sample. In training mode
/// the sample's raw values update the normalizers first.
pub fn feature_vector(
    mask: &SoftMask,
    image: &GrayImage,
    norms: &mut FeatureNormalizers,
    mode: Mode,
) -> Result<FeatureVector> {
    let raw = MorphologyPass::new(mask, Some(image))?.raw();
    if mode == Mode::Train {
        norms.observe(std::slice::from_ref(&raw))?;
    }
    norms.normalize(&raw)
}
