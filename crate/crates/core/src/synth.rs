//! Procedural ultrasound-like lesions.
//!
//! Benign lesions are smooth ellipses with a homogeneous interior; malignant
//! ones are spiculated stars with a heterogeneous interior; tumor-free images
//! contain background only. The generator encodes the morphology/label
//! relationship and nothing else: there is no speckle or attenuation model.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid, SoftMask};

/// Minimum distance in pixels between the lesion's bounding circle and the
/// image border.
pub const MARGIN: f64 = 2.0;

const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionKind {
    BenignEllipse,
    MalignantStar,
    NoTumor,
}

impl LesionKind {
    pub fn label(self) -> u8 {
        u8::from(self == LesionKind::MalignantStar)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BenignEllipse => "benign_ellipse",
            Self::MalignantStar => "malignant_star",
            Self::NoTumor => "no_tumor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "benign_ellipse" => Some(Self::BenignEllipse),
            "malignant_star" => Some(Self::MalignantStar),
            "no_tumor" => Some(Self::NoTumor),
            _ => None,
        }
    }
}

/// Full description of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub kind: LesionKind,
    /// `(height, width)` of the image.
    pub size: (usize, usize),
    /// `(row, col)` in continuous pixel coordinates.
    pub center: (f64, f64),
    /// Semi-axes for ellipses; stars use `radii.0` as the outer radius and
    /// scale the column axis by `radii.1 / radii.0`.
    pub radii: (f64, f64),
    pub rotation: f64,
    pub spike_count: u32,
    pub spike_depth: f64,
    pub interior_noise_sd: f64,
    pub background_noise_sd: f64,
    pub lesion_mean: f64,
    pub background_mean: f64,
    pub seed: u64,
}

impl LesionSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 3 || w < 3 {
            return Err(Error::InvalidSpec(format!("image {h}x{w} is too small")));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.lesion_mean) || !unit(self.background_mean) {
            return Err(Error::InvalidSpec("intensities must lie in [0, 1]".into()));
        }
        if !(self.interior_noise_sd >= 0.0) || !(self.background_noise_sd >= 0.0) {
            return Err(Error::InvalidSpec("noise levels must be non-negative".into()));
        }
        if self.kind == LesionKind::NoTumor {
            return Ok(());
        }
        if !(self.radii.0 > 0.0 && self.radii.1 > 0.0) {
            return Err(Error::InvalidSpec("radii must be positive".into()));
        }
        if self.kind == LesionKind::MalignantStar {
            if self.spike_count < 5 {
                return Err(Error::InvalidSpec("stars need at least 5 spikes".into()));
            }
            if !(self.spike_depth > 0.0 && self.spike_depth < 1.0) {
                return Err(Error::InvalidSpec("spike depth must lie in (0, 1)".into()));
            }
        }
        let reach = self.radii.0.max(self.radii.1);
        let (cy, cx) = self.center;
        if cy - reach < MARGIN
            || cx - reach < MARGIN
            || cy + reach > h as f64 - MARGIN
            || cx + reach > w as f64 - MARGIN
        {
            return Err(Error::InvalidSpec(format!(
                "lesion of reach {reach:.2} at ({cy:.2}, {cx:.2}) leaves less than a {MARGIN}-pixel margin in {h}x{w}"
            )));
        }
        Ok(())
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.rotation.sin_cos();
        let a = dx * c + dy * s;
        let b = -dx * s + dy * c;
        let (r1, r2) = self.radii;
        match self.kind {
            LesionKind::NoTumor => false,
            LesionKind::BenignEllipse => (a / r1).powi(2) + (b / r2).powi(2) <= 1.0,
            LesionKind::MalignantStar => {
                let a = a * r1 / r2;
                let rho = a.hypot(b);
                let theta = b.atan2(a);
                let k = f64::from(self.spike_count);
                rho <= r1 * (1.0 - self.spike_depth * (k * theta / 2.0).sin().abs())
            }
        }
    }

    /// Fraction of each pixel covered by the shape (4x4 supersampling).
    pub fn coverage(&self) -> Grid {
        let (h, w) = self.size;
        let mut g = Grid::filled(h, w, 0.0);
        if self.kind == LesionKind::NoTumor {
            return g;
        }
        let reach = self.radii.0.max(self.radii.1) + 1.0;
        let r0 = (self.center.0 - reach).floor().max(0.0) as usize;
        let r1 = ((self.center.0 + reach).ceil() as usize).min(h);
        let c0 = (self.center.1 - reach).floor().max(0.0) as usize;
        let c1 = ((self.center.1 + reach).ceil() as usize).min(w);
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for r in r0..r1 {
            for c in c0..c1 {
                let mut hits = 0usize;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let y = r as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = c as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64;
                        if self.contains(y, x) {
                            hits += 1;
                        }
                    }
                }
                g.set(r, c, hits as f64 / n);
            }
        }
        g
    }
}

/// Radius of a star whose area equals a disc of `disc_radius`.
///
impl LesionSpec {
    /// Noise-free disc centered in a `size`x`size` image.
    pub fn centered_disc(size: usize, radius: f64) -> Self {
        let c = size as f64 / 2.0;
        Self {
            kind: LesionKind::BenignEllipse,
            size: (size, size),
            center: (c, c),
            radii: (radius, radius),
            rotation: 0.0,
            spike_count: 0,
            spike_depth: 0.0,
            interior_noise_sd: 0.0,
            background_noise_sd: 0.0,
            lesion_mean: 0.2,
            background_mean: 0.55,
            seed: 0,
        }
    }
}

/// A centered disc and an equal-area star rendered with `profile`'s
/// intensities and per-kind noise, sharing one seed.
pub fn disc_star_pair(
    profile: &GeneratorProfile,
    radius: f64,
    spike_count: u32,
    spike_depth: f64,
    seed: u64,
) -> Result<(SyntheticSample, SyntheticSample)> {
    let disc = LesionSpec {
        size: (profile.size, profile.size),
        interior_noise_sd: profile.benign_interior_sd,
        background_noise_sd: profile.background_noise_sd,
        lesion_mean: profile.lesion_mean,
        background_mean: profile.background_mean,
        seed,
        ..LesionSpec::centered_disc(profile.size, radius)
    };
    let r = equal_area_star_radius(radius, spike_depth);
    let star = LesionSpec {
        kind: LesionKind::MalignantStar,
        radii: (r, r),
        spike_count,
        spike_depth,
        interior_noise_sd: profile.malignant_interior_sd,
        ..disc.clone()
    };
    Ok((generate(&disc)?, generate(&star)?))
}

/// Uses `½∫r(θ)²dθ` with mean `|sin| = 2/π` and mean `sin² = ½`.
pub fn equal_area_star_radius(disc_radius: f64, spike_depth: f64) -> f64 {
    let d = spike_depth;
    disc_radius / (1.0 - 4.0 * d / PI + d * d / 2.0).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: GrayImage,
    /// Binary ground truth: coverage thresholded at 0.5.
    pub mask_gt: Grid,
    /// Anti-aliased coverage used to paint the lesion.
    pub coverage: Grid,
    pub label: u8,
    pub spec: LesionSpec,
}

impl SyntheticSample {
    /// The anti-aliased coverage as a soft mask.
    pub fn soft_mask(&self) -> SoftMask {
        SoftMask::from_probabilities(self.coverage.clone()).expect("coverage lies in [0, 1]")
    }
}

pub fn generate(spec: &LesionSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let coverage = spec.coverage();
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(h * w);
    for &cov in coverage.as_slice() {
        let nb: f64 = rng.sample(StandardNormal);
        let ni: f64 = rng.sample(StandardNormal);
        let bg = spec.background_mean + spec.background_noise_sd * nb;
        let lesion = spec.lesion_mean + spec.interior_noise_sd * ni;
        pixels.push(((1.0 - cov) * bg + cov * lesion).clamp(0.0, 1.0));
    }
    let image = GrayImage::new(Grid::new(h, w, pixels)?)?;
    let mask_gt = coverage.map(|c| if c >= 0.5 { 1.0 } else { 0.0 });
    Ok(SyntheticSample {
        image,
        mask_gt,
        coverage,
        label: spec.kind.label(),
        spec: spec.clone(),
    })
}

/// Acquisition setting a dataset emulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Shifted,
}

/// Fixed offsets separating the shifted domain from the source domain.
pub const SHIFT_BACKGROUND_OFFSET: f64 = 0.15;
pub const SHIFT_NOISE_FACTOR: f64 = 1.5;
pub const SHIFT_LESION_SCALE: f64 = 0.8;

/// Per-kind parameters of the source domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorProfile {
    pub size: usize,
    pub background_mean: f64,
    pub lesion_mean: f64,
    pub background_noise_sd: f64,
    pub benign_interior_sd: f64,
    pub malignant_interior_sd: f64,
    /// Equal-area disc radius range.
    pub radius_range: (f64, f64),
    /// Minor/major axis ratio range for ellipses.
    pub aspect_range: (f64, f64),
    pub spike_range: (u32, u32),
    pub depth_range: (f64, f64),
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        Self {
            size: 64,
            background_mean: 0.55,
            lesion_mean: 0.2,
            background_noise_sd: 0.08,
            benign_interior_sd: 0.03,
            malignant_interior_sd: 0.12,
            radius_range: (7.0, 13.0),
            aspect_range: (0.7, 1.0),
            spike_range: (5, 9),
            depth_range: (0.25, 0.45),
        }
    }
}

impl GeneratorProfile {
    /// Draws one spec in the source domain, then maps it to `domain`.
    pub fn draw(&self, kind: LesionKind, domain: Domain, rng: &mut impl Rng) -> LesionSpec {
        let size = self.size;
        let r_eq = rng.random_range(self.radius_range.0..=self.radius_range.1);
        let aspect = rng.random_range(self.aspect_range.0..=self.aspect_range.1);
        let spikes = rng.random_range(self.spike_range.0..=self.spike_range.1);
        let depth = rng.random_range(self.depth_range.0..=self.depth_range.1);
        let rotation = rng.random_range(0.0..PI);
        let jitter_row: f64 = rng.random_range(-1.0..=1.0);
        let jitter_col: f64 = rng.random_range(-1.0..=1.0);
        let seed: u64 = rng.random();

        let (radii, interior) = match kind {
            LesionKind::BenignEllipse => {
                // Equal area with the disc: r1·r2 = r_eq².
                let major = r_eq / aspect.sqrt();
                ((major, major * aspect), self.benign_interior_sd)
            }
            LesionKind::MalignantStar => {
                let r = equal_area_star_radius(r_eq, depth);
                ((r, r), self.malignant_interior_sd)
            }
            LesionKind::NoTumor => ((0.0, 0.0), 0.0),
        };
        let mut spec = LesionSpec {
            kind,
            size: (size, size),
            center: (0.0, 0.0),
            radii,
            rotation,
            spike_count: spikes,
            spike_depth: depth,
            interior_noise_sd: interior,
            background_noise_sd: self.background_noise_sd,
            lesion_mean: self.lesion_mean,
            background_mean: self.background_mean,
            seed,
        };
        if domain == Domain::Shifted {
            spec.background_mean = (spec.background_mean + SHIFT_BACKGROUND_OFFSET).min(1.0);
            spec.background_noise_sd *= SHIFT_NOISE_FACTOR;
            spec.interior_noise_sd *= SHIFT_NOISE_FACTOR;
            spec.radii = (spec.radii.0 * SHIFT_LESION_SCALE, spec.radii.1 * SHIFT_LESION_SCALE);
        }
        // Place the center so the source-domain lesion fits; the shifted one
        // is smaller and therefore fits too.
        let source_reach = match domain {
            Domain::Source => spec.radii.0.max(spec.radii.1),
            Domain::Shifted => spec.radii.0.max(spec.radii.1) / SHIFT_LESION_SCALE,
        };
        let half = size as f64 / 2.0;
        let room = (half - MARGIN - source_reach - 0.5).max(0.0);
        spec.center = (half + jitter_row * room, half + jitter_col * room);
        spec
    }
}

/// Splits `n` into per-class counts by largest remainder.
pub fn allocate(n: usize, mix: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..mix.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Class proportions `(benign, malignant, no_tumor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub benign: f64,
    pub malignant: f64,
    pub no_tumor: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            benign: 0.5,
            malignant: 0.4,
            no_tumor: 0.1,
        }
    }
}

/// Deterministic dataset of `n` samples. Kinds are allocated exactly from
/// `mix` and then shuffled; the same seed gives the same lesions in both
/// domains, differing only by the fixed shift.
pub fn make_dataset(
    n: usize,
    mix: ClassMix,
    domain: Domain,
    seed: u64,
    profile: &GeneratorProfile,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let p = [mix.benign, mix.malignant, mix.no_tumor];
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "class proportions must be non-negative and sum to 1, got {p:?}"
        )));
    }
    let counts = allocate(n, &p);
    let kinds_in_order = [
        LesionKind::BenignEllipse,
        LesionKind::MalignantStar,
        LesionKind::NoTumor,
    ];
    let mut kinds: Vec<LesionKind> = kinds_in_order
        .iter()
        .zip(&counts)
        .flat_map(|(&k, &c)| std::iter::repeat_n(k, c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..kinds.len()).rev() {
        let j = rng.random_range(0..=i);
        kinds.swap(i, j);
    }
    kinds
        .into_iter()
        .map(|k| generate(&profile.draw(k, domain, &mut rng)))
        .collect()
}
