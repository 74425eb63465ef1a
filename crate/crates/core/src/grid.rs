//! Dense row-major 2-D grids and the pixel kernels shared by the feature code.

use crate::error::{Error, Result};

/// Stabilizer inside the edge magnitude square root. Keeps `E` smooth where
/// both Sobel responses vanish.
pub const EDGE_EPS: f64 = 1e-12;

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// A plain `height x width` array of 64-bit values stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "grid data has {} values, expected {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Mirror columns (left-right flip).
    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.height, self.width, |r, c| self.get(r, self.width - 1 - c))
    }

    pub(crate) fn check_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Raw grayscale intensities `g` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage(Grid);

impl GrayImage {
    pub fn new(grid: Grid) -> Result<Self> {
        check_min_size(&grid)?;
        if let Some(v) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "grayscale value {v} outside [0, 1]"
            )));
        }
        Ok(Self(grid))
    }

    /// Maps 8-bit pixel values `k` to `k / 255`.
    pub fn from_u8(height: usize, width: usize, pixels: &[u8]) -> Result<Self> {
        let data = pixels.iter().map(|&k| f64::from(k) / 255.0).collect();
        Self::new(Grid::new(height, width, data)?)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.0
            .as_slice()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }
}

/// Unbounded segmentation logits `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid(Grid);

impl LogitGrid {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logit grid contains non-finite values"));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }
}

/// Soft segmentation mask `ŷ = σ(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask(Grid);

impl SoftMask {
    /// Wraps probabilities that are already in `[0, 1]`.
    pub fn from_probabilities(grid: Grid) -> Result<Self> {
        if let Some(v) = grid.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Non-negative Sobel edge magnitude `E`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(Grid);

impl EdgeMap {
    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

fn check_min_size(grid: &Grid) -> Result<()> {
    if grid.height() < 3 || grid.width() < 3 {
        return Err(Error::invalid(format!(
            "grid {}x{} is smaller than the 3x3 Sobel neighborhood",
            grid.height(),
            grid.width()
        )));
    }
    Ok(())
}

/// Logistic function, split on sign so neither branch overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_grid(logits: &LogitGrid) -> Result<SoftMask> {
    let g = logits.grid();
    if g.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    Ok(SoftMask(g.map(sigmoid)))
}

/// Both Sobel responses together with the edge magnitude they produce.
#[derive(Debug, Clone)]
pub struct SobelResponse {
    pub gx: Grid,
    pub gy: Grid,
    pub magnitude: EdgeMap,
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Sobel correlation with replicate padding. Works on any grid of at least 3x3.
pub fn sobel(grid: &Grid) -> Result<SobelResponse> {
    check_min_size(grid)?;
    let (h, w) = grid.shape();
    let mut gx = Grid::filled(h, w, 0.0);
    let mut gy = Grid::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (a, (kx_row, ky_row)) in SOBEL_X.iter().zip(SOBEL_Y.iter()).enumerate() {
                let rr = clamp_index(r as isize + a as isize - 1, h);
                for b in 0..3 {
                    let cc = clamp_index(c as isize + b as isize - 1, w);
                    let v = grid.get(rr, cc);
                    sx += kx_row[b] * v;
                    sy += ky_row[b] * v;
                }
            }
            gx.set(r, c, sx);
            gy.set(r, c, sy);
        }
    }
    let magnitude = Grid {
        height: h,
        width: w,
        data: gx
            .as_slice()
            .iter()
            .zip(gy.as_slice())
            .map(|(x, y)| (x * x + y * y + EDGE_EPS).sqrt())
            .collect(),
    };
    Ok(SobelResponse {
        gx,
        gy,
        magnitude: EdgeMap(magnitude),
    })
}

/// Transpose of [`sobel`]'s linear part: scatters upstream gradients on
/// `gx` and `gy` back onto the input pixels, honoring the clamped border.
pub fn sobel_adjoint(grad_gx: &Grid, grad_gy: &Grid) -> Grid {
    let (h, w) = grad_gx.shape();
    let mut out = Grid::filled(h, w, 0.0);
    for r in 0..h {
        for c in 0..w {
            let dx = grad_gx.get(r, c);
            let dy = grad_gy.get(r, c);
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            for a in 0..3 {
                let rr = clamp_index(r as isize + a as isize - 1, h);
                for b in 0..3 {
                    let cc = clamp_index(c as isize + b as isize - 1, w);
                    let k = rr * w + cc;
                    out.data[k] += SOBEL_X[a][b] * dx + SOBEL_Y[a][b] * dy;
                }
            }
        }
    }
    out
}

pub fn sobel_edge_magnitude(mask: &SoftMask) -> Result<EdgeMap> {
    Ok(sobel(mask.grid())?.magnitude)
}

pub fn masked_sum(mask: &SoftMask) -> f64 {
    mask.grid().sum()
}

pub fn masked_mean(mask: &SoftMask) -> f64 {
    mask.grid().mean()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(h: usize, w: usize, data: Vec<f64>) -> LogitGrid {
        LogitGrid::new(Grid::new(h, w, data).unwrap()).unwrap()
    }

    /// Independent 3x3 correlation with explicit replicate padding.
    fn convolve_oracle(g: &Grid, k: &[[f64; 3]; 3]) -> Grid {
        let (h, w) = g.shape();
        let mut padded = vec![vec![0.0; w + 2]; h + 2];
        for (r, row) in padded.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let rr = (r as isize - 1).clamp(0, h as isize - 1) as usize;
                let cc = (c as isize - 1).clamp(0, w as isize - 1) as usize;
                *v = g.get(rr, cc);
            }
        }
        Grid::from_fn(h, w, |r, c| {
            let mut s = 0.0;
            for (a, krow) in k.iter().enumerate() {
                for (b, kv) in krow.iter().enumerate() {
                    s += kv * padded[r + a][c + b];
                }
            }
            s
        })
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let m = sigmoid_grid(&logits(3, 3, vec![0.0; 9])).unwrap();
        assert!(m.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn sigmoid_saturates() {
        let mut data = vec![20.0; 9];
        data[4] = 0.0;
        data[0] = -20.0;
        let m = sigmoid_grid(&logits(3, 3, data)).unwrap();
        assert_eq!(m.as_slice()[4], 0.5);
        assert!((m.as_slice()[1] - 1.0).abs() < 1e-8);
        assert!(m.as_slice()[0].abs() < 1e-8);
    }

    #[test]
    fn sigmoid_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..64).map(|_| rng.random_range(-6.0..6.0)).collect();
        let m = sigmoid_grid(&logits(8, 8, data.clone())).unwrap();
        for (s, y) in data.iter().zip(m.as_slice()) {
            let oracle = 1.0 / (1.0 + (-s).exp());
            assert!((oracle - y).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_extreme_logits_stay_finite() {
        let m = sigmoid_grid(&logits(3, 3, vec![-1e3, 1e3, 0.0, -700.0, 700.0, 1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert!(m.as_slice().iter().all(|v| v.is_finite()));
        assert_eq!(m.as_slice()[0], 0.0);
        assert_eq!(m.as_slice()[1], 1.0);
    }

    #[test]
    fn non_finite_logits_rejected() {
        let g = Grid::new(3, 3, vec![f64::NAN; 9]).unwrap();
        assert!(matches!(LogitGrid::new(g), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_mask_has_floor_edge_value() {
        let m = SoftMask::from_probabilities(Grid::filled(6, 7, 0.7)).unwrap();
        let e = sobel_edge_magnitude(&m).unwrap();
        for &v in e.as_slice() {
            assert!((v - EDGE_EPS.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical_step_matches_convolution_oracle() {
        let g = Grid::from_fn(8, 8, |_, c| if c < 4 { 0.0 } else { 1.0 });
        let resp = sobel(&g).unwrap();
        let ox = convolve_oracle(&g, &SOBEL_X);
        let oy = convolve_oracle(&g, &SOBEL_Y);
        assert_eq!(resp.gx, ox);
        assert_eq!(resp.gy, oy);
        for r in 0..8 {
            assert_eq!(resp.gx.get(r, 3), 4.0);
            assert_eq!(resp.gx.get(r, 4), 4.0);
            assert_eq!(resp.gy.get(r, 3), 0.0);
            assert_eq!(resp.gx.get(r, 0), 0.0);
            assert_eq!(resp.gx.get(r, 7), 0.0);
        }
    }

    #[test]
    fn single_bright_pixel_hand_convolved() {
        let g = Grid::from_fn(5, 5, |r, c| if (r, c) == (2, 2) { 1.0 } else { 0.0 });
        let resp = sobel(&g).unwrap();
        // Correlation with a delta reproduces the flipped kernel around the pixel.
        let expected_gx = [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]];
        let expected_gy = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];
        for r in 0..5 {
            for c in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&c);
                let (ex, ey) = if inside {
                    (expected_gx[r - 1][c - 1], expected_gy[r - 1][c - 1])
                } else {
                    (0.0, 0.0)
                };
                assert_eq!(resp.gx.get(r, c), ex, "gx at {r},{c}");
                assert_eq!(resp.gy.get(r, c), ey, "gy at {r},{c}");
                let mag = (ex * ex + ey * ey + EDGE_EPS).sqrt();
                assert_eq!(resp.magnitude.grid().get(r, c), mag);
            }
        }
    }

    #[test]
    fn too_small_grid_rejected() {
        let m = SoftMask::from_probabilities(Grid::filled(2, 5, 0.5)).unwrap();
        assert!(matches!(sobel_edge_magnitude(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn sums_and_means() {
        let ones = SoftMask::from_probabilities(Grid::filled(4, 4, 1.0)).unwrap();
        assert_eq!(masked_sum(&ones), 16.0);
        assert_eq!(masked_mean(&ones), 1.0);
        let zeros = SoftMask::from_probabilities(Grid::filled(4, 4, 0.0)).unwrap();
        assert_eq!(masked_sum(&zeros), 0.0);
        assert_eq!(masked_mean(&zeros), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..35).map(|_| rng.random::<f64>()).collect();
        let m = SoftMask::from_probabilities(Grid::new(5, 7, data.clone()).unwrap()).unwrap();
        let mut acc = 0.0;
        for v in &data {
            acc += v;
        }
        assert!((masked_sum(&m) - acc).abs() < 1e-12);
        assert!((masked_mean(&m) - acc / 35.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_is_transpose() {
        // <sobel(x), y> == <x, sobel^T(y)> for both responses.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 5);
        let x = Grid::from_fn(h, w, |_, _| rng.random::<f64>());
        let yx = Grid::from_fn(h, w, |_, _| rng.random::<f64>() - 0.5);
        let yy = Grid::from_fn(h, w, |_, _| rng.random::<f64>() - 0.5);
        let resp = sobel(&x).unwrap();
        let lhs: f64 = resp.gx.as_slice().iter().zip(yx.as_slice()).map(|(a, b)| a * b).sum::<f64>()
            + resp.gy.as_slice().iter().zip(yy.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let adj = sobel_adjoint(&yx, &yy);
        let rhs: f64 = x.as_slice().iter().zip(adj.as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sigmoid_is_bounded_and_monotone(a in -30.0f64..30.0, d in 1e-3f64..5.0) {
            let lo = sigmoid(a);
            let hi = sigmoid(a + d);
            prop_assert!(lo > 0.0 && lo < 1.0);
            prop_assert!(hi > lo);
        }

        // Beyond |s| ≈ 36 the result rounds to 0 or 1 in f64.
        #[test]
        fn sigmoid_is_closed_bounded_everywhere(a in -1e3f64..1e3, d in 0.0f64..5.0) {
            let lo = sigmoid(a);
            prop_assert!((0.0..=1.0).contains(&lo));
            prop_assert!(sigmoid(a + d) >= lo);
        }

        #[test]
        fn flip_commutes_with_edge_map(data in proptest::collection::vec(0.0f64..1.0, 30)) {
            let g = Grid::new(5, 6, data).unwrap();
            let e = sobel(&g).unwrap().magnitude;
            let ef = sobel(&g.flip_horizontal()).unwrap().magnitude;
            let flipped = e.grid().flip_horizontal();
            for (a, b) in flipped.as_slice().iter().zip(ef.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn mean_of_unit_values_in_unit_interval(data in proptest::collection::vec(0.0f64..=1.0, 16)) {
            let m = SoftMask::from_probabilities(Grid::new(4, 4, data).unwrap()).unwrap();
            let mean = masked_mean(&m);
            prop_assert!((0.0..=1.0).contains(&mean));
        }
    }
}
