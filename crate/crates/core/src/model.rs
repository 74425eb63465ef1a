//! A small convolutional encoder-decoder with a segmentation head and a
//! malignancy head sharing one encoder.
//!
//! ```text
//! x ─conv─relu─> a1 ─pool─> p1 ─conv─relu─> a2 ─pool─> p2 ─conv─relu─> a3 ─pool─> p3 ─gap─linear─> m
//!                 │                           │                           │          │
//!                 └──────────────(+)          └──────────(+)              └──(+)<─up─┘
//!                                 │                       │                   │
//!        s <─1x1─ d1 <─relu─conv─ u1 <─up─ d2 <─relu─conv─ u2 <─up─ d3 <─relu─conv─ u3
//! ```
//!
//! Skips are additive. All parameters live in one flat vector so the
//! optimizer, the checkpoint format and the gradient checker can treat the
//! network uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GrayImage, Grid, LogitGrid};

/// Channel-major `(c, h, w)` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    fn plane(&self, ch: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[ch * n..(ch + 1) * n]
    }

    #[inline]
    fn plane_mut(&mut self, ch: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[ch * n..(ch + 1) * n]
    }

    fn add_assign(&mut self, other: &Tensor3) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the rectifier was inactive.
fn relu_backward_inplace(grad: &mut Tensor3, activated: &Tensor3) {
    for (g, a) in grad.data.iter_mut().zip(&activated.data) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn avg_pool2(x: &Tensor3) -> Tensor3 {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor3::zeros(x.c, h, w);
    for ch in 0..x.c {
        let src = x.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for c in 0..w {
                let i = 2 * r * x.w + 2 * c;
                dst[r * w + c] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(grad: &Tensor3) -> Tensor3 {
    let (h, w) = (grad.h * 2, grad.w * 2);
    let mut out = Tensor3::zeros(grad.c, h, w);
    for ch in 0..grad.c {
        let src = grad.plane(ch);
        let dst = out.plane_mut(ch);
        for r in 0..grad.h {
            for c in 0..grad.w {
                let g = 0.25 * src[r * grad.w + c];
                let i = 2 * r * w + 2 * c;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    out
}

/// Half-pixel bilinear 2x upsampling along one axis with clamped borders:
/// `out[2k] = ¾·in[k] + ¼·in[k-1]`, `out[2k+1] = ¾·in[k] + ¼·in[k+1]`.
#[inline]
fn up_taps(k: usize, n: usize) -> [(usize, usize, f64); 4] {
    let prev = k.saturating_sub(1);
    let next = (k + 1).min(n - 1);
    [
        (2 * k, k, 0.75),
        (2 * k, prev, 0.25),
        (2 * k + 1, k, 0.75),
        (2 * k + 1, next, 0.25),
    ]
}

fn upsample2(x: &Tensor3) -> Tensor3 {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor3::zeros(x.c, h2, w2);
    let mut rows = vec![0.0; x.h * w2];
    for ch in 0..x.c {
        let src = x.plane(ch);
        rows.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..x.h {
            for k in 0..x.w {
                for (o, i, wt) in up_taps(k, x.w) {
                    rows[r * w2 + o] += wt * src[r * x.w + i];
                }
            }
        }
        let dst = out.plane_mut(ch);
        for k in 0..x.h {
            for (o, i, wt) in up_taps(k, x.h) {
                let (d, s) = (&mut dst[o * w2..(o + 1) * w2], &rows[i * w2..(i + 1) * w2]);
                for (a, b) in d.iter_mut().zip(s) {
                    *a += wt * b;
                }
            }
        }
    }
    out
}

fn upsample2_backward(grad: &Tensor3) -> Tensor3 {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut out = Tensor3::zeros(grad.c, h, w);
    let mut rows = vec![0.0; h * grad.w];
    for ch in 0..grad.c {
        let src = grad.plane(ch);
        rows.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..h {
            for (o, i, wt) in up_taps(k, h) {
                let (d, s) = (
                    &mut rows[i * grad.w..(i + 1) * grad.w],
                    &src[o * grad.w..(o + 1) * grad.w],
                );
                for (a, b) in d.iter_mut().zip(s) {
                    *a += wt * b;
                }
            }
        }
        let dst = out.plane_mut(ch);
        for r in 0..h {
            for k in 0..w {
                for (o, i, wt) in up_taps(k, w) {
                    dst[r * w + i] += wt * rows[r * grad.w + o];
                }
            }
        }
    }
    out
}

/// Column range `x` for which `x + kx - 1` stays inside `[0, w)`.
#[inline]
fn tap_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n - 1 } else { n };
    (lo, hi)
}

/// Zero-padded 3x3 patches as a `[c*9][h*w]` row-major matrix.
fn im2col(x: &Tensor3) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let hw = h * w;
    let mut cols = vec![0.0; x.c * 9 * hw];
    for ci in 0..x.c {
        let src = x.plane(ci);
        for ky in 0..3 {
            let (ylo, yhi) = tap_range(ky, h);
            for kx in 0..3 {
                let (xlo, xhi) = tap_range(kx, w);
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in ylo..yhi {
                    let sy = y + ky - 1;
                    row[y * w + xlo..y * w + xhi]
                        .copy_from_slice(&src[sy * w + xlo + kx - 1..sy * w + xhi + kx - 1]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize) -> Tensor3 {
    let hw = h * w;
    let mut out = Tensor3::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.plane_mut(ci);
        for ky in 0..3 {
            let (ylo, yhi) = tap_range(ky, h);
            for kx in 0..3 {
                let (xlo, xhi) = tap_range(kx, w);
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in ylo..yhi {
                    let sy = y + ky - 1;
                    let d = &mut dst[sy * w + xlo + kx - 1..sy * w + xhi + kx - 1];
                    for (a, b) in d.iter_mut().zip(&row[y * w + xlo..y * w + xhi]) {
                        *a += b;
                    }
                }
            }
        }
    }
    out
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`;
/// `a_t` / `b_t` read the operand transposed from row-major storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address exactly the asserted slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 convolution with zero padding. `weight` is `[c_out][c_in][3][3]`.
fn conv3x3(x: &Tensor3, weight: &[f64], bias: &[f64], c_out: usize) -> Tensor3 {
    let hw = x.h * x.w;
    let mut out = Tensor3::zeros(c_out, x.h, x.w);
    for o in 0..c_out {
        out.plane_mut(o).iter_mut().for_each(|v| *v = bias[o]);
    }
    gemm(c_out, x.c * 9, hw, weight, false, &im2col(x), false, 1.0, &mut out.data);
    out
}

/// Returns the input gradient (when requested) and accumulates weight and
/// bias gradients into `gw` and `gb`.
fn conv3x3_backward(
    x: &Tensor3,
    weight: &[f64],
    grad_out: &Tensor3,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor3> {
    let hw = x.h * x.w;
    let c_out = grad_out.c;
    let k = x.c * 9;
    for o in 0..c_out {
        gb[o] += grad_out.plane(o).iter().sum::<f64>();
    }
    let cols = im2col(x);
    gemm(c_out, hw, k, &grad_out.data, false, &cols, true, 1.0, &mut gw[..c_out * k]);
    need_input_grad.then(|| {
        let mut gcols = vec![0.0; k * hw];
        gemm(k, c_out, hw, weight, true, &grad_out.data, false, 0.0, &mut gcols);
        col2im(&gcols, x.c, x.h, x.w)
    })
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// 1 for the raw grayscale image, 3 to replicate it across channels.
    pub in_channels: usize,
    /// Encoder widths; the decoder mirrors them.
    pub widths: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: [8, 16, 32],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::invalid("in_channels must be 1 or 3"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<(String, usize)> {
        let [w0, w1, w2] = self.widths;
        let conv = |name: &str, ci: usize, co: usize| {
            vec![
                (format!("{name}.weight"), co * ci * 9),
                (format!("{name}.bias"), co),
            ]
        };
        let mut blocks = Vec::new();
        blocks.extend(conv("enc1", self.in_channels, w0));
        blocks.extend(conv("enc2", w0, w1));
        blocks.extend(conv("enc3", w1, w2));
        blocks.extend(conv("dec3", w2, w1));
        blocks.extend(conv("dec2", w1, w0));
        blocks.extend(conv("dec1", w0, w0));
        blocks.push(("head.weight".into(), w0));
        blocks.push(("head.bias".into(), 1));
        blocks.push(("cls.weight".into(), w2));
        blocks.push(("cls.bias".into(), 1));
        blocks
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    enc: [(Block, Block); 3],
    dec: [(Block, Block); 3],
    head_w: Block,
    head_b: Block,
    cls_w: Block,
    cls_b: Block,
}

impl Offsets {
    fn new(config: &NetConfig) -> (Self, usize) {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (_, len) in config.layout() {
            blocks.push(Block { offset, len });
            offset += len;
        }
        let pair = |i: usize| (blocks[i], blocks[i + 1]);
        (
            Self {
                enc: [pair(0), pair(2), pair(4)],
                // Indexed by stage: dec1, dec2, dec3.
                dec: [pair(10), pair(8), pair(6)],
                head_w: blocks[12],
                head_b: blocks[13],
                cls_w: blocks[14],
                cls_b: blocks[15],
            },
            offset,
        )
    }
}

#[inline]
fn slice(p: &[f64], b: Block) -> &[f64] {
    &p[b.offset..b.offset + b.len]
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor3,
    a: [Tensor3; 3],
    p: [Tensor3; 3],
    u: [Tensor3; 3],
    d: [Tensor3; 3],
    pooled: Vec<f64>,
}

/// Network outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub logits: LogitGrid,
    pub malignancy_logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    config: NetConfig,
    params: Vec<f64>,
}

impl ToyNet {
    /// Fan-in scaled uniform weights, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let [w0, _, w2] = config.widths;
        let fan_in = |name: &str| -> f64 {
            let [a, b, c] = config.widths;
            match name {
                "enc1" => (config.in_channels * 9) as f64,
                "enc2" => (a * 9) as f64,
                "enc3" => (b * 9) as f64,
                "dec3" => (c * 9) as f64,
                "dec2" => (b * 9) as f64,
                "dec1" => (a * 9) as f64,
                "head" => w0 as f64,
                _ => w2 as f64,
            }
        };
        for (name, len) in config.layout() {
            let (layer, kind) = name.split_once('.').expect("block names are layer.kind");
            if kind == "bias" {
                params.extend(std::iter::repeat_n(0.0, len));
                continue;
            }
            // He-uniform for rectified layers, LeCun-uniform for the linear heads.
            let gain = if layer == "head" || layer == "cls" { 3.0 } else { 6.0 };
            let bound = (gain / fan_in(layer)).sqrt();
            params.extend((0..len).map(|_| rng.random_range(-bound..bound)));
        }
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (_, n) = Offsets::new(&config);
        if params.len() != n {
            return Err(Error::invalid(format!(
                "expected {n} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn parameters(&self) -> &[f64] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.len()
    }

    /// `(name, values)` for every parameter block.
    pub fn named_blocks(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, len) in self.config.layout() {
            out.push((name, &self.params[offset..offset + len]));
            offset += len;
        }
        out
    }

    /// Offset range of a named block.
    pub fn block_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for (n, len) in self.config.layout() {
            if n == name {
                return Some(offset..offset + len);
            }
            offset += len;
        }
        None
    }

    /// Zeroes both output layers: the segmentation logits become 0 and the
    /// malignancy logit equals the classifier bias.
    pub fn zero_final_layers(&mut self) {
        for name in ["head.weight", "head.bias", "cls.weight", "cls.bias"] {
            let r = self.block_range(name).expect("known block");
            self.params[r].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn input_tensor(&self, image: &GrayImage) -> Result<Tensor3> {
        let g = image.grid();
        let (h, w) = g.shape();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::invalid(format!(
                "image {h}x{w} is not divisible by 8"
            )));
        }
        let c = self.config.in_channels;
        let mut data = Vec::with_capacity(c * h * w);
        for _ in 0..c {
            data.extend_from_slice(g.as_slice());
        }
        Ok(Tensor3 { c, h, w, data })
    }

    pub fn forward(&self, image: &GrayImage) -> Result<NetOutput> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &GrayImage) -> Result<(NetOutput, ForwardCache)> {
        let x = self.input_tensor(image)?;
        let (off, _) = Offsets::new(&self.config);
        let p = &self.params;
        let [w0, w1, w2] = self.config.widths;
        let enc_widths = [w0, w1, w2];
        let dec_widths = [w0, w0, w1];

        let mut a: Vec<Tensor3> = Vec::with_capacity(3);
        let mut pooled: Vec<Tensor3> = Vec::with_capacity(3);
        for stage in 0..3 {
            let input = if stage == 0 { &x } else { &pooled[stage - 1] };
            let (wb, bb) = off.enc[stage];
            let mut t = conv3x3(input, slice(p, wb), slice(p, bb), enc_widths[stage]);
            relu_inplace(&mut t);
            pooled.push(avg_pool2(&t));
            a.push(t);
        }

        // Classifier on the globally pooled bottleneck.
        let bott = &pooled[2];
        let n = (bott.h * bott.w) as f64;
        let gap: Vec<f64> = (0..bott.c).map(|c| bott.plane(c).iter().sum::<f64>() / n).collect();
        let m = slice(p, off.cls_b)[0]
            + gap
                .iter()
                .zip(slice(p, off.cls_w))
                .map(|(g, w)| g * w)
                .sum::<f64>();

        // Decoder stages run from the bottleneck (index 2) back to full size (0).
        let mut u: [Option<Tensor3>; 3] = [None, None, None];
        let mut d: [Option<Tensor3>; 3] = [None, None, None];
        for stage in (0..3).rev() {
            let below = if stage == 2 {
                &pooled[2]
            } else {
                d[stage + 1].as_ref().expect("deeper stage computed")
            };
            let mut up = upsample2(below);
            up.add_assign(&a[stage]);
            let (wb, bb) = off.dec[stage];
            let mut t = conv3x3(&up, slice(p, wb), slice(p, bb), dec_widths[stage]);
            relu_inplace(&mut t);
            u[stage] = Some(up);
            d[stage] = Some(t);
        }

        let d1 = d[0].as_ref().expect("decoder output");
        let hw = d1.h * d1.w;
        let hb = slice(p, off.head_b)[0];
        let mut s = vec![hb; hw];
        for (c, wt) in slice(p, off.head_w).iter().enumerate() {
            for (o, v) in s.iter_mut().zip(d1.plane(c)) {
                *o += wt * v;
            }
        }
        let logits = LogitGrid::new(Grid::new(d1.h, d1.w, s)?)?;

        let [a0, a1, a2] = <[Tensor3; 3]>::try_from(a).expect("three stages");
        let [p0, p1, p2] = <[Tensor3; 3]>::try_from(pooled).expect("three stages");
        let cache = ForwardCache {
            input: x,
            a: [a0, a1, a2],
            p: [p0, p1, p2],
            u: u.map(|t| t.expect("decoder stage")),
            d: d.map(|t| t.expect("decoder stage")),
            pooled: gap,
        };
        Ok((
            NetOutput {
                logits,
                malignancy_logit: m,
            },
            cache,
        ))
    }

    /// Parameter gradient given upstream gradients on the segmentation logits
    /// and the malignancy logit.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Grid, d_malignancy: f64) -> Vec<f64> {
        let (off, n) = Offsets::new(&self.config);
        let p = &self.params;
        let mut g = vec![0.0; n];

        // Segmentation head.
        let d1 = &cache.d[0];
        let ds = d_logits.as_slice();
        g[off.head_b.offset] = ds.iter().sum();
        let head_w = slice(p, off.head_w);
        let mut gd = Tensor3::zeros(d1.c, d1.h, d1.w);
        for c in 0..d1.c {
            g[off.head_w.offset + c] = ds.iter().zip(d1.plane(c)).map(|(a, b)| a * b).sum();
            for (o, v) in gd.plane_mut(c).iter_mut().zip(ds) {
                *o = head_w[c] * v;
            }
        }

        // Skip gradients collected for each encoder activation.
        let mut ga: [Option<Tensor3>; 3] = [None, None, None];
        let mut g_bottleneck = None;
        for stage in 0..3 {
            relu_backward_inplace(&mut gd, &cache.d[stage]);
            let (wb, bb) = off.dec[stage];
            let (gw, rest) = g.split_at_mut(bb.offset);
            let gu = conv3x3_backward(
                &cache.u[stage],
                slice(p, wb),
                &gd,
                &mut gw[wb.offset..],
                &mut rest[..bb.len],
                true,
            )
            .expect("input gradient requested");
            let below = upsample2_backward(&gu);
            ga[stage] = Some(gu);
            if stage == 2 {
                g_bottleneck = Some(below);
            } else {
                gd = below;
            }
        }

        // Classifier head.
        let mut gp = g_bottleneck.expect("bottleneck gradient");
        g[off.cls_b.offset] = d_malignancy;
        let cls_w = slice(p, off.cls_w);
        let area = (gp.h * gp.w) as f64;
        for c in 0..gp.c {
            g[off.cls_w.offset + c] = d_malignancy * cache.pooled[c];
            let k = d_malignancy * cls_w[c] / area;
            gp.plane_mut(c).iter_mut().for_each(|v| *v += k);
        }

        // Encoder, deepest first.
        for stage in (0..3).rev() {
            let mut ga_stage = avg_pool2_backward(&gp);
            ga_stage.add_assign(ga[stage].as_ref().expect("skip gradient"));
            relu_backward_inplace(&mut ga_stage, &cache.a[stage]);
            let input = if stage == 0 {
                &cache.input
            } else {
                &cache.p[stage - 1]
            };
            let (wb, bb) = off.enc[stage];
            let (gw, rest) = g.split_at_mut(bb.offset);
            let gin = conv3x3_backward(
                input,
                slice(p, wb),
                &ga_stage,
                &mut gw[wb.offset..],
                &mut rest[..bb.len],
                stage > 0,
            );
            if let Some(gin) = gin {
                gp = gin;
            }
        }
        g
    }
}
