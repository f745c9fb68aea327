//! Image losses and quality metrics, with gradients with respect to the
//! rendered image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagebuf::{Image, Plane};
use crate::train::AblationConfig;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Mask term.
    pub lambda1: f64,
    /// L1 term.
    pub lambda2: f64,
    /// SSIM term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda1: 0.3, lambda2: 0.8, lambda3: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("loss weight {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mask: f64,
    pub l1: f64,
    pub ssim: f64,
}

/// Weighted sum of the loss terms; the mask term is dropped when the mask
/// loss is ablated.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, ablation: &AblationConfig) -> f64 {
    let mask = if ablation.enable_mask_loss { weights.lambda1 * parts.mask } else { 0.0 };
    mask + weights.lambda2 * parts.l1 + weights.lambda3 * parts.ssim
}

fn check_plane(a: &Plane, b: &Plane) -> Result<()> {
    a.same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

fn check_image(a: &Image, b: &Image) -> Result<()> {
    a.same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    Ok(())
}

/// Root-mean-square difference between the alpha map and the mask.
pub fn loss_mask(alpha: &Plane, mask: &Plane) -> Result<f64> {
    Ok(loss_mask_grad(alpha, mask)?.0)
}

pub fn loss_mask_grad(alpha: &Plane, mask: &Plane) -> Result<(f64, Plane)> {
    check_plane(alpha, mask)?;
    let n = alpha.data.len() as f64;
    let sq: f64 = alpha.data.iter().zip(&mask.data).map(|(a, m)| (a - m) * (a - m)).sum();
    let rms = (sq / n).sqrt();
    let mut grad = Plane::new(alpha.width, alpha.height);
    if rms > 0.0 {
        for ((g, a), m) in grad.data.iter_mut().zip(&alpha.data).zip(&mask.data) {
            *g = (a - m) / (n * rms);
        }
    }
    Ok((rms, grad))
}

/// Mean absolute error over pixels and channels.
pub fn loss_l1(rendered: &Image, truth: &Image) -> Result<f64> {
    check_image(rendered, truth)?;
    Ok(rendered.data.iter().zip(&truth.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / rendered.data.len() as f64)
}

pub fn loss_l1_grad(rendered: &Image, truth: &Image) -> Result<(f64, Image)> {
    let l = loss_l1(rendered, truth)?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&truth.data) {
        *g = if a > b {
            1.0 / n
        } else if a < b {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((l, grad))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filter of a `w×h` plane; output is `(w-10)×(h-10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let row = &rows[(y + k) * ow..(y + k + 1) * ow];
            for (o, v) in out[y * ow..(y + 1) * ow].iter_mut().zip(row) {
                *o += t * v;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(w-10)×(h-10)` map back to `w×h`.
fn filter_valid_transpose(g: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let row = &mut rows[(y + k) * ow..(y + k + 1) * ow];
            for (r, v) in row.iter_mut().zip(&g[y * ow..(y + 1) * ow]) {
                *r += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let line = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                line[x + k] += t * v;
            }
        }
    }
    out
}

struct SsimChannel {
    mean: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> SsimChannel {
    let taps = gaussian_window();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let exx = filter_valid(&xx, w, h, &taps);
    let eyy = filter_valid(&yy, w, h, &taps);
    let exy = filter_valid(&xy, w, h, &taps);
    let n = mx.len();
    let mut sum = 0.0;
    let (mut ga, mut gb, mut gc) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let n1 = 2.0 * ux * uy + SSIM_C1;
        let n2 = 2.0 * (exy[i] - ux * uy) + SSIM_C2;
        let d1 = ux * ux + uy * uy + SSIM_C1;
        let d2 = exx[i] - ux * ux + eyy[i] - uy * uy + SSIM_C2;
        let s = n1 * n2 / (d1 * d2);
        sum += s;
        if want_grad {
            ga[i] = 2.0 * uy * (n2 - n1) / (d1 * d2) - s * (2.0 * ux / d1 - 2.0 * ux / d2);
            gb[i] = -s / d2;
            gc[i] = 2.0 * n1 / (d1 * d2);
        }
    }
    let grad = want_grad.then(|| {
        let fa = filter_valid_transpose(&ga, w, h, &taps);
        let fb = filter_valid_transpose(&gb, w, h, &taps);
        let fc = filter_valid_transpose(&gc, w, h, &taps);
        (0..w * h).map(|i| (fa[i] + 2.0 * x[i] * fb[i] + y[i] * fc[i]) / n as f64).collect()
    });
    SsimChannel { mean: sum / n as f64, grad }
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.same_shape(b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width, a.height));
    for c in 0..3 {
        let ch = ssim_channel(&a.channel(c).data, &b.channel(c).data, w, h, want_grad);
        total += ch.mean / 3.0;
        if let (Some(g), Some(cg)) = (grad.as_mut(), ch.grad) {
            for (i, v) in cg.into_iter().enumerate() {
                g.data[3 * i + c] = v / 3.0;
            }
        }
    }
    Ok((total, grad))
}

/// Mean SSIM over all fully contained 11×11 windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `1 - SSIM`.
pub fn loss_ssim(rendered: &Image, truth: &Image) -> Result<f64> {
    Ok(1.0 - ssim(rendered, truth)?)
}

/// `1 - SSIM` and its gradient with respect to `rendered`.
pub fn loss_ssim_grad(rendered: &Image, truth: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(rendered, truth, true)?;
    let mut g = g.expect("gradient requested");
    g.data.iter_mut().for_each(|v| *v = -*v);
    Ok((1.0 - s, g))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// Full-frame PSNR for `[0, 1]` images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_image(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR over pixels where `mask > 0.5`. An empty mask gives the cap.
pub fn psnr_masked(a: &Image, b: &Image, mask: &Plane) -> Result<f64> {
    check_image(a, b)?;
    if mask.width != a.width || mask.height != a.height {
        return Err(Error::invalid("mask shape differs from image"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, m) in mask.data.iter().enumerate() {
        if *m > 0.5 {
            for c in 0..3 {
                let d = a.data[3 * i + c] - b.data[3 * i + c];
                sum += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Ok(PSNR_CAP);
    }
    Ok(psnr_from_mse(sum / count as f64))
}
