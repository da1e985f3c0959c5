//! Training objectives: L1 + D-SSIM color loss, per-mask opacity and the
//! mask separation loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buf::ImageBuffer;
use crate::masks::Mask;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur of a single-channel plane with zero padding.
/// The kernel is symmetric, so this operator is its own adjoint.
fn blur<T: Real>(src: &[T], w: usize, h: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let r = SSIM_WINDOW / 2;
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut s = T::zero();
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            for xx in lo..=hi {
                s += k[xx + r - x] * row[xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut s = T::zero();
            for yy in lo..=hi {
                s += k[yy + r - y] * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn plane<T: Real>(img: &ImageBuffer<T>, c: usize) -> Vec<T> {
    (0..img.num_pixels()).map(|p| img.data[p * img.channels + c]).collect()
}

/// Mean SSIM over all pixels and channels; with `want_grad`, also its
/// gradient with respect to `x`.
pub fn ssim_with_grad<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>, want_grad: bool) -> Result<(T, Option<ImageBuffer<T>>)> {
    x.same_shape(y)?;
    let (w, h, ch) = (x.width, x.height, x.channels);
    let k = ssim_kernel().map(T::lit);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let n = w * h;
    let norm = T::one() / T::from_usize_lossy(n * ch);
    let mut total = T::zero();
    let mut grad = want_grad.then(|| ImageBuffer::new(w, h, ch));
    for c in 0..ch {
        let xs = plane(x, c);
        let ys = plane(y, c);
        let xx: Vec<T> = xs.iter().map(|v| *v * *v).collect();
        let yy: Vec<T> = ys.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = xs.iter().zip(&ys).map(|(a, b)| *a * *b).collect();
        let mx = blur(&xs, w, h, &k);
        let my = blur(&ys, w, h, &k);
        let exx = blur(&xx, w, h, &k);
        let eyy = blur(&yy, w, h, &k);
        let exy = blur(&xy, w, h, &k);
        let (mut ga, mut gb, mut gc) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        for p in 0..n {
            let sxx = exx[p] - mx[p] * mx[p];
            let syy = eyy[p] - my[p] * my[p];
            let sxy = exy[p] - mx[p] * my[p];
            let n1 = two * mx[p] * my[p] + c1;
            let n2 = two * sxy + c2;
            let d1 = mx[p] * mx[p] + my[p] * my[p] + c1;
            let d2 = sxx + syy + c2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmx = two * my[p] * n2 / (d1 * d2) - s * two * mx[p] / d1;
                let ds_dsxx = -s / d2;
                let ds_dsxy = two * n1 / (d1 * d2);
                // sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my.
                ga[p] = (ds_dmx - two * mx[p] * ds_dsxx - my[p] * ds_dsxy) * norm;
                gb[p] = ds_dsxx * norm;
                gc[p] = ds_dsxy * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ba = blur(&ga, w, h, &k);
            let bb = blur(&gb, w, h, &k);
            let bc = blur(&gc, w, h, &k);
            for p in 0..n {
                g.data[p * ch + c] = ba[p] + two * xs[p] * bb[p] + ys[p] * bc[p];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5, zero padding).
pub fn ssim<T: Real>(x: &ImageBuffer<T>, y: &ImageBuffer<T>) -> Result<T> {
    Ok(ssim_with_grad(x, y, false)?.0)
}

/// Components of the color loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorLoss<T> {
    pub l1: T,
    pub dssim: T,
    pub value: T,
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM) / 2` and its gradient w.r.t. `pred`.
pub fn color_loss<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>, lambda: T) -> Result<(ColorLoss<T>, ImageBuffer<T>)> {
    pred.same_shape(gt)?;
    let n = T::from_usize_lossy(pred.data.len());
    let one = T::one();
    let half = T::lit(0.5);
    let mut l1 = T::zero();
    let mut grad = ImageBuffer::new(pred.width, pred.height, pred.channels);
    let wl1 = (one - lambda) / n;
    for ((g, a), b) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = *a - *b;
        l1 += d.abs();
        *g = if d > T::zero() {
            wl1
        } else if d < T::zero() {
            -wl1
        } else {
            T::zero()
        };
    }
    l1 /= n;
    let dssim = if lambda > T::zero() {
        let (s, sg) = ssim_with_grad(pred, gt, true)?;
        for (g, v) in grad.data.iter_mut().zip(&sg.expect("requested").data) {
            *g -= lambda * half * *v;
        }
        (one - s) * half
    } else {
        (one - ssim(pred, gt)?) * half
    };
    let value = (one - lambda) * l1 + lambda * dssim;
    Ok((ColorLoss { l1, dssim, value }, grad))
}

/// `o_i = mean of O over mask i`.
pub fn per_mask_opacity<T: Real>(opacity: &ImageBuffer<T>, masks: &[Mask]) -> Result<Vec<T>> {
    let n = opacity.num_pixels();
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if m.pixels.is_empty() {
                return Err(Error::EmptyMask(i));
            }
            let mut s = T::zero();
            for &p in &m.pixels {
                let p = p as usize;
                if p >= n {
                    return Err(Error::MaskFormat(format!("mask {} has pixel {p} outside a {n}-pixel image", m.id)));
                }
                s += opacity.data[p];
            }
            Ok(s / T::from_usize_lossy(m.pixels.len()))
        })
        .collect()
}

/// `sum_i w_i o_i (1 - o_i)` and its gradient `w_i (1 - 2 o_i)`.
pub fn mask_loss<T: Real>(o: &[T], weights: &[f64]) -> Result<(T, Vec<T>)> {
    if o.len() != weights.len() {
        return Err(Error::LengthMismatch(o.len(), weights.len()));
    }
    if o.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::WeightSum(sum));
    }
    let one = T::one();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(o.len());
    for (&oi, &wi) in o.iter().zip(weights) {
        let w = T::lit(wi);
        loss += w * oi * (one - oi);
        grad.push(w * (one - T::lit(2.0) * oi));
    }
    Ok((loss, grad))
}

/// Spreads a gradient w.r.t. the per-mask opacities back onto the opacity
/// map: `dL/dO(j) += scale * sum_{i: j in m_i} g_i / |m_i|`.
pub fn mask_opacity_backward<T: Real>(masks: &[Mask], grad_o: &[T], scale: T, grad_opacity: &mut ImageBuffer<T>) {
    for (m, g) in masks.iter().zip(grad_o) {
        let v = scale * *g / T::from_usize_lossy(m.pixels.len());
        for &p in &m.pixels {
            grad_opacity.data[p as usize] += v;
        }
    }
}

/// Training phase, ordered by schedule position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    StandardDensification,
    MaskLoss,
}

/// `color + lambda_mask * mask` once the mask phase has begun.
pub fn total_loss<T: Real>(color: T, mask: T, lambda_mask: T, phase: Phase) -> T {
    if phase >= Phase::MaskLoss {
        color + lambda_mask * mask
    } else {
        color
    }
}

/// Per-iteration loss summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub dssim: f64,
    pub color: f64,
    pub mask: f64,
    pub total: f64,
    pub per_mask_opacity: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = ImageBuffer::from_fn(9, 7, 3, |x, y, c| ((x * 3 + y * 5 + c) % 7) as f64 / 7.0);
        let (l, g) = color_loss(&a, &a, 0.2).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert!(g.data.iter().all(|v| v.abs() < 1e-12));
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_l1() {
        let a = ImageBuffer::filled(4, 4, 3, 0.2f64);
        let b = ImageBuffer::filled(4, 4, 3, 0.5f64);
        let (l, _) = color_loss(&a, &b, 0.0).unwrap();
        assert!((l.value - 0.3).abs() < 1e-12);
    }

    #[test]
    fn mask_loss_examples() {
        let (l, g) = mask_loss(&[0.5f64], &[1.0]).unwrap();
        assert_eq!((l, g[0]), (0.25, 0.0));
        let (l, _) = mask_loss(&[0.5f64, 0.0], &[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert!((l - 1.0 / 12.0).abs() < 1e-15);
        assert!(matches!(mask_loss(&[0.5f64], &[0.7]), Err(Error::WeightSum(_))));
    }

    #[test]
    fn per_mask_mean() {
        let o = ImageBuffer::from_fn(2, 2, 1, |x, _, _| x as f64);
        let m = Mask { id: 0, pixels: vec![0, 1, 2, 3] };
        assert_eq!(per_mask_opacity(&o, &[m]).unwrap(), vec![0.5]);
        assert!(matches!(per_mask_opacity(&o, &[Mask { id: 1, pixels: vec![] }]), Err(Error::EmptyMask(0))));
    }

    #[test]
    fn total_loss_phases() {
        assert_eq!(total_loss(1.0, 0.1, 0.5, Phase::StandardDensification), 1.0);
        assert!((total_loss(1.0f64, 0.1, 0.5, Phase::MaskLoss) - 1.05).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.1, 0.0, Phase::MaskLoss), 1.0);
    }
}
