//! Frame and flow quality metrics. Frames are `1 x H x W x C` in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical frames.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), computed per
/// channel over window positions fully inside the image, then averaged.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = |t: &Tensor<f32>, n: usize, c: usize| -> Vec<f64> {
        let mut v = Vec::with_capacity(s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                v.push(t.at(n, y, x, c) as f64);
            }
        }
        v
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let pa = plane(a, n, c);
            let pb = plane(b, n, c);
            let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
            let ma = filter(&pa, s.h, s.w, &taps);
            let mb = filter(&pb, s.h, s.w, &taps);
            let saa = filter(&prod(&pa, &pa), s.h, s.w, &taps);
            let sbb = filter(&prod(&pb, &pb), s.h, s.w, &taps);
            let sab = filter(&prod(&pa, &pb), s.h, s.w, &taps);
            for i in 0..ma.len() {
                let (mx, my) = (ma[i], mb[i]);
                let vx = saa[i] - mx * mx;
                let vy = sbb[i] - my * my;
                let cov = sab[i] - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean Euclidean distance between two `1 x H x W x 2` flows, optionally
/// restricted to pixels where `mask` is true.
pub fn endpoint_error(flow: &Tensor<f32>, gt: &Tensor<f32>, mask: Option<&[bool]>) -> Result<f64> {
    if flow.shape() != gt.shape() || flow.shape().c != 2 {
        return Err(Error::shape("endpoint_error", format!("{} vs {}", flow.shape(), gt.shape())));
    }
    let pixels = flow.shape().pixels();
    if let Some(m) = mask {
        if m.len() != pixels {
            return Err(Error::shape("endpoint_error", format!("mask of {} for {pixels} pixels", m.len())));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, (f, g)) in flow.data().chunks_exact(2).zip(gt.data().chunks_exact(2)).enumerate() {
        if mask.is_some_and(|m| !m[p]) {
            continue;
        }
        sum += ((f[0] as f64 - g[0] as f64).powi(2) + (f[1] as f64 - g[1] as f64).powi(2)).sqrt();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("endpoint_error: empty evaluation region"));
    }
    Ok(sum / n as f64)
}
