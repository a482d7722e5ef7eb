//! Image quality metrics on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::imageio::ImageF32;

/// Reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

fn same_layout(a: &ImageF32, b: &ImageF32) -> Result<()> {
    if (a.width, a.height, a.channels) != (b.width, b.height, b.channels) {
        return Err(Error::invalid(
            "metric inputs",
            format!("{}x{}x{} vs {}x{}x{}", a.width, a.height, a.channels, b.width, b.height, b.channels),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    same_layout(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter over the valid region of one channel.
fn filter(x: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - WINDOW, h + 1 - WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..WINDOW).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..WINDOW).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over the valid window positions and the channels.
pub fn ssim(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    same_layout(a, b)?;
    let (w, h, c) = (a.width, a.height, a.channels);
    if w < WINDOW || h < WINDOW {
        return Err(Error::invalid("ssim", format!("{w}x{h} is smaller than the {WINDOW}x{WINDOW} window")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|p| a.data[p * c + ch] as f64).collect();
        let y: Vec<f64> = (0..w * h).map(|p| b.data[p * c + ch] as f64).collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = filter(&x, w, h, &k);
        let my = filter(&y, w, h, &k);
        let sxx = filter(&prod(&x, &x), w, h, &k);
        let syy = filter(&prod(&y, &y), w, h, &k);
        let sxy = filter(&prod(&x, &y), w, h, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            acc += ((2.0 * mu_x * mu_y + C1) * (2.0 * cov + C2)) / ((mu_x * mu_x + mu_y * mu_y + C1) * (vx + vy + C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Intersection over union of two masks thresholded at 0.5. Two empty masks
/// count as a perfect match.
pub fn mask_iou(a: &ImageF32, b: &ImageF32) -> Result<f64> {
    same_layout(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn noise(seed: u64, w: usize, h: usize) -> ImageF32 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageF32::new(w, h, 3);
        img.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.8));
        img
    }

    #[test]
    fn identical_images() {
        let a = noise(0, 24, 20);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let a = noise(1, 16, 16);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        let (a, b) = (noise(2, 32, 32), noise(3, 32, 32));
        let (x, y) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-12);
        assert!((-1.0..1.0).contains(&x));
        let mut c = a.clone();
        c.data.iter_mut().for_each(|v| *v *= 0.9);
        assert!(ssim(&a, &c).unwrap() > x);
    }

    #[test]
    fn iou_counts() {
        let mut a = ImageF32::new(4, 1, 1);
        let mut b = ImageF32::new(4, 1, 1);
        a.data = vec![1.0, 1.0, 0.0, 0.0];
        b.data = vec![1.0, 0.0, 1.0, 0.0];
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }
}
