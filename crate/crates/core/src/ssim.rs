//! Structural similarity on tone-mapped gray images: 8x8 uniform sliding
//! windows, standard constants k1 = 0.01, k2 = 0.03 on unit dynamic range.

use crate::error::{Error, Result};

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 8;

/// Mean SSIM between two gray images in [0, 1], identical dimensions.
/// Uses summed-area tables; windows slide with stride one.
pub fn ssim_gray(a: &[f32], b: &[f32], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::invalid_argument("image buffers do not match dimensions"));
    }
    let w = SSIM_WINDOW;
    if width < w || height < w {
        return Err(Error::invalid_argument("image smaller than the SSIM window"));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);

    // Summed-area tables for a, b, a^2, b^2, ab.
    let stride = width + 1;
    let mut sa = vec![0.0f64; stride * (height + 1)];
    let mut sb = vec![0.0f64; stride * (height + 1)];
    let mut saa = vec![0.0f64; stride * (height + 1)];
    let mut sbb = vec![0.0f64; stride * (height + 1)];
    let mut sab = vec![0.0f64; stride * (height + 1)];
    for y in 0..height {
        for x in 0..width {
            let av = a[y * width + x] as f64;
            let bv = b[y * width + x] as f64;
            let i = (y + 1) * stride + (x + 1);
            let up = y * stride + (x + 1);
            let left = (y + 1) * stride + x;
            let diag = y * stride + x;
            sa[i] = av + sa[up] + sa[left] - sa[diag];
            sb[i] = bv + sb[up] + sb[left] - sb[diag];
            saa[i] = av * av + saa[up] + saa[left] - saa[diag];
            sbb[i] = bv * bv + sbb[up] + sbb[left] - sbb[diag];
            sab[i] = av * bv + sab[up] + sab[left] - sab[diag];
        }
    }
    let window_sum = |t: &[f64], x: usize, y: usize| -> f64 {
        t[(y + w) * stride + (x + w)] - t[y * stride + (x + w)] - t[(y + w) * stride + x]
            + t[y * stride + x]
    };

    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=(height - w) {
        for x in 0..=(width - w) {
            let mu_a = window_sum(&sa, x, y) / n;
            let mu_b = window_sum(&sb, x, y) / n;
            let var_a = window_sum(&saa, x, y) / n - mu_a * mu_a;
            let var_b = window_sum(&sbb, x, y) / n - mu_b * mu_b;
            let cov = window_sum(&sab, x, y) / n - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Channel-mean luma of an RGB image.
pub fn luma(rgb: &[[f32; 3]]) -> Vec<f32> {
    rgb.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
}

/// Clamp-and-gamma tone mapping at a fixed exposure.
pub fn tone_map(rgb: &[[f32; 3]], exposure: f32, gamma: f32) -> Vec<[f32; 3]> {
    let inv_g = 1.0 / gamma;
    rgb.iter()
        .map(|p| {
            let mut out = [0.0f32; 3];
            for c in 0..3 {
                out[c] = (p[c] * exposure).clamp(0.0, 1.0).powf(inv_g);
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use rand::Rng;

    /// Direct windowed-statistics reference: recompute every window's
    /// moments with plain loops.
    fn ssim_reference(a: &[f32], b: &[f32], width: usize, height: usize) -> f64 {
        let w = SSIM_WINDOW;
        let c1 = SSIM_K1.powi(2);
        let c2 = SSIM_K2.powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=(height - w) {
            for x in 0..=(width - w) {
                let mut va = Vec::with_capacity(w * w);
                let mut vb = Vec::with_capacity(w * w);
                for dy in 0..w {
                    for dx in 0..w {
                        va.push(a[(y + dy) * width + (x + dx)] as f64);
                        vb.push(b[(y + dy) * width + (x + dx)] as f64);
                    }
                }
                let n = (w * w) as f64;
                let mu_a: f64 = va.iter().sum::<f64>() / n;
                let mu_b: f64 = vb.iter().sum::<f64>() / n;
                let var_a: f64 = va.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
                let var_b: f64 = vb.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
                let cov: f64 =
                    va.iter().zip(&vb).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
                total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    fn textured(width: usize, height: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_from_seed(seed);
        (0..width * height)
            .map(|i| {
                let x = (i % width) as f32;
                let y = (i / width) as f32;
                let base = 0.5 + 0.3 * (x * 0.7).sin() * (y * 0.45).cos();
                (base + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)
            })
            .collect()
    }

    #[test]
    fn identical_images_score_one() {
        let img = textured(32, 24, 5);
        let s = ssim_gray(&img, &img, 32, 24).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn inverted_textured_image_scores_low() {
        let img = textured(48, 48, 9);
        let inv: Vec<f32> = img.iter().map(|v| 1.0 - v).collect();
        let s = ssim_gray(&img, &inv, 48, 48).unwrap();
        assert!(s < 0.2, "{s}");
    }

    #[test]
    fn matches_direct_reference_on_random_images() {
        let mut rng = rng_from_seed(13);
        for _ in 0..10 {
            let (w, h) = (rng.random_range(8..40), rng.random_range(8..40));
            let a: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
            let b: Vec<f32> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
            let fast = ssim_gray(&a, &b, w, h).unwrap();
            let slow = ssim_reference(&a, &b, w, h);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn rejects_undersized_images() {
        let img = vec![0.0f32; 16];
        assert!(ssim_gray(&img, &img, 4, 4).is_err());
    }
}
