//! Image, normal and environment-map quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::color::linear_to_srgb;
use crate::shading::EnvironmentMap;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Row-major image with interleaved channels, linear values.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ImageMismatch(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f32) -> Self {
        Image { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Channel mean per pixel.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data.chunks(self.channels).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64).collect()
    }

    pub fn clamped(&self) -> Image {
        Image { data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(), ..self.clone() }
    }

    /// Display values: linear radiance clamped to `[0, 1]`, then
    /// sRGB-encoded. Image metrics compare these.
    pub fn ldr(&self) -> Image {
        Image { data: self.data.iter().map(|v| linear_to_srgb(v.clamp(0.0, 1.0))).collect(), ..self.clone() }
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::ImageMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }
}

/// Evaluation results for one rendered set. Optional entries are absent
/// when the ground truth does not provide them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: Option<f64>,
    pub epsnr: Option<f64>,
    pub pixels: usize,
    pub normal_pixels: usize,
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_shape(gt)?;
    let n = pred.data.len().max(1) as f64;
    Ok(pred.data.iter().zip(&gt.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over all channels, capped at 99 dB.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt)?))
}

fn ssim_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|j| k[j] * x[y * w + ox + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|j| k[j] * rows[(oy + j) * ow + ox]).sum();
        }
    }
    out
}

/// Single-scale SSIM on channel-mean grayscale, Gaussian 11x11 window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1; mean over all valid
/// window positions.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    pred.same_shape(gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let (a, b) = (pred.grayscale(), gt.grayscale());
    let k = ssim_kernel();
    let mu_a = filter_valid(&a, w, h, &k);
    let mu_b = filter_valid(&b, w, h, &k);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let e_aa = filter_valid(&prod(&a, &a), w, h, &k);
    let e_bb = filter_valid(&prod(&b, &b), w, h, &k);
    let e_ab = filter_valid(&prod(&a, &b), w, h, &k);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Mean angular error in degrees over pixels where `mask` holds and a
/// prediction exists.
pub fn mae_normals(pred: &[Option<[f64; 3]>], gt: &[[f64; 3]], mask: &[bool]) -> Result<(f64, usize)> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::ImageMismatch(format!("normal buffers {} / {} / mask {}", pred.len(), gt.len(), mask.len())));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for ((p, g), &m) in pred.iter().zip(gt).zip(mask) {
        let Some(p) = p else { continue };
        if !m {
            continue;
        }
        let d = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
        sum += d.acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / count as f64, count))
}

/// PSNR between environment maps: `pred` is resampled bilinearly to the
/// ground-truth resolution and both are clamped to `[0, 1]`.
pub fn epsnr(pred: &EnvironmentMap, gt: &EnvironmentMap) -> f64 {
    let p = pred.resample(gt.height, gt.width);
    let n = gt.data.len() as f64;
    let mse: f64 = p
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a.clamp(0.0, 1.0) as f64 - b.clamp(0.0, 1.0) as f64).powi(2))
        .sum::<f64>()
        / n;
    psnr_from_mse(mse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, 3, (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = Image::filled(8, 8, 3, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(8, 8, 3, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        let checker = Image::new(4, 4, 1, (0..16).map(|i| ((i + i / 4) % 2) as f32).collect()).unwrap();
        let zero = Image::filled(4, 4, 1, 0.0);
        let want = 10.0 * 2f64.log10();
        assert!((psnr(&checker, &zero).unwrap() - want).abs() < 1e-9);
        assert!(psnr(&a, &Image::filled(4, 8, 3, 0.3)).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(24, 20, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance() {
        let (a, b) = (0.2f64, 0.7f64);
        let c1 = 1e-4;
        let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
        let s = ssim(&Image::filled(16, 16, 3, a as f32), &Image::filled(16, 16, 3, b as f32)).unwrap();
        assert!((s - want).abs() < 1e-6, "{s} vs {want}");
    }

    #[test]
    fn ssim_inverted_binary_is_negative() {
        let gt = Image::new(16, 16, 1, (0..256).map(|i| ((i % 16 + i / 16) % 2) as f32).collect()).unwrap();
        let pred = Image { data: gt.data.iter().map(|v| 1.0 - v).collect(), ..gt.clone() };
        assert!(ssim(&pred, &gt).unwrap() < 0.0);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 30, 1, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
    }

    fn rotate_about(v: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
        use crate::shading::brdf::{cross, dot};
        let (s, c) = angle.sin_cos();
        let kv = cross(axis, v);
        let kd = dot(axis, v);
        [0, 1, 2].map(|i| v[i] * c + kv[i] * s + axis[i] * kd * (1.0 - c))
    }

    fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [0; 3].map(|_: i32| rng.gen_range(-1.0..1.0));
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 0.1 && l < 1.0 {
                return v.map(|c| c / l);
            }
        }
    }

    #[test]
    fn mae_fixtures() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<[f64; 3]> = (0..200).map(|_| random_unit(&mut rng)).collect();
        let mask = vec![true; gt.len()];
        let same: Vec<_> = gt.iter().map(|&n| Some(n)).collect();
        assert!(mae_normals(&same, &gt, &mask).unwrap().0 < 1e-6);
        let rotated: Vec<_> = gt
            .iter()
            .map(|&n| {
                // rotate by 30 degrees about an axis perpendicular to n
                let a = crate::shading::brdf::normalize(crate::shading::brdf::cross(n, random_unit(&mut rng)));
                Some(rotate_about(n, a, 30f64.to_radians()))
            })
            .collect();
        let (m, count) = mae_normals(&rotated, &gt, &mask).unwrap();
        assert!((m - 30.0).abs() < 1e-6, "{m}");
        assert_eq!(count, 200);
        let half = [Some([0.0, 0.0, 1.0]), Some([1.0, 0.0, 0.0])];
        let g = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        assert!((mae_normals(&half, &g, &[true, true]).unwrap().0 - 45.0).abs() < 1e-9);
        assert!(matches!(mae_normals(&half, &g, &[false, false]), Err(Error::EmptyMask)));
        assert!(matches!(mae_normals(&[None, None], &g, &[true, true]), Err(Error::EmptyMask)));
    }

    #[test]
    fn epsnr_fixtures() {
        let gt = EnvironmentMap::from_fn(8, 16, |d| [(0.5 + 0.4 * d[0]) as f32, 0.5, (0.5 + 0.4 * d[1]) as f32]);
        assert_eq!(epsnr(&gt, &gt), PSNR_CAP);
        let off = EnvironmentMap { data: gt.data.iter().map(|v| v + 0.1).collect(), ..gt.clone() };
        assert!((epsnr(&off, &gt) - 20.0).abs() < 1e-3);
        let blurred = crate::perturb::blur_envmap(&gt, 7, 3.0).unwrap();
        assert!(epsnr(&blurred, &gt) < PSNR_CAP - 1.0);
        // resampled comparison at another resolution
        assert!(epsnr(&gt.resample(16, 32), &gt) > 25.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn metrics_are_symmetric(s1 in 0u64..500, s2 in 0u64..500) {
            let (a, b) = (random_image(16, 14, s1), random_image(16, 14, s2));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..500, amp in 0.01f32..0.2) {
            let a = random_image(8, 8, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let signs: Vec<f32> = (0..a.data.len()).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let noisy = |k: f32| Image { data: a.data.iter().zip(&signs).map(|(v, s)| v + s * k).collect(), ..a.clone() };
            prop_assert!(psnr(&noisy(amp * 1.5), &a).unwrap() < psnr(&noisy(amp), &a).unwrap());
        }

        #[test]
        fn mae_invariant_under_global_rotation(seed in 0u64..500, angle in 0.0f64..3.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let axis = random_unit(&mut rng);
            let gt: Vec<[f64; 3]> = (0..50).map(|_| random_unit(&mut rng)).collect();
            let pred: Vec<Option<[f64; 3]>> = (0..50).map(|_| Some(random_unit(&mut rng))).collect();
            let mask = vec![true; 50];
            let before = mae_normals(&pred, &gt, &mask).unwrap().0;
            let rg: Vec<_> = gt.iter().map(|&n| rotate_about(n, axis, angle)).collect();
            let rp: Vec<_> = pred.iter().map(|n| n.map(|n| rotate_about(n, axis, angle))).collect();
            let after = mae_normals(&rp, &rg, &mask).unwrap().0;
            prop_assert!((before - after).abs() < 1e-6);
            let swapped: Vec<_> = gt.iter().map(|&n| Some(n)).collect();
            let back: Vec<_> = pred.iter().map(|n| n.unwrap()).collect();
            prop_assert!((mae_normals(&swapped, &back, &mask).unwrap().0 - before).abs() < 1e-9);
        }
    }
}
