use rand::Rng;

use super::brdf::{cross, dot, ndf, normalize, reflect, Vec3, ALPHA_MIN};

/// Tangent frame `(t, b)` around unit `n`, matching the in-graph frame.
pub fn frame(n: Vec3) -> (Vec3, Vec3) {
    let up = frame_up(n);
    let t = normalize(cross(up, n));
    let b = cross(n, t);
    (t, b)
}

#[inline]
pub fn frame_up(n: Vec3) -> Vec3 {
    if n[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    }
}

#[inline]
pub fn to_world(local: Vec3, n: Vec3) -> Vec3 {
    let (t, b) = frame(n);
    [0, 1, 2].map(|i| local[0] * t[i] + local[1] * b[i] + local[2] * n[i])
}

/// Local GGX half vector for uniforms `(u1, u2)`.
pub fn ggx_half_local(alpha: f64, u1: f64, u2: f64) -> Vec3 {
    let a2 = alpha.max(ALPHA_MIN).powi(2);
    let cos2 = (1.0 - u1) / (1.0 + u1 * (a2 - 1.0));
    let cos = cos2.sqrt();
    let sin = (1.0 - cos2).clamp(1e-12, 1.0).sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    [sin * phi.cos(), sin * phi.sin(), cos]
}

/// Local cosine-weighted direction for uniforms `(u1, u2)`.
pub fn cosine_local(u1: f64, u2: f64) -> Vec3 {
    let r = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    [r * phi.cos(), r * phi.sin(), (1.0 - u1).max(0.0).sqrt()]
}

/// NDF importance sample. Returns `(w_i, pdf)`; `pdf = 0` marks a rejected
/// sample (below the horizon).
pub fn sample_specular(n: Vec3, wo: Vec3, alpha: f64, rng: &mut impl Rng) -> (Vec3, f64) {
    let (u1, u2): (f64, f64) = (rng.gen(), rng.gen());
    let h = to_world(ggx_half_local(alpha, u1, u2), n);
    let wi = reflect(wo, h);
    let ho = dot(h, wo);
    if dot(n, wi) <= 0.0 || ho <= 0.0 {
        return (wi, 0.0);
    }
    let nh = dot(n, h);
    (wi, ndf(alpha, nh) * nh / (4.0 * ho))
}

#[cfg(test)]
mod tests {
    use super::super::brdf::{specular, BrdfQuery};
    use super::*;
    use crate::diffmath::rng::{stream, Purpose};
    use std::f64::consts::PI;

    /// Stratified uniform-hemisphere quadrature of `f(w) dw` with `k*k`
    /// jittered cells in (cos theta, phi).
    fn hemisphere_mc(k: usize, seed: u64, f: impl Fn(Vec3) -> f64) -> f64 {
        let mut rng = stream(seed, Purpose::Eval, 0);
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                let c = (i as f64 + rng.gen::<f64>()) / k as f64;
                let phi = 2.0 * PI * (j as f64 + rng.gen::<f64>()) / k as f64;
                let s = (1.0 - c * c).sqrt();
                acc += f([s * phi.cos(), s * phi.sin(), c]);
            }
        }
        acc * 2.0 * PI / (k * k) as f64
    }

    #[test]
    fn ndf_normalization() {
        for alpha in [0.1, 0.5, 1.0] {
            let v = hemisphere_mc(317, 1, |h| ndf(alpha, h[2]) * h[2]);
            assert!((v - 1.0).abs() < 0.02, "alpha {alpha}: {v}");
        }
    }

    #[test]
    fn near_delta_roughness_gives_mirror_direction() {
        let n = normalize([0.2, 0.3, 0.9]);
        let wo = normalize([0.5, -0.2, 0.7]);
        let mirror = reflect(wo, n);
        for seed in 0..20 {
            let mut rng = stream(seed, Purpose::Shading, 0);
            let (wi, pdf) = sample_specular(n, wo, ALPHA_MIN, &mut rng);
            assert!(pdf > 0.0);
            let ang = dot(wi, mirror).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(ang < 1.0, "{ang}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_samples() {
        let n = [0.0, 0.0, 1.0];
        let wo = normalize([0.3, 0.0, 1.0]);
        let draw = || {
            let mut rng = stream(42, Purpose::Shading, 7);
            (0..16).map(|_| sample_specular(n, wo, 0.4, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn importance_estimator_matches_quadrature() {
        let n = [0.0, 0.0, 1.0];
        for (alpha, wo) in [(0.3, normalize([0.4, 0.1, 1.0])), (0.7, normalize([-0.8, 0.3, 0.5]))] {
            let q = |wi: Vec3| BrdfQuery { wo, wi, n, albedo: [0.0; 3], roughness: alpha, f0: [1.0; 3] };
            let quad = hemisphere_mc(600, 3, |wi| specular(&q(wi), 1.0) * wi[2]);
            let mut rng = stream(5, Purpose::Shading, 1);
            let m = 100_000;
            let vals: Vec<f64> = (0..m)
                .map(|_| {
                    let (wi, pdf) = sample_specular(n, wo, alpha, &mut rng);
                    if pdf > 0.0 {
                        specular(&q(wi), 1.0) * wi[2] / pdf
                    } else {
                        0.0
                    }
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / m as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            let se = (var / m as f64).sqrt();
            assert!((mean - quad).abs() < 3.0 * se + 2e-3, "alpha {alpha}: mc {mean} vs quad {quad} (se {se})");
        }
    }

    #[test]
    fn cosine_samples_lie_in_hemisphere() {
        let mut rng = stream(1, Purpose::Shading, 2);
        for _ in 0..1000 {
            let d = cosine_local(rng.gen(), rng.gen());
            assert!(d[2] >= 0.0 && (dot(d, d) - 1.0).abs() < 1e-12);
        }
    }
}
