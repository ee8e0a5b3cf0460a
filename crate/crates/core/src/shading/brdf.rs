//! Scalar microfacet terms. The renderer evaluates the same formulas inside
//! the graph (see `integrator`); these versions back the fixtures and
//! oracles.

use std::f64::consts::PI;

pub const ALPHA_MIN: f64 = 1e-3;
pub const DENOM_MIN: f64 = 1e-6;

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// `2 (v . h) h - v`
#[inline]
pub fn reflect(v: Vec3, h: Vec3) -> Vec3 {
    let k = 2.0 * dot(v, h);
    [k * h[0] - v[0], k * h[1] - v[1], k * h[2] - v[2]]
}

/// Schlick Fresnel, `cos_theta = h . w_o` clamped to `[0, 1]`.
pub fn fresnel(f0: f64, cos_theta: f64) -> f64 {
    let c = cos_theta.clamp(0.0, 1.0);
    f0 + (1.0 - f0) * (1.0 - c).powi(5)
}

/// Trowbridge-Reitz (GGX) normal distribution.
pub fn ndf(alpha: f64, n_dot_h: f64) -> f64 {
    if n_dot_h <= 0.0 {
        return 0.0;
    }
    let a2 = alpha.max(ALPHA_MIN).powi(2);
    let t = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Smith masking for one direction; zero below the horizon.
pub fn smith_g1(n_dot_v: f64, alpha: f64) -> f64 {
    if n_dot_v <= 0.0 {
        return 0.0;
    }
    let a2 = alpha.max(ALPHA_MIN).powi(2);
    2.0 * n_dot_v / (n_dot_v + (a2 + (1.0 - a2) * n_dot_v * n_dot_v).sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct BrdfQuery {
    pub wo: Vec3,
    pub wi: Vec3,
    pub n: Vec3,
    pub albedo: Vec3,
    pub roughness: f64,
    pub f0: Vec3,
}

impl BrdfQuery {
    pub fn half(&self) -> Vec3 {
        normalize(add(self.wo, self.wi))
    }
}

/// Cook-Torrance specular lobe `D G1(w_o) g / (4 (n.w_o)(n.w_i))`.
pub fn specular(q: &BrdfQuery, g: f64) -> f64 {
    let no = dot(q.n, q.wo);
    let ni = dot(q.n, q.wi);
    if no <= 0.0 || ni <= 0.0 {
        return 0.0;
    }
    let h = q.half();
    ndf(q.roughness, dot(q.n, h)) * smith_g1(no, q.roughness) * g / (4.0 * no * ni).max(DENOM_MIN)
}

/// Diffuse plus specular: `rho/pi (1 - Fr) + Fr f_s` per channel.
pub fn brdf(q: &BrdfQuery, g: f64) -> Vec3 {
    let no = dot(q.n, q.wo);
    let ni = dot(q.n, q.wi);
    if no <= 0.0 || ni <= 0.0 {
        return [0.0; 3];
    }
    let c = dot(q.half(), q.wo);
    let fs = specular(q, g);
    [0, 1, 2].map(|k| combine(q.albedo[k], fresnel(q.f0[k], c), fs))
}

/// Eq.-1 mixing of the two lobes for known `Fr` and `f_s`.
pub fn combine(albedo: f64, fr: f64, fs: f64) -> f64 {
    albedo / PI * (1.0 - fr) + fr * fs
}
