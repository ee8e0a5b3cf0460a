//! Analytic test scenes: a unit sphere under a known environment map,
//! rendered exactly (no volume, no Monte Carlo).

use serde::{Deserialize, Serialize};

use crate::io::{Frame, SceneDataset, Split};
use crate::metrics::Image;
use crate::renderer::Camera;
use crate::shading::EnvironmentMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Constant albedo, radiance `albedo * E(n) / pi`.
    LambertianSphere,
    /// Perfect mirror, radiance `L(reflect(-d, n))`.
    MirrorSphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleParams {
    pub kind: OracleKind,
    pub width: usize,
    pub height: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub env_height: usize,
    pub env_width: usize,
    pub radius: f64,
    pub albedo: [f32; 3],
    pub camera_distance: f64,
    pub fov_x: f64,
}

impl OracleParams {
    pub fn desk(kind: OracleKind) -> Self {
        OracleParams {
            kind,
            width: 128,
            height: 128,
            train_views: 16,
            test_views: 4,
            env_height: 32,
            env_width: 64,
            radius: 1.0,
            albedo: [0.3, 0.22, 0.15],
            camera_distance: 4.0,
            fov_x: 1.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleScene {
    pub dataset: SceneDataset,
    pub params: OracleParams,
}

/// Smooth low-dynamic-range sky: blue zenith, pale horizon, brown ground
/// and a broad sun lobe. Every texel stays below 1.
pub fn sky_envmap(height: usize, width: usize) -> EnvironmentMap {
    let sun = normalize([0.5, 0.6, 0.62]);
    let zenith = [0.30, 0.45, 0.75];
    let horizon = [0.70, 0.72, 0.75];
    let ground = [0.30, 0.25, 0.20];
    EnvironmentMap::from_fn(height, width, |d| {
        let sky = if d[1] >= 0.0 {
            let t = d[1].powf(0.5);
            [0, 1, 2].map(|k| horizon[k] + (zenith[k] - horizon[k]) * t)
        } else {
            let t = (-d[1]).powf(0.3);
            [0, 1, 2].map(|k| horizon[k] + (ground[k] - horizon[k]) * t)
        };
        let s = 0.25 * (6.0 * (dot(d, sun) - 1.0)).exp();
        [(sky[0] + s) as f32, (sky[1] + 0.9 * s) as f32, (sky[2] + 0.6 * s) as f32]
    })
}

/// Cosine-weighted irradiance `E(n) = sum L(w) max(0, n.w) dw` evaluated
/// at every texel direction of a map of the same size.
pub fn irradiance_map(env: &EnvironmentMap) -> EnvironmentMap {
    let (h, w) = (env.height, env.width);
    let dirs: Vec<[f64; 3]> = (0..h).flat_map(|y| (0..w).map(move |x| EnvironmentMap::texel_direction(h, w, x, y))).collect();
    let solid: Vec<f64> = (0..h)
        .map(|y| {
            let theta = std::f64::consts::PI * (y as f64 + 0.5) / h as f64;
            (2.0 * std::f64::consts::PI / w as f64) * (std::f64::consts::PI / h as f64) * theta.sin()
        })
        .collect();
    let mut data = Vec::with_capacity(h * w * 3);
    for n in &dirs {
        let mut e = [0.0f64; 3];
        for (i, d) in dirs.iter().enumerate() {
            let c = dot(*n, *d);
            if c > 0.0 {
                let wgt = c * solid[i / w];
                for k in 0..3 {
                    e[k] += wgt * env.data[3 * i + k] as f64;
                }
            }
        }
        data.extend(e.map(|v| v as f32));
    }
    EnvironmentMap { height: h, width: w, data }
}

/// Camera poses on one rising turn around the origin. Train and test views
/// interleave so every test view lies between two training views.
pub fn orbit_cameras(params: &OracleParams) -> Vec<(Split, Camera)> {
    let n = params.train_views + params.test_views;
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let elev = -0.35 + 1.2 * t;
            let az = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            let eye = [
                params.camera_distance * elev.cos() * az.sin(),
                params.camera_distance * elev.sin(),
                params.camera_distance * elev.cos() * az.cos(),
            ];
            let split = if is_test_view(i, params) { Split::Test } else { Split::Train };
            (split, Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], params.fov_x, params.width, params.height))
        })
        .collect()
}

fn is_test_view(i: usize, p: &OracleParams) -> bool {
    if p.test_views == 0 {
        return false;
    }
    let stride = ((p.train_views + p.test_views) / p.test_views).max(1);
    i % stride == stride / 2 && i / stride < p.test_views
}

fn sphere_hit(o: [f64; 3], d: [f64; 3], r: f64) -> Option<[f64; 3]> {
    let b = dot(o, d);
    let c = dot(o, o) - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t > 0.0).then(|| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]])
}

pub fn oracle_scene(params: &OracleParams) -> OracleScene {
    let env = sky_envmap(params.env_height, params.env_width);
    let irr = matches!(params.kind, OracleKind::LambertianSphere).then(|| irradiance_map(&env));
    let mut frames = Vec::new();
    let mut counts = [0usize; 2];
    for (split, cam) in orbit_cameras(params) {
        let idx = &mut counts[split as usize];
        let name = format!("{}_{:03}", split.as_str(), *idx);
        *idx += 1;
        let npx = params.width * params.height;
        let mut rgb = Vec::with_capacity(3 * npx);
        let mut alpha = Vec::with_capacity(npx);
        let mut normals = Vec::with_capacity(npx);
        for y in 0..params.height {
            for x in 0..params.width {
                let (o, d) = cam.ray(x, y);
                match sphere_hit(o, d, params.radius) {
                    Some(p) => {
                        let n = normalize(p);
                        let c = match (&irr, params.kind) {
                            (Some(irr), _) => {
                                let e = irr.lookup(n);
                                [0, 1, 2].map(|k| params.albedo[k] as f64 * e[k] / std::f64::consts::PI)
                            }
                            _ => {
                                let k = 2.0 * dot(d, n);
                                env.lookup(normalize([d[0] - k * n[0], d[1] - k * n[1], d[2] - k * n[2]]))
                            }
                        };
                        rgb.extend(c.map(|v| v as f32));
                        alpha.push(1.0);
                        normals.push(n);
                    }
                    None => {
                        rgb.extend(env.lookup(d).map(|v| v as f32));
                        alpha.push(0.0);
                        normals.push([0.0, 0.0, 1.0]);
                    }
                }
            }
        }
        frames.push(Frame {
            name,
            split,
            rgb: Image::new(params.width, params.height, 3, rgb).expect("sized buffer"),
            alpha,
            c2w: cam.c2w,
            normals: Some(normals),
        });
    }
    let name = match params.kind {
        OracleKind::LambertianSphere => "lambertian_sphere",
        OracleKind::MirrorSphere => "mirror_sphere",
    };
    OracleScene {
        dataset: SceneDataset {
            name: name.to_string(),
            fov_x: params.fov_x,
            width: params.width,
            height: params.height,
            frames,
            env: Some(env),
        },
        params: params.clone(),
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let l = dot(a, a).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}
