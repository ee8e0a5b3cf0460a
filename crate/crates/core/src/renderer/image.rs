use rayon::prelude::*;

use super::camera::{generate_rays, Camera};
use super::volume::{render_rays, RenderConfig};
use crate::diffmath::rng::combine;
use crate::diffmath::Graph;
use crate::error::{Error, Result};
use crate::fields::SceneModel;
use crate::shading::env_radiance;

/// Pixels rendered per graph; fixed so results never depend on threading.
pub const TILE_PIXELS: usize = 256;

/// Per-pixel buffers of a rendered view, row-major, `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Linear radiance, 3 per pixel, unclamped.
    pub rgb: Vec<f32>,
    pub opacity: Vec<f32>,
    /// Weighted (unnormalized) normal sum, 3 per pixel.
    pub normal: Vec<f32>,
    pub albedo: Vec<f32>,
    pub roughness: Vec<f32>,
    pub f0: Vec<f32>,
    pub sample_counts: Vec<u32>,
}

impl RenderOutput {
    fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        RenderOutput {
            width,
            height,
            rgb: vec![0.0; 3 * n],
            opacity: vec![0.0; n],
            normal: vec![0.0; 3 * n],
            albedo: vec![0.0; 3 * n],
            roughness: vec![0.0; n],
            f0: vec![0.0; 3 * n],
            sample_counts: vec![0; n],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// RGB clamped to `[0, 1]`.
    pub fn rgb_clamped(&self) -> Vec<f32> {
        self.rgb.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    /// Unit normal per pixel, or `None` where no defined normal was
    /// accumulated.
    pub fn unit_normals(&self) -> Vec<Option<[f64; 3]>> {
        self.normal
            .chunks(3)
            .map(|n| {
                let v = [n[0] as f64, n[1] as f64, n[2] as f64];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                (l > 1e-6).then(|| v.map(|c| c / l))
            })
            .collect()
    }

    /// Opacity-normalized material buffer (`albedo`, `roughness`, `f0`).
    pub fn normalized(buf: &[f32], opacity: &[f32]) -> Vec<f32> {
        let ch = buf.len() / opacity.len().max(1);
        buf.iter().enumerate().map(|(i, &v)| v / opacity[i / ch].max(1e-6)).collect()
    }
}

/// Render one view. Pixel `p` uses stream key `combine(view_key, p)`, so
/// the output is bit-identical for any number of workers.
pub fn render_image(
    model: &SceneModel,
    camera: &Camera,
    cfg: &RenderConfig,
    seed: u64,
    view_key: u64,
    workers: Option<usize>,
) -> Result<RenderOutput> {
    let mut out = render_pixels(model, camera, &camera.all_pixels(), cfg, seed, view_key, workers)?;
    out.width = camera.width;
    out.height = camera.height;
    Ok(out)
}

/// Render an arbitrary pixel list as a `len x 1` output, with the same
/// per-pixel results `render_image` gives for those pixels.
pub fn render_pixels(
    model: &SceneModel,
    camera: &Camera,
    pixels: &[(usize, usize)],
    cfg: &RenderConfig,
    seed: u64,
    view_key: u64,
    workers: Option<usize>,
) -> Result<RenderOutput> {
    let tiles: Vec<&[(usize, usize)]> = pixels.chunks(TILE_PIXELS).collect();
    let run = || -> Result<Vec<RenderOutput>> {
        tiles.par_iter().map(|tile| render_tile(model, camera, cfg, seed, view_key, tile)).collect()
    };
    let parts = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let mut out = RenderOutput::blank(pixels.len(), 1);
    let mut at = 0;
    for part in parts {
        let n = part.opacity.len();
        out.rgb[3 * at..3 * (at + n)].copy_from_slice(&part.rgb);
        out.opacity[at..at + n].copy_from_slice(&part.opacity);
        out.normal[3 * at..3 * (at + n)].copy_from_slice(&part.normal);
        out.albedo[3 * at..3 * (at + n)].copy_from_slice(&part.albedo);
        out.roughness[at..at + n].copy_from_slice(&part.roughness);
        out.f0[3 * at..3 * (at + n)].copy_from_slice(&part.f0);
        out.sample_counts[at..at + n].copy_from_slice(&part.sample_counts);
        at += n;
    }
    Ok(out)
}

fn render_tile(
    model: &SceneModel,
    camera: &Camera,
    cfg: &RenderConfig,
    seed: u64,
    view_key: u64,
    tile: &[(usize, usize)],
) -> Result<RenderOutput> {
    let rays = generate_rays(camera, tile)?;
    let keys: Vec<u64> = rays.pixels.iter().map(|&p| combine(view_key, p as u64)).collect();
    let mut g = Graph::<f32>::new();
    let vars = model.bind_frozen(&mut g);
    let env = env_radiance(&mut g, &vars);
    let rr = render_rays(&mut g, model, &vars, env, &rays, &keys, cfg, seed);
    let n = tile.len();
    let mut out = RenderOutput::blank(n, 1);
    out.rgb.copy_from_slice(&g.value(rr.rgb).data);
    out.opacity.copy_from_slice(&g.value(rr.opacity).data);
    out.normal.copy_from_slice(&g.value(rr.normal).data);
    out.albedo.copy_from_slice(&g.value(rr.albedo).data);
    out.roughness.copy_from_slice(&g.value(rr.roughness).data);
    out.f0.copy_from_slice(&g.value(rr.f0).data);
    out.sample_counts.copy_from_slice(&rr.sample_counts);
    Ok(out)
}
