use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::TrainConfig;
use super::train::train;
use crate::error::{Error, Result};
use crate::fields::SceneModel;
use crate::io::{write_json, write_pfm, SceneDataset, Split};
use crate::metrics::Image;
use crate::renderer::{render_image, Camera, RenderConfig, RenderOutput};

pub const PROPERTIES: [&str; 4] = ["albedo", "roughness", "f0", "normal"];

/// Spread of one property across illuminations.
#[derive(Clone, Debug, Serialize)]
pub struct PropertyConsistency {
    pub property: String,
    /// Per-view maps of the per-pixel standard deviation across models
    /// (averaged over channels), zero outside the shared foreground.
    #[serde(skip)]
    pub std_maps: Vec<Image>,
    /// Mean of the standard deviation over shared-foreground pixels.
    pub mean_std: f64,
    /// Mean property value over shared-foreground pixels and models.
    pub mean_value: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyReport {
    pub views: usize,
    pub models: usize,
    /// Pixels whose opacity is at least 0.5 in every model.
    pub foreground_pixels: usize,
    pub properties: Vec<PropertyConsistency>,
}

impl ConsistencyReport {
    pub fn property(&self, name: &str) -> Option<&PropertyConsistency> {
        self.properties.iter().find(|p| p.property == name)
    }

    /// `consistency.json` plus one PFM per property and view.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("consistency.json"), self)?;
        for p in &self.properties {
            for (v, img) in p.std_maps.iter().enumerate() {
                write_pfm(&dir.join(format!("std_{}_{v:03}.pfm", p.property)), img)?;
            }
        }
        Ok(())
    }
}

fn check_poses(datasets: &[SceneDataset]) -> Result<()> {
    if datasets.len() < 2 {
        return Err(Error::DatasetMismatch(format!("need at least 2 illuminations, got {}", datasets.len())));
    }
    let first = &datasets[0];
    for ds in &datasets[1..] {
        let same_intrinsics = (ds.width, ds.height) == (first.width, first.height) && (ds.fov_x - first.fov_x).abs() < 1e-9;
        let same_frames = ds.frames.len() == first.frames.len()
            && ds.frames.iter().zip(&first.frames).all(|(a, b)| {
                a.split == b.split && a.c2w.iter().flatten().zip(b.c2w.iter().flatten()).all(|(x, y)| (x - y).abs() < 1e-6)
            });
        if !same_intrinsics || !same_frames {
            return Err(Error::DatasetMismatch(format!("poses of `{}` differ from `{}`", ds.name, first.name)));
        }
    }
    Ok(())
}

/// Per-pixel values of one property, `channels` per pixel.
fn property_buffer(r: &RenderOutput, property: &str) -> (Vec<f32>, usize) {
    match property {
        "albedo" => (RenderOutput::normalized(&r.albedo, &r.opacity), 3),
        "roughness" => (RenderOutput::normalized(&r.roughness, &r.opacity), 1),
        "f0" => (RenderOutput::normalized(&r.f0, &r.opacity), 3),
        _ => (r.unit_normals().into_iter().flat_map(|n| n.unwrap_or([0.0; 3]).map(|c| c as f32)).collect(), 3),
    }
}

/// Compare models of the same geometry from shared poses.
pub fn compare_models(models: &[SceneModel], cameras: &[Camera], render: &RenderConfig, seed: u64) -> Result<ConsistencyReport> {
    let k = models.len();
    let mut renders: Vec<Vec<RenderOutput>> = Vec::with_capacity(cameras.len());
    for (v, cam) in cameras.iter().enumerate() {
        renders.push(models.iter().map(|m| render_image(m, cam, render, seed, v as u64, None)).collect::<Result<_>>()?);
    }
    let mut foreground = 0;
    let masks: Vec<Vec<bool>> = renders
        .iter()
        .map(|rs| {
            let n = rs[0].opacity.len();
            let m: Vec<bool> = (0..n).map(|p| rs.iter().all(|r| r.opacity[p] >= 0.5)).collect();
            foreground += m.iter().filter(|&&b| b).count();
            m
        })
        .collect();

    let mut properties = Vec::new();
    for prop in PROPERTIES {
        let (mut std_sum, mut val_sum) = (0.0f64, 0.0f64);
        let mut std_maps = Vec::with_capacity(cameras.len());
        for (v, rs) in renders.iter().enumerate() {
            let bufs: Vec<(Vec<f32>, usize)> = rs.iter().map(|r| property_buffer(r, prop)).collect();
            let ch = bufs[0].1;
            let (w, h) = (rs[0].width, rs[0].height);
            let mut map = vec![0.0f32; w * h];
            for p in 0..w * h {
                if !masks[v][p] {
                    continue;
                }
                let mut s = 0.0;
                for c in 0..ch {
                    let vals: Vec<f64> = bufs.iter().map(|(b, _)| b[p * ch + c] as f64).collect();
                    let mean = vals.iter().sum::<f64>() / k as f64;
                    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64;
                    s += var.sqrt();
                    val_sum += mean;
                }
                let s = s / ch as f64;
                std_sum += s;
                map[p] = s as f32;
            }
            std_maps.push(Image::new(w, h, 1, map)?);
        }
        let ch = if prop == "roughness" { 1.0 } else { 3.0 };
        let n = foreground.max(1) as f64;
        properties.push(PropertyConsistency {
            property: prop.to_string(),
            std_maps,
            mean_std: std_sum / n,
            mean_value: val_sum / (n * ch),
        });
    }
    Ok(ConsistencyReport { views: cameras.len(), models: k, foreground_pixels: foreground, properties })
}

/// Train one model per illumination (same seed unless `seeds` is given)
/// and compare their material and normal buffers on the held-out poses.
pub fn consistency_experiment(datasets: &[SceneDataset], cfg: &TrainConfig, seeds: Option<&[u64]>) -> Result<(ConsistencyReport, Vec<SceneModel>)> {
    check_poses(datasets)?;
    if let Some(s) = seeds {
        if s.len() != datasets.len() {
            return Err(Error::Config(format!("{} seeds for {} datasets", s.len(), datasets.len())));
        }
    }
    let mut models = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        let seed = seeds.map_or(cfg.seed, |s| s[i]);
        log::info!("consistency: training on `{}` (seed {seed})", ds.name);
        models.push(train(ds, &TrainConfig { seed, ..cfg.clone() }, None)?.model);
    }
    let first = &datasets[0];
    let split = if first.count(Split::Test) > 0 { Split::Test } else { Split::Train };
    let cameras = first.split(split).map(|f| first.camera(f)).collect::<Result<Vec<_>>>()?;
    let report = compare_models(&models, &cameras, &cfg.render, cfg.seed)?;
    Ok((report, models))
}
