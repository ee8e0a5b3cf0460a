use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::finetune::finetune_model;
use super::train::{evaluate, with_workers};
use crate::diffmath::rng::{combine, label_key};
use crate::diffmath::GroupName;
use crate::error::{Error, Result};
use crate::fields::SceneModel;
use crate::io::{write_csv, write_json, write_png, ReportRow, SceneDataset, Split};
use crate::metrics::{Image, MetricBundle};
use crate::perturb::{attach, PerturbationSpec};
use crate::renderer::RenderOutput;

/// Columns of the matrix besides the no-fine-tune column.
pub const FINETUNE_GROUPS: [GroupName; 5] =
    [GroupName::Albedo, GroupName::Roughness, GroupName::F0, GroupName::Density, GroupName::Envmap];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub spec: PerturbationSpec,
    /// `None` is the no-fine-tune column.
    pub finetuned: Option<GroupName>,
    pub metrics: MetricBundle,
    pub best_iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub scene: String,
    pub baseline: MetricBundle,
    /// Row-major: for each spec the no-fine-tune cell, then one cell per
    /// entry of `FINETUNE_GROUPS`.
    pub cells: Vec<MatrixCell>,
}

impl ExperimentMatrix {
    pub fn cell(&self, spec: &PerturbationSpec, finetuned: Option<GroupName>) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| &c.spec == spec && c.finetuned == finetuned)
    }

    /// Report rows: the baseline first, then every cell in matrix order.
    pub fn rows(&self) -> Vec<ReportRow> {
        let row = |manipulated: String, direction: &str, finetuned: String, m: &MetricBundle| ReportRow {
            scene: self.scene.clone(),
            manipulated,
            direction: direction.to_string(),
            finetuned,
            psnr: m.psnr,
            ssim: m.ssim,
            mae: m.mae,
            epsnr: m.epsnr,
        };
        let mut rows = vec![row("baseline".into(), "n/a", "none".into(), &self.baseline)];
        for c in &self.cells {
            let ft = c.finetuned.map_or_else(|| "none".to_string(), |g| g.to_string());
            rows.push(row(c.spec.target.to_string(), c.spec.direction.as_str(), ft, &c.metrics));
        }
        rows
    }
}

/// Every `(spec, column)` pair in matrix order; no-fine-tune cells first.
pub fn cell_jobs(specs: &[PerturbationSpec]) -> Vec<(usize, Option<GroupName>)> {
    let mut jobs: Vec<(usize, Option<GroupName>)> = (0..specs.len()).map(|i| (i, None)).collect();
    for i in 0..specs.len() {
        jobs.extend(FINETUNE_GROUPS.iter().map(|&g| (i, Some(g))));
    }
    jobs
}

fn cell_name(spec: &PerturbationSpec, finetuned: Option<GroupName>) -> String {
    format!("{}__{}", spec.label(), finetuned.map_or_else(|| "none".to_string(), |g| g.to_string()))
}

/// Seed of a cell, derived from its identity only.
pub fn cell_seed(base: u64, scene: &str, spec: &PerturbationSpec, finetuned: Option<GroupName>) -> u64 {
    combine(base, label_key(&format!("{scene}/{}/{}", cell_name(spec, finetuned), spec.describe())))
}

struct CellResult {
    cell: MatrixCell,
    preview: Option<RenderOutput>,
}

fn run_cell(baseline: &SceneModel, ds: &SceneDataset, cfg: &TrainConfig, spec: &PerturbationSpec, finetuned: Option<GroupName>) -> Result<CellResult> {
    let perturbed = attach(baseline, spec)?;
    let split = if ds.count(Split::Test) > 0 { Split::Test } else { Split::Train };
    match finetuned {
        None => {
            let e = evaluate(&perturbed, ds, split, &cfg.render, cfg.seed, None)?;
            Ok(CellResult {
                cell: MatrixCell { spec: *spec, finetuned, metrics: e.metrics, best_iteration: 0 },
                preview: e.renders.into_iter().next(),
            })
        }
        Some(g) => {
            let seed = cell_seed(cfg.seed, &ds.name, spec, finetuned);
            let cell_cfg = TrainConfig { workers: None, ..cfg.clone() };
            let out = finetune_model(&perturbed, g, ds, &cell_cfg, cfg.finetune_iterations, seed)?;
            Ok(CellResult {
                cell: MatrixCell { spec: *spec, finetuned, metrics: out.metrics, best_iteration: out.best_iteration },
                preview: out.renders.into_iter().next(),
            })
        }
    }
}

/// Run the freeze-one / fine-tune-one matrix from a frozen baseline.
///
/// `order` optionally permutes the execution order of `cell_jobs`; results
/// are keyed by cell identity so the output does not depend on it. With
/// `out_dir`, writes `matrix.csv`, `matrix.json` and one PNG per cell
/// (first held-out view) under `cells/`.
pub fn run_matrix(
    baseline: &SceneModel,
    ds: &SceneDataset,
    specs: &[PerturbationSpec],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    order: Option<&[usize]>,
) -> Result<ExperimentMatrix> {
    cfg.validate()?;
    for s in specs {
        s.validate()?;
    }
    let jobs = cell_jobs(specs);
    let order: Vec<usize> = match order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..jobs.len()).collect::<Vec<_>>() {
                return Err(Error::Config(format!("cell order must permute 0..{}", jobs.len())));
            }
            o.to_vec()
        }
        None => (0..jobs.len()).collect(),
    };
    let split = if ds.count(Split::Test) > 0 { Split::Test } else { Split::Train };

    let (base_eval, results) = with_workers(cfg.workers, || -> Result<_> {
        let base_eval = evaluate(baseline, ds, split, &cfg.render, cfg.seed, None)?;
        let done: Vec<(usize, Result<CellResult>)> = order
            .par_iter()
            .map(|&j| {
                let (i, g) = jobs[j];
                log::info!("matrix cell {}", cell_name(&specs[i], g));
                (j, run_cell(baseline, ds, cfg, &specs[i], g))
            })
            .collect();
        Ok((base_eval, done))
    })??;

    let mut slots: Vec<Option<CellResult>> = (0..jobs.len()).map(|_| None).collect();
    for (j, r) in results {
        slots[j] = Some(r?);
    }
    let slots: Vec<CellResult> = slots.into_iter().map(|s| s.expect("every job ran")).collect();
    let matrix = ExperimentMatrix {
        scene: ds.name.clone(),
        baseline: base_eval.metrics,
        cells: slots.iter().map(|s| s.cell.clone()).collect(),
    };

    if let Some(dir) = out_dir {
        let cells_dir = dir.join("cells");
        fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
        write_csv(&dir.join("matrix.csv"), &matrix.rows())?;
        write_json(&dir.join("matrix.json"), &matrix)?;
        if let Some(r) = base_eval.renders.first() {
            write_preview(&cells_dir.join("baseline.png"), r)?;
        }
        for s in &slots {
            if let Some(r) = &s.preview {
                write_preview(&cells_dir.join(format!("{}.png", cell_name(&s.cell.spec, s.cell.finetuned))), r)?;
            }
        }
    }
    Ok(matrix)
}

fn write_preview(path: &Path, r: &RenderOutput) -> Result<()> {
    write_png(path, &Image::new(r.width, r.height, 3, r.rgb_clamped())?)
}

/// How per-scene rows are weighted in the cross-scene mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneWeighting {
    PerScene,
    PerView,
}

/// Mean over scenes of rows with the same (manipulated, direction,
/// finetuned) key. `scenes` pairs each scene's rows with its evaluated view
/// count. Optional metrics average over the scenes that report them.
pub fn cross_scene_mean(scenes: &[(Vec<ReportRow>, usize)], weighting: SceneWeighting) -> Vec<ReportRow> {
    let label = match weighting {
        SceneWeighting::PerScene => "mean_per_scene",
        SceneWeighting::PerView => "mean_per_view",
    };
    let Some((first, _)) = scenes.first() else { return Vec::new() };
    let mut out = Vec::new();
    for key in first {
        let mut acc = [0.0f64; 4];
        let mut wsum = [0.0f64; 4];
        for (rows, views) in scenes {
            let w = match weighting {
                SceneWeighting::PerScene => 1.0,
                SceneWeighting::PerView => *views as f64,
            };
            let Some(r) = rows
                .iter()
                .find(|r| r.manipulated == key.manipulated && r.direction == key.direction && r.finetuned == key.finetuned)
            else {
                continue;
            };
            for (k, v) in [Some(r.psnr), Some(r.ssim), r.mae, r.epsnr].into_iter().enumerate() {
                if let Some(v) = v {
                    acc[k] += w * v;
                    wsum[k] += w;
                }
            }
        }
        let mean = |k: usize| (wsum[k] > 0.0).then(|| acc[k] / wsum[k]);
        out.push(ReportRow {
            scene: label.to_string(),
            manipulated: key.manipulated.clone(),
            direction: key.direction.clone(),
            finetuned: key.finetuned.clone(),
            psnr: mean(0).unwrap_or(f64::NAN),
            ssim: mean(1).unwrap_or(f64::NAN),
            mae: mean(2),
            epsnr: mean(3),
        });
    }
    out
}
