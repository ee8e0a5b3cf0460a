use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use microfield::diffmath::GroupName;
use microfield::error::{Error, Result};
use microfield::fields::SceneModel;
use microfield::harness::{self, oracle_scene, OracleKind, OracleParams, TrainConfig};
use microfield::io::{self, Checkpoint, LoadOptions, SceneDataset, Split};
use microfield::metrics::Image;
use microfield::perturb::{attach, Direction, PerturbationSpec};

#[derive(Parser)]
#[command(name = "microfield", version, about = "Microfacet-field inverse rendering and property compensation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Scene directory (repeat for `consistency`).
    #[arg(long, global = true)]
    scene: Vec<PathBuf>,
    /// JSON file overriding fields of the training configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Property to manipulate: albedo, roughness, f0, density or envmap.
    #[arg(long, global = true)]
    target: Option<GroupName>,
    /// Property left trainable during fine-tuning.
    #[arg(long, global = true)]
    finetune: Option<GroupName>,
    /// Material multiplier.
    #[arg(long, global = true)]
    m: Option<f32>,
    /// Standard deviation of the density noise.
    #[arg(long = "sigma-d", global = true)]
    sigma_d: Option<f32>,
    /// Environment blur as `size,sigma`.
    #[arg(long, global = true, value_parser = parse_blur)]
    blur: Option<(usize, f64)>,
    /// Desk-scale preset instead of the full-scale one.
    #[arg(long, global = true)]
    desk: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a model on a scene and save a checkpoint.
    Train,
    /// Render the held-out views of a checkpoint.
    Render,
    /// Held-out PSNR, SSIM, MAE and EPSNR of a checkpoint.
    Eval,
    /// Apply one manipulation to a checkpoint.
    Perturb,
    /// Manipulate, then fine-tune a single property.
    Finetune,
    /// Full manipulation x fine-tune matrix.
    Matrix,
    /// Train under several illuminations and compare material buffers.
    Consistency,
    /// Write an analytic sphere dataset.
    OracleGen {
        #[arg(long, value_enum, default_value = "lambertian-sphere")]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    LambertianSphere,
    MirrorSphere,
}

fn parse_blur(s: &str) -> std::result::Result<(usize, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `size,sigma`")?;
    let size = a.trim().parse().map_err(|e| format!("blur size: {e}"))?;
    let sigma = b.trim().parse().map_err(|e| format!("blur sigma: {e}"))?;
    Ok((size, sigma))
}

/// Recursively overlay `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let preset = if self.desk { TrainConfig::desk() } else { TrainConfig::full() };
        let mut cfg = match &self.config {
            Some(path) => {
                let mut v = serde_json::to_value(&preset).expect("config serializes");
                merge(&mut v, io::read_json::<Value>(path)?);
                serde_json::from_value(v).map_err(|source| Error::Json { path: path.clone(), source })?
            }
            None => preset,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.iters {
            cfg.iterations = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn scene(&self) -> Result<SceneDataset> {
        match self.scene.as_slice() {
            [one] => io::load_scene(one),
            [] => Err(Error::Config("--scene is required".into())),
            _ => Err(Error::Config("exactly one --scene expected".into())),
        }
    }

    fn model(&self) -> Result<SceneModel> {
        let path = self.checkpoint.as_ref().ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
        Ok(io::load_checkpoint(path, &LoadOptions::default())?.model)
    }

    fn perturbation(&self, seed: u64) -> Result<PerturbationSpec> {
        let target = self.target.ok_or_else(|| Error::Config("--target is required".into()))?;
        let need = |flag: &str| Error::Config(format!("--target {target} needs {flag}"));
        let spec = match target {
            GroupName::Density => PerturbationSpec::density_noise(self.sigma_d.ok_or_else(|| need("--sigma-d"))?, seed),
            GroupName::Envmap => {
                let (size, sigma) = self.blur.ok_or_else(|| need("--blur"))?;
                PerturbationSpec::envmap_blur(size, sigma)
            }
            _ => {
                let m = self.m.ok_or_else(|| need("--m"))?;
                let direction = if m < 1.0 {
                    Direction::Under
                } else if m > 1.0 {
                    Direction::Over
                } else {
                    Direction::NotApplicable
                };
                PerturbationSpec::multiplier(target, m, direction)
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn eval_split(ds: &SceneDataset) -> Split {
    if ds.count(Split::Test) > 0 {
        Split::Test
    } else {
        Split::Train
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_model(dir: &Path, model: &SceneModel, iteration: u64, cfg: &TrainConfig) -> Result<PathBuf> {
    let path = dir.join("model.ckpt");
    let train = serde_json::to_value(cfg).expect("config serializes");
    io::save_checkpoint(&path, &Checkpoint { model: model.clone(), iteration, train })?;
    Ok(path)
}

fn write_renders(dir: &Path, renders: &[microfield::renderer::RenderOutput]) -> Result<()> {
    mkdir(dir)?;
    for (v, r) in renders.iter().enumerate() {
        io::write_png(&dir.join(format!("{v:03}.png")), &Image::new(r.width, r.height, 3, r.rgb_clamped())?)?;
        io::write_png(&dir.join(format!("{v:03}_opacity.png")), &Image::new(r.width, r.height, 1, r.opacity.clone())?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let out = &c.out;
    match cli.command {
        Command::Train => {
            let cfg = c.train_config()?;
            let ds = c.scene()?;
            let init = c.checkpoint.as_ref().map(|_| c.model()).transpose()?;
            let outcome = harness::train(&ds, &cfg, init)?;
            mkdir(out)?;
            let path = save_model(out, &outcome.model, cfg.iterations as u64, &cfg)?;
            io::write_json(&out.join("losses.json"), &outcome.losses)?;
            io::write_json(&out.join("evals.json"), &outcome.evals)?;
            log::info!("saved {}", path.display());
        }
        Command::Render => {
            let cfg = c.train_config()?;
            let ds = c.scene()?;
            let model = c.model()?;
            let eval = harness::evaluate(&model, &ds, eval_split(&ds), &cfg.render, cfg.seed, cfg.workers)?;
            write_renders(out, &eval.renders)?;
        }
        Command::Eval => {
            let cfg = c.train_config()?;
            let ds = c.scene()?;
            let eval = harness::evaluate(&c.model()?, &ds, eval_split(&ds), &cfg.render, cfg.seed, cfg.workers)?;
            mkdir(out)?;
            io::write_json(&out.join("metrics.json"), &eval.metrics)?;
            println!("{}", serde_json::to_string_pretty(&eval.metrics).expect("metrics serialize"));
        }
        Command::Perturb => {
            let cfg = c.train_config()?;
            let spec = c.perturbation(cfg.seed)?;
            let model = attach(&c.model()?, &spec)?;
            mkdir(out)?;
            save_model(out, &model, 0, &cfg)?;
            io::write_json(&out.join("perturbation.json"), &spec)?;
            if !c.scene.is_empty() {
                let ds = c.scene()?;
                let eval = harness::evaluate(&model, &ds, eval_split(&ds), &cfg.render, cfg.seed, cfg.workers)?;
                io::write_json(&out.join("metrics.json"), &eval.metrics)?;
                write_renders(&out.join("renders"), &eval.renders)?;
            }
        }
        Command::Finetune => {
            let cfg = c.train_config()?;
            let ds = c.scene()?;
            let spec = c.perturbation(cfg.seed)?;
            let group = c.finetune.ok_or_else(|| Error::Config("--finetune is required".into()))?;
            let iters = c.iters.unwrap_or(cfg.finetune_iterations);
            let r = harness::finetune(&c.model()?, &spec, group, &ds, &cfg, iters, cfg.seed)?;
            mkdir(out)?;
            save_model(out, &r.model, r.best_iteration as u64, &cfg)?;
            io::write_json(&out.join("metrics.json"), &r.metrics)?;
            io::write_json(&out.join("history.json"), &r.history)?;
            write_renders(&out.join("renders"), &r.renders)?;
            println!("{}", serde_json::to_string_pretty(&r.metrics).expect("metrics serialize"));
        }
        Command::Matrix => {
            let cfg = c.train_config()?;
            let ds = c.scene()?;
            let rows = if cfg.matrix_rows.is_empty() { PerturbationSpec::default_rows(cfg.seed) } else { cfg.matrix_rows.clone() };
            mkdir(out)?;
            let m = harness::run_matrix(&c.model()?, &ds, &rows, &cfg, Some(out), None)?;
            log::info!("{} cells written to {}", m.cells.len(), out.display());
        }
        Command::Consistency => {
            let cfg = c.train_config()?;
            let datasets = c.scene.iter().map(|d| io::load_scene(d)).collect::<Result<Vec<_>>>()?;
            let (report, models) = harness::consistency_experiment(&datasets, &cfg, None)?;
            report.write(out)?;
            for (ds, model) in datasets.iter().zip(&models) {
                save_model(&out.join(&ds.name), model, cfg.iterations as u64, &cfg)?;
            }
        }
        Command::OracleGen { kind } => {
            let kind = match kind {
                Kind::LambertianSphere => OracleKind::LambertianSphere,
                Kind::MirrorSphere => OracleKind::MirrorSphere,
            };
            let params = match &c.config {
                Some(path) => {
                    let mut v = serde_json::to_value(OracleParams::desk(kind)).expect("params serialize");
                    merge(&mut v, io::read_json::<Value>(path)?);
                    serde_json::from_value(v).map_err(|source| Error::Json { path: path.clone(), source })?
                }
                None => OracleParams::desk(kind),
            };
            let scene = oracle_scene(&params);
            mkdir(out)?;
            io::write_scene(out, &scene.dataset)?;
            io::write_json(&out.join("oracle.json"), &scene.params)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
