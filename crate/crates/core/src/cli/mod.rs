//! Command-line front end: `inject-noise`, `correct`, `evaluate`,
//! `simulate` and `render`.
//!
//! Every run resolves a [`RunConfig`], writes it to `<out>/config.json`
//! and only then touches the inputs. Outputs do not depend on `--workers`.

mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

pub use config::{
    EvaluationOptions, Inputs, Profile, RenderOptions, RunConfig, SimulationOptions, PROFILES,
};

use crate::correction::correct_dataset;
use crate::datamodel::{
    load_annotations, load_coco, render_svg, to_coco_string, AnnotationFormat, Dataset, Layer,
};
use crate::evaluation::{error_breakdown, evaluate_ap50, quality_stats};
use crate::noise::{apply_noise, Sparsity, SuperfluousConfig};
use crate::simloop::{generate, run_loop_with};

#[derive(Debug, Parser)]
#[command(name = "boxrefine", version, about = "Correct noisy and sparse bounding-box annotations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for per-image parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Named hyperparameter profile, e.g. `nb40-ex` or `edmonton`.
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct NoiseArgs {
    /// Box noise level, e.g. 0.4.
    #[arg(long)]
    pub box_noise: Option<f64>,
    /// Fraction of annotations to drop (`0.5`, `50%`) or `extreme`.
    #[arg(long)]
    pub sparsity: Option<Sparsity>,
    /// Add Binomial(10, 0.5) random boxes per image.
    #[arg(long)]
    pub superfluous: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CorrectionArgs {
    #[arg(long)]
    pub distance_limit: Option<f64>,
    #[arg(long)]
    pub mining_threshold: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Side of fixed square boxes (point-derived annotations).
    #[arg(long)]
    pub fixed_size: Option<f64>,
    #[arg(long)]
    pub no_box_correction: bool,
    #[arg(long)]
    pub no_mining: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct InputFormatArgs {
    /// `coco` or `points`.
    #[arg(long)]
    pub format: Option<AnnotationFormat>,
    /// Box side used for point annotations.
    #[arg(long)]
    pub point_side: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a clean dataset with box noise, sparsity and superfluous boxes.
    InjectNoise {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: Option<String>,
        #[command(flatten)]
        format: InputFormatArgs,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Correct targets with detector predictions.
    Correct {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        targets: Option<String>,
        #[arg(long)]
        detections: Option<String>,
        #[command(flatten)]
        format: InputFormatArgs,
        #[command(flatten)]
        correction: CorrectionArgs,
    },
    /// AP50, annotation quality and error breakdown.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        gt: Option<String>,
        #[arg(long)]
        pred: Option<String>,
        #[arg(long)]
        score_floor: Option<f64>,
    },
    /// Run the simulated teacher-student loop on a synthetic scene.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        keep_rate: Option<f64>,
        #[arg(long)]
        images: Option<usize>,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        correction: CorrectionArgs,
        /// Disable box correction and mining.
        #[arg(long)]
        no_correction: bool,
        /// Write per-iteration SVGs.
        #[arg(long)]
        render: bool,
    },
    /// Draw a dataset as SVG, one file per image.
    Render {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        input: Option<String>,
        #[arg(long)]
        gt: Option<String>,
        #[command(flatten)]
        format: InputFormatArgs,
        /// Comma-separated layers: original,corrected,mined,detections,ground-truth.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<Layer>>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::InjectNoise { .. } => "inject-noise",
            Command::Correct { .. } => "correct",
            Command::Evaluate { .. } => "evaluate",
            Command::Simulate { .. } => "simulate",
            Command::Render { .. } => "render",
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::InjectNoise { common, .. }
            | Command::Correct { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Simulate { common, .. }
            | Command::Render { common, .. } => common,
        }
    }
}

fn apply_noise_args(cfg: &mut RunConfig, a: &NoiseArgs) {
    if let Some(v) = a.box_noise {
        cfg.noise.box_noise = v;
    }
    if let Some(v) = a.sparsity {
        cfg.noise.sparsity = v;
    }
    if a.superfluous && cfg.noise.superfluous.is_none() {
        cfg.noise.superfluous = Some(SuperfluousConfig::default());
    }
}

fn apply_correction_args(cfg: &mut RunConfig, a: &CorrectionArgs) {
    let c = &mut cfg.correction;
    if let Some(v) = a.distance_limit {
        c.distance_limit = Some(v);
    }
    if let Some(v) = a.mining_threshold {
        c.mining_threshold = Some(v);
    }
    if let Some(v) = a.temperature {
        c.temperature = v;
    }
    if let Some(v) = a.fixed_size {
        c.fixed_size = Some(v);
    }
    if a.no_box_correction {
        c.distance_limit = None;
    }
    if a.no_mining {
        c.mining_threshold = None;
    }
}

fn apply_format_args(cfg: &mut RunConfig, a: &InputFormatArgs) {
    if let Some(f) = a.format {
        cfg.inputs.format = f;
    }
    if let Some(s) = a.point_side {
        cfg.inputs.point_side = s;
    }
}

fn set(slot: &mut Option<String>, v: &Option<String>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

/// Layers defaults, config file, profile and flags into the run config.
pub fn resolve(command: &Command) -> crate::Result<RunConfig> {
    let common = command.common();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &common.profile {
        cfg.apply_profile(p)?;
    }
    cfg.command = command.name().to_string();
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    match command {
        Command::InjectNoise { input, format, noise, .. } => {
            set(&mut cfg.inputs.input, input);
            apply_format_args(&mut cfg, format);
            apply_noise_args(&mut cfg, noise);
        }
        Command::Correct { targets, detections, format, correction, .. } => {
            set(&mut cfg.inputs.targets, targets);
            set(&mut cfg.inputs.detections, detections);
            apply_format_args(&mut cfg, format);
            apply_correction_args(&mut cfg, correction);
        }
        Command::Evaluate { gt, pred, score_floor, .. } => {
            set(&mut cfg.inputs.ground_truth, gt);
            set(&mut cfg.inputs.predictions, pred);
            if let Some(f) = score_floor {
                cfg.evaluation.breakdown_score_floor = *f;
            }
        }
        Command::Simulate {
            iterations,
            keep_rate,
            images,
            noise,
            correction,
            no_correction,
            render,
            ..
        } => {
            if let Some(n) = iterations {
                cfg.simulation.iterations = *n;
            }
            if let Some(a) = keep_rate {
                cfg.simulation.keep_rate = *a;
            }
            if let Some(n) = images {
                cfg.simulation.scene.images = *n;
            }
            apply_noise_args(&mut cfg, noise);
            apply_correction_args(&mut cfg, correction);
            if *no_correction {
                cfg.correction.distance_limit = None;
                cfg.correction.mining_threshold = None;
            }
            if *render {
                cfg.render.enabled = true;
            }
        }
        Command::Render { input, gt, format, layers, .. } => {
            set(&mut cfg.inputs.input, input);
            apply_format_args(&mut cfg, format);
            set(&mut cfg.inputs.ground_truth, gt);
            if let Some(l) = layers {
                cfg.render.layers = l.clone();
            }
        }
    }
    cfg.sync_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(v: &'a Option<String>, what: &str) -> anyhow::Result<&'a str> {
    match v {
        Some(p) => Ok(p.as_str()),
        None => bail!("missing {what}: pass it as a flag or in the config file"),
    }
}

fn write_output(out: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_pretty<S: serde::Serialize>(v: &S) -> String {
    serde_json::to_string_pretty(v).expect("output serializes") + "\n"
}

/// Writes a dataset and reads it back to make sure the file is complete.
fn write_dataset(out: &Path, name: &str, ds: &Dataset<f64>) -> anyhow::Result<()> {
    ds.validate()?;
    write_output(out, name, &to_coco_string(ds))?;
    let back: Dataset<f64> = load_coco(out.join(name))?;
    if &back != ds {
        bail!("{name} did not read back identically");
    }
    Ok(())
}

fn load_dataset(path: &str, cfg: &RunConfig, sizes_from: Option<&Dataset<f64>>) -> anyhow::Result<Dataset<f64>> {
    let mut ds: Dataset<f64> = load_annotations(path, cfg.inputs.format)?;
    if let Some(other) = sizes_from {
        ds.fill_sizes_from(other);
    }
    ds.materialize_points(cfg.inputs.point_side)?;
    Ok(ds)
}

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.svg")
}

fn inject_noise(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let input = required(&cfg.inputs.input, "input dataset (--input)")?;
    let clean = load_dataset(input, cfg, None)?;
    let (noisy, summary) = apply_noise(&clean, &cfg.noise)?;
    write_dataset(out, "noisy.json", &noisy)?;
    write_output(out, "noise_meta.json", &to_pretty(&summary))
}

fn correct(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let targets_path = required(&cfg.inputs.targets, "targets (--targets)")?;
    let det_path = required(&cfg.inputs.detections, "detections file (--detections)")?;
    if !Path::new(det_path).is_file() {
        bail!("detections file not found: {det_path}");
    }
    let detections: Dataset<f64> = load_coco(det_path)?;
    let targets = load_dataset(targets_path, cfg, Some(&detections))?;
    let (corrected, report) = correct_dataset(&targets, &detections, &cfg.correction)?;
    write_dataset(out, "corrected.json", &corrected)?;
    write_output(out, "report.json", &to_pretty(&report))
}

fn evaluate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let gt_path = required(&cfg.inputs.ground_truth, "ground truth (--gt)")?;
    let pred_path = required(&cfg.inputs.predictions, "predictions (--pred)")?;
    let gt: Dataset<f64> = load_coco(gt_path)?;
    let pred: Dataset<f64> = load_coco(pred_path)?;
    let mut offenders = pred.ids_missing_from(&gt);
    offenders.extend(gt.ids_missing_from(&pred));
    if !offenders.is_empty() {
        return Err(crate::Error::UnknownImages(offenders))
            .context("image ids differ between ground truth and predictions");
    }
    let eval = evaluate_ap50(&gt, &pred)?;
    let quality = quality_stats(&gt, &pred);
    let errors = error_breakdown(&gt, &pred, cfg.evaluation.breakdown_score_floor)?;
    write_output(out, "eval.json", &to_pretty(&eval))?;
    write_output(out, "ap_per_class.csv", &eval.to_csv())?;
    write_output(out, "quality.json", &to_pretty(&quality))?;
    write_output(out, "errors.json", &to_pretty(&errors))
}

fn simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let lc = cfg.loop_config();
    let scenario = generate(&lc.scene, &lc.noise)?;
    write_dataset(out, "truth.json", &scenario.truth)?;
    write_dataset(out, "noisy.json", &scenario.noisy)?;
    let layers: BTreeSet<Layer> = cfg.render.layers.iter().copied().collect();
    let trace = run_loop_with(&scenario, &lc, |snap| {
        if !cfg.render.enabled {
            return Ok(());
        }
        for (im, truth) in snap.images.iter().zip(snap.truth).take(cfg.render.max_images) {
            let svg = render_svg(im, Some(&truth.annotations), snap.class_names, &layers);
            let name = format!("svg/iter_{:03}/{}", snap.iteration, file_name_for(&im.id));
            write_output(out, &name, &svg).map_err(|e| crate::Error::Config(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    write_output(out, "trace.jsonl", &trace.to_jsonl())
}

fn render(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let input = required(&cfg.inputs.input, "input dataset (--input)")?;
    let gt = match &cfg.inputs.ground_truth {
        Some(p) => Some(load_coco::<f64>(p)?),
        None => None,
    };
    let ds = load_dataset(input, cfg, gt.as_ref())?;
    let layers: BTreeSet<Layer> = cfg.render.layers.iter().copied().collect();
    let mut names = BTreeSet::new();
    for im in &ds.images {
        let gt_anns = gt.as_ref().and_then(|g| g.image(&im.id)).map(|g| g.annotations.as_slice());
        let name = file_name_for(&im.id);
        if !names.insert(name.clone()) {
            bail!("image ids collide after file name sanitizing: {}", im.id);
        }
        write_output(out, &format!("svg/{name}"), &render_svg(im, gt_anns, &ds.class_names, &layers))?;
    }
    Ok(())
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.command)?;
    let common = cli.command.common();
    let out = common.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_output(out, "config.json", &cfg.to_json())?;

    let job = || match cli.command {
        Command::InjectNoise { .. } => inject_noise(&cfg, out),
        Command::Correct { .. } => correct(&cfg, out),
        Command::Evaluate { .. } => evaluate(&cfg, out),
        Command::Simulate { .. } => simulate(&cfg, out),
        Command::Render { .. } => render(&cfg, out),
    };
    match common.workers {
        Some(0) => bail!("--workers must be at least 1"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(job),
        None => job(),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
