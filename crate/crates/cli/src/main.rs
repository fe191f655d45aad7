//! `idpp` command-line tool: candidate selection, gradient checks, toy
//! training and evaluation over JSON files.

mod io;
mod selftest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use idpp::config::Config;
use idpp::evaluation::{evaluate, Detection, EvalImage};
use idpp::gradients::{gradcheck_sweep, GRADCHECK_TOLERANCE};
use idpp::inference::{select_scene, selection_detections, QualityMode, SelectionMethod, SelectionResult};
use idpp::scene::Scene;
use idpp::synthetic::{
    continue_training, evaluate_losses, generate_scene, instance_cosines, SceneSpec, TrainState,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "idpp", version, about = "Instance-aware DPP candidate selection toolkit")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: an optional JSON file, then per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing fields take their defaults.
    #[arg(long = "config", global = true, value_name = "FILE")]
    file: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    lambda: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    lambda_ss: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    ss_switch_fraction: Option<f64>,
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    beta: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    nms_tau: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    crowd_tau: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    psd_epsilon: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    fd_step: Option<f64>,
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    #[arg(long, global = true)]
    iterations: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    lr_scores: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    lr_features: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut c: Config = match &self.file {
            Some(p) => io::read_json(p)?,
            None => Config::default(),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { c.$f = v; })* };
        }
        apply!(
            lambda, lambda_ss, ss_switch_fraction, m, beta, nms_tau, crowd_tau, psd_epsilon, fd_step, rng_seed,
            iterations, lr_scores, lr_features
        );
        c.validate().context("invalid configuration")?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Select candidates in one or more scene files.
    Infer(InferArgs),
    /// Compare analytic loss gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Write synthetic crowd scenes.
    Generate(GenerateArgs),
    /// Train scores and features of synthetic scenes.
    TrainToy(TrainArgs),
    /// Compute AP, crowd recall and correct-box probability.
    Eval(EvalArgs),
    /// Check the DPP normalizer, greedy inference and assignment against
    /// brute force.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Idpp,
    Nms,
    Exact,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Idpp => SelectionMethod::Idpp,
            MethodArg::Nms => SelectionMethod::Nms,
            MethodArg::Exact => SelectionMethod::Exact,
        }
    }
}

#[derive(Args)]
struct InferArgs {
    /// Scene files, each holding one scene or an array of scenes.
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "idpp")]
    method: MethodArg,
    /// Use raw scores as qualities instead of `exp(beta·score)`.
    #[arg(long)]
    raw_quality: bool,
    /// Selection output; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Also write the selected boxes as detections for `eval`.
    #[arg(long, value_name = "FILE")]
    detections: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeded instances, starting at `--rng-seed`.
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    /// Multiplies the analytic gradients before comparison.
    #[arg(long, default_value_t = 1.0, hide = true)]
    corrupt_scale: f64,
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene spec JSON; defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Number of scenes, seeded consecutively from the spec's seed.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene spec JSON (one spec or an array); defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Continue from a saved state instead of starting fresh.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    /// Stop after this many further steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Where to write the final state.
    #[arg(long, value_name = "FILE", default_value = "train_state.json")]
    state: PathBuf,
    /// Where to write the loss history.
    #[arg(long, value_name = "FILE", default_value = "losses.csv")]
    csv: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GtFormat {
    /// Array of `{image_id, ground_truth}`.
    Internal,
    /// COCO annotation file.
    Coco,
    /// Scene files; their ground truth is used.
    Scenes,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, value_enum, default_value = "internal")]
    gt_format: GtFormat,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Instances per check.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

/// Failures mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    /// A check ran and did not pass.
    CheckFailed(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::CheckFailed(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_USAGE,
                Failure::CheckFailed(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(e) = cause.downcast_ref::<idpp::error::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.resolve()?;
    match cli.command {
        Command::Infer(a) => infer(&a, &config),
        Command::Gradcheck(a) => gradcheck(&a, &config),
        Command::Generate(a) => generate(&a),
        Command::TrainToy(a) => train(&a, &config),
        Command::Eval(a) => eval(&a),
        Command::Selftest(a) => selftest(&a, &config),
    }
}

fn read_scenes(paths: &[PathBuf]) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for p in paths {
        for s in io::read_one_or_many::<Scene>(p)? {
            s.validate().with_context(|| format!("scene {} in {}", s.image_id, p.display()))?;
            scenes.push(s);
        }
    }
    scenes.sort_by_key(|s| s.image_id);
    if let Some(w) = scenes.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        anyhow::bail!(idpp::error::Error::InvalidInput(format!("image_id {} appears twice", w[0].image_id)));
    }
    Ok(scenes)
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneSelection {
    image_id: u64,
    #[serde(flatten)]
    selection: SelectionResult,
}

fn infer(a: &InferArgs, config: &Config) -> Result<()> {
    let scenes = read_scenes(&a.scenes)?;
    let mode = if a.raw_quality { QualityMode::Raw } else { QualityMode::Exponential(config.beta) };
    let method = SelectionMethod::from(a.method);
    let results: Vec<_> = scenes.par_iter().map(|s| select_scene(s, method, config, mode)).collect();
    let mut selections = Vec::with_capacity(scenes.len());
    for (s, r) in scenes.iter().zip(results) {
        let selection = r.with_context(|| format!("scene {}", s.image_id))?;
        selections.push(SceneSelection { image_id: s.image_id, selection });
    }
    if let Some(path) = &a.detections {
        let dets: Vec<Detection> = scenes
            .iter()
            .zip(&selections)
            .flat_map(|(s, sel)| selection_detections(s, &sel.selection))
            .collect();
        io::write_json(Some(path), &dets)?;
    }
    match selections.as_slice() {
        [one] => io::write_json(a.output.as_deref(), &one.selection),
        many => io::write_json(a.output.as_deref(), many),
    }
}

fn gradcheck(a: &GradcheckArgs, config: &Config) -> Result<()> {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()).into());
    }
    let start = config.rng_seed;
    let seeds = start..start.saturating_add(a.seeds);
    let report = gradcheck_sweep(seeds, config.lambda, config.fd_step, a.corrupt_scale)?;
    println!("instances: {}", report.instances);
    println!("ss max relative error: {:.3e}", report.ss_max_rel_err);
    println!("id max relative error: {:.3e}", report.id_max_rel_err);
    if report.passed(GRADCHECK_TOLERANCE) {
        println!("gradcheck passed (tolerance {GRADCHECK_TOLERANCE:e})");
        Ok(())
    } else {
        Err(Failure::CheckFailed(format!("gradient mismatch above tolerance {GRADCHECK_TOLERANCE:e}")).into())
    }
}

fn read_specs(path: Option<&Path>) -> Result<Vec<SceneSpec>> {
    match path {
        Some(p) => io::read_one_or_many(p),
        None => Ok(vec![SceneSpec::default()]),
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()).into());
    }
    let mut scenes = Vec::new();
    for spec in read_specs(a.spec.as_deref())? {
        for k in 0..a.count {
            let spec = SceneSpec { rng_seed: spec.rng_seed.wrapping_add(k), ..spec.clone() };
            scenes.push(generate_scene(&spec)?.scene);
        }
    }
    match scenes.as_slice() {
        [one] => io::write_json(a.output.as_deref(), one),
        many => io::write_json(a.output.as_deref(), many),
    }
}

#[derive(Serialize)]
struct LossRow {
    iteration: usize,
    ss: f64,
    id_all: f64,
    id_total: f64,
    ce: f64,
}

fn train(a: &TrainArgs, config: &Config) -> Result<()> {
    let specs = read_specs(a.spec.as_deref())?;
    let generated = specs.iter().map(generate_scene).collect::<idpp::error::Result<Vec<_>>>()?;
    let scenes: Vec<Scene> = generated.iter().map(|g| g.scene.clone()).collect();
    let state = match &a.resume {
        Some(p) => io::read_json::<TrainState>(p)?,
        None => TrainState::init(&scenes)?,
    };
    let state = continue_training(&scenes, state, config, a.max_steps.unwrap_or(usize::MAX))?;
    let last = evaluate_losses(&scenes, &state, config)?;

    let mut w = csv::Writer::from_path(&a.csv).with_context(|| format!("writing {}", a.csv.display()))?;
    let rows = state.loss_history.iter().chain(std::iter::once(&last));
    for (iteration, b) in rows.enumerate() {
        w.serialize(LossRow { iteration, ss: b.ss, id_all: b.id_all, id_total: b.id_total, ce: b.cross_entropy })?;
    }
    w.flush()?;
    io::write_json(Some(&a.state), &state)?;

    println!("steps: {} of {}", state.step, 2 * config.iterations);
    if let (Some(first), Some(feature_start)) =
        (state.loss_history.first(), state.loss_history.get(config.iterations))
    {
        println!("id_total: {:.6} initial, {:.6} at feature phase start, {:.6} final", first.id_total, feature_start.id_total, last.id_total);
    }
    for (g, p) in generated.iter().zip(&state.params) {
        if let (Some(intra), Some(inter)) = instance_cosines(&p.features(), &g.instance_of) {
            println!("scene {}: cosine intra {intra:.4} inter {inter:.4}", g.scene.image_id);
        }
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let dets: Vec<Detection> = io::read_json(&a.detections)?;
    let gts: Vec<EvalImage> = match a.gt_format {
        GtFormat::Internal => io::read_json(&a.ground_truth)?,
        GtFormat::Coco => io::coco_to_eval_images(&a.ground_truth)?,
        GtFormat::Scenes => read_scenes(std::slice::from_ref(&a.ground_truth))?
            .into_iter()
            .map(|s| EvalImage { image_id: s.image_id, ground_truth: s.ground_truth })
            .collect(),
    };
    let report = evaluate(&dets, &gts)?;
    io::write_json(a.output.as_deref(), &report)
}

fn selftest(a: &SelftestArgs, config: &Config) -> Result<()> {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be at least 1".into()).into());
    }
    let lines = selftest::run_all(a.instances, config)?;
    for l in &lines {
        let verdict = if l.passed { "ok" } else { "FAILED" };
        println!("{:<26} {:>5} instances  {:<40} {verdict}", l.name, l.instances, l.detail);
    }
    if lines.iter().all(|l| l.passed) {
        Ok(())
    } else {
        Err(Failure::CheckFailed("self-test failed".into()).into())
    }
}
