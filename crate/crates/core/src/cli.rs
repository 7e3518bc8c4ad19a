//! Command-line entry point: `simulate`, `calibrate`, `train`, `eval`.
//!
//! Exit codes: 0 success, 1 results failed validation, 2 I/O or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibrate::{self, CalibError, CalibSolution};
use crate::learn::checkpoint::Checkpoint;
use crate::learn::model::{matrix_rows, Model, Prediction};
use crate::learn::train::{run_stage, TrainConfig, TrainReport};
use crate::learn::TrainStage;
use crate::metrics::{self, EvalReport, WorldMethod};
use crate::so3;
use crate::synth::{self, SceneSample, SynthConfig};

pub const THREADS_ENV: &str = "FULLPERSP_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Config(_) | CliError::Io { .. } => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "fullpersp", version, about = "Full-perspective body geometry: synthesis, depth calibration, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes as JSON lines.
    Simulate(SimulateArgs),
    /// Solve the root depth of every scene from its 3D joints and observed 2D joints.
    Calibrate(CalibrateArgs),
    /// Run training stages and write checkpoints plus a per-epoch report.
    Train(TrainArgs),
    /// Score a checkpoint on scenes and emit CSV, JSON and SVG reports.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file (`synth` and `train` sections); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub n: Option<usize>,
    /// Camera pitch range in degrees. Also bounds roll unless `--roll-max` is given.
    #[arg(long)]
    pub pitch_max: Option<f64>,
    #[arg(long)]
    pub roll_max: Option<f64>,
    #[arg(long)]
    pub yaw_max: Option<f64>,
    #[arg(long)]
    pub tz_min: Option<f64>,
    #[arg(long)]
    pub tz_max: Option<f64>,
    /// Pixel noise σ on observed joints.
    #[arg(long)]
    pub pixel_noise: Option<f64>,
    /// Rotation noise σ in degrees on the pseudo camera rotation.
    #[arg(long)]
    pub rot_noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scene file (JSON lines).
    pub scenes: PathBuf,
    /// Fail with exit code 1 when a solved scene's residual exceeds this.
    #[arg(long)]
    pub max_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "III")]
    III,
    All,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, value_enum, ignore_case = true)]
    pub stage: StageArg,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the epoch count of every stage.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, required_unless_present = "gt_as_prediction")]
    pub checkpoint: Option<PathBuf>,
    /// Score the ground truth itself, including the exact camera rotation.
    #[arg(long)]
    pub gt_as_prediction: bool,
}

/// Contents of `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

fn out_dir(common: &CommonArgs) -> Result<Option<PathBuf>, CliError> {
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Ok(Some(dir.clone()))
        }
        None => Ok(None),
    }
}

fn require_out(common: &CommonArgs, cmd: &str) -> Result<PathBuf, CliError> {
    out_dir(common)?.ok_or_else(|| CliError::Config(format!("{cmd} requires --out DIR")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn load_scenes(path: &Path) -> Result<Vec<SceneSample>, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    synth::read_jsonl(BufReader::new(f)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?.synth;
    cfg.seed = args.seed;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    if let Some(p) = args.pitch_max {
        cfg.pitch_max_deg = p;
        cfg.roll_max_deg = p;
    }
    let overrides = [
        (args.roll_max, &mut cfg.roll_max_deg),
        (args.yaw_max, &mut cfg.yaw_max_deg),
        (args.tz_min, &mut cfg.tz_min),
        (args.tz_max, &mut cfg.tz_max),
        (args.pixel_noise, &mut cfg.pixel_noise),
        (args.rot_noise, &mut cfg.rot_noise_deg),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    let scenes = synth::generate(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
    match out_dir(&args.common)? {
        Some(dir) => {
            let path = dir.join("scenes.jsonl");
            let f = File::create(&path).map_err(io_err(&path))?;
            let mut w = BufWriter::new(f);
            synth::write_jsonl(&mut w, &scenes).and_then(|_| w.flush()).map_err(io_err(&path))?;
            eprintln!("wrote {} scenes to {}", scenes.len(), path.display());
        }
        None => {
            let mut w = BufWriter::new(io::stdout().lock());
            synth::write_jsonl(&mut w, &scenes).and_then(|_| w.flush()).map_err(io_err(Path::new("<stdout>")))?;
        }
    }
    Ok(())
}

/// One line of `calibrate` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibRecord {
    pub index: u64,
    /// `solved`, `boundary`, `underdetermined` or `error`.
    pub status: String,
    pub solution: Option<CalibSolution>,
    pub error: Option<String>,
}

pub fn calibrate_scene(scene: &SceneSample) -> CalibRecord {
    let (status, solution, error) = match calibrate::solve_scene(scene) {
        Ok(s) => ("solved", Some(s), None),
        Err(CalibError::NoInteriorMinimum(s)) => ("boundary", Some(*s), None),
        Err(e @ CalibError::Underdetermined { .. }) => ("underdetermined", None, Some(e.to_string())),
        Err(e) => ("error", None, Some(e.to_string())),
    };
    CalibRecord { index: scene.index, status: status.into(), solution, error }
}

pub fn calibrate(args: &CalibrateArgs) -> Result<(), CliError> {
    RunConfig::load(args.common.config.as_deref())?;
    let scenes = load_scenes(&args.scenes)?;
    let records: Vec<CalibRecord> = {
        use rayon::prelude::*;
        scenes.par_iter().map(calibrate_scene).collect()
    };
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    if let Some(dir) = out_dir(&args.common)? {
        write_file(&dir.join("calibration.jsonl"), &text)?;
    }
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))?;
    let count = |s: &str| records.iter().filter(|r| r.status == s).count();
    eprintln!(
        "solved {}, boundary {}, underdetermined {}, error {}",
        count("solved"),
        count("boundary"),
        count("underdetermined"),
        count("error")
    );
    if let Some(max) = args.max_residual {
        let bad = records.iter().filter(|r| r.status == "solved" && r.solution.is_some_and(|s| !(s.residual <= max))).count();
        if bad > 0 {
            return Err(CliError::Validation(format!("{bad} scenes have residual above {max:e}")));
        }
    }
    Ok(())
}

fn stages_for(arg: StageArg) -> Vec<TrainStage> {
    match arg {
        StageArg::I => vec![TrainStage::I],
        StageArg::II => vec![TrainStage::II],
        StageArg::III => vec![TrainStage::III],
        StageArg::All => TrainStage::ALL.to_vec(),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?.train;
    cfg.seed = args.seed;
    if let Some(e) = args.epochs {
        for st in TrainStage::ALL {
            cfg.stage_mut(st).epochs = e;
        }
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let stages = stages_for(args.stage);
    let loaded = match &args.checkpoint {
        Some(p) => Some(Checkpoint::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    if stages[0] == TrainStage::III && !loaded.as_ref().is_some_and(|c| c.stage >= TrainStage::II) {
        return Err(CliError::Config("stage III requires frozen weights: pass --checkpoint from stage II".into()));
    }
    let dir = require_out(&args.common, "train")?;
    let scenes = load_scenes(&args.scenes)?;
    let mut model = match loaded {
        Some(c) => c.model,
        None => Model::new(cfg.model, cfg.seed).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let mut report = TrainReport::default();
    for stage in stages {
        let r = run_stage(stage, &mut model, &scenes, &cfg).map_err(|e| CliError::Validation(e.to_string()))?;
        if let Some(last) = r.records.last() {
            eprintln!("stage {}: {} epochs, final loss {:.6}, audit zero {}", stage.name(), r.records.len(), last.total, r.audits_ok());
        }
        report.extend(r);
        let path = dir.join(format!("checkpoint_stage{}.json", stage.name()));
        Checkpoint::new(stage, cfg.seed, model.clone()).save(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    write_file(&dir.join("train_report.csv"), &report.to_csv())?;
    if !report.audits_ok() {
        return Err(CliError::Validation("detachment audit found a non-zero gradient".into()));
    }
    Ok(())
}

/// Orthogonality defect of the raw (unprojected) OrientCorrect outputs.
fn raw_defects(preds: &[Prediction]) -> (f64, f64) {
    let d: Vec<f64> = preds.iter().map(|p| so3::orthogonality_defect(&matrix_rows(&p.r_b_world))).collect();
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    (mean, d.iter().copied().fold(0.0, f64::max))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    RunConfig::load(args.common.config.as_deref())?;
    let dir = require_out(&args.common, "eval")?;
    let scenes = load_scenes(&args.scenes)?;
    let preds: Vec<Prediction> = if args.gt_as_prediction {
        scenes.iter().map(Prediction::ground_truth).collect()
    } else {
        let path = args.checkpoint.as_ref().expect("clap requires a checkpoint");
        let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        ck.model.predict(&scenes)
    };
    let reports = WorldMethod::ALL
        .iter()
        .map(|&m| metrics::evaluate(&scenes, &preds, m, args.gt_as_prediction))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let (defect_mean, defect_max) = raw_defects(&preds);
    let summary = serde_json::json!({
        "scenes": scenes.len(),
        "methods": serde_json::from_str::<serde_json::Value>(&EvalReport::summaries_json(&reports)).expect("own json"),
        "orient_correct_raw_orthogonality_defect": { "mean": defect_mean, "max": defect_max },
    });
    let summary = serde_json::to_string_pretty(&summary).expect("json");
    write_file(&dir.join("eval.csv"), &EvalReport::to_csv(&reports))?;
    write_file(&dir.join("eval_summary.json"), &summary)?;
    write_file(&dir.join("world_comparison.svg"), &comparison_svg(&reports))?;
    let depth: Vec<(f64, f64)> = scenes.iter().zip(&preds).map(|(s, p)| (s.weak_cam.t_z, p.t_z)).collect();
    write_file(&dir.join("depth_scatter.svg"), &scatter_svg("Root depth (m)", "true", "predicted", &depth))?;
    writeln!(io::stdout().lock(), "{summary}").map_err(io_err(Path::new("<stdout>")))?;
    let finite = reports.iter().all(|r| {
        let s = r.summary;
        [s.mpjpe, s.pa_mpjpe, s.pve, s.w_mpjpe, s.w_pve, s.orientation_deg].iter().all(|v| v.is_finite())
    });
    if !finite {
        return Err(CliError::Validation("non-finite metrics".into()));
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars of W-MPJPE and orientation error per world method.
pub fn comparison_svg(reports: &[EvalReport]) -> String {
    let (w, h, pad) = (640.0, 360.0, 50.0);
    let panels: [(&str, fn(&metrics::Summary) -> f64); 2] =
        [("W-MPJPE (mm)", |s| s.w_mpjpe), ("orientation error (deg)", |s| s.orientation_deg)];
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    let panel_w = (w - pad) / panels.len() as f64;
    for (k, (title, get)) in panels.iter().enumerate() {
        let x0 = pad / 2.0 + k as f64 * panel_w;
        let vals: Vec<f64> = reports.iter().map(|r| get(&r.summary)).collect();
        let top = vals.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
        let _ = write!(svg, r#"<text x="{:.1}" y="20" text-anchor="middle">{}</text>"#, x0 + panel_w / 2.0, escape(title));
        let bar_w = (panel_w - 20.0) / vals.len().max(1) as f64;
        for (i, (v, r)) in vals.iter().zip(reports).enumerate() {
            let bh = if v.is_finite() { (h - 2.0 * pad) * v / top } else { 0.0 };
            let x = x0 + 10.0 + i as f64 * bar_w;
            let y = h - pad - bh;
            let _ = write!(
                svg,
                r##"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{bh:.1}" fill="#4a7ab5"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.2}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
                bar_w * 0.8,
                x + bar_w * 0.4,
                y - 4.0,
                x + bar_w * 0.4,
                h - pad + 16.0,
                escape(&r.method)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter plot with a y = x reference line.
pub fn scatter_svg(title: &str, xlabel: &str, ylabel: &str, pts: &[(f64, f64)]) -> String {
    let (size, pad) = (400.0, 50.0);
    let finite: Vec<_> = pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let hi = finite.iter().flat_map(|(x, y)| [*x, *y]).fold(0.0, f64::max).max(1e-12);
    let map = |v: f64| pad + (size - 2.0 * pad) * v / hi;
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#);
    svg.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(svg, r#"<text x="{:.1}" y="20" text-anchor="middle">{}</text>"#, size / 2.0, escape(title));
    let _ = write!(svg, r#"<line x1="{pad}" y1="{0}" x2="{0}" y2="{pad}" stroke="gray"/>"#, size - pad);
    let _ = write!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, size / 2.0, size - 12.0, escape(xlabel));
    let _ = write!(svg, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#, size / 2.0, size / 2.0, escape(ylabel));
    for (x, y) in finite {
        let _ = write!(svg, r##"<circle cx="{:.1}" cy="{:.1}" r="1.5" fill="#b5524a"/>"##, map(*x), size - map(*y));
    }
    svg.push_str("</svg>\n");
    svg
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called twice in one process; the first one wins.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_stage_names() {
        let cli = Cli::try_parse_from(["fullpersp", "train", "--seed", "1", "--scenes", "s.jsonl", "--stage", "III"]).unwrap();
        let Command::Train(a) = cli.command else { panic!("train") };
        assert_eq!(a.stage, StageArg::III);
        assert_eq!(stages_for(StageArg::All), TrainStage::ALL.to_vec());
        assert!(Cli::try_parse_from(["fullpersp", "train", "--seed", "1", "--scenes", "s", "--stage", "IV"]).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(Cli::try_parse_from(["fullpersp", "simulate", "--n", "3"]).is_err());
        assert!(Cli::try_parse_from(["fullpersp", "train", "--scenes", "s", "--stage", "I"]).is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"synth": {"n": 5}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"synth": {"nn": 5}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Validation("x".into()).exit_code(), 1);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
    }
}
