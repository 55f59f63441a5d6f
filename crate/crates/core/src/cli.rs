//! Command-line front end: `register`, `synth`, `eval`, `sweep` and `bench`.
//!
//! Every command that writes files also writes a TOML manifest holding the
//! resolved configuration. The manifest timestamp honours
//! `SOURCE_DATE_EPOCH`, so reruns with the same arguments and that variable
//! set produce byte-identical manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::em::{register, EmConfig, ModelParams, RegistrationReport};
use crate::error::{Error, Result};
use crate::geometry::{PointSet, RigidTransform};
use crate::io::{self, Format, TransformFile};
use crate::synthesis::{
    compute_errors, downsample_uniform, synth_scene, sweep_w, write_csv, SceneSpec, Shape, SWEEP_HEADER,
};

pub const EXIT_CONVERGED: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_ITERATION_CAP: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "empmr", version, about = "Multi-view rigid registration of 3D point sets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register two or more point sets.
    Register(RegisterArgs),
    /// Write a synthetic scene with known ground truth.
    Synth(SynthArgs),
    /// Compare estimated transforms with ground truth.
    Eval(EvalArgs),
    /// Registration error as a function of the outlier ratio.
    Sweep(SweepArgs),
    /// Per-iteration runtime for a grid of set sizes and counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Point-set files (.ply or .xyz), one per view.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Initial transforms file, or `identity`.
    #[arg(long, default_value = "identity")]
    pub init: String,
    #[arg(long, default_value_t = 0.01)]
    pub w: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Coordinates are multiplied by this factor on load; outputs are
    /// reported in the original units.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Points kept per set, or `off`.
    #[arg(long, default_value = "2000")]
    pub downsample: String,
    #[arg(long, env = "EMPMR_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Seed of the variance initialisation sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct SceneArgs {
    #[arg(long, default_value = "sphere")]
    pub shape: Shape,
    #[arg(long = "sets", default_value_t = 5)]
    pub sets: usize,
    #[arg(long, default_value_t = 2000)]
    pub points: usize,
    #[arg(long, default_value_t = 10.0)]
    pub perturb_deg: f64,
    #[arg(long, default_value_t = 0.1)]
    pub perturb_trans: f64,
    #[arg(long, default_value_t = 0.7)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SceneArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            shape: self.shape,
            sets: self.sets,
            points_per_set: self.points,
            max_rotation_deg: self.perturb_deg,
            max_translation: self.perturb_trans,
            overlap: self.overlap,
            scale: 1.0,
            seed: self.seed,
        }
    }

    fn manifest(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("shape".into(), self.shape.to_string().into());
        t.insert("sets".into(), (self.sets as i64).into());
        t.insert("points".into(), (self.points as i64).into());
        t.insert("perturb_deg".into(), self.perturb_deg.into());
        t.insert("perturb_trans".into(), self.perturb_trans.into());
        t.insert("overlap".into(), self.overlap.into());
        t.insert("seed".into(), seed_value(self.seed));
        t
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Point file format: ply (binary), ply_ascii or xyz.
    #[arg(long, default_value = "ply")]
    pub format: Format,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub estimated: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Also report errors after aligning the first set with its truth.
    #[arg(long)]
    pub gauge_fix: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Swept parameter; only `w` is supported.
    #[arg(long, default_value = "w")]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, env = "EMPMR_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Points per set, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,4000,8000")]
    pub sizes: Vec<usize>,
    /// Set counts, comma-separated.
    #[arg(long = "sets", value_delimiter = ',', default_value = "4")]
    pub set_counts: Vec<usize>,
    /// Iterations timed per configuration.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value = "composite")]
    pub shape: Shape,
    #[arg(long, default_value_t = 0.7)]
    pub overlap: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "EMPMR_THREADS", default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub sets: usize,
    pub points_per_set: usize,
    pub iterations: usize,
    pub per_iteration_s: f64,
    /// Per-iteration time over the previous row with the same set count
    /// (or the same size, for the set-count sweep); empty for the first.
    pub ratio: Option<f64>,
}

pub const BENCH_HEADER: [&str; 5] = ["sets", "points_per_set", "iterations", "per_iteration_s", "ratio"];

/// Parses and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { EXIT_CONVERGED });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Register(args) => cmd_register(&args),
        Command::Synth(args) => cmd_synth(&args).map(|_| EXIT_CONVERGED),
        Command::Eval(args) => {
            let mut stdout = std::io::stdout().lock();
            cmd_eval(&args, &mut stdout).map(|_| EXIT_CONVERGED)
        }
        Command::Sweep(args) => cmd_sweep(&args).map(|_| EXIT_CONVERGED),
        Command::Bench(args) => cmd_bench(&args).map(|_| EXIT_CONVERGED),
    }
}

fn parse_downsample(value: &str) -> Result<Option<usize>> {
    match value {
        "off" | "none" => Ok(None),
        n => n
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig(format!("--downsample expects a positive count or 'off', got '{n}'"))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// `<dir>/<stem>.manifest.toml` next to `out`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_file_name(format!("{}.manifest.toml", stem(out)))
}

fn seed_value(seed: u64) -> toml::Value {
    // TOML integers are signed 64-bit.
    match i64::try_from(seed) {
        Ok(s) => s.into(),
        Err(_) => seed.to_string().into(),
    }
}

fn timestamp() -> String {
    let now = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|s| UNIX_EPOCH + Duration::from_secs(s))
        .unwrap_or_else(SystemTime::now);
    humantime::format_rfc3339_seconds(now).to_string()
}

fn write_manifest(path: &Path, command: &str, sections: Vec<(&str, toml::Table)>) -> Result<()> {
    let mut doc = toml::Table::new();
    doc.insert("tool".into(), env!("CARGO_PKG_NAME").into());
    doc.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    doc.insert("command".into(), command.into());
    doc.insert("created".into(), timestamp().into());
    for (name, table) in sections {
        doc.insert(name.into(), toml::Value::Table(table));
    }
    let text = toml::to_string(&doc).map_err(|e| Error::InvalidConfig(format!("cannot serialise manifest: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn config_table(cfg: &EmConfig) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("w".into(), cfg.w.into());
    t.insert("max_iters".into(), (cfg.max_iters as i64).into());
    t.insert("tolerance".into(), cfg.tolerance.into());
    t.insert("sigma2_floor".into(), cfg.sigma2_floor.into());
    t.insert("threads".into(), (cfg.threads as i64).into());
    t.insert("seed".into(), seed_value(cfg.seed));
    t
}

fn paths_value(paths: &[PathBuf]) -> toml::Value {
    toml::Value::Array(paths.iter().map(|p| p.display().to_string().into()).collect())
}

/// Rescales translations between file units and working units.
fn rescale(t: &RigidTransform, factor: f64) -> RigidTransform {
    RigidTransform::new(*t.rotation(), t.translation() * factor).expect("rotation already valid")
}

pub fn cmd_register(args: &RegisterArgs) -> Result<u8> {
    if args.inputs.len() < 2 {
        return Err(Error::TooFewSets(args.inputs.len()));
    }
    let downsample = parse_downsample(&args.downsample)?;
    let cfg = EmConfig {
        w: args.w,
        max_iters: args.max_iters,
        tolerance: args.tol,
        threads: args.threads,
        seed: args.seed,
        ..Default::default()
    };
    cfg.validate()?;

    let mut sets = Vec::with_capacity(args.inputs.len());
    for (i, path) in args.inputs.iter().enumerate() {
        let set = io::read_point_set(path, None, args.scale)?.with_id(i);
        let set = match downsample {
            Some(n) => downsample_uniform(&set, n)?,
            None => set,
        };
        sets.push(set);
    }
    let names: Vec<String> = args.inputs.iter().map(|p| stem(p)).collect();

    let init = if args.init == "identity" {
        vec![RigidTransform::identity(); sets.len()]
    } else {
        let file = io::read_transforms(Path::new(&args.init))?;
        if file.transforms.len() != sets.len() {
            return Err(Error::SetCountMismatch {
                expected: sets.len(),
                actual: file.transforms.len(),
            });
        }
        file.rigid_transforms().iter().map(|t| rescale(t, args.scale)).collect()
    };

    let (params, report) = register(&sets, &init, &cfg)?;
    let reported = ModelParams {
        transforms: params.transforms.iter().map(|t| rescale(t, 1.0 / args.scale)).collect(),
        sigma2: params.sigma2 / (args.scale * args.scale),
        w: params.w,
    };
    io::write_run_transforms(&reported, &report, Some(&names), &args.out)?;
    if let Some(trace) = &args.trace {
        fs::write(trace, io::trace_csv(&report)).map_err(|e| Error::io(trace, e))?;
    }

    let mut inputs = toml::Table::new();
    inputs.insert("paths".into(), paths_value(&args.inputs));
    inputs.insert("init".into(), args.init.clone().into());
    inputs.insert("scale".into(), args.scale.into());
    inputs.insert("downsample".into(), args.downsample.clone().into());
    let mut outputs = toml::Table::new();
    outputs.insert("transforms".into(), args.out.display().to_string().into());
    if let Some(trace) = &args.trace {
        outputs.insert("trace".into(), trace.display().to_string().into());
    }
    write_manifest(
        &manifest_path(&args.out),
        "register",
        vec![
            ("config", config_table(&cfg)),
            ("inputs", inputs),
            ("outputs", outputs),
            ("result", result_table(&report)),
        ],
    )?;
    Ok(if report.converged { EXIT_CONVERGED } else { EXIT_ITERATION_CAP })
}

fn result_table(report: &RegistrationReport) -> toml::Table {
    let mut t = toml::Table::new();
    t.insert("converged".into(), report.converged.into());
    t.insert("iterations".into(), (report.iterations_run() as i64).into());
    t.insert("warnings".into(), (report.warnings.len() as i64).into());
    t
}

/// Writes `set_XX.<ext>` files, `truth.toml` and `manifest.toml`.
pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let scene = synth_scene(&args.scene.spec())?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let ext = match args.format {
        Format::Xyz => "xyz",
        Format::PlyAscii | Format::PlyBinaryLe => "ply",
    };
    let mut paths = Vec::with_capacity(scene.sets.len());
    for (i, set) in scene.sets.iter().enumerate() {
        let path = args.out_dir.join(format!("set_{i:02}.{ext}"));
        io::write_point_set(set, &path, args.format)?;
        paths.push(path);
    }
    let names: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let mut truth = TransformFile::from_transforms(&scene.truth, Some(&names));
    truth.metadata.insert("scene_diameter".into(), scene.scene_diameter.into());
    let truth_path = args.out_dir.join("truth.toml");
    io::write_transforms(&truth, &truth_path)?;

    let mut outputs = toml::Table::new();
    outputs.insert("sets".into(), paths_value(&paths));
    outputs.insert("truth".into(), truth_path.display().to_string().into());
    outputs.insert("format".into(), args.format.to_string().into());
    write_manifest(
        &args.out_dir.join("manifest.toml"),
        "synth",
        vec![("scene", args.scene.manifest()), ("outputs", outputs)],
    )?;
    Ok(paths)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let estimated = io::read_transforms(&args.estimated)?.rigid_transforms();
    let truth = io::read_transforms(&args.truth)?.rigid_transforms();
    let raw = compute_errors(&estimated, &truth, false)?;
    let mut header = vec!["e_R", "e_t"];
    let mut row = vec![raw.e_r, raw.e_t];
    if args.gauge_fix {
        let fixed = compute_errors(&estimated, &truth, true)?;
        header.extend(["e_R_gauge", "e_t_gauge"]);
        row.extend([fixed.e_r, fixed.e_t]);
    }
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(&header)?;
    writer.write_record(row.iter().map(|v| format!("{v:e}")))?;
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn csv_target(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(fs::File::create(path).map_err(|e| Error::io(path, e))?),
        None => Box::new(std::io::stdout()),
    })
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    if args.param != "w" {
        return Err(Error::InvalidConfig(format!("unsupported sweep parameter '{}'", args.param)));
    }
    let cfg = EmConfig {
        max_iters: args.max_iters,
        threads: args.threads,
        ..Default::default()
    };
    cfg.validate()?;
    let rows = if args.values.is_empty() {
        Vec::new()
    } else {
        let scene = synth_scene(&args.scene.spec())?;
        sweep_w(&scene, &args.values, &cfg)?
    };
    write_csv(&rows, &SWEEP_HEADER, csv_target(&args.out)?)?;
    if let Some(out) = &args.out {
        let mut sweep = toml::Table::new();
        sweep.insert("param".into(), args.param.clone().into());
        sweep.insert(
            "values".into(),
            toml::Value::Array(args.values.iter().map(|&v| v.into()).collect()),
        );
        write_manifest(
            &manifest_path(out),
            "sweep",
            vec![("config", config_table(&cfg)), ("scene", args.scene.manifest()), ("sweep", sweep)],
        )?;
    }
    Ok(())
}

/// Mean per-iteration wall time of `iters` forced iterations.
pub fn time_iterations(sets: &[PointSet], iters: usize, threads: usize, seed: u64) -> Result<(usize, f64)> {
    let cfg = EmConfig {
        max_iters: iters,
        // Keep running for the full count; timing, not accuracy, is measured.
        tolerance: f64::MIN_POSITIVE,
        threads,
        seed,
        ..Default::default()
    };
    let init = vec![RigidTransform::identity(); sets.len()];
    let (_, report) = register(sets, &init, &cfg)?;
    let n = report.iterations_run();
    Ok((n, report.total_time().as_secs_f64() / n as f64))
}

pub fn bench_rows(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let mut rows: Vec<BenchRow> = Vec::new();
    for &m in &args.set_counts {
        for &n in &args.sizes {
            let spec = SceneSpec {
                shape: args.shape,
                sets: m,
                points_per_set: n,
                max_rotation_deg: 2.0,
                max_translation: 0.02,
                overlap: args.overlap,
                scale: 1.0,
                seed: args.seed,
            };
            let scene = synth_scene(&spec)?;
            let (iterations, per_iteration_s) = time_iterations(&scene.sets, args.iters, args.threads, args.seed)?;
            rows.push(BenchRow {
                sets: m,
                points_per_set: n,
                iterations,
                per_iteration_s,
                ratio: None,
            });
        }
    }
    // Ratios along whichever axis varies.
    for k in 1..rows.len() {
        let (prev, cur) = (&rows[k - 1], &rows[k]);
        if prev.sets == cur.sets || prev.points_per_set == cur.points_per_set {
            rows[k].ratio = Some(cur.per_iteration_s / prev.per_iteration_s);
        }
    }
    Ok(rows)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let rows = bench_rows(args)?;
    write_csv(&rows, &BENCH_HEADER, csv_target(&args.out)?)?;
    if let Some(out) = &args.out {
        let mut bench = toml::Table::new();
        let ints = |v: &[usize]| toml::Value::Array(v.iter().map(|&x| (x as i64).into()).collect());
        bench.insert("sizes".into(), ints(&args.sizes));
        bench.insert("sets".into(), ints(&args.set_counts));
        bench.insert("iters".into(), (args.iters as i64).into());
        bench.insert("shape".into(), args.shape.to_string().into());
        bench.insert("overlap".into(), args.overlap.into());
        bench.insert("seed".into(), seed_value(args.seed));
        bench.insert("threads".into(), (args.threads as i64).into());
        write_manifest(&manifest_path(out), "bench", vec![("bench", bench)])?;
    }
    Ok(())
}
