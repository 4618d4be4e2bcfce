mod config;
mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use absentreg::eval::{evaluate, Frame, LandmarkSet, LesionSplit, NEAR_DISTANCE_MM};
use absentreg::field::warp;
use absentreg::selfcheck::{self, Fault};
use absentreg::synth::{make_case, SynthConfig, Texture};
use absentreg::{io, run_multimodal, Error, FieldF32, TraceEntry, VolumeF32};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{load_registration_config, load_synth_config, RegisterOverrides};
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "absentreg",
    version,
    about = "Bidirectional deformable registration with absent-correspondence masks"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a baseline (moving) scan to a follow-up (fixed) scan.
    ///
    /// Intensities are min-max normalised over the foreground on load.
    Register(RegisterArgs),
    /// Generate a synthetic case directory.
    Synth(SynthArgs),
    /// Landmark metrics for a follow-up to baseline field.
    Eval(EvalArgs),
    /// Gradient and oracle checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImageFormat {
    Nii,
    Raw,
}

impl ImageFormat {
    fn ext(self) -> &'static str {
        match self {
            ImageFormat::Nii => "nii",
            ImageFormat::Raw => "raw",
        }
    }
}

#[derive(Args)]
struct RegisterArgs {
    /// Follow-up image(s), one per channel, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    fixed: Vec<PathBuf>,
    /// Baseline image(s), one per channel, comma separated.
    #[arg(long, required = true, value_delimiter = ',')]
    moving: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// JSON or TOML registration config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Channel names, one per image pair.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<String>,
    /// JSON-lines trace destination (default: <out>/trace.jsonl).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nii")]
    format: ImageFormat,
    #[command(flatten)]
    overrides: RegisterOverrides,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid size as nx,ny,nz.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Maximum ground-truth displacement, voxels.
    #[arg(long)]
    amplitude: Option<f64>,
    /// Ground-truth smoothing sigma, voxels.
    #[arg(long)]
    smoothness: Option<f64>,
    /// Lesions per side.
    #[arg(long)]
    lesions: Option<usize>,
    #[arg(long)]
    lesion_radius: Option<f64>,
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long, value_enum)]
    texture: Option<TextureArg>,
    #[arg(long, value_enum, default_value = "nii")]
    format: ImageFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TextureArg {
    Blobs,
    CheckerSmooth,
}

#[derive(Args)]
struct EvalArgs {
    /// Follow-up to baseline displacement field (u_bf).
    #[arg(long)]
    field: PathBuf,
    /// Landmarks in the follow-up frame.
    #[arg(long)]
    fixed_landmarks: PathBuf,
    /// Corresponding landmarks in the baseline frame.
    #[arg(long)]
    moving_landmarks: PathBuf,
    /// Lesion mask on the baseline grid, enables the near/far split.
    #[arg(long)]
    lesion_mask: Option<PathBuf>,
    #[arg(long, default_value_t = NEAR_DISTANCE_MM)]
    near_mm: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Fewer random instances.
    #[arg(long)]
    quick: bool,
    /// Directory for a run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: deliberately break one gradient.
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    DiffusionSignFlip,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Diverged { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for t in trace {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_channels(paths: &[PathBuf], manifest: &mut RunManifest) -> Result<Vec<VolumeF32>> {
    paths
        .iter()
        .map(|p| {
            manifest.add_input(p)?;
            let v = io::load_volume::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(v.normalized_foreground())
        })
        .collect()
}

fn cmd_register(a: RegisterArgs) -> Result<ExitCode> {
    let start = Instant::now();
    if a.fixed.len() != a.moving.len() {
        bail!("{} fixed but {} moving images", a.fixed.len(), a.moving.len());
    }
    if !a.channels.is_empty() && a.channels.len() != a.fixed.len() {
        bail!("{} channel names for {} image pairs", a.channels.len(), a.fixed.len());
    }
    let cfg = load_registration_config(a.config.as_deref(), &a.overrides)?;
    let mut manifest = RunManifest::new("register", serde_json::to_value(&cfg)?, Some(cfg.seed));
    if let Some(c) = &a.config {
        manifest.add_input(c)?;
    }
    let f = load_channels(&a.fixed, &mut manifest)?;
    let b = load_channels(&a.moving, &mut manifest)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let trace_path = a.trace.clone().unwrap_or_else(|| a.out.join("trace.jsonl"));

    let res = match run_multimodal(&b, &f, &cfg) {
        Ok(r) => r,
        Err(Error::Diverged { level, iteration, reason, trace }) => {
            write_trace(&trace_path, &trace)?;
            manifest.status = "diverged".into();
            manifest.add_outputs([trace_path]);
            manifest.wall_time = start.elapsed().as_secs_f64();
            manifest.write(&a.out)?;
            return Err(Error::Diverged { level, iteration, reason, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };

    let ext = a.format.ext();
    let img = |name: &str| a.out.join(format!("{name}.{ext}"));
    let mut outputs = Vec::new();
    for (name, u) in [("u_bf", &res.u_bf), ("u_fb", &res.u_fb)] {
        io::save_field(img(name), u)?;
        outputs.push(img(name));
    }
    for (name, m) in [("m_bf", &res.m_bf), ("m_fb", &res.m_fb)] {
        io::save_mask(img(name), m)?;
        outputs.push(img(name));
    }
    for (name, d) in [("delta_bf", &res.delta_bf), ("delta_fb", &res.delta_fb)] {
        io::save_volume(img(name), d.volume())?;
        outputs.push(img(name));
    }
    let suffix = |k: usize| match (a.channels.get(k), f.len()) {
        (Some(c), _) => format!("_{c}"),
        (None, 1) => String::new(),
        (None, _) => format!("_{k}"),
    };
    for k in 0..f.len() {
        let name = format!("warped_B{}", suffix(k));
        io::save_volume(img(&name), &warp(&b[k], &res.u_bf)?)?;
        outputs.push(img(&name));
        let name = format!("warped_F{}", suffix(k));
        io::save_volume(img(&name), &warp(&f[k], &res.u_fb)?)?;
        outputs.push(img(&name));
    }
    write_trace(&trace_path, &res.trace)?;
    outputs.push(trace_path);
    let cfg_path = a.out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;
    outputs.push(cfg_path);

    manifest.add_outputs(outputs);
    manifest.wall_time = start.elapsed().as_secs_f64();
    manifest.write(&a.out)?;
    let last = res.trace.last().map(|t| t.loss.total).unwrap_or(f64::NAN);
    println!(
        "registered in {:.1}s: final loss {last:.5}, mask fractions {:.4} / {:.4}",
        res.wall_time,
        res.m_bf.fraction(),
        res.m_fb.fraction()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg: SynthConfig = load_synth_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.dims {
        let &[x, y, z] = d.as_slice() else { bail!("--dims needs three values, got {}", d.len()) };
        cfg.dims = [x, y, z];
    }
    if let Some(v) = a.amplitude {
        cfg.field_amplitude = v;
    }
    if let Some(v) = a.smoothness {
        cfg.field_smoothness = v;
    }
    if let Some(v) = a.lesions {
        cfg.lesion_count = v;
    }
    if let Some(v) = a.lesion_radius {
        cfg.lesion_radius = v;
    }
    if let Some(v) = a.landmarks {
        cfg.n_landmarks = v;
    }
    if let Some(t) = a.texture {
        cfg.texture = match t {
            TextureArg::Blobs => Texture::Blobs,
            TextureArg::CheckerSmooth => Texture::CheckerSmooth,
        };
    }
    cfg.validate()?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(&cfg)?, Some(cfg.seed));
    if let Some(c) = &a.config {
        manifest.add_input(c)?;
    }
    let case = make_case::<f32>(&cfg)?;
    let written = case.write_dir(&a.out, a.format.ext())?;
    manifest.add_outputs(written);
    manifest.wall_time = start.elapsed().as_secs_f64();
    manifest.write(&a.out)?;
    println!("wrote case to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut manifest = RunManifest::new("eval", serde_json::json!({ "near_mm": a.near_mm }), None);
    for p in [&a.field, &a.fixed_landmarks, &a.moving_landmarks].into_iter().chain(a.lesion_mask.as_ref()) {
        manifest.add_input(p)?;
    }
    let u: FieldF32 = io::load_field(&a.field).with_context(|| format!("loading {}", a.field.display()))?;
    let lms_f = LandmarkSet::read_csv(Frame::Followup, &a.fixed_landmarks)
        .with_context(|| format!("reading {}", a.fixed_landmarks.display()))?;
    let lms_b = LandmarkSet::read_csv(Frame::Baseline, &a.moving_landmarks)
        .with_context(|| format!("reading {}", a.moving_landmarks.display()))?;
    let mask = a.lesion_mask.as_ref().map(io::load_mask).transpose()?;
    let split = mask.as_ref().map(|m| LesionSplit { mask: m, distance_mm: a.near_mm });
    let report = evaluate(&u, &lms_f, &lms_b, split, 0.0)?;

    fs::create_dir_all(&a.out)?;
    let json_path = a.out.join("metrics.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    let csv_path = a.out.join("metrics.csv");
    report.write_csv_row(fs::File::create(&csv_path)?)?;
    manifest.add_outputs([json_path, csv_path]);
    manifest.wall_time = start.elapsed().as_secs_f64();
    manifest.write(&a.out)?;
    println!(
        "TRE {:.3} ± {:.3} mm (initial {:.3}), robustness {:.3}, |J|<=0 {:.3}%",
        report.tre_mean, report.tre_std, report.initial_tre_mean, report.robustness, report.neg_jac_pct
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let fault = match a.inject_fault {
        Some(FaultArg::DiffusionSignFlip) => Fault::DiffusionSignFlip,
        None => Fault::None,
    };
    let outcomes = selfcheck::run(a.quick, fault);
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let ok = outcomes.iter().all(|o| o.passed);
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        let mut manifest = RunManifest::new(
            "selfcheck",
            serde_json::json!({ "quick": a.quick, "fault": format!("{fault:?}"), "results": outcomes }),
            None,
        );
        manifest.status = if ok { "ok" } else { "failed" }.into();
        manifest.wall_time = start.elapsed().as_secs_f64();
        manifest.write(dir)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
