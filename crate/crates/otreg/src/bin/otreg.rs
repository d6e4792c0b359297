//! Command line front end: transport matching, registration, synthetic pair
//! generation, metric evaluation and full pipelines over point cloud files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use otreg::cloud::{chamfer_distance, farthest_point_sampling};
use otreg::deform::{fit_deformation, DeformationModel, FitConfig};
use otreg::io;
use otreg::kernel::KernelSpec;
use otreg::matching::nn_match;
use otreg::metrics::{landmark_report, landmark_transfer, scene_flow_metrics, SnapGrid};
use otreg::pipeline::{
    affine_registration, matching_field, rigid_registration, run_pipeline, PipelineConfig,
};
use otreg::sinkhorn::OTParams;
use otreg::synth::{make_training_pair, SynthParams};
use otreg::Error;

#[derive(Parser)]
#[command(
    name = "otreg",
    about = "Point cloud registration via robust optimal transport",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a displacement field from source to target
    Match(MatchArgs),
    /// Register source onto target with a transform or deformation model
    Register(RegisterArgs),
    /// Generate a synthetic registration pair with ground-truth flow
    Synth(SynthArgs),
    /// Evaluate scene-flow metrics or landmark errors
    Eval(EvalArgs),
    /// Run a multi-stage registration pipeline from a config file
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Matcher {
    Robot,
    Nn,
}

#[derive(Args)]
struct OtFlags {
    /// Entropic blur (feature units)
    #[arg(long, default_value_t = 1.0)]
    blur: f64,
    /// Maximum matching distance; "inf" for balanced transport
    #[arg(long, default_value = "inf")]
    reach: String,
    /// Annealing factor in (0, 1)
    #[arg(long, default_value_t = 0.5)]
    scaling: f64,
    /// Stop when the dual update falls below tol * blur^2
    #[arg(long, default_value_t = 0.5)]
    tol: f64,
    /// Outer iteration cap
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

impl OtFlags {
    fn params(&self) -> Result<OTParams, CliError> {
        let reach = if self.reach == "inf" {
            f64::INFINITY
        } else {
            self.reach
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("invalid --reach '{}'", self.reach)))?
        };
        if !(reach > 0.0) {
            return Err(CliError::Usage("--reach must be positive or 'inf'".into()));
        }
        if !(self.blur > 0.0) {
            return Err(CliError::Usage("--blur must be positive".into()));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(CliError::Usage("--scaling must lie in (0, 1)".into()));
        }
        Ok(OTParams {
            blur: self.blur,
            reach,
            scaling: self.scaling,
            max_outer_iters: self.max_iters,
            tol: self.tol,
        })
    }
}

#[derive(Args)]
struct MatchArgs {
    /// Source point cloud (.csv or .ply)
    #[arg(long)]
    source: PathBuf,
    /// Target point cloud (.csv or .ply)
    #[arg(long)]
    target: PathBuf,
    /// Output flow file
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Matcher::Robot)]
    matcher: Matcher,
    #[command(flatten)]
    ot: OtFlags,
    /// Seed for any randomised step
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Rigid,
    Affine,
    Spline,
    Lddmm,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output directory for the registered cloud, flow and transform
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum)]
    model: Model,
    #[command(flatten)]
    ot: OtFlags,
    /// Rounds of matching + projection for rigid/affine models
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    /// Deformation kernel as weight:sigma pairs
    #[arg(long, default_value = "0.2:3,0.3:6,0.5:9")]
    kernel: String,
    /// Control point count for spline/lddmm models
    #[arg(long, default_value_t = 1000)]
    controls: usize,
    /// Regularisation weight of the deformation fit
    #[arg(long, default_value_t = 0.01)]
    reg_weight: f64,
    /// Iteration cap of the deformation fit
    #[arg(long, default_value_t = 300)]
    fit_iters: usize,
    /// Integration steps of the lddmm model
    #[arg(long, default_value_t = 20)]
    lddmm_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Input cloud with per-point radii
    #[arg(long)]
    input: PathBuf,
    /// Output directory for source.csv, target.csv, gt_flow.csv
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    s_voxelgrid: f64,
    #[arg(long, default_value_t = 1000)]
    c_local: usize,
    #[arg(long, default_value_t = 4.0)]
    s_local: f64,
    #[arg(long, default_value_t = 3.0)]
    d_local: f64,
    #[arg(long, default_value_t = 0.2)]
    eig_floor: f64,
    #[arg(long, default_value_t = 90.0)]
    s_global: f64,
    #[arg(long, default_value_t = 25.0)]
    d_global: f64,
    #[arg(long, default_value_t = 25.0)]
    sigma_global: f64,
    #[arg(long, default_value_t = 0.1)]
    s_radius: f64,
    #[arg(long, default_value_t = 60000)]
    sample_count: usize,
    /// Also deform the source itself by this global magnitude
    #[arg(long)]
    src_aug_d_global: Option<f64>,
    /// Smoothing deviation of the source augmentation
    #[arg(long)]
    src_aug_sigma_global: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metrics {
    Sceneflow,
    Landmarks,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metrics: Metrics,
    /// Estimated flow (sceneflow mode)
    #[arg(long)]
    est: Option<PathBuf>,
    /// Ground-truth flow (sceneflow mode)
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Multiply flows by this factor before applying the cm thresholds
    #[arg(long, default_value_t = 1.0)]
    unit_scale: f64,
    /// Source landmarks (landmarks mode)
    #[arg(long)]
    source_landmarks: Option<PathBuf>,
    /// Target landmarks (landmarks mode)
    #[arg(long)]
    target_landmarks: Option<PathBuf>,
    /// Pre-mapped source landmarks; alternative to --flow + --source
    #[arg(long)]
    mapped_landmarks: Option<PathBuf>,
    /// Flow over the source cloud, smoothed onto the landmarks
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Source cloud the flow lives on
    #[arg(long)]
    source: Option<PathBuf>,
    /// Smoothing kernel for the landmark transfer
    #[arg(long, default_value = "1.0:0.5")]
    kernel: String,
    /// Snap mapped landmarks to a voxel grid: sx,sy,sz
    #[arg(long)]
    snap_spacing: Option<String>,
    /// Origin of the snap grid
    #[arg(long, default_value = "0,0,0")]
    snap_origin: String,
    /// Write the report as key = value text
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config file (flat key = value text)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn parse_kernel(spec: &str) -> Result<KernelSpec, CliError> {
    let mut comps = Vec::new();
    for part in spec.split(',') {
        let (w, s) = part
            .split_once(':')
            .ok_or_else(|| CliError::Usage(format!("kernel component '{part}' is not weight:sigma")))?;
        let w: f64 = w.parse().map_err(|_| CliError::Usage(format!("bad kernel weight '{w}'")))?;
        let s: f64 = s.parse().map_err(|_| CliError::Usage(format!("bad kernel sigma '{s}'")))?;
        comps.push((w, s));
    }
    KernelSpec::new(comps).map_err(|e| CliError::Usage(e.to_string()))
}

fn parse_vec3(spec: &str, what: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::Usage(format!("{what} needs three comma-separated values")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("bad number '{p}' in {what}")))?;
    }
    Ok(out)
}

fn run_match(args: &MatchArgs) -> Result<(), CliError> {
    let source = io::read_cloud(&args.source)?;
    let target = io::read_cloud(&args.target)?;
    let field = match args.matcher {
        Matcher::Robot => matching_field(&source, &target, &args.ot.params()?)?,
        Matcher::Nn => nn_match(&source, &target)?,
    };
    io::write_flow(&field, &args.out)?;
    println!("wrote flow for {} points to {}", field.len(), args.out.display());
    Ok(())
}

fn run_register(args: &RegisterArgs) -> Result<(), CliError> {
    let source = io::read_cloud(&args.source)?;
    let target = io::read_cloud(&args.target)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    let ot = args.ot.params()?;
    let kernel = parse_kernel(&args.kernel)?;

    let (registered, transform_text) = match args.model {
        Model::Rigid => {
            let (t, moved) = rigid_registration(&source, &target, &ot, args.rounds)?;
            let r = t.rotation;
            let tr = t.net_translation();
            let text = format!(
                "rotation\n{} {} {}\n{} {} {}\n{} {} {}\ntranslation\n{} {} {}\n",
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
                tr[0], tr[1], tr[2]
            );
            (moved, Some(text))
        }
        Model::Affine => {
            let (t, moved) = affine_registration(&source, &target, &ot, args.rounds)?;
            let m = t.matrix;
            let tr = t.net_translation();
            let text = format!(
                "matrix\n{} {} {}\n{} {} {}\n{} {} {}\ntranslation\n{} {} {}\n",
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
                tr[0], tr[1], tr[2]
            );
            (moved, Some(text))
        }
        Model::Spline | Model::Lddmm => {
            let field = matching_field(&source, &target, &ot)?;
            let count = args.controls.min(source.len());
            let idx = farthest_point_sampling(&source, count, args.seed)?;
            let controls: Vec<[f64; 3]> = idx.iter().map(|&i| source.position(i)).collect();
            let template = match args.model {
                Model::Spline => DeformationModel::Spline {
                    coefficients: vec![[0.0; 3]; controls.len()],
                    controls,
                    kernel,
                },
                _ => DeformationModel::Lddmm {
                    momenta: vec![[0.0; 3]; controls.len()],
                    controls,
                    kernel,
                    steps: args.lddmm_steps,
                },
            };
            let cfg = FitConfig {
                reg_weight: args.reg_weight,
                max_iters: args.fit_iters,
                ..FitConfig::default()
            };
            let fit = fit_deformation(&source, &field, &template, &cfg)?;
            let moved = source.with_positions(fit.model.morph(source.positions())?)?;
            (moved, None)
        }
    };

    io::write_cloud(&registered, &args.out_dir.join("registered.csv"))?;
    let vectors: Vec<[f64; 3]> = registered
        .positions()
        .iter()
        .zip(source.positions())
        .map(|(c, o)| [c[0] - o[0], c[1] - o[1], c[2] - o[2]])
        .collect();
    let n = vectors.len();
    let flow = otreg::MatchingField::new(vectors, vec![1.0; n])?;
    io::write_flow(&flow, &args.out_dir.join("flow.csv"))?;
    if let Some(text) = transform_text {
        std::fs::write(args.out_dir.join("transform.txt"), text).map_err(Error::from)?;
    }
    let (_, _, before) = chamfer_distance(&source, &target);
    let (_, _, after) = chamfer_distance(&registered, &target);
    println!("chamfer {before:.6} -> {after:.6}");
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    let input = io::read_cloud(&args.input)?;
    let source_aug = match (args.src_aug_d_global, args.src_aug_sigma_global) {
        (Some(d), Some(s)) => Some((d, s)),
        (None, None) => None,
        _ => {
            return Err(CliError::Usage(
                "--src-aug-d-global and --src-aug-sigma-global must be given together".into(),
            ))
        }
    };
    let params = SynthParams {
        s_voxelgrid: args.s_voxelgrid,
        c_local: args.c_local,
        s_local: args.s_local,
        d_local: args.d_local,
        eig_floor: args.eig_floor,
        s_global: args.s_global,
        d_global: args.d_global,
        sigma_global: args.sigma_global,
        s_radius: args.s_radius,
        sample_count: args.sample_count,
        seed: args.seed,
        source_aug,
    };
    let pair = make_training_pair(&input, &params)?;
    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    io::write_cloud(&pair.source, &args.out_dir.join("source.csv"))?;
    io::write_cloud(&pair.target, &args.out_dir.join("target.csv"))?;
    let n = pair.gt_flow.len();
    let flow = otreg::MatchingField::new(pair.gt_flow, vec![1.0; n])?;
    io::write_flow(&flow, &args.out_dir.join("gt_flow.csv"))?;
    println!(
        "wrote pair ({} source, {} target points) to {}",
        pair.source.len(),
        pair.target.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut kv: Vec<(String, String)> = Vec::new();
    match args.metrics {
        Metrics::Sceneflow => {
            let (est, gt) = match (&args.est, &args.gt) {
                (Some(e), Some(g)) => (e, g),
                _ => return Err(CliError::Usage("sceneflow mode needs --est and --gt".into())),
            };
            let scale = args.unit_scale;
            if !(scale > 0.0) {
                return Err(CliError::Usage("--unit-scale must be positive".into()));
            }
            let rescale = |f: &otreg::MatchingField| -> Vec<[f64; 3]> {
                f.vectors().iter().map(|v| [v[0] * scale, v[1] * scale, v[2] * scale]).collect()
            };
            let est = rescale(&io::read_flow(est)?);
            let gt = rescale(&io::read_flow(gt)?);
            let m = scene_flow_metrics(&est, &gt)?;
            println!("metric        value");
            println!("EPE3D     {:>9.4} cm", m.epe3d);
            println!("Acc3DS    {:>9.2} %", m.acc3ds);
            println!("Acc3DR    {:>9.2} %", m.acc3dr);
            println!("Outliers3D{:>9.2} %", m.outliers3d);
            kv.push(("epe3d_cm".into(), format!("{:.17e}", m.epe3d)));
            kv.push(("acc3ds_pct".into(), format!("{:.17e}", m.acc3ds)));
            kv.push(("acc3dr_pct".into(), format!("{:.17e}", m.acc3dr)));
            kv.push(("outliers3d_pct".into(), format!("{:.17e}", m.outliers3d)));
        }
        Metrics::Landmarks => {
            let tgt = match &args.target_landmarks {
                Some(p) => io::read_landmarks(p)?,
                None => return Err(CliError::Usage("landmarks mode needs --target-landmarks".into())),
            };
            let mapped = match (&args.mapped_landmarks, &args.flow, &args.source) {
                (Some(m), _, _) => io::read_landmarks(m)?,
                (None, Some(flow), Some(source)) => {
                    let src_lm = match &args.source_landmarks {
                        Some(p) => io::read_landmarks(p)?,
                        None => {
                            return Err(CliError::Usage(
                                "landmark transfer needs --source-landmarks".into(),
                            ))
                        }
                    };
                    let cloud = io::read_cloud(source)?;
                    let field = io::read_flow(flow)?;
                    if field.len() != cloud.len() {
                        return Err(CliError::Run(Error::InvalidInput(format!(
                            "flow has {} rows for {} source points",
                            field.len(),
                            cloud.len()
                        ))));
                    }
                    let kernel = parse_kernel(&args.kernel)?;
                    landmark_transfer(&src_lm, &field, &cloud, &kernel)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "landmarks mode needs --mapped-landmarks or --flow with --source".into(),
                    ))
                }
            };
            let snap = match &args.snap_spacing {
                Some(s) => Some(SnapGrid {
                    spacing: parse_vec3(s, "--snap-spacing")?,
                    origin: parse_vec3(&args.snap_origin, "--snap-origin")?,
                }),
                None => None,
            };
            let r = landmark_report(&tgt, &mapped, snap)?;
            println!("statistic   value");
            println!("mean     {:>9.4}", r.mean);
            println!("p25      {:>9.4}", r.p25);
            println!("p50      {:>9.4}", r.p50);
            println!("p75      {:>9.4}", r.p75);
            println!("snapped  {:>9}", r.snapped);
            kv.push(("mean".into(), format!("{:.17e}", r.mean)));
            kv.push(("p25".into(), format!("{:.17e}", r.p25)));
            kv.push(("p50".into(), format!("{:.17e}", r.p50)));
            kv.push(("p75".into(), format!("{:.17e}", r.p75)));
            kv.push(("snapped".into(), r.snapped.to_string()));
        }
    }
    if let Some(out) = &args.out {
        io::write_key_values(&kv, out)?;
    }
    Ok(())
}

fn run_pipeline_cmd(args: &PipelineArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.config).map_err(Error::from)?;
    let cfg = PipelineConfig::parse(&text)?;
    let source = io::read_cloud(&args.source)?;
    let target = io::read_cloud(&args.target)?;
    let report = run_pipeline(&cfg, &source, &target, Some(&args.out_dir))?;
    println!(
        "pipeline finished: chamfer {:.6} -> {:.6} over {} stage(s)",
        report.chamfer_before,
        report.chamfer_after,
        cfg.stages.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Match(a) => run_match(a),
        Command::Register(a) => run_register(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
        Command::Pipeline(a) => run_pipeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
