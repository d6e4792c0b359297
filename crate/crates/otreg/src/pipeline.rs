//! Stage-based registration pipelines: pre-alignment (rigid/affine),
//! a core step (raw transport matching, fitted deformation model, or an
//! externally computed flow), and repeated transport-plus-spline
//! fine-tuning.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cloud::{chamfer_distance, farthest_point_sampling, WeightedPointCloud};
use crate::deform::{fit_deformation, DeformationModel, FitConfig};
use crate::io;
use crate::kernel::KernelSpec;
use crate::matching::{robot_match, MatchingField};
use crate::sinkhorn::{solve_unbalanced, OTParams};
use crate::transform::{project_affine, project_rigid, spline_transform, AffineTransform, RigidTransform};
use crate::{Error, Result};

/// Solver settings used by pipeline stages. Stages run at matching-grade
/// accuracy by default: the annealing schedule plus a residual threshold of
/// `0.5 * blur^2`, which the schedule reaches within a few extra sweeps.
fn stage_ot(blur: f64, reach: f64) -> OTParams {
    OTParams { blur, reach, scaling: 0.5, max_outer_iters: 500, tol: 0.5 }
}

/// Rescale both weight vectors to unit total mass, which the hard-marginal
/// (infinite reach) problem requires; all downstream consumers of the
/// matching field are invariant to the confidence scale.
fn normalized_weights(cloud: &WeightedPointCloud) -> WeightedPointCloud {
    let total = cloud.total_weight();
    let mut out = cloud.clone();
    if (total - 1.0).abs() > 1e-12 {
        out = WeightedPointCloud::new(
            cloud.positions().to_vec(),
            cloud.weights().iter().map(|w| w / total).collect(),
        )
        .expect("weights stay valid under scaling");
    }
    out
}

/// Solve the transport problem and summarise it as a matching field.
/// Balanced problems are solved on mass-normalised copies of the clouds.
pub fn matching_field(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    ot: &OTParams,
) -> Result<MatchingField> {
    if ot.reach.is_infinite() {
        let src = normalized_weights(source);
        let tgt = normalized_weights(target);
        let duals = solve_unbalanced(&src, &tgt, ot)?;
        robot_match(&src, &tgt, &duals)
    } else {
        let duals = solve_unbalanced(source, target, ot)?;
        robot_match(source, target, &duals)
    }
}

/// Polish rounds run after the transport-driven loop: nearest-neighbour
/// matching plus projection, the classic endgame once the alignment is
/// within the matching basin. The entropic blur biases the transport field
/// at a small but nonzero floor; the projection of the NN field has no such
/// floor and converges to machine precision on clean data.
const POLISH_ROUNDS: usize = 8;

/// Iterated transport matching + rigid projection, run until the increment
/// becomes negligible, then polished with nearest-neighbour rounds. Returns
/// the accumulated transform and the moved source.
pub fn rigid_registration(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    ot: &OTParams,
    max_rounds: usize,
) -> Result<(RigidTransform, WeightedPointCloud)> {
    let mut current = source.clone();
    let mut total = RigidTransform::identity();
    let diam = source.diameter().max(1e-12);
    for (rounds, transport, tol) in
        [(max_rounds, true, 1e-6), (POLISH_ROUNDS, false, 1e-12)]
    {
        for _ in 0..rounds {
            let field = if transport {
                matching_field(&current, target, ot)?
            } else {
                crate::matching::nn_match(&current, target)?
            };
            let step = project_rigid(&current, &field)?;
            current = current.with_positions(step.apply_all(current.positions()))?;
            total = total.then(&step);
            if rotation_angle(&step.rotation) < tol && step.net_translation().norm() < tol * diam {
                break;
            }
        }
    }
    Ok((total, current))
}

/// Iterated transport matching + affine projection, with the same
/// nearest-neighbour polish phase as the rigid driver.
pub fn affine_registration(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    ot: &OTParams,
    max_rounds: usize,
) -> Result<(AffineTransform, WeightedPointCloud)> {
    let mut current = source.clone();
    let mut total = AffineTransform {
        matrix: nalgebra::Matrix3::identity(),
        center: nalgebra::Vector3::zeros(),
        mean_displacement: nalgebra::Vector3::zeros(),
    };
    let diam = source.diameter().max(1e-12);
    for (rounds, transport, tol) in
        [(max_rounds, true, 1e-6), (POLISH_ROUNDS, false, 1e-12)]
    {
        for _ in 0..rounds {
            let field = if transport {
                matching_field(&current, target, ot)?
            } else {
                crate::matching::nn_match(&current, target)?
            };
            let step = project_affine(&current, &field)?;
            current = current.with_positions(step.apply_all(current.positions()))?;
            let m = step.matrix * total.matrix;
            let t = step.matrix * total.net_translation() + step.net_translation();
            total = AffineTransform {
                matrix: m,
                center: nalgebra::Vector3::zeros(),
                mean_displacement: t,
            };
            let drift = (step.matrix - nalgebra::Matrix3::identity()).norm();
            if drift < tol && step.net_translation().norm() < tol * diam {
                break;
            }
        }
    }
    Ok((total, current))
}

pub(crate) fn rotation_angle(r: &nalgebra::Matrix3<f64>) -> f64 {
    (((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// One transport + Nadaraya-Watson smoothing pass applied to the current
/// source positions.
pub fn spline_finetune(
    current: &WeightedPointCloud,
    target: &WeightedPointCloud,
    ot: &OTParams,
    kernel: &KernelSpec,
) -> Result<WeightedPointCloud> {
    let field = matching_field(current, target, ot)?;
    let moved = spline_transform(current, &field, kernel, current.positions())?;
    current.with_positions(moved)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prealign {
    None,
    Rigid,
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoreStep {
    None,
    /// apply the matching field directly
    RobotRaw,
    /// fit a spline deformation model to the field
    SplineFit,
    /// fit a shooting deformation model to the field
    LddmmFit,
    /// apply a displacement field computed elsewhere
    ExternalFlow(PathBuf),
}

/// One pipeline stage: optional pre-alignment, optional core step, optional
/// repeated spline fine-tuning.
#[derive(Debug, Clone)]
pub struct Stage {
    pub prealign: Prealign,
    pub prealign_ot: OTParams,
    pub prealign_rounds: usize,
    pub core: CoreStep,
    pub core_ot: OTParams,
    pub kernel: KernelSpec,
    pub controls: usize,
    pub fit: FitConfig,
    pub lddmm_steps: usize,
    pub post_repeat: usize,
    pub post_ot: OTParams,
    pub post_kernel: KernelSpec,
    pub seed: u64,
}

impl Stage {
    fn with_seed(seed: u64) -> Self {
        Self {
            prealign: Prealign::None,
            prealign_ot: stage_ot(1.0, f64::INFINITY),
            prealign_rounds: 10,
            core: CoreStep::None,
            core_ot: stage_ot(1.0, f64::INFINITY),
            kernel: KernelSpec::new(vec![(0.2, 3.0), (0.3, 6.0), (0.5, 9.0)]).unwrap(),
            controls: 1000,
            fit: FitConfig::default(),
            lddmm_steps: 20,
            post_repeat: 0,
            post_ot: stage_ot(1.0, f64::INFINITY),
            post_kernel: KernelSpec::new(vec![(0.2, 3.0), (0.3, 6.0), (0.5, 9.0)]).unwrap(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
    pub seed: u64,
}

fn parse_kernel(v: &str) -> Result<KernelSpec> {
    let mut comps = Vec::new();
    for part in v.split(',') {
        let (w, s) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("kernel component '{part}' is not weight:sigma")))?;
        comps.push((
            w.trim().parse().map_err(|_| Error::invalid(format!("bad kernel weight '{w}'")))?,
            s.trim().parse().map_err(|_| Error::invalid(format!("bad kernel sigma '{s}'")))?,
        ));
    }
    KernelSpec::new(comps)
}

fn parse_reach(v: &str) -> Result<f64> {
    if v.trim() == "inf" {
        return Ok(f64::INFINITY);
    }
    let r: f64 = v.trim().parse().map_err(|_| Error::invalid(format!("bad reach '{v}'")))?;
    if !(r > 0.0) {
        return Err(Error::invalid("reach must be positive or 'inf'"));
    }
    Ok(r)
}

impl PipelineConfig {
    /// Parse the flat `key = value` config format. Stage keys are prefixed
    /// `stage<N>.`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut globals: BTreeMap<String, String> = BTreeMap::new();
        let mut per_stage: BTreeMap<usize, BTreeMap<String, String>> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected key = value, found '{line}'"),
            })?;
            let key = key.trim();
            let value = value.trim().to_string();
            if let Some(rest) = key.strip_prefix("stage") {
                let (idx, field) = rest.split_once('.').ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    msg: format!("stage key '{key}' needs a field, e.g. stage1.core"),
                })?;
                let idx: usize = idx.parse().map_err(|_| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad stage index in '{key}'"),
                })?;
                if idx == 0 {
                    return Err(Error::Parse { line: lineno + 1, msg: "stages start at 1".into() });
                }
                per_stage.entry(idx).or_default().insert(field.to_string(), value);
            } else {
                globals.insert(key.to_string(), value);
            }
        }
        let seed: u64 = match globals.get("seed") {
            Some(v) => v.parse().map_err(|_| Error::invalid(format!("bad seed '{v}'")))?,
            None => 0,
        };
        for key in globals.keys() {
            if key != "seed" {
                return Err(Error::invalid(format!("unknown config key '{key}'")));
            }
        }
        if per_stage.is_empty() {
            return Err(Error::invalid("config defines no stages"));
        }
        let max_idx = *per_stage.keys().max().unwrap();
        if per_stage.len() != max_idx {
            return Err(Error::invalid("stage indices must be contiguous from 1"));
        }

        let mut stages = Vec::new();
        for idx in 1..=max_idx {
            let fields = &per_stage[&idx];
            let mut stage = Stage::with_seed(seed);
            for (field, value) in fields {
                match field.as_str() {
                    "prealign" => {
                        stage.prealign = match value.as_str() {
                            "none" => Prealign::None,
                            "rigid" => Prealign::Rigid,
                            "affine" => Prealign::Affine,
                            other => {
                                return Err(Error::invalid(format!("unknown prealign '{other}'")))
                            }
                        }
                    }
                    "prealign.blur" => stage.prealign_ot.blur = parse_pos(value, field)?,
                    "prealign.reach" => stage.prealign_ot.reach = parse_reach(value)?,
                    "prealign.rounds" => stage.prealign_rounds = parse_int(value, field)?,
                    "core" => {
                        stage.core = match value.as_str() {
                            "none" => CoreStep::None,
                            "robot_raw" => CoreStep::RobotRaw,
                            "spline_fit" => CoreStep::SplineFit,
                            "lddmm_fit" => CoreStep::LddmmFit,
                            other => {
                                return Err(Error::invalid(format!("unknown core step '{other}'")))
                            }
                        }
                    }
                    "core.flow" => stage.core = CoreStep::ExternalFlow(PathBuf::from(value)),
                    "core.blur" => stage.core_ot.blur = parse_pos(value, field)?,
                    "core.reach" => stage.core_ot.reach = parse_reach(value)?,
                    "core.kernel" => stage.kernel = parse_kernel(value)?,
                    "core.controls" => stage.controls = parse_int(value, field)?,
                    "core.reg_weight" => stage.fit.reg_weight = parse_nonneg(value, field)?,
                    "core.fit_iters" => stage.fit.max_iters = parse_int(value, field)?,
                    "core.lddmm_steps" => stage.lddmm_steps = parse_int(value, field)?,
                    "post" => match value.as_str() {
                        "none" => stage.post_repeat = 0,
                        "robot_spline_finetune" => stage.post_repeat = stage.post_repeat.max(1),
                        other => {
                            return Err(Error::invalid(format!("unknown post step '{other}'")))
                        }
                    },
                    "post.repeat" => stage.post_repeat = parse_int(value, field)?,
                    "post.blur" => stage.post_ot.blur = parse_pos(value, field)?,
                    "post.reach" => stage.post_ot.reach = parse_reach(value)?,
                    "post.kernel" => stage.post_kernel = parse_kernel(value)?,
                    "seed" => stage.seed = parse_int(value, field)? as u64,
                    other => {
                        return Err(Error::invalid(format!("unknown stage key '{other}'")))
                    }
                }
            }
            stages.push(stage);
        }
        Ok(Self { stages, seed })
    }
}

fn parse_pos(v: &str, what: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::invalid(format!("bad {what} '{v}'")))?;
    if !(x > 0.0) {
        return Err(Error::invalid(format!("{what} must be positive")));
    }
    Ok(x)
}

fn parse_nonneg(v: &str, what: &str) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::invalid(format!("bad {what} '{v}'")))?;
    if !(x >= 0.0) {
        return Err(Error::invalid(format!("{what} must be non-negative")));
    }
    Ok(x)
}

fn parse_int(v: &str, what: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::invalid(format!("bad {what} '{v}'")))
}

/// Results of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub registered: WeightedPointCloud,
    /// total displacement from the original source positions
    pub flow: MatchingField,
    pub chamfer_before: f64,
    pub chamfer_after: f64,
    /// per-stage linear transforms, where a pre-alignment ran
    pub transforms: Vec<(usize, String)>,
}

fn stage_tag<T>(stage: usize, step: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::InvalidInput(format!("stage {stage} {step}: {e}")))
}

/// Execute the configured stages, writing per-stage and final artifacts
/// into `out_dir` when given.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    out_dir: Option<&Path>,
) -> Result<PipelineReport> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let original = source.positions().to_vec();
    let mut current = source.clone();
    let mut transforms = Vec::new();
    let (_, _, chamfer_before) = chamfer_distance(source, target);

    for (k, stage) in cfg.stages.iter().enumerate() {
        let stage_no = k + 1;
        match stage.prealign {
            Prealign::None => {}
            Prealign::Rigid => {
                let (t, moved) = stage_tag(
                    stage_no,
                    "rigid pre-alignment",
                    rigid_registration(&current, target, &stage.prealign_ot, stage.prealign_rounds),
                )?;
                current = moved;
                transforms.push((stage_no, format_rigid(&t)));
            }
            Prealign::Affine => {
                let (t, moved) = stage_tag(
                    stage_no,
                    "affine pre-alignment",
                    affine_registration(&current, target, &stage.prealign_ot, stage.prealign_rounds),
                )?;
                current = moved;
                transforms.push((stage_no, format_affine(&t)));
            }
        }

        match &stage.core {
            CoreStep::None => {}
            CoreStep::RobotRaw => {
                let field = stage_tag(
                    stage_no,
                    "transport matching",
                    matching_field(&current, target, &stage.core_ot),
                )?;
                current = current.with_positions(field.displaced(current.positions()))?;
            }
            CoreStep::ExternalFlow(path) => {
                let field = stage_tag(stage_no, "external flow", io::read_flow(path))?;
                if field.len() != current.len() {
                    return Err(Error::InvalidInput(format!(
                        "stage {stage_no} external flow: {} rows for {} source points",
                        field.len(),
                        current.len()
                    )));
                }
                current = current.with_positions(field.displaced(current.positions()))?;
            }
            CoreStep::SplineFit | CoreStep::LddmmFit => {
                let field = stage_tag(
                    stage_no,
                    "transport matching",
                    matching_field(&current, target, &stage.core_ot),
                )?;
                let count = stage.controls.min(current.len());
                let idx = stage_tag(
                    stage_no,
                    "control sampling",
                    farthest_point_sampling(&current, count, stage.seed),
                )?;
                let controls: Vec<[f64; 3]> = idx.iter().map(|&i| current.position(i)).collect();
                let template = if matches!(stage.core, CoreStep::SplineFit) {
                    DeformationModel::Spline {
                        coefficients: vec![[0.0; 3]; controls.len()],
                        controls,
                        kernel: stage.kernel.clone(),
                    }
                } else {
                    DeformationModel::Lddmm {
                        momenta: vec![[0.0; 3]; controls.len()],
                        controls,
                        kernel: stage.kernel.clone(),
                        steps: stage.lddmm_steps,
                    }
                };
                let fit = stage_tag(
                    stage_no,
                    "deformation fit",
                    fit_deformation(&current, &field, &template, &stage.fit),
                )?;
                let moved = stage_tag(stage_no, "morph", fit.model.morph(current.positions()))?;
                current = current.with_positions(moved)?;
            }
        }

        for _ in 0..stage.post_repeat {
            current = stage_tag(
                stage_no,
                "spline fine-tune",
                spline_finetune(&current, target, &stage.post_ot, &stage.post_kernel),
            )?;
        }

        if let Some(dir) = out_dir {
            io::write_cloud(&current, &dir.join(format!("stage{stage_no}_cloud.csv")))?;
            let flow = cumulative_flow(&original, current.positions());
            io::write_flow(&flow, &dir.join(format!("stage{stage_no}_flow.csv")))?;
        }
    }

    let flow = cumulative_flow(&original, current.positions());
    let (_, _, chamfer_after) = chamfer_distance(&current, target);
    if let Some(dir) = out_dir {
        io::write_cloud(&current, &dir.join("registered.csv"))?;
        io::write_flow(&flow, &dir.join("flow.csv"))?;
        if !transforms.is_empty() {
            let text: String = transforms
                .iter()
                .map(|(s, t)| format!("stage {s}\n{t}\n"))
                .collect();
            std::fs::write(dir.join("transform.txt"), text)?;
        }
        io::write_key_values(
            &[
                ("chamfer_before".into(), format!("{chamfer_before:.17e}")),
                ("chamfer_after".into(), format!("{chamfer_after:.17e}")),
                ("stages".into(), cfg.stages.len().to_string()),
            ],
            &dir.join("metrics.kv"),
        )?;
    }
    Ok(PipelineReport { registered: current, flow, chamfer_before, chamfer_after, transforms })
}

fn cumulative_flow(original: &[[f64; 3]], current: &[[f64; 3]]) -> MatchingField {
    let vectors: Vec<[f64; 3]> = current
        .iter()
        .zip(original)
        .map(|(c, o)| [c[0] - o[0], c[1] - o[1], c[2] - o[2]])
        .collect();
    let n = vectors.len();
    MatchingField::new(vectors, vec![1.0; n]).expect("finite displacements")
}

fn format_rigid(t: &RigidTransform) -> String {
    let r = t.rotation;
    let tr = t.net_translation();
    format!(
        "rotation\n{:.17e} {:.17e} {:.17e}\n{:.17e} {:.17e} {:.17e}\n{:.17e} {:.17e} {:.17e}\ntranslation\n{:.17e} {:.17e} {:.17e}",
        r[(0, 0)], r[(0, 1)], r[(0, 2)],
        r[(1, 0)], r[(1, 1)], r[(1, 2)],
        r[(2, 0)], r[(2, 1)], r[(2, 2)],
        tr[0], tr[1], tr[2]
    )
}

fn format_affine(t: &AffineTransform) -> String {
    let m = t.matrix;
    let tr = t.net_translation();
    format!(
        "matrix\n{:.17e} {:.17e} {:.17e}\n{:.17e} {:.17e} {:.17e}\n{:.17e} {:.17e} {:.17e}\ntranslation\n{:.17e} {:.17e} {:.17e}",
        m[(0, 0)], m[(0, 1)], m[(0, 2)],
        m[(1, 0)], m[(1, 1)], m[(1, 2)],
        m[(2, 0)], m[(2, 1)], m[(2, 2)],
        tr[0], tr[1], tr[2]
    )
}
