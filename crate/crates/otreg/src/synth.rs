//! Synthetic registration pairs with dense ground-truth flow.
//!
//! The generator resamples a cloud on a voxel grid, applies a
//! structure-preserving local deformation (anisotropic kernels estimated
//! from the cloud itself), a smoother but larger global deformation, radius
//! noise, and finally an inconsistent random subsampling of source and
//! target. Every stage draws from its own counter-based stream, so a pair
//! is a pure function of `(cloud, params)`.

use rand::Rng;

use crate::cloud::{voxel_grid_downsample, WeightedPointCloud};
use crate::kernel::{local_anisotropic_covariances, AnisotropicKernel, KernelSpec};
use crate::matching::MatchingField;
use crate::rng::{sample_in_ball, stream};
use crate::transform::{anisotropic_smooth, spline_transform};
use crate::{Error, Result};

/// Generator scales. Length fields are in the cloud's units (the defaults
/// are the millimetre-scale values used for vessel trees).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// voxel-grid resampling spacing
    pub s_voxelgrid: f64,
    /// number of local deformation control points
    pub c_local: usize,
    /// anisotropic kernel scale of the local deformation
    pub s_local: f64,
    /// maximum local displacement
    pub d_local: f64,
    /// eigenvalue floor of the local covariance estimation
    pub eig_floor: f64,
    /// voxel spacing used to pick global control points
    pub s_global: f64,
    /// maximum global displacement
    pub d_global: f64,
    /// deviation of the global smoothing kernel
    pub sigma_global: f64,
    /// relative radius noise amplitude
    pub s_radius: f64,
    /// points retained in source and target
    pub sample_count: usize,
    pub seed: u64,
    /// optional additional global deformation of the source itself,
    /// `(d_global, sigma_global)`
    pub source_aug: Option<(f64, f64)>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            s_voxelgrid: 1.0,
            c_local: 1000,
            s_local: 4.0,
            d_local: 3.0,
            eig_floor: 0.2,
            s_global: 90.0,
            d_global: 25.0,
            sigma_global: 25.0,
            s_radius: 0.1,
            sample_count: 60_000,
            seed: 0,
            source_aug: None,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("s_voxelgrid", self.s_voxelgrid),
            ("s_local", self.s_local),
            ("eig_floor+1", self.eig_floor + 1.0),
            ("s_global", self.s_global),
            ("sigma_global", self.sigma_global),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("d_local", self.d_local),
            ("d_global", self.d_global),
            ("s_radius", self.s_radius),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if self.c_local == 0 || self.sample_count == 0 {
            return Err(Error::invalid("c_local and sample_count must be positive"));
        }
        Ok(())
    }
}

/// A generated registration pair. `gt_flow[i]` carries source point `i` to
/// its deformed location; it follows the retained source samples and is not
/// affected by the independent target subsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub source: WeightedPointCloud,
    pub target: WeightedPointCloud,
    pub gt_flow: Vec<[f64; 3]>,
}

/// `count` distinct indices below `n`, by partial Fisher-Yates on the given
/// stream, returned sorted.
fn sample_indices(n: usize, count: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = i + rng.random_range(0..(n - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut out = idx[..count.min(n)].to_vec();
    out.sort_unstable();
    out
}

/// Vessel-preserving local deformation: random displacements at uniformly
/// sampled control points, smoothed with the two-pass anisotropic kernels so
/// that points on the same structure move coherently.
pub fn local_deformation(
    cloud: &WeightedPointCloud,
    params: &SynthParams,
    seed: u64,
) -> Result<(WeightedPointCloud, Vec<[f64; 3]>)> {
    params.validate()?;
    if params.c_local > cloud.len() {
        return Err(Error::invalid(format!(
            "c_local {} exceeds cloud size {}",
            params.c_local,
            cloud.len()
        )));
    }
    let mut picker = stream(seed, "synth/local/controls", 0);
    let controls = sample_indices(cloud.len(), params.c_local, &mut picker);
    let covs = local_anisotropic_covariances(
        cloud,
        &controls,
        params.s_local,
        params.s_local,
        params.eig_floor,
    )?;
    let kernels = AnisotropicKernel::new(&covs)?;
    let displacements: Vec<[f64; 3]> = (0..controls.len())
        .map(|c| {
            let mut r = stream(seed, "synth/local/disp", c as u64);
            sample_in_ball(&mut r, params.d_local)
        })
        .collect();
    let control_cloud = cloud.select(&controls)?;
    let field = MatchingField::new(displacements, vec![1.0; controls.len()])?;
    let moved = anisotropic_smooth(&control_cloud, &field, &kernels, cloud.positions())?;
    let flow: Vec<[f64; 3]> = moved
        .iter()
        .zip(cloud.positions())
        .map(|(m, p)| [m[0] - p[0], m[1] - p[1], m[2] - p[2]])
        .collect();
    Ok((cloud.with_positions(moved)?, flow))
}

/// Smooth large-scale deformation: control points from a coarse voxel grid,
/// displacements uniform in a ball, isotropic Gaussian smoothing.
pub fn global_deformation(
    cloud: &WeightedPointCloud,
    params: &SynthParams,
    seed: u64,
) -> Result<(WeightedPointCloud, Vec<[f64; 3]>)> {
    params.validate()?;
    global_deformation_with(cloud, params.s_global, params.d_global, params.sigma_global, seed, "synth/global")
}

fn global_deformation_with(
    cloud: &WeightedPointCloud,
    s_global: f64,
    d_global: f64,
    sigma_global: f64,
    seed: u64,
    stage: &str,
) -> Result<(WeightedPointCloud, Vec<[f64; 3]>)> {
    let grid = voxel_grid_downsample(cloud, s_global)?;
    let controls = WeightedPointCloud::from_positions(grid.positions().to_vec())?;
    let displacements: Vec<[f64; 3]> = (0..controls.len())
        .map(|c| {
            let mut r = stream(seed, stage, c as u64);
            sample_in_ball(&mut r, d_global)
        })
        .collect();
    let field = MatchingField::new(displacements, vec![1.0; controls.len()])?;
    let kernel = KernelSpec::gaussian(sigma_global)?;
    let moved = spline_transform(&controls, &field, &kernel, cloud.positions())?;
    let flow: Vec<[f64; 3]> = moved
        .iter()
        .zip(cloud.positions())
        .map(|(m, p)| [m[0] - p[0], m[1] - p[1], m[2] - p[2]])
        .collect();
    Ok((cloud.with_positions(moved)?, flow))
}

/// Multiplicative-style radius noise: each radius moves by a uniform draw
/// from `[-s_radius * r, s_radius * r]`, staying positive.
pub fn distort_radii(cloud: &WeightedPointCloud, s_radius: f64, seed: u64) -> Result<WeightedPointCloud> {
    if !(s_radius >= 0.0) {
        return Err(Error::invalid("s_radius must be non-negative"));
    }
    let radii = cloud
        .radii()
        .ok_or_else(|| Error::invalid("cloud has no radii to distort"))?;
    let new_radii: Vec<f64> = radii
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut rng = stream(seed, "synth/radius", i as u64);
            let u: f64 = rng.random_range(-1.0..=1.0);
            (r + u * s_radius * r).max(r * 1e-6)
        })
        .collect();
    cloud.clone().with_radii(new_radii)
}

/// Full generation pipeline: voxel-grid resampling, local then global
/// deformation of the target, optional source augmentation, radius noise on
/// the target, and independent random subsampling of both sides.
pub fn make_training_pair(cloud: &WeightedPointCloud, params: &SynthParams) -> Result<SynthPair> {
    make_training_pair_with_holdout(cloud, params, 0).map(|(pair, _, _)| pair)
}

/// Same pipeline, additionally returning ground-truth correspondences
/// `(positions, deformed positions)` for `holdout` points that were *not*
/// retained in the source sample: held-out evaluation landmarks.
pub fn make_training_pair_with_holdout(
    cloud: &WeightedPointCloud,
    params: &SynthParams,
    holdout: usize,
) -> Result<(SynthPair, Vec<[f64; 3]>, Vec<[f64; 3]>)> {
    params.validate()?;
    if cloud.radii().is_none() {
        return Err(Error::invalid("make_training_pair needs per-point radii"));
    }
    let seed = params.seed;
    let base = voxel_grid_downsample(cloud, params.s_voxelgrid)?;
    let source_geom = match params.source_aug {
        Some((d, sigma)) => {
            global_deformation_with(&base, params.s_global, d, sigma, seed, "synth/source-aug")?.0
        }
        None => base.clone(),
    };
    let (local, _) = local_deformation(&base, params, seed)?;
    let (target_geom, _) = global_deformation(&local, params, seed)?;
    let target_geom = if params.s_radius > 0.0 {
        distort_radii(&target_geom, params.s_radius, seed)?
    } else {
        target_geom
    };
    let n = base.len();
    let count = params.sample_count.min(n);
    let mut src_rng = stream(seed, "synth/sample/source", 0);
    let mut tgt_rng = stream(seed, "synth/sample/target", 0);
    let src_idx = sample_indices(n, count, &mut src_rng);
    let tgt_idx = sample_indices(n, count, &mut tgt_rng);

    let mut held_src = Vec::new();
    let mut held_tgt = Vec::new();
    if holdout > 0 {
        let in_source: std::collections::BTreeSet<usize> = src_idx.iter().copied().collect();
        let mut hold_rng = stream(seed, "synth/holdout", 0);
        let mut candidates: Vec<usize> = (0..n).filter(|i| !in_source.contains(i)).collect();
        while held_src.len() < holdout && !candidates.is_empty() {
            let k = hold_rng.random_range(0..candidates.len() as u64) as usize;
            let i = candidates.swap_remove(k);
            held_src.push(source_geom.position(i));
            held_tgt.push(target_geom.position(i));
        }
    }

    let gt_flow: Vec<[f64; 3]> = src_idx
        .iter()
        .map(|&i| {
            let t = target_geom.position(i);
            let s = source_geom.position(i);
            [t[0] - s[0], t[1] - s[1], t[2] - s[2]]
        })
        .collect();
    Ok((
        SynthPair {
            source: source_geom.select(&src_idx)?,
            target: target_geom.select(&tgt_idx)?,
            gt_flow,
        },
        held_src,
        held_tgt,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{branching_tree, two_tubes};

    fn tree() -> WeightedPointCloud {
        branching_tree(3000, 11)
    }

    fn small_params() -> SynthParams {
        SynthParams {
            s_voxelgrid: 1.0,
            c_local: 200,
            sample_count: 100_000,
            ..SynthParams::default()
        }
    }

    #[test]
    fn zero_local_magnitude_is_identity() {
        let c = tree();
        let params = SynthParams { d_local: 0.0, c_local: 100, ..SynthParams::default() };
        let (moved, flow) = local_deformation(&c, &params, 3).unwrap();
        assert_eq!(moved.positions(), c.positions());
        assert!(flow.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn local_displacements_respect_the_ball_radius() {
        let c = tree();
        let params = SynthParams { c_local: 150, ..small_params() };
        let (_, flow) = local_deformation(&c, &params, 5).unwrap();
        for v in &flow {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!(n <= params.d_local + 1e-9, "norm {n}");
        }
    }

    #[test]
    fn local_deformation_errors_with_too_many_controls() {
        let c = two_tubes(10, 5.0, 10.0, 0.1, 1);
        let params = SynthParams { c_local: 100, ..SynthParams::default() };
        assert!(local_deformation(&c, &params, 0).is_err());
    }

    #[test]
    fn local_flow_is_coherent_within_tubes() {
        // two tubes 10 * s_local apart: short-lag flow autocorrelation is
        // high within a tube while the per-tube mean flows are uncorrelated
        // across tubes (ensemble over seeds)
        let s_local = 2.0;
        let c = two_tubes(300, 10.0 * s_local, 40.0, 0.4, 21);
        let params = SynthParams {
            c_local: 60,
            s_local,
            d_local: 1.0,
            s_voxelgrid: 1.0,
            ..SynthParams::default()
        };
        let cos = |a: &[f64; 3], b: &[f64; 3]| {
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb)
            }
        };
        let mut within_acc = 0.0;
        let mut means = Vec::new(); // (mean flow tube 1, mean flow tube 2)
        for seed in 0..10u64 {
            let (_, flow) = local_deformation(&c, &params, seed).unwrap();
            let mut within = 0.0;
            let mut nw = 0;
            for i in 0..300 {
                for j in i + 1..300 {
                    if (c.position(i)[0] - c.position(j)[0]).abs() <= s_local {
                        within += cos(&flow[i], &flow[j]);
                        nw += 1;
                    }
                }
            }
            within_acc += within / nw as f64;
            let mean = |lo: usize, hi: usize| -> [f64; 3] {
                let mut m = [0.0; 3];
                for f in &flow[lo..hi] {
                    for k in 0..3 {
                        m[k] += f[k] / (hi - lo) as f64;
                    }
                }
                m
            };
            means.push((mean(0, 300), mean(300, 600)));
        }
        let within = within_acc / 10.0;
        // Pearson correlation of the per-tube mean-flow components over seeds
        let xs: Vec<f64> = means.iter().flat_map(|(a, _)| a.iter().copied().collect::<Vec<_>>()).collect();
        let ys: Vec<f64> = means.iter().flat_map(|(_, b)| b.iter().copied().collect::<Vec<_>>()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let across = cov / (vx * vy).sqrt();
        // frozen from the first run of this fixture: within ~0.57, |across| ~0.09
        assert!(within > 0.45, "within-tube short-lag coherence {within}");
        assert!(across < within - 0.2, "across-tube correlation {across} vs within {within}");
    }

    #[test]
    fn local_step_keeps_nw_weight_on_the_own_tube() {
        let s_local = 2.0;
        let c = two_tubes(300, 4.0 * s_local, 40.0, 0.4, 22);
        let params = SynthParams { c_local: 60, s_local, d_local: 1.0, ..SynthParams::default() };
        let mut picker = stream(17, "synth/local/controls", 0);
        let controls = sample_indices(c.len(), params.c_local, &mut picker);
        let covs = local_anisotropic_covariances(&c, &controls, s_local, s_local, params.eig_floor)
            .unwrap();
        let kernels = AnisotropicKernel::new(&covs).unwrap();
        for i in (0..c.len()).step_by(13) {
            let p = c.position(i);
            let own_tube = i < 300;
            let mut own = 0.0;
            let mut other = 0.0;
            for (k, &ctrl) in controls.iter().enumerate() {
                let w = kernels.eval(k, &c.position(ctrl), &p);
                if (ctrl < 300) == own_tube {
                    own += w;
                } else {
                    other += w;
                }
            }
            assert!(
                own >= other,
                "point {i} dominated by the other tube: own {own} vs other {other}"
            );
        }
    }

    #[test]
    fn zero_global_magnitude_is_identity() {
        let c = tree();
        let params = SynthParams { d_global: 0.0, ..small_params() };
        let (moved, flow) = global_deformation(&c, &params, 3).unwrap();
        assert_eq!(moved.positions(), c.positions());
        assert!(flow.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn global_displacements_respect_the_ball_radius() {
        let c = tree();
        let params = small_params();
        let (_, flow) = global_deformation(&c, &params, 4).unwrap();
        for v in &flow {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!(n <= params.d_global + 1e-9);
        }
    }

    #[test]
    fn global_field_is_lipschitz() {
        let c = tree();
        let params = small_params();
        let (_, flow) = global_deformation(&c, &params, 6).unwrap();
        let bound = 2.0 * params.d_global / params.sigma_global;
        let mut worst: f64 = 0.0;
        for i in (0..c.len()).step_by(3) {
            for j in (i + 1..c.len()).step_by(97) {
                let d = crate::cloud::dist_sq(&c.position(i), &c.position(j)).sqrt();
                if d == 0.0 || d > params.sigma_global / 10.0 {
                    continue;
                }
                let df = [
                    flow[i][0] - flow[j][0],
                    flow[i][1] - flow[j][1],
                    flow[i][2] - flow[j][2],
                ];
                let dn = (df[0] * df[0] + df[1] * df[1] + df[2] * df[2]).sqrt();
                worst = worst.max(dn / d);
            }
        }
        // numeric constant frozen from the first scan: worst observed ~0.20
        // of the 2 d/sigma bound
        assert!(worst <= bound, "lipschitz ratio {worst} vs bound {bound}");
    }

    #[test]
    fn radius_distortion_stays_in_band_and_centers() {
        let c = tree();
        let out = distort_radii(&c, 0.1, 9).unwrap();
        let mut mean_ratio = 0.0;
        for (r0, r1) in c.radii().unwrap().iter().zip(out.radii().unwrap()) {
            assert!(*r1 >= 0.9 * r0 - 1e-12 && *r1 <= 1.1 * r0 + 1e-12);
            mean_ratio += (r1 - r0) / r0;
        }
        mean_ratio /= c.len() as f64;
        // mean of U[-0.1, 0.1] over n draws: stderr = 0.1/sqrt(3 n)
        let stderr = 0.1 / (3.0 * c.len() as f64).sqrt();
        assert!(mean_ratio.abs() < 3.0 * stderr, "mean {mean_ratio} vs 3se {stderr}");

        let identity = distort_radii(&c, 0.0, 9).unwrap();
        assert_eq!(identity.radii().unwrap(), c.radii().unwrap());
        let bare = WeightedPointCloud::from_positions(vec![[0.0; 3]]).unwrap();
        assert!(distort_radii(&bare, 0.1, 0).is_err());
    }

    #[test]
    fn trivial_pair_is_the_identity() {
        let c = tree();
        let n_after = voxel_grid_downsample(&c, 1.0).unwrap().len();
        let params = SynthParams {
            c_local: 200,
            d_local: 0.0,
            d_global: 0.0,
            s_radius: 0.0,
            sample_count: n_after,
            ..SynthParams::default()
        };
        let pair = make_training_pair(&c, &params).unwrap();
        assert_eq!(pair.source, pair.target);
        assert!(pair.gt_flow.iter().all(|v| *v == [0.0; 3]));
    }

    #[test]
    fn pairs_are_bitwise_deterministic() {
        let c = tree();
        let params = SynthParams { c_local: 200, sample_count: 1500, seed: 43, ..SynthParams::default() };
        let a = make_training_pair(&c, &params).unwrap();
        let b = make_training_pair(&c, &params).unwrap();
        assert_eq!(a, b);
        let other = make_training_pair(&c, &SynthParams { seed: 44, ..params }).unwrap();
        assert_ne!(a.source, other.source);
    }

    #[test]
    fn flow_norm_obeys_the_composition_bound() {
        let c = tree();
        let params = SynthParams {
            c_local: 200,
            sample_count: 2000,
            source_aug: Some((8.0, 15.0)),
            ..SynthParams::default()
        };
        let pair = make_training_pair(&c, &params).unwrap();
        let budget = params.d_local + params.d_global + 8.0;
        for v in &pair.gt_flow {
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            assert!(n <= budget + 1e-9, "flow norm {n} vs {budget}");
        }
    }

    #[test]
    fn source_plus_flow_is_the_deformed_geometry() {
        let c = tree();
        let params = SynthParams { c_local: 150, sample_count: 800, ..SynthParams::default() };
        let (pair, held_src, held_tgt) = make_training_pair_with_holdout(&c, &params, 50).unwrap();
        assert_eq!(pair.gt_flow.len(), pair.source.len());
        assert_eq!(held_src.len(), 50);
        assert_eq!(held_tgt.len(), 50);
        // flow targets live inside the target geometry's bounding box,
        // expanded by the radius noise-free deformation budget
        let (lo, hi) = pair.target.bounding_box();
        for (s, v) in pair.source.positions().iter().zip(&pair.gt_flow) {
            let y = [s[0] + v[0], s[1] + v[1], s[2] + v[2]];
            for k in 0..3 {
                assert!(y[k] >= lo[k] - 30.0 && y[k] <= hi[k] + 30.0);
            }
        }
    }
}
