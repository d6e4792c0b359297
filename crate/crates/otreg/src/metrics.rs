//! Scene-flow accuracy metrics and landmark error reporting.

use crate::cloud::WeightedPointCloud;
use crate::kernel::KernelSpec;
use crate::matching::MatchingField;
use crate::transform::spline_transform;
use crate::{Error, Result};

/// Guard against division by a zero ground-truth flow in relative errors.
const REL_EPS: f64 = 1e-12;

/// Standard scene-flow scores. The thresholds interpret the inputs as
/// centimetres; rescale beforehand when the data lives in other units.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowMetrics {
    /// mean endpoint error
    pub epe3d: f64,
    /// % of points with error < 5 cm or relative error < 5%
    pub acc3ds: f64,
    /// % of points with error < 10 cm or relative error < 10%
    pub acc3dr: f64,
    /// % of points with error > 30 cm or relative error > 10%
    pub outliers3d: f64,
}

pub fn scene_flow_metrics(est: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<SceneFlowMetrics> {
    if est.len() != gt.len() {
        return Err(Error::invalid(format!(
            "flow length mismatch: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::invalid("empty flow"));
    }
    let n = est.len() as f64;
    let mut epe = 0.0;
    let mut acc_s = 0usize;
    let mut acc_r = 0usize;
    let mut outliers = 0usize;
    for (e, g) in est.iter().zip(gt) {
        let err = ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2) + (e[2] - g[2]).powi(2)).sqrt();
        let gnorm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        let rel = err / gnorm.max(REL_EPS);
        epe += err;
        if err < 5.0 || rel < 0.05 {
            acc_s += 1;
        }
        if err < 10.0 || rel < 0.10 {
            acc_r += 1;
        }
        if err > 30.0 || rel > 0.10 {
            outliers += 1;
        }
    }
    Ok(SceneFlowMetrics {
        epe3d: epe / n,
        acc3ds: 100.0 * acc_s as f64 / n,
        acc3dr: 100.0 * acc_r as f64 / n,
        outliers3d: 100.0 * outliers as f64 / n,
    })
}

/// Snap-to-voxel quantisation grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapGrid {
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl SnapGrid {
    /// The CT grid commonly used for lung landmark evaluation,
    /// 0.625 x 0.625 x 2.5 mm anchored at the origin.
    pub fn lung_default() -> Self {
        Self { spacing: [0.625, 0.625, 2.5], origin: [0.0; 3] }
    }

    fn snap(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for k in 0..3 {
            out[k] = ((p[k] - self.origin[k]) / self.spacing[k]).round() * self.spacing[k]
                + self.origin[k];
        }
        out
    }
}

/// Landmark error summary: mean plus quartiles of the per-landmark
/// Euclidean error, optionally after snapping the mapped positions to a
/// voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkReport {
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub snapped: bool,
    pub spacing: Option<[f64; 3]>,
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn landmark_report(
    tgt_lm: &[[f64; 3]],
    mapped_src_lm: &[[f64; 3]],
    snap: Option<SnapGrid>,
) -> Result<LandmarkReport> {
    if tgt_lm.len() != mapped_src_lm.len() {
        return Err(Error::invalid("landmark length mismatch"));
    }
    if tgt_lm.is_empty() {
        return Err(Error::invalid("no landmarks"));
    }
    let mut errs: Vec<f64> = mapped_src_lm
        .iter()
        .zip(tgt_lm)
        .map(|(m, t)| {
            let m = match &snap {
                Some(grid) => grid.snap(m),
                None => *m,
            };
            ((m[0] - t[0]).powi(2) + (m[1] - t[1]).powi(2) + (m[2] - t[2]).powi(2)).sqrt()
        })
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    Ok(LandmarkReport {
        mean,
        p25: percentile(&errs, 0.25),
        p50: percentile(&errs, 0.50),
        p75: percentile(&errs, 0.75),
        snapped: snap.is_some(),
        spacing: snap.map(|g| g.spacing),
    })
}

/// Carry landmarks through a matching field by smoothing the field onto the
/// landmark locations with a Nadaraya-Watson kernel.
pub fn landmark_transfer(
    src_lm: &[[f64; 3]],
    field: &MatchingField,
    source: &WeightedPointCloud,
    kernel: &KernelSpec,
) -> Result<Vec<[f64; 3]>> {
    spline_transform(source, field, kernel, src_lm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_flow_scores_perfectly() {
        let gt = vec![[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]];
        let m = scene_flow_metrics(&gt, &gt).unwrap();
        assert_eq!(m.epe3d, 0.0);
        assert_eq!(m.acc3ds, 100.0);
        assert_eq!(m.acc3dr, 100.0);
        assert_eq!(m.outliers3d, 0.0);
    }

    #[test]
    fn large_flow_with_small_error_counts_as_accurate() {
        // |gt| = 100 cm, error 4 cm: strict (4 < 5) and relaxed both count it
        let gt = vec![[100.0, 0.0, 0.0]];
        let est = vec![[96.0, 0.0, 0.0]];
        let m = scene_flow_metrics(&est, &gt).unwrap();
        assert_eq!(m.acc3ds, 100.0);
        assert_eq!(m.acc3dr, 100.0);
        assert_eq!(m.outliers3d, 0.0);
        assert!((m.epe3d - 4.0).abs() < 1e-12);
    }

    #[test]
    fn moderate_relative_error_is_accurate_yet_outlier() {
        // |gt| = 10, error 2: absolute 2 < 5 so Acc3DS counts it, but the
        // 20% relative error exceeds the 10% outlier threshold
        let gt = vec![[10.0, 0.0, 0.0]];
        let est = vec![[8.0, 0.0, 0.0]];
        let m = scene_flow_metrics(&est, &gt).unwrap();
        assert_eq!(m.acc3ds, 100.0);
        assert_eq!(m.acc3dr, 100.0);
        assert_eq!(m.outliers3d, 100.0);
    }

    #[test]
    fn accuracies_are_nested() {
        use rand::Rng;
        let mut rng = crate::rng::stream(3, "metrics", 0);
        let gt: Vec<[f64; 3]> = (0..500)
            .map(|_| [30.0 * rng.random::<f64>(), 30.0 * rng.random::<f64>(), 0.0])
            .collect();
        let est: Vec<[f64; 3]> = gt
            .iter()
            .map(|g| {
                [
                    g[0] + 20.0 * (rng.random::<f64>() - 0.5),
                    g[1] + 20.0 * (rng.random::<f64>() - 0.5),
                    0.0,
                ]
            })
            .collect();
        let m = scene_flow_metrics(&est, &gt).unwrap();
        assert!(m.acc3ds <= m.acc3dr);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        use rand::Rng;
        let mut rng = crate::rng::stream(4, "metrics-perm", 0);
        let gt: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.random::<f64>() * 8.0, 0.0, 0.0])
            .collect();
        let est: Vec<[f64; 3]> = gt
            .iter()
            .map(|g| [g[0] + rng.random::<f64>() * 6.0, 0.0, 0.0])
            .collect();
        let m1 = scene_flow_metrics(&est, &gt).unwrap();
        let mut order: Vec<usize> = (0..gt.len()).collect();
        order.reverse();
        let est2: Vec<[f64; 3]> = order.iter().map(|&i| est[i]).collect();
        let gt2: Vec<[f64; 3]> = order.iter().map(|&i| gt[i]).collect();
        let m2 = scene_flow_metrics(&est2, &gt2).unwrap();
        assert!((m1.epe3d - m2.epe3d).abs() < 1e-12);
        assert_eq!(m1.acc3ds, m2.acc3ds);
        assert_eq!(m1.outliers3d, m2.outliers3d);
    }

    #[test]
    fn perfect_landmarks_report_zeros() {
        let lm = vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let r = landmark_report(&lm, &lm, None).unwrap();
        assert_eq!((r.mean, r.p25, r.p50, r.p75), (0.0, 0.0, 0.0, 0.0));
        assert!(!r.snapped);
    }

    #[test]
    fn snapping_rounds_onto_the_grid() {
        let grid = SnapGrid::lung_default();
        // target on-grid; mapped within half a voxel on each axis
        let tgt = vec![[0.625, 1.25, 2.5]];
        let mapped = vec![[0.625 + 0.3, 1.25 - 0.2, 2.5 + 1.2]];
        let r = landmark_report(&tgt, &mapped, Some(grid)).unwrap();
        assert_eq!(r.mean, 0.0, "snap should land exactly on the target node");
        assert!(r.snapped);
        assert_eq!(r.spacing, Some([0.625, 0.625, 2.5]));
        // without snapping the same pair has a nonzero error
        let raw = landmark_report(&tgt, &mapped, None).unwrap();
        assert!(raw.mean > 1.0);
    }

    #[test]
    fn report_matches_an_order_statistics_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream(5, "landmarks", 0);
        let n = 300;
        let tgt: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0, rng.random::<f64>() * 10.0])
            .collect();
        let mapped: Vec<[f64; 3]> = tgt
            .iter()
            .map(|t| {
                [
                    t[0] + rng.random::<f64>() - 0.5,
                    t[1] + rng.random::<f64>() - 0.5,
                    t[2] + rng.random::<f64>() - 0.5,
                ]
            })
            .collect();
        let r = landmark_report(&tgt, &mapped, None).unwrap();

        // oracle: direct order statistics with linear interpolation
        let mut errs: Vec<f64> = tgt
            .iter()
            .zip(&mapped)
            .map(|(t, m)| {
                ((t[0] - m[0]).powi(2) + (t[1] - m[1]).powi(2) + (t[2] - m[2]).powi(2)).sqrt()
            })
            .collect();
        let mean: f64 = errs.iter().sum::<f64>() / n as f64;
        errs.sort_by(f64::total_cmp);
        let pct = |p: f64| -> f64 {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            errs[lo] + (h - lo as f64) * (errs[lo + 1] - errs[lo])
        };
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.p25 - pct(0.25)).abs() < 1e-12);
        assert!((r.p50 - pct(0.50)).abs() < 1e-12);
        assert!((r.p75 - pct(0.75)).abs() < 1e-12);
        assert!(r.p25 <= r.p50 && r.p50 <= r.p75);
    }

    #[test]
    fn unsnapped_report_is_rigid_invariant() {
        use nalgebra::{Rotation3, Vector3};
        use rand::Rng;
        let mut rng = crate::rng::stream(6, "landmarks-rigid", 0);
        let n = 40;
        let tgt: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let mapped: Vec<[f64; 3]> = tgt
            .iter()
            .map(|t| [t[0] + 0.2 * rng.random::<f64>(), t[1], t[2] - 0.1 * rng.random::<f64>()])
            .collect();
        let r1 = landmark_report(&tgt, &mapped, None).unwrap();
        let rot = Rotation3::from_euler_angles(0.4, -0.7, 0.2);
        let t = Vector3::new(5.0, -2.0, 1.0);
        let move_all = |pts: &[[f64; 3]]| -> Vec<[f64; 3]> {
            pts.iter()
                .map(|p| {
                    let q = rot * Vector3::new(p[0], p[1], p[2]) + t;
                    [q[0], q[1], q[2]]
                })
                .collect()
        };
        let r2 = landmark_report(&move_all(&tgt), &move_all(&mapped), None).unwrap();
        assert!((r1.mean - r2.mean).abs() < 1e-12);
        assert!((r1.p50 - r2.p50).abs() < 1e-12);
    }

    #[test]
    fn transfer_through_zero_field_is_identity() {
        let source = crate::fixtures::blob_cloud(50, 1);
        let field = MatchingField::new(vec![[0.0; 3]; 50], vec![1.0; 50]).unwrap();
        let kernel = KernelSpec::gaussian(0.5).unwrap();
        let lm = vec![[0.3, 0.3, 0.3], [1.0, 0.0, 0.0]];
        let out = landmark_transfer(&lm, &field, &source, &kernel).unwrap();
        for (a, b) in out.iter().zip(&lm) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn transfer_follows_a_coincident_source_point_at_tiny_bandwidth() {
        let source = crate::fixtures::blob_cloud(30, 2);
        let mut vectors = vec![[0.0; 3]; 30];
        vectors[7] = [0.5, -0.25, 0.1];
        let field = MatchingField::new(vectors, vec![1.0; 30]).unwrap();
        let kernel = KernelSpec::gaussian(1e-4).unwrap();
        let lm = vec![source.position(7)];
        let out = landmark_transfer(&lm, &field, &source, &kernel).unwrap();
        assert!((out[0][0] - (lm[0][0] + 0.5)).abs() < 1e-9);
        assert!((out[0][1] - (lm[0][1] - 0.25)).abs() < 1e-9);
    }

    #[test]
    fn transfer_reproduces_a_translation_field() {
        let source = crate::fixtures::blob_cloud(60, 3);
        let t = [0.4, 0.2, -0.3];
        let field = MatchingField::new(vec![t; 60], vec![1.0; 60]).unwrap();
        let kernel = KernelSpec::gaussian(0.3).unwrap();
        let lm = vec![[0.0; 3], [0.5, 0.5, 0.5], [2.0, 0.0, 1.0]];
        let out = landmark_transfer(&lm, &field, &source, &kernel).unwrap();
        for (o, l) in out.iter().zip(&lm) {
            for k in 0..3 {
                assert!((o[k] - l[k] - t[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(scene_flow_metrics(&[[0.0; 3]], &[[0.0; 3], [1.0, 0.0, 0.0]]).is_err());
        assert!(landmark_report(&[[0.0; 3]], &[], None).is_err());
    }
}
