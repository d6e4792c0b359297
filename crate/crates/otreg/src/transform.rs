//! Closed-form projections of a matching field onto rigid and affine
//! transforms, and kernel smoothing of the field onto arbitrary query
//! points.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::cloud::{dist_sq, WeightedPointCloud};
use crate::kernel::{AnisotropicKernel, KernelSpec};
use crate::matching::MatchingField;
use crate::{Error, Result};

/// Rigid motion fitted to a weighted displacement field, applied as
/// `x -> R (x - c) + c + v` around the weighted barycenter `c` with mean
/// displacement `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub mean_displacement: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
            mean_displacement: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let x = Vector3::new(p[0], p[1], p[2]);
        let y = self.rotation * (x - self.center) + self.center + self.mean_displacement;
        [y[0], y[1], y[2]]
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    /// Net translation of the equivalent `x -> R x + t` form.
    pub fn net_translation(&self) -> Vector3<f64> {
        self.center + self.mean_displacement - self.rotation * self.center
    }

    /// Compose with another rigid transform applied afterwards.
    pub fn then(&self, after: &RigidTransform) -> RigidTransform {
        let rotation = after.rotation * self.rotation;
        let t = after.rotation * self.net_translation() + after.net_translation();
        RigidTransform { rotation, center: Vector3::zeros(), mean_displacement: t }
    }
}

/// Affine map fitted to a weighted displacement field, applied as
/// `x -> A (x - c) + c + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineTransform {
    pub matrix: Matrix3<f64>,
    pub center: Vector3<f64>,
    pub mean_displacement: Vector3<f64>,
}

impl AffineTransform {
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let x = Vector3::new(p[0], p[1], p[2]);
        let y = self.matrix * (x - self.center) + self.center + self.mean_displacement;
        [y[0], y[1], y[2]]
    }

    pub fn apply_all(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|p| self.apply(p)).collect()
    }

    pub fn net_translation(&self) -> Vector3<f64> {
        self.center + self.mean_displacement - self.matrix * self.center
    }
}

struct CenteredMoments {
    center: Vector3<f64>,
    mean_disp: Vector3<f64>,
    /// sum_i w_i (x_i - c) (y_i - c - v)^T with y_i = x_i + v_i
    cross: Matrix3<f64>,
    /// sum_i w_i (x_i - c)(x_i - c)^T
    scatter: Matrix3<f64>,
}

fn moments(source: &WeightedPointCloud, field: &MatchingField) -> Result<CenteredMoments> {
    if field.len() != source.len() {
        return Err(Error::invalid("field length does not match source"));
    }
    let w = field.confidences();
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::invalid("all confidences are zero"));
    }
    let mut center = Vector3::zeros();
    let mut mean_disp = Vector3::zeros();
    for i in 0..source.len() {
        let p = source.position(i);
        let v = field.vectors()[i];
        center += w[i] * Vector3::new(p[0], p[1], p[2]);
        mean_disp += w[i] * Vector3::new(v[0], v[1], v[2]);
    }
    center /= wsum;
    mean_disp /= wsum;
    let mut cross = Matrix3::zeros();
    let mut scatter = Matrix3::zeros();
    for i in 0..source.len() {
        if w[i] == 0.0 {
            continue;
        }
        let p = source.position(i);
        let v = field.vectors()[i];
        let xc = Vector3::new(p[0], p[1], p[2]) - center;
        let yc = xc + Vector3::new(v[0], v[1], v[2]) - mean_disp;
        cross += w[i] * xc * yc.transpose();
        scatter += w[i] * xc * xc.transpose();
    }
    Ok(CenteredMoments { center, mean_disp, cross, scatter })
}

/// Weighted Kabsch projection: the rigid transform minimising
/// `sum_i w_i |x_i + v_i - T(x_i)|^2`. The reflection case is fixed by
/// flipping the singular direction with the smallest singular value.
pub fn project_rigid(source: &WeightedPointCloud, field: &MatchingField) -> Result<RigidTransform> {
    let m = moments(source, field)?;
    let svd = m.cross.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let s = svd.singular_values;
    let smax = s.max();
    if smax <= 0.0 {
        // zero cross-covariance: any rotation fits equally; identity is the
        // canonical representative (constant fields land here)
        return Ok(RigidTransform {
            rotation: Matrix3::identity(),
            center: m.center,
            mean_displacement: m.mean_disp,
        });
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    if s[order[1]] <= 1e-12 * smax {
        return Err(Error::Degenerate(
            "collinear support: rotation is not determined".into(),
        ));
    }
    // column convention: rotation maps centered source onto centered targets
    let v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        let mut vf = v;
        let k = order[0]; // smallest singular value
        for r in 0..3 {
            vf[(r, k)] = -vf[(r, k)];
        }
        rotation = vf * u.transpose();
    }
    Ok(RigidTransform { rotation, center: m.center, mean_displacement: m.mean_disp })
}

/// Weighted least-squares affine fit of the displacement field.
pub fn project_affine(source: &WeightedPointCloud, field: &MatchingField) -> Result<AffineTransform> {
    let m = moments(source, field)?;
    let eig = SymmetricEigen::new(m.scatter);
    let emax = eig.eigenvalues.max();
    let emin = eig.eigenvalues.min();
    if !(emin > 0.0) || emax / emin > 1e12 {
        return Err(Error::Degenerate(format!(
            "normal matrix is singular or ill-conditioned (eigenvalues {:?})",
            eig.eigenvalues
        )));
    }
    let inv = m
        .scatter
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("normal matrix not invertible".into()))?;
    // row convention (X^T W X)^{-1} (X^T W Y) transposed into column form
    let matrix = (inv * m.cross).transpose();
    Ok(AffineTransform { matrix, center: m.center, mean_displacement: m.mean_disp })
}

/// Weighted residual `sum_i w_i |x_i + v_i - T(x_i)|^2` of any transform.
pub fn weighted_residual(
    source: &WeightedPointCloud,
    field: &MatchingField,
    transform: impl Fn(&[f64; 3]) -> [f64; 3],
) -> f64 {
    let mut acc = 0.0;
    for i in 0..source.len() {
        let w = field.confidences()[i];
        if w == 0.0 {
            continue;
        }
        let p = source.position(i);
        let v = field.vectors()[i];
        let t = transform(&p);
        acc += w
            * ((p[0] + v[0] - t[0]).powi(2)
                + (p[1] + v[1] - t[1]).powi(2)
                + (p[2] + v[2] - t[2]).powi(2));
    }
    acc
}

fn nw_displace<K>(
    source: &WeightedPointCloud,
    field: &MatchingField,
    query: &[[f64; 3]],
    kernel_at: K,
) -> Vec<[f64; 3]>
where
    K: Fn(usize, &[f64; 3]) -> f64 + Sync,
{
    let w = field.confidences();
    let vs = field.vectors();
    query
        .par_iter()
        .map(|q| {
            let mut num = [0.0f64; 3];
            let mut den = 0.0f64;
            for i in 0..source.len() {
                if w[i] == 0.0 {
                    continue;
                }
                let k = w[i] * kernel_at(i, q);
                den += k;
                num[0] += k * vs[i][0];
                num[1] += k * vs[i][1];
                num[2] += k * vs[i][2];
            }
            if den < 1e-300 {
                // every kernel value underflowed; fall back to the nearest
                // contributing site
                let mut best = (usize::MAX, f64::INFINITY);
                for i in 0..source.len() {
                    if w[i] > 0.0 {
                        let d = dist_sq(&source.position(i), q);
                        if d < best.1 {
                            best = (i, d);
                        }
                    }
                }
                let v = vs[best.0];
                return [q[0] + v[0], q[1] + v[1], q[2] + v[2]];
            }
            [q[0] + num[0] / den, q[1] + num[1] / den, q[2] + num[2] / den]
        })
        .collect()
}

/// Nadaraya-Watson smoothing of the field, evaluated at the query points:
/// `q -> q + sum_i w_i k(x_i, q) v_i / sum_i w_i k(x_i, q)`.
pub fn spline_transform(
    source: &WeightedPointCloud,
    field: &MatchingField,
    kernel: &KernelSpec,
    query: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    if field.len() != source.len() {
        return Err(Error::invalid("field length does not match source"));
    }
    if !(field.total_confidence() > 0.0) {
        return Err(Error::invalid("all confidences are zero"));
    }
    Ok(nw_displace(source, field, query, |i, q| kernel.eval(&source.position(i), q)))
}

/// Same smoother with one anisotropic Gaussian per source site.
pub fn anisotropic_smooth(
    source: &WeightedPointCloud,
    field: &MatchingField,
    kernels: &AnisotropicKernel,
    query: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>> {
    if field.len() != source.len() || kernels.len() != source.len() {
        return Err(Error::invalid("field/kernel length does not match source"));
    }
    if !(field.total_confidence() > 0.0) {
        return Err(Error::invalid("all confidences are zero"));
    }
    Ok(nw_displace(source, field, query, |i, q| kernels.eval(i, &source.position(i), q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn cloud(pts: Vec<[f64; 3]>) -> WeightedPointCloud {
        WeightedPointCloud::from_positions(pts).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> WeightedPointCloud {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "transform", 0);
        cloud((0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect())
    }

    fn field_of(vectors: Vec<[f64; 3]>, w: Vec<f64>) -> MatchingField {
        MatchingField::new(vectors, w).unwrap()
    }

    #[test]
    fn zero_field_projects_to_identity() {
        let c = random_cloud(10, 1);
        let f = field_of(vec![[0.0; 3]; 10], vec![1.0; 10]);
        let r = project_rigid(&c, &f).unwrap();
        assert!((r.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(r.net_translation().norm() < 1e-12);
        let a = project_affine(&c, &f).unwrap();
        assert!((a.matrix - Matrix3::identity()).norm() < 1e-10);
        assert!(a.net_translation().norm() < 1e-10);
    }

    #[test]
    fn constant_field_projects_to_translation() {
        let c = random_cloud(12, 2);
        let t = [1.0, -2.0, 0.5];
        let f = field_of(vec![t; 12], vec![1.0; 12]);
        let r = project_rigid(&c, &f).unwrap();
        assert!((r.rotation - Matrix3::identity()).norm() < 1e-12);
        let nt = r.net_translation();
        assert!((nt - Vector3::new(t[0], t[1], t[2])).norm() < 1e-12);
    }

    #[test]
    fn exact_rigid_motion_is_recovered() {
        let c = random_cloud(30, 3);
        let rot = Rotation3::from_euler_angles(0.7, -0.6, 0.4); // <= 45 deg each
        let t = Vector3::new(0.3, -0.8, 1.1);
        let vectors: Vec<[f64; 3]> = c
            .positions()
            .iter()
            .map(|p| {
                let x = Vector3::new(p[0], p[1], p[2]);
                let y = rot * x + t;
                [y[0] - p[0], y[1] - p[1], y[2] - p[2]]
            })
            .collect();
        let f = field_of(vectors, vec![1.0; 30]);
        let r = project_rigid(&c, &f).unwrap();
        assert!((r.rotation - rot.matrix()).norm() < 1e-10, "rotation error");
        assert!((r.net_translation() - t).norm() < 1e-10);
        let res = weighted_residual(&c, &f, |p| r.apply(p));
        assert!(res < 1e-20);
        // orthonormality and orientation
        assert!((r.rotation.transpose() * r.rotation - Matrix3::identity()).norm() < 1e-10);
        assert!((r.rotation.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn exact_affine_map_is_recovered() {
        let c = random_cloud(20, 4);
        let a_true = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let vectors: Vec<[f64; 3]> = c
            .positions()
            .iter()
            .map(|p| {
                let x = Vector3::new(p[0], p[1], p[2]);
                let y = a_true * x;
                [y[0] - p[0], y[1] - p[1], y[2] - p[2]]
            })
            .collect();
        let f = field_of(vectors, vec![1.0; 20]);
        let a = project_affine(&c, &f).unwrap();
        let net = a.net_translation();
        let full = a.matrix;
        assert!((full - a_true).norm() < 1e-10, "{full}");
        assert!(net.norm() < 1e-10);
    }

    #[test]
    fn affine_fit_matches_pivoted_elimination_oracle() {
        use rand::Rng;
        let c = random_cloud(20, 5);
        let mut rng = crate::rng::stream(6, "affine-field", 0);
        let vectors: Vec<[f64; 3]> =
            (0..20).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let w: Vec<f64> = (0..20).map(|_| 0.2 + rng.random::<f64>()).collect();
        let f = field_of(vectors.clone(), w.clone());
        let a = project_affine(&c, &f).unwrap();

        // oracle: solve the 3x3 normal equations by Gaussian elimination
        // with partial pivoting, one right-hand side per output axis
        let wsum: f64 = w.iter().sum();
        let mut xc = [0.0; 3];
        let mut vc = [0.0; 3];
        for i in 0..20 {
            for k in 0..3 {
                xc[k] += w[i] * c.position(i)[k] / wsum;
                vc[k] += w[i] * vectors[i][k] / wsum;
            }
        }
        let mut ata = [[0.0f64; 3]; 3];
        let mut atb = [[0.0f64; 3]; 3]; // columns: output axes
        for i in 0..20 {
            let p = c.position(i);
            let x = [p[0] - xc[0], p[1] - xc[1], p[2] - xc[2]];
            let y = [
                x[0] + vectors[i][0] - vc[0],
                x[1] + vectors[i][1] - vc[1],
                x[2] + vectors[i][2] - vc[2],
            ];
            for r in 0..3 {
                for cc in 0..3 {
                    ata[r][cc] += w[i] * x[r] * x[cc];
                    atb[r][cc] += w[i] * x[r] * y[cc];
                }
            }
        }
        let solve3 = |mut m: [[f64; 3]; 3], mut b: [f64; 3]| -> [f64; 3] {
            for col in 0..3 {
                let piv = (col..3).max_by(|&a, &b2| m[a][col].abs().total_cmp(&m[b2][col].abs())).unwrap();
                m.swap(col, piv);
                b.swap(col, piv);
                for row in col + 1..3 {
                    let fac = m[row][col] / m[col][col];
                    for k in col..3 {
                        m[row][k] -= fac * m[col][k];
                    }
                    b[row] -= fac * b[col];
                }
            }
            let mut x = [0.0; 3];
            for row in (0..3).rev() {
                let mut acc = b[row];
                for k in row + 1..3 {
                    acc -= m[row][k] * x[k];
                }
                x[row] = acc / m[row][row];
            }
            x
        };
        // per output axis: row-form coefficients, i.e. the rows of A^T
        for axis in 0..3 {
            let rhs = [atb[0][axis], atb[1][axis], atb[2][axis]];
            let sol = solve3(ata, rhs);
            for k in 0..3 {
                assert!(
                    (a.matrix[(axis, k)] - sol[k]).abs() < 1e-9,
                    "axis {axis}: {:?} vs {:?}",
                    a.matrix.row(axis),
                    sol
                );
            }
        }
    }

    #[test]
    fn degenerate_configurations_error() {
        let line = cloud((0..5).map(|i| [i as f64, 0.0, 0.0]).collect());
        let f = field_of(
            (0..5).map(|i| [0.0, i as f64 * 0.1, 0.0]).collect(),
            vec![1.0; 5],
        );
        assert!(matches!(project_rigid(&line, &f), Err(Error::Degenerate(_))));
        assert!(matches!(project_affine(&line, &f), Err(Error::Degenerate(_))));

        let c = random_cloud(5, 7);
        let zero_w = MatchingField::new(vec![[0.0; 3]; 5], vec![0.0; 5]).unwrap();
        assert!(project_rigid(&c, &zero_w).is_err());
    }

    #[test]
    fn reflection_fix_keeps_determinant_positive() {
        // a field that flips one axis would be best fitted by a reflection;
        // the projection must stay in SO(3)
        let c = random_cloud(25, 8);
        let vectors: Vec<[f64; 3]> = c.positions().iter().map(|p| [-2.0 * p[0], 0.0, 0.0]).collect();
        let f = field_of(vectors, vec![1.0; 25]);
        let r = project_rigid(&c, &f).unwrap();
        assert!((r.rotation.determinant() - 1.0).abs() < 1e-10);
        assert!((r.rotation.transpose() * r.rotation - Matrix3::identity()).norm() < 1e-10);
    }

    #[test]
    fn rigid_beats_random_restarts_of_a_local_optimizer() {
        use rand::Rng;
        for seed in 0..5u64 {
            let n = 6;
            let c = random_cloud(n, 100 + seed);
            let mut rng = crate::rng::stream(seed, "restart", 0);
            let vectors: Vec<[f64; 3]> =
                (0..n).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
            let w: Vec<f64> = (0..n).map(|_| 0.3 + rng.random::<f64>()).collect();
            let f = field_of(vectors, w);
            let r = project_rigid(&c, &f).unwrap();
            let kabsch = weighted_residual(&c, &f, |p| r.apply(p));

            // pattern search over (axis-angle, translation) from random starts
            let mut best = f64::INFINITY;
            for restart in 0..20 {
                let mut rng2 = crate::rng::stream(seed * 100 + restart, "restart-inner", 0);
                let mut params = [0.0f64; 6];
                for p in params.iter_mut() {
                    *p = rng2.random::<f64>() - 0.5;
                }
                let eval = |params: &[f64; 6]| {
                    let rot = Rotation3::new(Vector3::new(params[0], params[1], params[2]));
                    let t = Vector3::new(params[3], params[4], params[5]);
                    weighted_residual(&c, &f, |p| {
                        let y = rot * Vector3::new(p[0], p[1], p[2]) + t;
                        [y[0], y[1], y[2]]
                    })
                };
                let mut cur = eval(&params);
                let mut step = 0.5;
                while step > 1e-9 {
                    let mut improved = false;
                    for k in 0..6 {
                        for dir in [-1.0, 1.0] {
                            let mut cand = params;
                            cand[k] += dir * step;
                            let v = eval(&cand);
                            if v < cur {
                                cur = v;
                                params = cand;
                                improved = true;
                            }
                        }
                    }
                    if !improved {
                        step *= 0.5;
                    }
                }
                best = best.min(cur);
            }
            assert!(kabsch <= best + 1e-8, "kabsch {kabsch} vs local search {best}");
        }
    }

    #[test]
    fn affine_residual_never_exceeds_rigid() {
        use rand::Rng;
        for seed in 0..10u64 {
            let c = random_cloud(15, 200 + seed);
            let mut rng = crate::rng::stream(seed, "nesting", 0);
            let vectors: Vec<[f64; 3]> =
                (0..15).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
            let f = field_of(vectors, vec![1.0; 15]);
            let r = project_rigid(&c, &f).unwrap();
            let a = project_affine(&c, &f).unwrap();
            let rr = weighted_residual(&c, &f, |p| r.apply(p));
            let ra = weighted_residual(&c, &f, |p| a.apply(p));
            assert!(ra <= rr + 1e-9 * rr.max(1.0), "affine {ra} > rigid {rr}");
        }
    }

    #[test]
    fn weight_scaling_leaves_projections_unchanged() {
        use rand::Rng;
        let c = random_cloud(15, 300);
        let mut rng = crate::rng::stream(9, "scale", 0);
        let vectors: Vec<[f64; 3]> =
            (0..15).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let w: Vec<f64> = (0..15).map(|_| 0.1 + rng.random::<f64>()).collect();
        let f1 = field_of(vectors.clone(), w.clone());
        let f2 = field_of(vectors, w.iter().map(|x| x * 1234.5).collect());
        let r1 = project_rigid(&c, &f1).unwrap();
        let r2 = project_rigid(&c, &f2).unwrap();
        assert!((r1.rotation - r2.rotation).norm() < 1e-12);
        assert!((r1.net_translation() - r2.net_translation()).norm() < 1e-12);
        let k = KernelSpec::gaussian(0.3).unwrap();
        let q: Vec<[f64; 3]> = (0..5).map(|i| [0.1 * i as f64, 0.2, 0.3]).collect();
        let s1 = spline_transform(&c, &f1, &k, &q).unwrap();
        let s2 = spline_transform(&c, &f2, &k, &q).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spline_constant_field_translates_queries() {
        let c = random_cloud(10, 400);
        let t = [0.5, 0.25, -1.0];
        let f = field_of(vec![t; 10], vec![1.0; 10]);
        let k = KernelSpec::gaussian(0.5).unwrap();
        let q = vec![[0.0; 3], [10.0, 10.0, 10.0]];
        let out = spline_transform(&c, &f, &k, &q).unwrap();
        for (o, qq) in out.iter().zip(&q) {
            for a in 0..3 {
                assert!((o[a] - qq[a] - t[a]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spline_single_site_displaces_everything_by_its_vector() {
        let c = cloud(vec![[1.0, 2.0, 3.0]]);
        let f = field_of(vec![[0.3, -0.2, 0.1]], vec![2.0]);
        let k = KernelSpec::gaussian(0.1).unwrap();
        let q = vec![[100.0, 100.0, 100.0]];
        let out = spline_transform(&c, &f, &k, &q).unwrap();
        assert!((out[0][0] - 100.3).abs() < 1e-9);
        assert!((out[0][1] - 99.8).abs() < 1e-9);
        assert!((out[0][2] - 100.1).abs() < 1e-9);
    }

    #[test]
    fn spline_midpoint_of_opposite_displacements_is_fixed() {
        let c = cloud(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let f = field_of(vec![[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]], vec![1.0, 1.0]);
        let k = KernelSpec::gaussian(0.7).unwrap();
        let out = spline_transform(&c, &f, &k, &[[0.0; 3]]).unwrap();
        assert!(out[0][1].abs() < 1e-12);
    }

    #[test]
    fn spline_interpolates_in_the_zero_bandwidth_limit() {
        use rand::Rng;
        let c = random_cloud(8, 500);
        let mut rng = crate::rng::stream(10, "interp", 0);
        let vectors: Vec<[f64; 3]> =
            (0..8).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let f = field_of(vectors.clone(), vec![1.0; 8]);
        let mut min_pair = f64::INFINITY;
        for i in 0..8 {
            for j in 0..i {
                min_pair = min_pair.min(dist_sq(&c.position(i), &c.position(j)).sqrt());
            }
        }
        let k = KernelSpec::gaussian(1e-3 * min_pair).unwrap();
        let out = spline_transform(&c, &f, &k, c.positions()).unwrap();
        for i in 0..8 {
            let p = c.position(i);
            for a in 0..3 {
                assert!((out[i][a] - p[a] - vectors[i][a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anisotropic_isotropic_covariance_reduces_to_spline() {
        use rand::Rng;
        let c = random_cloud(12, 600);
        let mut rng = crate::rng::stream(11, "aniso", 0);
        let vectors: Vec<[f64; 3]> =
            (0..12).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect();
        let f = field_of(vectors, vec![1.0; 12]);
        let sigma = 0.4;
        let covs = vec![Matrix3::from_diagonal_element(sigma * sigma); 12];
        let kern = AnisotropicKernel::new(&covs).unwrap();
        let iso = KernelSpec::gaussian(sigma).unwrap();
        let q: Vec<[f64; 3]> = (0..6).map(|i| [0.15 * i as f64, 0.4, -0.2]).collect();
        let a = anisotropic_smooth(&c, &f, &kern, &q).unwrap();
        let b = spline_transform(&c, &f, &iso, &q).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tube_aligned_kernels_keep_weight_on_the_same_tube() {
        // two parallel tubes; anisotropic kernels stretched along the tube
        // axis keep the interpolation local to each tube
        let mut pts = Vec::new();
        let mut covs = Vec::new();
        let along = 6.0f64;
        let across = 0.3f64;
        for tube in 0..2 {
            let y = tube as f64 * 4.0;
            for i in 0..30 {
                pts.push([i as f64 * 0.5, y, 0.0]);
                let mut cov = Matrix3::zeros();
                cov[(0, 0)] = along * along;
                cov[(1, 1)] = across * across;
                cov[(2, 2)] = across * across;
                covs.push(cov);
            }
        }
        let c = cloud(pts);
        let kern = AnisotropicKernel::new(&covs).unwrap();
        let q = [7.25, 0.0, 0.0]; // on tube 0's axis
        let mut same = 0.0;
        let mut other = 0.0;
        for i in 0..60 {
            let k = kern.eval(i, &c.position(i), &q);
            if i < 30 {
                same += k;
            } else {
                other += k;
            }
        }
        assert!(same / (same + other) > 0.9, "same-tube weight {}", same / (same + other));
    }
}
