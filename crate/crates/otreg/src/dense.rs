//! Dense reference implementation of the transport solver and plan queries.
//!
//! This module materialises full `N x M` matrices and exists solely as a
//! diagnostic oracle for tests and debugging; every entry point is capped at
//! `N * M <= 1_000_000`. Production paths never route through it.

use crate::cloud::WeightedPointCloud;
use crate::sinkhorn::OTParams;
use crate::{Error, Result};

const CAP: usize = 1_000_000;

fn assert_cap(n: usize, m: usize) {
    assert!(n * m <= CAP, "dense helper capped at N*M <= {CAP}, got {n} x {m}");
}

fn feature_rows(cloud: &WeightedPointCloud) -> (Vec<f64>, usize) {
    match cloud.features() {
        Some(f) => (f.data().to_vec(), f.dim()),
        None => (cloud.positions().as_flattened().to_vec(), 3),
    }
}

/// Half squared Euclidean cost matrix in feature space, row-major.
pub fn cost_matrix(a: &WeightedPointCloud, b: &WeightedPointCloud) -> Vec<f64> {
    assert_cap(a.len(), b.len());
    let (af, d) = feature_rows(a);
    let (bf, d2) = feature_rows(b);
    assert_eq!(d, d2, "feature dimensions must agree");
    let mut c = vec![0.0; a.len() * b.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            let s: f64 = (0..d)
                .map(|k| {
                    let t = af[i * d + k] - bf[j * d + k];
                    t * t
                })
                .sum();
            c[i * b.len() + j] = 0.5 * s;
        }
    }
    c
}

/// Dense dual solution.
pub struct DenseDuals {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub iterations: usize,
}

/// Plain alternating (Gauss-Seidel) fixed-point iteration on the full cost
/// matrix, run at the final temperature until the dual update drops below
/// `tol`. Balanced solutions are shifted to the canonical gauge
/// `<a, f> = <b, g>`.
pub fn solve(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    params: &OTParams,
    tol: f64,
    max_iters: usize,
) -> Result<DenseDuals> {
    assert_cap(a.len(), b.len());
    let (n, m) = (a.len(), b.len());
    let c = cost_matrix(a, b);
    let eps = params.blur * params.blur;
    let rho = params.reach * params.reach;
    let lambda = if rho.is_infinite() { 1.0 } else { rho / (rho + eps) };
    let log_aw: Vec<f64> = a.weights().iter().map(|w| w.ln()).collect();
    let log_bw: Vec<f64> = b.weights().iter().map(|w| w.ln()).collect();

    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = terms.collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx.is_infinite() {
            return mx;
        }
        mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };

    for it in 0..max_iters {
        let mut delta = 0.0f64;
        for i in 0..n {
            let new = -lambda
                * eps
                * lse(&mut (0..m).map(|j| log_bw[j] + (g[j] - c[i * m + j]) / eps));
            delta = delta.max((new - f[i]).abs());
            f[i] = new;
        }
        for j in 0..m {
            let new = -lambda
                * eps
                * lse(&mut (0..n).map(|i| log_aw[i] + (f[i] - c[i * m + j]) / eps));
            delta = delta.max((new - g[j]).abs());
            g[j] = new;
        }
        if delta < tol {
            if rho.is_infinite() {
                crate::sinkhorn::canonical_gauge(&mut f, &mut g, a.weights(), b.weights());
            }
            return Ok(DenseDuals { f, g, iterations: it + 1 });
        }
    }
    Err(Error::NonConvergence { iters: max_iters, residual: tol })
}

/// Full plan matrix from given duals.
pub fn plan_from_duals(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    f: &[f64],
    g: &[f64],
    blur: f64,
) -> Vec<f64> {
    assert_cap(a.len(), b.len());
    let c = cost_matrix(a, b);
    let eps = blur * blur;
    let m = b.len();
    let mut plan = vec![0.0; a.len() * m];
    for i in 0..a.len() {
        for j in 0..m {
            plan[i * m + j] = a.weights()[i]
                * b.weights()[j]
                * ((f[i] + g[j] - c[i * m + j]) / eps).exp();
        }
    }
    plan
}

/// Row and column sums of a row-major dense plan with `m` columns.
pub fn marginals(plan: &[f64], m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m > 0 && plan.len() % m == 0);
    let n = plan.len() / m;
    let mut rows = vec![0.0; n];
    let mut colsums = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            rows[i] += plan[i * m + j];
            colsums[j] += plan[i * m + j];
        }
    }
    (rows, colsums)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum()
}

/// Objective value of an explicit plan: transport plus the entropic KL term
/// and, for finite reach, the marginal KL penalties.
pub fn primal_cost_of_plan(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    plan: &[f64],
    params: &OTParams,
) -> f64 {
    let (n, m) = (a.len(), b.len());
    assert_eq!(plan.len(), n * m);
    let c = cost_matrix(a, b);
    let eps = params.blur * params.blur;
    let rho = params.reach * params.reach;

    let transport: f64 = plan.iter().zip(&c).map(|(p, cc)| p * cc).sum();
    let mut kl_joint = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = plan[i * m + j];
            let q = a.weights()[i] * b.weights()[j];
            kl_joint += if p > 0.0 { p * (p / q).ln() - p + q } else { q };
        }
    }
    let mut cost = transport + eps * kl_joint;
    if rho.is_finite() {
        let (rows, cols) = marginals(plan, m);
        cost += rho * (kl(&rows, a.weights()) + kl(&cols, b.weights()));
    }
    cost
}

/// Objective value at the implicit plan of the given duals.
pub fn primal_cost(
    a: &WeightedPointCloud,
    b: &WeightedPointCloud,
    f: &[f64],
    g: &[f64],
    params: &OTParams,
) -> f64 {
    let plan = plan_from_duals(a, b, f, g, params.blur);
    primal_cost_of_plan(a, b, &plan, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "capped")]
    fn refuses_large_problems() {
        let pts: Vec<[f64; 3]> = (0..1001).map(|i| [i as f64, 0.0, 0.0]).collect();
        let a = WeightedPointCloud::from_positions(pts).unwrap();
        let _ = cost_matrix(&a, &a);
    }

    #[test]
    fn dense_solver_reaches_fixed_point() {
        let a = WeightedPointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.4, 0.6]).unwrap();
        let b = WeightedPointCloud::new(vec![[0.2, 0.0, 0.0], [0.9, 0.0, 0.0]], vec![0.5, 0.5]).unwrap();
        let params = OTParams::balanced(0.5);
        let sol = solve(&a, &b, &params, 1e-12, 50_000).unwrap();
        let plan = plan_from_duals(&a, &b, &sol.f, &sol.g, params.blur);
        let (rows, cols) = marginals(&plan, 2);
        for (r, w) in rows.iter().zip(a.weights()) {
            assert!((r - w).abs() < 1e-10);
        }
        for (c, w) in cols.iter().zip(b.weights()) {
            assert!((c - w).abs() < 1e-10);
        }
    }
}
