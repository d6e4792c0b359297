//! Streamed log-domain solver for unbalanced entropic optimal transport.
//!
//! The solver never materialises the `N x M` plan: every update reduces one
//! row (or column) of the implicit kernel on the fly, so peak auxiliary
//! memory stays at `O(N + M)` scalars. Dual potentials returned by
//! [`solve_unbalanced`] encode the plan
//! `pi_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)` with
//! `C_ij = 1/2 |p_i - q_j|^2` and `eps = blur^2`.

use rayon::prelude::*;

use crate::cloud::WeightedPointCloud;
use crate::{Error, Result};

/// Extra symmetric updates performed once the annealed temperature reaches
/// its final value, before convergence is checked.
const EXTRA_STEPS_AT_FINAL_EPS: usize = 5;

/// Relaxation weight of the simultaneous dual updates,
/// `f <- (1 - w) f + w U(g)`. The linearised update map has spectrum in
/// `[-r, r]` with `r <= 1`; any weight below 1 is stable, and weights close
/// to 1 converge almost twice as fast as plain averaging on the slow
/// positive modes that dominate at small blur.
const RELAXATION: f64 = 0.9;

/// Parameters of the robust OT problem.
///
/// `blur` is the entropic length scale sigma (feature units), `reach` the
/// maximum matching distance tau (`f64::INFINITY` for balanced transport),
/// `scaling` the per-step annealing factor applied to the temperature's
/// square root, `tol` the stopping threshold on the dual update relative to
/// `blur^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OTParams {
    pub blur: f64,
    pub reach: f64,
    pub scaling: f64,
    pub max_outer_iters: usize,
    pub tol: f64,
}

impl OTParams {
    /// Balanced problem (`reach = infinity`) with default solver settings.
    pub fn balanced(blur: f64) -> Self {
        Self { blur, reach: f64::INFINITY, scaling: 0.5, max_outer_iters: 100, tol: 1e-3 }
    }

    /// Unbalanced problem with a finite reach.
    pub fn unbalanced(blur: f64, reach: f64) -> Self {
        Self { reach, ..Self::balanced(blur) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur > 0.0) || !self.blur.is_finite() {
            return Err(Error::invalid("blur must be positive and finite"));
        }
        if !(self.reach > 0.0) {
            return Err(Error::invalid("reach must be positive (or infinite)"));
        }
        if !(self.scaling > 0.0 && self.scaling < 1.0) {
            return Err(Error::invalid("scaling must lie in (0, 1)"));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::invalid("max_outer_iters must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        Ok(())
    }
}

/// Converged dual potentials plus the parameters and cloud fingerprints that
/// produced them.
#[derive(Debug, Clone)]
pub struct DualPotentials {
    f: Vec<f64>,
    g: Vec<f64>,
    params: OTParams,
    src_fp: u64,
    tgt_fp: u64,
    residual: f64,
    iterations: usize,
}

impl DualPotentials {
    pub fn f(&self) -> &[f64] {
        &self.f
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn params(&self) -> &OTParams {
        &self.params
    }

    /// Final fixed-point residual `max |dual - update(dual)|`.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub(crate) fn check_clouds(
        &self,
        source: &WeightedPointCloud,
        target: &WeightedPointCloud,
    ) -> Result<()> {
        if source.len() != self.f.len() || source.fingerprint() != self.src_fp {
            return Err(Error::FingerprintMismatch("source cloud".into()));
        }
        if target.len() != self.g.len() || target.fingerprint() != self.tgt_fp {
            return Err(Error::FingerprintMismatch("target cloud".into()));
        }
        Ok(())
    }
}

/// Fused multiply-add that only emits the fma instruction when the target
/// actually has one; the software-emulated `mul_add` libcall is far slower
/// than separate multiply and add.
#[inline(always)]
fn fmadd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Branch-free `exp` for non-positive arguments, accurate to ~2e-14
/// relative: a clamped Taylor polynomial with a bit-twiddled power-of-two
/// scale, free of calls and divisions so the surrounding loops vectorise.
#[inline(always)]
fn vexp_impl<const FMA: bool>(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.93145751953125e-1;
    const LN2_LO: f64 = 1.42860682030941723212e-6;
    const C: [f64; 12] = [
        1.0,
        1.0,
        0.5,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
    ];
    // Adding 1.5*2^52 rounds n = x*log2(e) into the mantissa, and 2^n is
    // rebuilt from those bits with pure u64 arithmetic: no float/int casts,
    // so the loop vectorises on AVX2 (packed f64->i64 needs AVX-512).
    const SHIFTER: f64 = 6755399441055744.0; // 1.5 * 2^52
    // exp(-708) ~ 3e-308 is already negligible against the O(1) terms of a
    // stabilised log-sum-exp, so clamping keeps the bit tricks in range.
    let x = x.max(-708.0);
    let shifted = fmadd::<FMA>(x, LOG2E, SHIFTER);
    let n = shifted - SHIFTER;
    let r = fmadd::<FMA>(-n, LN2_LO, fmadd::<FMA>(-n, LN2_HI, x));
    let mut p = C[11];
    p = fmadd::<FMA>(p, r, C[10]);
    p = fmadd::<FMA>(p, r, C[9]);
    p = fmadd::<FMA>(p, r, C[8]);
    p = fmadd::<FMA>(p, r, C[7]);
    p = fmadd::<FMA>(p, r, C[6]);
    p = fmadd::<FMA>(p, r, C[5]);
    p = fmadd::<FMA>(p, r, C[4]);
    p = fmadd::<FMA>(p, r, C[3]);
    p = fmadd::<FMA>(p, r, C[2]);
    p = fmadd::<FMA>(p, r, C[1]);
    p = fmadd::<FMA>(p, r, C[0]);
    let pow2 = f64::from_bits((shifted.to_bits() << 52).wrapping_add(1023u64 << 52));
    p * pow2
}

#[cfg(test)]
pub(crate) fn vexp(x: f64) -> f64 {
    vexp_impl::<false>(x)
}

#[inline(always)]
fn vmax_impl(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let chunks = xs.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        acc[0] = acc[0].max(c[0]);
        acc[1] = acc[1].max(c[1]);
        acc[2] = acc[2].max(c[2]);
        acc[3] = acc[3].max(c[3]);
    }
    let mut mx = acc[0].max(acc[1]).max(acc[2].max(acc[3]));
    for &x in rest {
        mx = mx.max(x);
    }
    mx
}

#[inline(always)]
fn vdot_impl<const FMA: bool>(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let rest_a = ca.remainder();
    let cb = b.chunks_exact(4);
    let rest_b = cb.remainder();
    for (x, y) in ca.zip(cb) {
        acc[0] = fmadd::<FMA>(x[0], y[0], acc[0]);
        acc[1] = fmadd::<FMA>(x[1], y[1], acc[1]);
        acc[2] = fmadd::<FMA>(x[2], y[2], acc[2]);
        acc[3] = fmadd::<FMA>(x[3], y[3], acc[3]);
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in rest_a.iter().zip(rest_b) {
        s = fmadd::<FMA>(*x, *y, s);
    }
    s
}

#[inline(always)]
fn vsum_impl(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = xs.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        acc[0] += c[0];
        acc[1] += c[1];
        acc[2] += c[2];
        acc[3] += c[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for &x in rest {
        s += x;
    }
    s
}

/// `scratch[j] = exp(scratch[j] - mx)`, returning the sum.
#[inline(always)]
fn exp_normalize_impl<const FMA: bool>(scratch: &mut [f64], mx: f64) -> f64 {
    for z in scratch.iter_mut() {
        *z = vexp_impl::<FMA>(*z - mx);
    }
    vsum_impl(scratch)
}

/// `scratch[j] = t[j] + sum_k coeff_k * cols[k][j]`.
#[inline(always)]
fn fill_scores_impl<const FMA: bool>(
    scratch: &mut [f64],
    t: &[f64],
    coeffs: &[f64],
    cols: &[Vec<f64>],
) {
    scratch.copy_from_slice(t);
    for (c, col) in coeffs.iter().zip(cols) {
        for (z, q) in scratch.iter_mut().zip(col) {
            *z = fmadd::<FMA>(*c, *q, *z);
        }
    }
}

// x86-64 clones compiled with wider vector units enabled; the `impl` bodies
// inline into them, which is what lets LLVM vectorise the loops. Callers
// dispatch per call after a cached CPU-feature check.
#[cfg(target_arch = "x86_64")]
mod x86 {
    use std::sync::OnceLock;

    #[derive(Clone, Copy, PartialEq)]
    pub(super) enum Tier {
        Avx512,
        Avx2,
        Generic,
    }

    pub(super) fn tier() -> Tier {
        static TIER: OnceLock<Tier> = OnceLock::new();
        *TIER.get_or_init(|| {
            if std::arch::is_x86_feature_detected!("avx512f")
                && std::arch::is_x86_feature_detected!("avx512dq")
                && std::arch::is_x86_feature_detected!("fma")
            {
                Tier::Avx512
            } else if std::arch::is_x86_feature_detected!("avx2")
                && std::arch::is_x86_feature_detected!("fma")
            {
                Tier::Avx2
            } else {
                Tier::Generic
            }
        })
    }

    #[target_feature(enable = "avx512f,avx512dq,fma")]
    pub(super) unsafe fn fill_scores_avx512(s: &mut [f64], t: &[f64], c: &[f64], cols: &[Vec<f64>]) {
        super::fill_scores_impl::<true>(s, t, c, cols)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn fill_scores_avx2(s: &mut [f64], t: &[f64], c: &[f64], cols: &[Vec<f64>]) {
        super::fill_scores_impl::<true>(s, t, c, cols)
    }

    #[target_feature(enable = "avx512f,avx512dq,fma")]
    pub(super) unsafe fn vmax_avx512(xs: &[f64]) -> f64 {
        super::vmax_impl(xs)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn vmax_avx2(xs: &[f64]) -> f64 {
        super::vmax_impl(xs)
    }

    #[target_feature(enable = "avx512f,avx512dq,fma")]
    pub(super) unsafe fn vdot_avx512(a: &[f64], b: &[f64]) -> f64 {
        super::vdot_impl::<true>(a, b)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn vdot_avx2(a: &[f64], b: &[f64]) -> f64 {
        super::vdot_impl::<true>(a, b)
    }

    #[target_feature(enable = "avx512f,avx512dq,fma")]
    pub(super) unsafe fn exp_normalize_avx512(s: &mut [f64], mx: f64) -> f64 {
        super::exp_normalize_impl::<true>(s, mx)
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn exp_normalize_avx2(s: &mut [f64], mx: f64) -> f64 {
        super::exp_normalize_impl::<true>(s, mx)
    }
}

#[inline]
fn fill_scores(scratch: &mut [f64], t: &[f64], coeffs: &[f64], cols: &[Vec<f64>]) {
    #[cfg(target_arch = "x86_64")]
    match x86::tier() {
        x86::Tier::Avx512 => return unsafe { x86::fill_scores_avx512(scratch, t, coeffs, cols) },
        x86::Tier::Avx2 => return unsafe { x86::fill_scores_avx2(scratch, t, coeffs, cols) },
        x86::Tier::Generic => {}
    }
    fill_scores_impl::<false>(scratch, t, coeffs, cols)
}

#[inline]
fn vmax(xs: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    match x86::tier() {
        x86::Tier::Avx512 => return unsafe { x86::vmax_avx512(xs) },
        x86::Tier::Avx2 => return unsafe { x86::vmax_avx2(xs) },
        x86::Tier::Generic => {}
    }
    vmax_impl(xs)
}

#[inline]
fn vdot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    match x86::tier() {
        x86::Tier::Avx512 => return unsafe { x86::vdot_avx512(a, b) },
        x86::Tier::Avx2 => return unsafe { x86::vdot_avx2(a, b) },
        x86::Tier::Generic => {}
    }
    vdot_impl::<false>(a, b)
}

#[inline]
fn exp_normalize(scratch: &mut [f64], mx: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    match x86::tier() {
        x86::Tier::Avx512 => return unsafe { x86::exp_normalize_avx512(scratch, mx) },
        x86::Tier::Avx2 => return unsafe { x86::exp_normalize_avx2(scratch, mx) },
        x86::Tier::Generic => {}
    }
    exp_normalize_impl::<false>(scratch, mx)
}

/// Feature/weight view of a problem side, with coordinates transposed into
/// one contiguous array per dimension so the row kernels stream linearly.
struct Side {
    /// feature coordinates, one `len`-vector per dimension
    feat_cols: Vec<Vec<f64>>,
    /// position coordinates, same layout (used for barycenters)
    pos_cols: Vec<Vec<f64>>,
    log_w: Vec<f64>,
    half_sq: Vec<f64>,
}

impl Side {
    fn new(cloud: &WeightedPointCloud, use_features: bool) -> Self {
        let n = cloud.len();
        let (feat, dim): (&[f64], usize) = if use_features {
            let f = cloud.features().expect("checked by caller");
            (f.data(), f.dim())
        } else {
            (cloud.positions().as_flattened(), 3)
        };
        let mut feat_cols = vec![Vec::with_capacity(n); dim];
        let mut half_sq = Vec::with_capacity(n);
        for row in feat.chunks_exact(dim) {
            for (k, &v) in row.iter().enumerate() {
                feat_cols[k].push(v);
            }
            half_sq.push(0.5 * row.iter().map(|v| v * v).sum::<f64>());
        }
        let mut pos_cols = vec![Vec::with_capacity(n); 3];
        for p in cloud.positions() {
            for k in 0..3 {
                pos_cols[k].push(p[k]);
            }
        }
        let log_w = cloud.weights().iter().map(|&w| w.ln()).collect();
        Side { feat_cols, pos_cols, log_w, half_sq }
    }

    fn len(&self) -> usize {
        self.half_sq.len()
    }

    fn dim(&self) -> usize {
        self.feat_cols.len()
    }

    fn feat_at(&self, i: usize, k: usize) -> f64 {
        self.feat_cols[k][i]
    }

    /// Squared diameter of the feature bounding box.
    fn sq_diameter_with(&self, other: &Side) -> f64 {
        (0..self.dim())
            .map(|k| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &v in self.feat_cols[k].iter().chain(&other.feat_cols[k]) {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (hi - lo) * (hi - lo)
            })
            .sum()
    }
}

/// One half of a symmetric Sinkhorn step: `out_i = -damping * eps * LSE_i`
/// where `LSE_i = log sum_j w_j exp((dual_j - C_ij) / eps)`.
fn lse_update(
    out: &mut [f64],
    rows: &Side,
    cols: &Side,
    col_dual: &[f64],
    eps: f64,
    damping: f64,
) {
    let inv_eps = 1.0 / eps;
    let m = cols.len();
    let dim = rows.dim();
    let t: Vec<f64> = (0..m)
        .map(|j| cols.log_w[j] + (col_dual[j] - cols.half_sq[j]) * inv_eps)
        .collect();
    let scale = -damping * eps;
    const CHUNK: usize = 8;
    out.par_chunks_mut(CHUNK).enumerate().for_each_init(
        || (vec![0.0f64; m], vec![0.0f64; dim]),
        |(scratch, coeffs), (ci, chunk)| {
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = ci * CHUNK + k;
                for (d, c) in coeffs.iter_mut().enumerate() {
                    *c = rows.feat_at(i, d) * inv_eps;
                }
                fill_scores(scratch, &t, coeffs, &cols.feat_cols);
                let mx = vmax(scratch);
                let s = exp_normalize(scratch, mx);
                *o = scale * (mx + s.ln() - rows.half_sq[i] * inv_eps);
            }
        },
    );
}

/// Solve the robust OT problem between two weighted clouds.
///
/// Features are used as matching coordinates when both clouds carry them
/// (with equal dimension); otherwise positions are used. The temperature is
/// annealed from the squared feature diameter down to `blur^2`, with the
/// damping `reach^2 / (reach^2 + eps)` tracking the current temperature.
/// Balanced problems are returned in the canonical gauge
/// `<a, f> = <b, g>`.
pub fn solve_unbalanced(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    params: &OTParams,
) -> Result<DualPotentials> {
    params.validate()?;
    let use_features = match (source.features(), target.features()) {
        (Some(a), Some(b)) => {
            if a.dim() != b.dim() {
                return Err(Error::invalid(format!(
                    "feature dimensions differ: {} vs {}",
                    a.dim(),
                    b.dim()
                )));
            }
            true
        }
        (None, None) => false,
        _ => return Err(Error::invalid("features must be present on both clouds or neither")),
    };

    let src = Side::new(source, use_features);
    let tgt = Side::new(target, use_features);

    let eps_final = params.blur * params.blur;
    let mut eps = src.sq_diameter_with(&tgt).max(eps_final);
    let rho = params.reach * params.reach;
    let damping = |eps: f64| if rho.is_infinite() { 1.0 } else { rho / (rho + eps) };

    let n = src.len();
    let m = tgt.len();
    let mut f = vec![0.0f64; n];
    let mut g = vec![0.0f64; m];
    let mut uf = vec![0.0f64; n];
    let mut ug = vec![0.0f64; m];

    let mut iterations = 0usize;
    let mut residual = f64::INFINITY;
    let threshold = params.tol * eps_final;
    let mut extra_left = EXTRA_STEPS_AT_FINAL_EPS;
    let mut converged = false;

    while iterations < params.max_outer_iters {
        let lam = damping(eps);
        lse_update(&mut uf, &src, &tgt, &g, eps, lam);
        lse_update(&mut ug, &tgt, &src, &f, eps, lam);
        residual = 0.0;
        for (a, b) in f.iter().zip(&uf) {
            residual = residual.max((a - b).abs());
        }
        for (a, b) in g.iter().zip(&ug) {
            residual = residual.max((a - b).abs());
        }
        for (a, b) in f.iter_mut().zip(&uf) {
            *a = (1.0 - RELAXATION) * *a + RELAXATION * b;
        }
        for (a, b) in g.iter_mut().zip(&ug) {
            *a = (1.0 - RELAXATION) * *a + RELAXATION * b;
        }
        if rho.is_finite() {
            translate_duals(&mut f, &mut g, &src.log_w, &tgt.log_w, rho);
        }
        iterations += 1;

        if eps > eps_final {
            eps = (eps * params.scaling * params.scaling).max(eps_final);
        } else if extra_left > 0 {
            extra_left -= 1;
        } else if residual < threshold {
            converged = true;
            break;
        }
    }
    if !converged && residual >= threshold {
        return Err(Error::NonConvergence { iters: iterations, residual });
    }

    if rho.is_infinite() {
        canonical_gauge(&mut f, &mut g, source.weights(), target.weights());
    }

    Ok(DualPotentials {
        f,
        g,
        params: params.clone(),
        src_fp: source.fingerprint(),
        tgt_fp: target.fingerprint(),
        residual,
        iterations,
    })
}

/// Optimal joint translation `(f + s, g - s)` of the unbalanced dual
/// objective, `s = rho/2 (log <a, exp(-f/rho)> - log <b, exp(-g/rho)>)`.
///
/// The translation direction is the slowest mode of the damped fixed-point
/// iteration (contraction `lambda^2` per sweep, arbitrarily close to 1 for
/// `reach >> blur`); solving it in closed form after every sweep removes
/// that bottleneck without moving the fixed point, where `s = 0`.
fn translate_duals(f: &mut [f64], g: &mut [f64], log_aw: &[f64], log_bw: &[f64], rho: f64) {
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    let log_a = lse(&mut f.iter().zip(log_aw).map(|(fi, lw)| lw - fi / rho));
    let log_b = lse(&mut g.iter().zip(log_bw).map(|(gj, lw)| lw - gj / rho));
    let s = 0.5 * rho * (log_a - log_b);
    if s.is_finite() {
        f.iter_mut().for_each(|v| *v += s);
        g.iter_mut().for_each(|v| *v -= s);
    }
}

/// Shift the balanced-case gauge so that `<a, f> = <b, g>`; the implicit
/// plan is unchanged.
pub(crate) fn canonical_gauge(f: &mut [f64], g: &mut [f64], aw: &[f64], bw: &[f64]) {
    let ma: f64 = aw.iter().sum();
    let mb: f64 = bw.iter().sum();
    let fa: f64 = f.iter().zip(aw).map(|(v, w)| v * w).sum();
    let gb: f64 = g.iter().zip(bw).map(|(v, w)| v * w).sum();
    let c = (gb - fa) / (ma + mb);
    f.iter_mut().for_each(|v| *v += c);
    g.iter_mut().for_each(|v| *v -= c);
}

/// Single implicit-plan entry `pi_ij`.
pub fn plan_entry(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    duals: &DualPotentials,
    i: usize,
    j: usize,
) -> Result<f64> {
    duals.check_clouds(source, target)?;
    if i >= source.len() || j >= target.len() {
        return Err(Error::invalid(format!("plan index ({i}, {j}) out of range")));
    }
    let use_features = source.features().is_some();
    let src = Side::new(source, use_features);
    let tgt = Side::new(target, use_features);
    let eps = duals.params.blur * duals.params.blur;
    let dot: f64 = (0..src.dim()).map(|k| src.feat_at(i, k) * tgt.feat_at(j, k)).sum();
    let cost = src.half_sq[i] + tgt.half_sq[j] - dot;
    Ok(source.weights()[i]
        * target.weights()[j]
        * ((duals.f[i] + duals.g[j] - cost) / eps).exp())
}

/// Per-row accumulation over the implicit plan: returns
/// `(mass_i, extra_i)` where `extra` is computed by the caller from the
/// row's softmax weights (target positions for the matching field, mean
/// cost for the primal).
fn row_reduce<T: Send + Sync + Clone>(
    rows: &Side,
    cols: &Side,
    row_dual: &[f64],
    col_dual: &[f64],
    eps: f64,
    row_weights: &[f64],
    accumulate: impl Fn(usize, &[f64], f64) -> T + Sync,
) -> Vec<(f64, T)> {
    let inv_eps = 1.0 / eps;
    let m = cols.len();
    let dim = rows.dim();
    let t: Vec<f64> = (0..m)
        .map(|j| cols.log_w[j] + (col_dual[j] - cols.half_sq[j]) * inv_eps)
        .collect();
    const CHUNK: usize = 8;
    let chunks: Vec<Vec<(f64, T)>> = (0..rows.len().div_ceil(CHUNK))
        .into_par_iter()
        .map_init(
            || (vec![0.0f64; m], vec![0.0f64; dim]),
            |(scratch, coeffs), ci| {
                let lo = ci * CHUNK;
                let hi = (lo + CHUNK).min(rows.len());
                let mut out = Vec::with_capacity(hi - lo);
                for i in lo..hi {
                    for (d, c) in coeffs.iter_mut().enumerate() {
                        *c = rows.feat_at(i, d) * inv_eps;
                    }
                    fill_scores(scratch, &t, coeffs, &cols.feat_cols);
                    let mx = vmax(scratch);
                    // scratch now holds softmax weights over j; the row mass
                    // restores the global scale
                    let s = exp_normalize(scratch, mx);
                    let extra = accumulate(i, scratch, s);
                    let log_mass = (row_dual[i] - rows.half_sq[i]) * inv_eps + mx + s.ln();
                    let mass = row_weights[i] * log_mass.exp();
                    out.push((if mass.is_finite() { mass } else { 0.0 }, extra));
                }
                out
            },
        )
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Row and column sums of the implicit plan, streamed.
pub fn plan_marginals(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    duals: &DualPotentials,
) -> Result<(Vec<f64>, Vec<f64>)> {
    duals.check_clouds(source, target)?;
    let use_features = source.features().is_some();
    let src = Side::new(source, use_features);
    let tgt = Side::new(target, use_features);
    let eps = duals.params.blur * duals.params.blur;
    let rows = row_reduce(&src, &tgt, &duals.f, &duals.g, eps, source.weights(), |_, _, _| ());
    let cols = row_reduce(&tgt, &src, &duals.g, &duals.f, eps, target.weights(), |_, _, _| ());
    Ok((rows.into_iter().map(|(m, _)| m).collect(), cols.into_iter().map(|(m, _)| m).collect()))
}

fn kl_terms(sums: &[f64], ref_w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&s, &w) in sums.iter().zip(ref_w) {
        if s > 0.0 {
            acc += s * (s / w).ln() - s + w;
        } else {
            acc += w;
        }
    }
    acc
}

/// Full primal objective evaluated at the implicit plan: transport term plus
/// the entropic KL and, for finite reach, the two marginal KL penalties.
pub fn primal_cost(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    duals: &DualPotentials,
) -> Result<f64> {
    duals.check_clouds(source, target)?;
    let use_features = source.features().is_some();
    let src = Side::new(source, use_features);
    let tgt = Side::new(target, use_features);
    let eps = duals.params.blur * duals.params.blur;
    let inv_eps = 1.0 / eps;

    // per-row mass and mean transport cost:
    // sum_j e_j C_ij = hs_i * S + sum_j e_j hs_j - sum_k p_ik <e, q_k>
    let rows = row_reduce(&src, &tgt, &duals.f, &duals.g, eps, source.weights(), |i, e, s| {
        let mut c = src.half_sq[i] * s + vdot(e, &tgt.half_sq);
        for k in 0..src.dim() {
            c -= src.feat_at(i, k) * vdot(e, &tgt.feat_cols[k]);
        }
        if s > 0.0 {
            c / s
        } else {
            0.0
        }
    });
    let col_rows = row_reduce(&tgt, &src, &duals.g, &duals.f, eps, target.weights(), |_, _, _| ());

    let row_sums: Vec<f64> = rows.iter().map(|&(m, _)| m).collect();
    let col_sums: Vec<f64> = col_rows.iter().map(|&(m, _)| m).collect();
    let transport: f64 = rows.iter().map(|&(m, c)| m * c).sum();
    let mass_pi: f64 = row_sums.iter().sum();
    let mass_a = source.total_weight();
    let mass_b = target.total_weight();

    let dual_dot: f64 = duals.f.iter().zip(&row_sums).map(|(v, r)| v * r).sum::<f64>()
        + duals.g.iter().zip(&col_sums).map(|(v, c)| v * c).sum::<f64>();
    let kl_joint = (dual_dot - transport) * inv_eps - mass_pi + mass_a * mass_b;

    let mut cost = transport + eps * kl_joint;
    let rho = duals.params.reach * duals.params.reach;
    if rho.is_finite() {
        cost += rho * (kl_terms(&row_sums, source.weights()) + kl_terms(&col_sums, target.weights()));
    }
    Ok(cost)
}

/// Internal access for the matching module: per-row plan mass and the
/// softmax-weighted target barycenter.
pub(crate) fn row_mass_and_barycenter(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    duals: &DualPotentials,
) -> Vec<(f64, [f64; 3])> {
    let use_features = source.features().is_some();
    let src = Side::new(source, use_features);
    let tgt = Side::new(target, use_features);
    let eps = duals.params.blur * duals.params.blur;
    row_reduce(&src, &tgt, &duals.f, &duals.g, eps, source.weights(), |_, e, s| {
        if s > 0.0 {
            [
                vdot(e, &tgt.pos_cols[0]) / s,
                vdot(e, &tgt.pos_cols[1]) / s,
                vdot(e, &tgt.pos_cols[2]) / s,
            ]
        } else {
            [0.0; 3]
        }
    })
}
