//! Weighted point clouds and sampling utilities.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::rng::fnv1a;
use crate::{Error, Result};

/// Per-point feature vectors, stored row-major with a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// A 3D point cloud with non-negative per-point weights and optional
/// unit-norm feature vectors and radii.
///
/// Coordinates are in whatever length unit the caller works in (mm, cm, ...);
/// the unit is never interpreted by this crate except where documented by
/// metric thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPointCloud {
    positions: Vec<[f64; 3]>,
    weights: Vec<f64>,
    features: Option<Features>,
    radii: Option<Vec<f64>>,
}

impl WeightedPointCloud {
    /// Build a cloud from positions and weights, validating invariants:
    /// at least one point, finite coordinates, non-negative weights that are
    /// not all zero.
    pub fn new(positions: Vec<[f64; 3]>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if positions.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite coordinate"));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("weights must not all be zero"));
        }
        Ok(Self { positions, weights, features: None, radii: None })
    }

    /// Uniform unit weights.
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Result<Self> {
        let w = vec![1.0; positions.len()];
        Self::new(positions, w)
    }

    /// Attach feature vectors, normalising each row to unit Euclidean norm.
    /// Zero rows are rejected.
    pub fn with_features_normalized(mut self, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        self.validate_feature_shape(dim, data.len())?;
        for row in data.chunks_exact_mut(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm == 0.0 {
                return Err(Error::invalid("feature row with zero or non-finite norm"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.features = Some(Features { dim, data });
        Ok(self)
    }

    /// Attach feature vectors that are already unit-norm (within 1e-6).
    pub fn with_features(mut self, dim: usize, data: Vec<f64>) -> Result<Self> {
        self.validate_feature_shape(dim, data.len())?;
        for row in data.chunks_exact(dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!(
                    "feature row norm {norm} departs from 1 by more than 1e-6"
                )));
            }
        }
        self.features = Some(Features { dim, data });
        Ok(self)
    }

    fn validate_feature_shape(&self, dim: usize, len: usize) -> Result<()> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if len != self.len() * dim {
            return Err(Error::invalid(format!(
                "feature buffer of length {len} does not match {} points x dim {dim}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Attach per-point radii (all positive).
    pub fn with_radii(mut self, radii: Vec<f64>) -> Result<Self> {
        if radii.len() != self.len() {
            return Err(Error::invalid("radii length mismatch"));
        }
        if radii.iter().any(|&r| !r.is_finite() || r <= 0.0) {
            return Err(Error::invalid("radii must be finite and positive"));
        }
        self.radii = Some(radii);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // N >= 1 by construction
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i]
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn features(&self) -> Option<&Features> {
        self.features.as_ref()
    }

    pub fn radii(&self) -> Option<&[f64]> {
        self.radii.as_deref()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Replace positions, keeping weights/features/radii (lengths must match).
    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::invalid("replacement positions length mismatch"));
        }
        let mut out = self.clone();
        out.positions = positions;
        Ok(out)
    }

    /// Keep only the points at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("cannot select an empty point set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range")));
        }
        Ok(Self {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
            features: self.features.as_ref().map(|f| Features {
                dim: f.dim,
                data: indices.iter().flat_map(|&i| f.row(i).iter().copied()).collect(),
            }),
            radii: self.radii.as_ref().map(|r| indices.iter().map(|&i| r[i]).collect()),
        })
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.positions {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Diagonal of the bounding box; a cheap upper bound on the diameter.
    pub fn diameter(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        dist(&lo, &hi)
    }

    /// Average distance from each point to its nearest neighbour.
    /// Brute force O(N^2); intended for parameter heuristics, not hot paths.
    pub fn mean_nn_distance(&self) -> f64 {
        if self.len() < 2 {
            return 0.0;
        }
        let total: f64 = self
            .positions
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut best = f64::INFINITY;
                for (j, q) in self.positions.iter().enumerate() {
                    if i != j {
                        best = best.min(dist_sq(p, q));
                    }
                }
                best.sqrt()
            })
            .sum();
        total / self.len() as f64
    }

    /// Order-insensitive content hash used to tie dual potentials to the
    /// clouds they were solved on.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.len() * 32);
        bytes.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (p, w) in self.positions.iter().zip(&self.weights) {
            for v in p {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
            bytes.extend_from_slice(&w.to_bits().to_le_bytes());
        }
        if let Some(f) = &self.features {
            bytes.extend_from_slice(&(f.dim as u64).to_le_bytes());
            for v in &f.data {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        fnv1a(&bytes)
    }
}

pub(crate) fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist_sq(a, b).sqrt()
}

/// Greedy farthest point sampling.
///
/// The first index is derived deterministically from `seed`; every further
/// index maximises the minimum distance to the already selected set, ties
/// broken by the lowest index.
pub fn farthest_point_sampling(
    cloud: &WeightedPointCloud,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = cloud.len();
    if count == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if count > n {
        return Err(Error::invalid(format!(
            "insufficient points: requested {count} from a cloud of {n}"
        )));
    }
    let start = (seed % n as u64) as usize;
    let mut chosen = Vec::with_capacity(count);
    chosen.push(start);
    let mut min_d = vec![f64::INFINITY; n];
    let mut last = start;
    for _ in 1..count {
        let lp = cloud.position(last);
        let mut best = (0usize, f64::NEG_INFINITY);
        for i in 0..n {
            let d = dist_sq(&cloud.position(i), &lp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        chosen.push(best.0);
        last = best.0;
    }
    Ok(chosen)
}

/// Voxel-grid downsampling: one output point per non-empty cubic cell, at the
/// weighted barycenter of the cell, carrying the summed weight. Radii and
/// features are averaged with the same weights. The grid is anchored at the
/// cloud's bounding-box minimum, so the operation is translation-stable
/// within a run.
pub fn voxel_grid_downsample(cloud: &WeightedPointCloud, spacing: f64) -> Result<WeightedPointCloud> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("spacing must be positive"));
    }
    let (lo, _) = cloud.bounding_box();
    let fdim = cloud.features().map(|f| f.dim()).unwrap_or(0);

    struct Cell {
        w: f64,
        n: usize,
        pos: [f64; 3],
        upos: [f64; 3], // unweighted fallback for all-zero-weight cells
        radius: f64,
        feat: Vec<f64>,
    }
    let mut cells: BTreeMap<(i64, i64, i64), Cell> = BTreeMap::new();
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let w = cloud.weights()[i];
        let key = (
            ((p[0] - lo[0]) / spacing).floor() as i64,
            ((p[1] - lo[1]) / spacing).floor() as i64,
            ((p[2] - lo[2]) / spacing).floor() as i64,
        );
        let cell = cells.entry(key).or_insert_with(|| Cell {
            w: 0.0,
            n: 0,
            pos: [0.0; 3],
            upos: [0.0; 3],
            radius: 0.0,
            feat: vec![0.0; fdim],
        });
        cell.w += w;
        cell.n += 1;
        for k in 0..3 {
            cell.pos[k] += w * p[k];
            cell.upos[k] += p[k];
        }
        if let Some(r) = cloud.radii() {
            cell.radius += w * r[i];
        }
        if let Some(f) = cloud.features() {
            for (a, b) in cell.feat.iter_mut().zip(f.row(i)) {
                *a += w * b;
            }
        }
    }

    let mut positions = Vec::with_capacity(cells.len());
    let mut weights = Vec::with_capacity(cells.len());
    let mut radii = Vec::new();
    let mut feats = Vec::new();
    for cell in cells.values() {
        if cell.w > 0.0 {
            positions.push([cell.pos[0] / cell.w, cell.pos[1] / cell.w, cell.pos[2] / cell.w]);
            if cloud.radii().is_some() {
                radii.push(cell.radius / cell.w);
            }
            if fdim > 0 {
                feats.extend(cell.feat.iter().map(|v| v / cell.w));
            }
        } else {
            let n = cell.n as f64;
            positions.push([cell.upos[0] / n, cell.upos[1] / n, cell.upos[2] / n]);
            if cloud.radii().is_some() {
                radii.push(0.0);
            }
            if fdim > 0 {
                feats.extend(std::iter::repeat(0.0).take(fdim));
            }
        }
        weights.push(cell.w);
    }

    let mut out = WeightedPointCloud::new(positions, weights)?;
    if cloud.radii().is_some() {
        // averaged radii of a zero-weight cell degenerate to 0; keep the
        // cloud valid by flooring at the smallest input radius
        let floor = cloud.radii().unwrap().iter().cloned().fold(f64::INFINITY, f64::min);
        out = out.with_radii(radii.into_iter().map(|r| if r > 0.0 { r } else { floor }).collect())?;
    }
    if fdim > 0 {
        // weighted feature averages are generally no longer unit norm
        out = out.with_features_normalized(fdim, feats)?;
    }
    Ok(out)
}

/// Mean nearest-neighbour distances between two clouds:
/// `(a_to_b, b_to_a, symmetric)` where the symmetric value is the average of
/// the two one-sided means. Brute force O(N*M).
pub fn chamfer_distance(a: &WeightedPointCloud, b: &WeightedPointCloud) -> (f64, f64, f64) {
    let one_sided = |from: &WeightedPointCloud, to: &WeightedPointCloud| -> f64 {
        let total: f64 = from
            .positions()
            .par_iter()
            .map(|p| {
                to.positions()
                    .iter()
                    .map(|q| dist_sq(p, q))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum();
        total / from.len() as f64
    };
    let ab = one_sided(a, b);
    let ba = one_sided(b, a);
    (ab, ba, 0.5 * (ab + ba))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_cloud(xs: &[f64]) -> WeightedPointCloud {
        WeightedPointCloud::from_positions(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn rejects_empty_and_bad_weights() {
        assert!(WeightedPointCloud::new(vec![], vec![]).is_err());
        assert!(WeightedPointCloud::new(vec![[0.0; 3]], vec![-1.0]).is_err());
        assert!(WeightedPointCloud::new(vec![[0.0; 3]], vec![0.0]).is_err());
        assert!(WeightedPointCloud::new(vec![[f64::NAN; 3]], vec![1.0]).is_err());
    }

    #[test]
    fn feature_normalization() {
        let c = WeightedPointCloud::from_positions(vec![[0.0; 3], [1.0, 0.0, 0.0]])
            .unwrap()
            .with_features_normalized(2, vec![3.0, 4.0, 0.0, 2.0])
            .unwrap();
        let f = c.features().unwrap();
        assert!((f.row(0)[0] - 0.6).abs() < 1e-12);
        assert!((f.row(0)[1] - 0.8).abs() < 1e-12);
        assert_eq!(f.row(1), &[0.0, 1.0]);
        // non-normalized constructor must reject the same data
        let c2 = WeightedPointCloud::from_positions(vec![[0.0; 3], [1.0, 0.0, 0.0]])
            .unwrap()
            .with_features(2, vec![3.0, 4.0, 0.0, 2.0]);
        assert!(c2.is_err());
    }

    #[test]
    fn fps_full_count_returns_all_indices() {
        let c = line_cloud(&[0.0, 1.0, 2.0, 10.0]);
        let mut idx = farthest_point_sampling(&c, 4, 3).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
    }

    #[test]
    fn fps_picks_extreme_point_on_a_line() {
        let c = line_cloud(&[0.0, 1.0, 2.0, 10.0]);
        let idx = farthest_point_sampling(&c, 2, 0).unwrap();
        assert_eq!(idx, vec![0, 3]);
    }

    #[test]
    fn fps_errors_when_count_exceeds_n() {
        let c = line_cloud(&[0.0, 1.0]);
        let err = farthest_point_sampling(&c, 3, 0).unwrap_err();
        assert!(err.to_string().contains("insufficient points"));
    }

    #[test]
    fn fps_matches_naive_greedy_reference() {
        // Reference: same greedy rule, recomputing every min-distance from
        // scratch at each step.
        let mut rng = crate::rng::stream(11, "fps-test", 0);
        use rand::Rng;
        let pts: Vec<[f64; 3]> =
            (0..100).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
        let c = WeightedPointCloud::from_positions(pts.clone()).unwrap();
        let got = farthest_point_sampling(&c, 10, 42).unwrap();

        let start = (42u64 % 100) as usize;
        let mut reference = vec![start];
        while reference.len() < 10 {
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for i in 0..pts.len() {
                let d = reference
                    .iter()
                    .map(|&j| dist_sq(&pts[i], &pts[j]))
                    .fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            reference.push(best.0);
        }
        assert_eq!(got, reference);
    }

    #[test]
    fn voxel_downsample_collapses_to_barycenter() {
        let c = WeightedPointCloud::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            vec![1.0, 3.0],
        )
        .unwrap();
        let d = voxel_grid_downsample(&c, 100.0).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d.position(0)[0] - 0.75).abs() < 1e-15);
        assert_eq!(d.weights()[0], 4.0);
    }

    #[test]
    fn voxel_downsample_identity_for_separated_points() {
        let c = WeightedPointCloud::new(
            vec![[0.1, 0.1, 0.1], [5.0, 0.1, 0.1]],
            vec![1.0, 2.0],
        )
        .unwrap();
        let d = voxel_grid_downsample(&c, 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.positions(), c.positions());
        assert_eq!(d.weights(), c.weights());
    }

    #[test]
    fn voxel_downsample_cube_corners() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let c = WeightedPointCloud::from_positions(pts).unwrap();
        let d = voxel_grid_downsample(&c, 10.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.position(0), [0.5, 0.5, 0.5]);
        assert_eq!(d.weights()[0], 8.0);
    }

    #[test]
    fn chamfer_trivial_cases() {
        let a = line_cloud(&[0.0]);
        let b = line_cloud(&[1.0]);
        assert_eq!(chamfer_distance(&a, &a), (0.0, 0.0, 0.0));
        assert_eq!(chamfer_distance(&a, &b), (1.0, 1.0, 1.0));
    }

    #[test]
    fn chamfer_matches_brute_force_oracle() {
        let mut rng = crate::rng::stream(3, "chamfer", 0);
        use rand::Rng;
        let pts = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<[f64; 3]> {
            (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect()
        };
        let pa = pts(&mut rng, 50);
        let pb = pts(&mut rng, 37);
        let a = WeightedPointCloud::from_positions(pa.clone()).unwrap();
        let b = WeightedPointCloud::from_positions(pb.clone()).unwrap();
        let (ab, ba, sym) = chamfer_distance(&a, &b);

        let mut exp_ab = 0.0;
        for p in &pa {
            let mut best = f64::INFINITY;
            for q in &pb {
                best = best.min(dist(p, q));
            }
            exp_ab += best;
        }
        exp_ab /= pa.len() as f64;
        let mut exp_ba = 0.0;
        for q in &pb {
            let mut best = f64::INFINITY;
            for p in &pa {
                best = best.min(dist(p, q));
            }
            exp_ba += best;
        }
        exp_ba /= pb.len() as f64;
        assert!((ab - exp_ab).abs() < 1e-12);
        assert!((ba - exp_ba).abs() < 1e-12);
        assert!((sym - 0.5 * (exp_ab + exp_ba)).abs() < 1e-12);
    }

    proptest! {
        // Integer-valued weights make the conservation check exact in f64
        // regardless of summation order.
        #[test]
        fn voxel_downsample_conserves_total_weight(
            pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..60),
            ws in proptest::collection::vec(1u32..16, 60),
            spacing in 0.5f64..8.0,
        ) {
            let positions: Vec<[f64;3]> = pts.iter().map(|&(x,y,z)| [x,y,z]).collect();
            let weights: Vec<f64> = ws[..positions.len()].iter().map(|&w| w as f64).collect();
            let c = WeightedPointCloud::new(positions, weights).unwrap();
            let d = voxel_grid_downsample(&c, spacing).unwrap();
            prop_assert_eq!(d.total_weight(), c.total_weight());
        }

        #[test]
        fn fps_is_deterministic(seed in 0u64..1000, count in 1usize..20) {
            let mut rng = crate::rng::stream(seed, "fps-prop", 0);
            use rand::Rng;
            let pts: Vec<[f64;3]> = (0..20).map(|_| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]).collect();
            let c = WeightedPointCloud::from_positions(pts).unwrap();
            let a = farthest_point_sampling(&c, count, seed).unwrap();
            let b = farthest_point_sampling(&c, count, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
