//! Matching fields: the transport-based displacement field with confidence
//! weights, and a nearest-neighbour baseline.

use rayon::prelude::*;

use crate::cloud::WeightedPointCloud;
use crate::sinkhorn::{row_mass_and_barycenter, DualPotentials};
use crate::{Error, Result};

/// Rows with a plan mass below this fraction of the largest row mass are
/// treated as unmatched: their displacement is set to zero. Downstream
/// formulas weigh every row by its confidence, so the value is immaterial;
/// zero keeps fields finite.
const ZERO_CONFIDENCE_RATIO: f64 = 1e-12;

/// Per-source-point displacement vectors with confidence weights. Same
/// length as the source cloud; rows with zero confidence carry a zero
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingField {
    vectors: Vec<[f64; 3]>,
    confidences: Vec<f64>,
}

impl MatchingField {
    pub fn new(vectors: Vec<[f64; 3]>, confidences: Vec<f64>) -> Result<Self> {
        if vectors.len() != confidences.len() {
            return Err(Error::invalid("vectors/confidences length mismatch"));
        }
        if confidences.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::invalid("confidences must be finite and non-negative"));
        }
        for (v, &w) in vectors.iter().zip(&confidences) {
            if w > 0.0 && v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid("non-finite displacement with positive confidence"));
            }
        }
        Ok(Self { vectors, confidences })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn total_confidence(&self) -> f64 {
        self.confidences.iter().sum()
    }

    /// Targets `x_i + v_i` for the given source positions.
    pub fn displaced(&self, positions: &[[f64; 3]]) -> Vec<[f64; 3]> {
        positions
            .iter()
            .zip(&self.vectors)
            .map(|(p, v)| [p[0] + v[0], p[1] + v[1], p[2] + v[2]])
            .collect()
    }
}

/// Transport-based matching field: for every source point, the plan-weighted
/// barycentric displacement towards the target positions, with the row mass
/// of the implicit plan as confidence. Streamed; never materialises the
/// plan.
pub fn robot_match(
    source: &WeightedPointCloud,
    target: &WeightedPointCloud,
    duals: &DualPotentials,
) -> Result<MatchingField> {
    duals.check_clouds(source, target)?;
    let rows = row_mass_and_barycenter(source, target, duals);
    let max_mass = rows.iter().map(|&(m, _)| m).fold(0.0, f64::max);
    let cutoff = ZERO_CONFIDENCE_RATIO * max_mass;
    let mut vectors = Vec::with_capacity(rows.len());
    let mut confidences = Vec::with_capacity(rows.len());
    for (i, (mass, bary)) in rows.into_iter().enumerate() {
        if mass > cutoff {
            let x = source.position(i);
            vectors.push([bary[0] - x[0], bary[1] - x[1], bary[2] - x[2]]);
            confidences.push(mass);
        } else {
            vectors.push([0.0; 3]);
            confidences.push(mass);
        }
    }
    MatchingField::new(vectors, confidences)
}

/// Nearest-neighbour baseline: each source point is displaced onto the
/// position of its nearest target in feature space, ties broken by the
/// lowest target index; confidences are the source weights.
pub fn nn_match(source: &WeightedPointCloud, target: &WeightedPointCloud) -> Result<MatchingField> {
    let use_features = match (source.features(), target.features()) {
        (Some(a), Some(b)) if a.dim() == b.dim() => true,
        (None, None) => false,
        _ => return Err(Error::invalid("features must be present on both clouds or neither")),
    };
    let feat = |cloud: &WeightedPointCloud, i: usize| -> Vec<f64> {
        if use_features {
            cloud.features().unwrap().row(i).to_vec()
        } else {
            cloud.position(i).to_vec()
        }
    };
    let tgt_feats: Vec<Vec<f64>> = (0..target.len()).map(|j| feat(target, j)).collect();
    let vectors: Vec<[f64; 3]> = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let fi = feat(source, i);
            let mut best = (0usize, f64::INFINITY);
            for (j, fj) in tgt_feats.iter().enumerate() {
                let d: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            let x = source.position(i);
            let y = target.position(best.0);
            [y[0] - x[0], y[1] - x[1], y[2] - x[2]]
        })
        .collect();
    MatchingField::new(vectors, source.weights().to_vec())
}
