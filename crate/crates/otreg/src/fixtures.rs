//! Deterministic synthetic shapes used by tests, benchmarks and demos:
//! spheres, cubes, tube bundles and branching trees that mimic vessel point
//! clouds.

use rand::Rng;

use crate::cloud::WeightedPointCloud;
use crate::rng::stream;

/// `n` points on the unit sphere via the Fibonacci lattice.
pub fn sphere_surface(n: usize) -> WeightedPointCloud {
    let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            let z = 1.0 - 2.0 * t;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect();
    WeightedPointCloud::from_positions(pts).unwrap()
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// `n` points on the surface of the cube `[-1, 1]^3`, spread over the six
/// faces with a low-discrepancy pattern.
pub fn cube_surface(n: usize) -> WeightedPointCloud {
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let face = i % 6;
            let u = 2.0 * halton(i / 6 + 1, 2) - 1.0;
            let v = 2.0 * halton(i / 6 + 1, 3) - 1.0;
            match face {
                0 => [1.0, u, v],
                1 => [-1.0, u, v],
                2 => [u, 1.0, v],
                3 => [u, -1.0, v],
                4 => [u, v, 1.0],
                _ => [u, v, -1.0],
            }
        })
        .collect();
    WeightedPointCloud::from_positions(pts).unwrap()
}

/// Points jittered around a straight segment, mimicking one vessel.
fn tube(
    start: [f64; 3],
    dir: [f64; 3],
    length: f64,
    radius: f64,
    n: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<[f64; 3]> {
    // two unit vectors orthogonal to dir
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let d = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
    let pick = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut u = [
        d[1] * pick[2] - d[2] * pick[1],
        d[2] * pick[0] - d[0] * pick[2],
        d[0] * pick[1] - d[1] * pick[0],
    ];
    let un = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    u = [u[0] / un, u[1] / un, u[2] / un];
    let v = [
        d[1] * u[2] - d[2] * u[1],
        d[2] * u[0] - d[0] * u[2],
        d[0] * u[1] - d[1] * u[0],
    ];
    (0..n)
        .map(|i| {
            let t = length * (i as f64 + 0.5) / n as f64;
            let a: f64 = radius * (rng.random::<f64>() - 0.5);
            let b: f64 = radius * (rng.random::<f64>() - 0.5);
            [
                start[0] + t * d[0] + a * u[0] + b * v[0],
                start[1] + t * d[1] + a * u[1] + b * v[1],
                start[2] + t * d[2] + a * u[2] + b * v[2],
            ]
        })
        .collect()
}

/// Two parallel tubes along x, separated along y.
pub fn two_tubes(n_per_tube: usize, separation: f64, length: f64, jitter: f64, seed: u64) -> WeightedPointCloud {
    let mut rng = stream(seed, "fixtures/two-tubes", 0);
    let mut pts = tube([0.0; 3], [1.0, 0.0, 0.0], length, jitter, n_per_tube, &mut rng);
    pts.extend(tube(
        [0.0, separation, 0.0],
        [1.0, 0.0, 0.0],
        length,
        jitter,
        n_per_tube,
        &mut rng,
    ));
    WeightedPointCloud::from_positions(pts).unwrap()
}

/// A source/target pair of Y-shaped vessels where naive projection confuses
/// the branches: the target is the source opened and rotated in-plane, so
/// the nearest target branch to most of source branch 1 is target branch 2.
///
/// Returns `(source, target, source_branch1_len, target_branch1_len)`; the
/// first `len` points of each cloud belong to branch 1.
pub fn branch_confusion_pair(seed: u64) -> (WeightedPointCloud, WeightedPointCloud, usize, usize) {
    let mut rng = stream(seed, "fixtures/branches", 0);
    let jitter = 0.01;
    let angle = |deg: f64| {
        let r = deg.to_radians();
        [r.cos(), r.sin(), 0.0]
    };
    let n1 = 500;
    let n2 = 500;
    let mut src = tube([0.0; 3], angle(10.0), 0.8, jitter, n1, &mut rng);
    src.extend(tube([0.0; 3], angle(-10.0), 0.8, jitter, n2, &mut rng));
    let m1 = 600;
    let m2 = 600;
    let mut tgt = tube([0.0; 3], angle(25.0), 0.8, jitter, m1, &mut rng);
    tgt.extend(tube([0.0; 3], angle(5.0), 0.8, jitter, m2, &mut rng));
    (
        WeightedPointCloud::from_positions(src).unwrap(),
        WeightedPointCloud::from_positions(tgt).unwrap(),
        n1,
        m1,
    )
}

/// A random binary "vascular" tree of jittered tube segments with per-point
/// radii that shrink with depth. Dimensions are millimetre-ish: the tree
/// spans roughly 150-250 mm with root radius ~5 mm.
pub fn branching_tree(n_points: usize, seed: u64) -> WeightedPointCloud {
    struct Segment {
        start: [f64; 3],
        dir: [f64; 3],
        length: f64,
        radius: f64,
    }
    let mut rng = stream(seed, "fixtures/tree", 0);
    let mut segments = Vec::new();
    let mut frontier = vec![Segment {
        start: [0.0; 3],
        dir: [0.0, 0.0, 1.0],
        length: 60.0,
        radius: 5.0,
    }];
    for _depth in 0..6 {
        let mut next = Vec::new();
        for seg in &frontier {
            let end = [
                seg.start[0] + seg.length * seg.dir[0],
                seg.start[1] + seg.length * seg.dir[1],
                seg.start[2] + seg.length * seg.dir[2],
            ];
            for _child in 0..2 {
                // random deflection of the parent direction
                let mut d = [
                    seg.dir[0] + 0.9 * (rng.random::<f64>() - 0.5),
                    seg.dir[1] + 0.9 * (rng.random::<f64>() - 0.5),
                    seg.dir[2] + 0.9 * (rng.random::<f64>() - 0.5),
                ];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                d = [d[0] / n, d[1] / n, d[2] / n];
                next.push(Segment {
                    start: end,
                    dir: d,
                    length: seg.length * 0.72,
                    radius: seg.radius * 0.75,
                });
            }
        }
        segments.extend(frontier);
        frontier = next;
    }
    segments.extend(frontier);

    let total_len: f64 = segments.iter().map(|s| s.length).sum();
    let mut pts = Vec::with_capacity(n_points);
    let mut radii = Vec::with_capacity(n_points);
    for seg in &segments {
        let quota = ((n_points as f64 * seg.length / total_len).round() as usize).max(1);
        for i in 0..quota {
            if pts.len() >= n_points {
                break;
            }
            let t = seg.length * (i as f64 + 0.5) / quota as f64;
            let jit = 0.25 * seg.radius;
            pts.push([
                seg.start[0] + t * seg.dir[0] + jit * (rng.random::<f64>() - 0.5),
                seg.start[1] + t * seg.dir[1] + jit * (rng.random::<f64>() - 0.5),
                seg.start[2] + t * seg.dir[2] + jit * (rng.random::<f64>() - 0.5),
            ]);
            radii.push(seg.radius * (0.9 + 0.2 * rng.random::<f64>()));
        }
    }
    // top up from the trunk if quota rounding left a deficit
    while pts.len() < n_points {
        let t: f64 = 60.0 * rng.random::<f64>();
        pts.push([
            1.25 * (rng.random::<f64>() - 0.5),
            1.25 * (rng.random::<f64>() - 0.5),
            t,
        ]);
        radii.push(5.0);
    }
    let weights = radii.clone();
    WeightedPointCloud::new(pts, weights).unwrap().with_radii(radii).unwrap()
}

/// An asymmetric blob mixture without rotational symmetries; a good generic
/// subject for rigid-recovery experiments.
pub fn blob_cloud(n: usize, seed: u64) -> WeightedPointCloud {
    let mut rng = stream(seed, "fixtures/blobs", 0);
    let centers = [
        [0.0, 0.0, 0.0],
        [1.4, 0.2, -0.1],
        [0.3, 1.1, 0.4],
        [-0.2, 0.4, 1.5],
    ];
    let spreads = [[0.5, 0.2, 0.3], [0.15, 0.45, 0.2], [0.3, 0.1, 0.5], [0.2, 0.3, 0.1]];
    let share = [0.4, 0.3, 0.2, 0.1];
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let mut k = 0;
            let mut acc = share[0];
            while u > acc && k < 3 {
                k += 1;
                acc += share[k];
            }
            let g = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
                // Box-Muller
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            };
            [
                centers[k][0] + spreads[k][0] * g(&mut rng),
                centers[k][1] + spreads[k][1] * g(&mut rng),
                centers[k][2] + spreads[k][2] * g(&mut rng),
            ]
        })
        .collect();
    WeightedPointCloud::from_positions(pts).unwrap()
}
