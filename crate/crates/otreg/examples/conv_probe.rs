use otreg::{OTParams, WeightedPointCloud};
use otreg::matching::robot_match;
use otreg::sinkhorn::solve_unbalanced;
use std::time::Instant;

fn main() {
    // 10 x 25 x 20 grid: exactly 5000 points, spacing 1
    let mut pts = Vec::new();
    for i in 0..10 { for j in 0..25 { for k in 0..20 {
        pts.push([i as f64, j as f64, k as f64]);
    }}}
    let n = pts.len();
    let a = WeightedPointCloud::from_positions(pts.clone()).unwrap();
    let sigma = 1.0; // grid sampling distance
    let t = [13.0, 11.0, 7.5]; // |t| ~ 0.66 diameter
    let b = WeightedPointCloud::from_positions(
        pts.iter().map(|p| [p[0]+t[0], p[1]+t[1], p[2]+t[2]]).collect()).unwrap();
    println!("n = {n}, diam = {:.1}", a.diameter());
    for tol in [100.0f64, 50.0, 20.0] {
        let mut p = OTParams::balanced(sigma);
        p.tol = tol; p.max_outer_iters = 100_000;
        let start = Instant::now();
        match solve_unbalanced(&a, &b, &p) {
            Ok(d) => {
                let f = robot_match(&a, &b, &d).unwrap();
                let max_dev = f.vectors().iter().map(|v| ((v[0]-t[0]).powi(2)+(v[1]-t[1]).powi(2)+(v[2]-t[2]).powi(2)).sqrt()).fold(0.0f64, f64::max);
                println!("grid tol {tol:5}: iters {:5}, max|v-t|/sigma {:.3}, {:?}", d.iterations(), max_dev/sigma, start.elapsed());
            }
            Err(e) => println!("grid tol {tol}: {e}"),
        }
    }
}
