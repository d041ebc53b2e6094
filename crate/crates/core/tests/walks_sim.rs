//! Direct walk-simulation oracles for the linear-solve quantities. The
//! simulator steps actual killed walks; the untracked mass beyond the step cap
//! is (1−θ)^1000 and far below every tolerance used here.

mod common;

use common::{simulate_walk, WalkOutcome};
use gffls::lattice::Geometry;
use gffls::walks::{harmonic_extension, hitting_probability, WalkParams};
use rayon::prelude::*;

#[test]
fn hitting_probability_matches_walk_simulation() {
    let geom = Geometry::zd_box(3, 24).unwrap();
    let theta = 0.5;
    let params = WalkParams::massive(theta).unwrap();
    let origin = geom.index(&[0, 0, 0]);
    let start = geom.index(&[1, 0, 0]);
    let exact = hitting_probability(&geom, &params, start, &[origin]).unwrap();

    let mut targets = vec![false; geom.len()];
    targets[origin] = true;
    let absorbing = vec![false; geom.len()];
    let replicas: usize = 10_000_000;
    let chunk = 100_000;
    let hits: usize = (0..replicas / chunk)
        .into_par_iter()
        .map(|c| {
            let mut rng = gffls::rng::stream(23, "walk-sim-hit", &[c as u64]);
            let mut hits = 0;
            for _ in 0..chunk {
                if let WalkOutcome::Hit(_) =
                    simulate_walk(&geom, theta, &absorbing, &targets, start, &mut rng)
                {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = hits as f64 / replicas as f64;
    let se = (p * (1.0 - p) / replicas as f64).sqrt();
    assert!(
        (p - exact).abs() <= 3.0 * se,
        "walk mc {p:.6} vs solve {exact:.6} (se {se:.2e})"
    );
}

#[test]
fn harmonic_extension_matches_walk_simulation() {
    let geom = Geometry::zd_box(3, 20).unwrap();
    let theta = 0.5;
    let params = WalkParams::massive(theta).unwrap();
    let k = vec![geom.index(&[0, 0, 0]), geom.index(&[1, 0, 0])];
    let boundary = [1.0, -1.0];
    let x = geom.index(&[-2, 0, 0]);
    let mu = harmonic_extension(&geom, &params, &k, &boundary).unwrap();

    let mut targets = vec![false; geom.len()];
    for &s in &k {
        targets[s] = true;
    }
    let absorbing = vec![false; geom.len()];
    let replicas: usize = 1_000_000;
    let chunk = 50_000;
    let total: f64 = (0..replicas / chunk)
        .into_par_iter()
        .map(|c| {
            let mut rng = gffls::rng::stream(29, "walk-sim-harm", &[c as u64]);
            let mut acc = 0.0;
            for _ in 0..chunk {
                if let WalkOutcome::Hit(site) =
                    simulate_walk(&geom, theta, &absorbing, &targets, x, &mut rng)
                {
                    acc += if site == k[0] { 1.0 } else { -1.0 };
                }
            }
            acc
        })
        .sum();
    let emp = total / replicas as f64;
    // Bernoulli-signed outcome: second moment ≤ entrance probability.
    let se = (1.0 / replicas as f64).sqrt();
    assert!(
        (emp - mu[x]).abs() <= 3.0 * se,
        "walk mc {emp:.6} vs extension {:.6}",
        mu[x]
    );
}
