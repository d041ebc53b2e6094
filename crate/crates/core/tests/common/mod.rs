//! Shared test oracles: a direct step-by-step simulator of the killed walk,
//! independent of every linear-algebra path in the crate.

use gffls::lattice::Geometry;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Hard cap on walk length; the untracked mass beyond it is (1−θ)^STEP_CAP.
pub const STEP_CAP: usize = 1000;

pub enum WalkOutcome {
    /// Entered K at this site.
    Hit(usize),
    /// Died by killing, absorption, or the step cap.
    Dead,
}

/// Runs one killed walk from `start` until it enters `targets`, dies, or
/// exhausts the step cap. `absorbing` marks the extra absorbing set U; steps
/// leaving a box die implicitly through the neighbor count.
pub fn simulate_walk(
    geom: &Geometry,
    theta: f64,
    absorbing: &[bool],
    targets: &[bool],
    start: usize,
    rng: &mut ChaCha12Rng,
) -> WalkOutcome {
    let mut at = start;
    if targets[at] {
        return WalkOutcome::Hit(at);
    }
    let directions = 2 * geom.dim();
    for _ in 0..STEP_CAP {
        if rng.random::<f64>() < theta {
            return WalkOutcome::Dead;
        }
        // Uniform over the 2d lattice directions; moves leaving the box are
        // absorbed by the halo.
        let pick = rng.random_range(0..directions);
        let mut next = None;
        let mut seen = 0;
        geom.for_each_neighbor(at, |nb| {
            if seen == pick {
                next = Some(nb);
            }
            seen += 1;
        });
        let Some(next) = next else {
            return WalkOutcome::Dead;
        };
        if absorbing[next] {
            return WalkOutcome::Dead;
        }
        at = next;
        if targets[at] {
            return WalkOutcome::Hit(at);
        }
    }
    WalkOutcome::Dead
}
