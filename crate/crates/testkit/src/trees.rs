//! Random radial-feeder generation for property tests.

use rand::seq::SliceRandom;
use rand::Rng;

/// Generates a random tree on buses `1..=n` rooted at bus 0, returned as a
/// shuffled `(from, to, r_pu, x_pu)` line list. Every bus `k` attaches to a
/// uniformly chosen earlier bus, so the result is always a valid tree.
pub fn random_tree<R: Rng>(rng: &mut R, n: usize) -> Vec<(usize, usize, f64, f64)> {
    let mut lines = Vec::with_capacity(n);
    for k in 1..=n {
        let parent = rng.random_range(0..k);
        let r = rng.random_range(0.001..0.05);
        let x = rng.random_range(0.001..0.08);
        lines.push((parent, k, r, x));
    }
    lines.shuffle(rng);
    lines
}
