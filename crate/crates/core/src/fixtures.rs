//! Random matching cases for exercising the metrics against the oracle.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ground-truth and predicted part maps on a small square grid.
#[derive(Clone, Debug)]
pub struct MatchCase {
    pub side: usize,
    pub parts: usize,
    /// Pairwise-disjoint visible maps, none empty.
    pub gts: Vec<Vec<u8>>,
    /// `(score, labels)`.
    pub preds: Vec<(f64, Vec<u8>)>,
}

fn rect_map(rng: &mut ChaCha8Rng, side: usize, parts: usize) -> Vec<u8> {
    let (x0, y0) = (rng.random_range(0..side), rng.random_range(0..side));
    let (w, h) = (rng.random_range(2..=side), rng.random_range(2..=side));
    let mut m = vec![0u8; side * side];
    for y in y0..(y0 + h).min(side) {
        for x in x0..(x0 + w).min(side) {
            m[y * side + x] = 1 + ((y - y0) * (parts - 1) / h) as u8;
        }
    }
    m
}

/// Up to `max_instances` ground truths and predictions. Predictions are
/// noisy copies of ground truths (some duplicated) or unrelated rectangles.
pub fn random_match_case(seed: u64, max_instances: usize) -> MatchCase {
    let (side, parts) = (10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ng = rng.random_range(1..=max_instances);
    let full: Vec<Vec<u8>> = (0..ng).map(|_| rect_map(&mut rng, side, parts)).collect();
    let mut owner = vec![usize::MAX; side * side];
    for (i, m) in full.iter().enumerate() {
        for (o, &v) in owner.iter_mut().zip(m) {
            if v != 0 {
                *o = i;
            }
        }
    }
    let gts: Vec<Vec<u8>> = full
        .iter()
        .enumerate()
        .map(|(i, m)| m.iter().zip(&owner).map(|(&v, &o)| if o == i { v } else { 0 }).collect::<Vec<u8>>())
        .filter(|m| m.iter().any(|&v| v != 0))
        .collect();

    let np = rng.random_range(0..=max_instances);
    let preds = (0..np)
        .map(|_| {
            let mut m = if rng.random_bool(0.75) {
                gts[rng.random_range(0..gts.len())].clone()
            } else {
                rect_map(&mut rng, side, parts)
            };
            let flips = rng.random_range(0..side * side / 3);
            for _ in 0..flips {
                let i = rng.random_range(0..side * side);
                m[i] = rng.random_range(0..parts as u8);
            }
            (rng.random::<f64>(), m)
        })
        .collect();
    MatchCase { side, parts, gts, preds }
}
