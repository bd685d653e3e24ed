//! Input generators shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trajguard::dataset::TokenPair;
use trajguard::geo::{CellId, N_RESERVED};

/// `n` points in `dim` dimensions: tight blobs of eight plus uniform background.
pub fn blobs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut center = vec![0.0f32; dim];
    (0..n)
        .map(|i| {
            if i % 8 == 0 {
                center.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0));
            }
            if i % 3 == 0 {
                (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
            } else {
                center.iter().map(|c| c + rng.gen_range(-0.01..0.01)).collect()
            }
        })
        .collect()
}

/// One day of minute cells, online with probability `online`, wandering over a
/// small patch.
pub fn day_cells(online: f64, seed: u64) -> Vec<Option<CellId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1440)
        .map(|_| {
            rng.gen_bool(online).then(|| CellId {
                bx: rng.gen_range(0..6),
                by: rng.gen_range(0..6),
                continent_id: 0,
            })
        })
        .collect()
}

/// A trajectory of `len` tokens on consecutive minutes.
pub fn tokens(len: usize, zones: usize, cells: usize, seed: u64) -> (Vec<TokenPair>, Vec<u16>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toks = (0..len)
        .map(|_| TokenPair {
            zone: rng.gen_range(N_RESERVED..zones as u32),
            cell: rng.gen_range(N_RESERVED..cells as u32),
        })
        .collect();
    let minutes = (1..=len as u16).collect();
    (toks, minutes)
}
