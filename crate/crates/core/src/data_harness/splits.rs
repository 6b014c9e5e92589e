use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Randomly partitions `0..n` into `parts` disjoint subsets whose sizes differ
/// by at most one. Each subset is one low-resource training set.
pub fn make_low_resource_splits(n: usize, parts: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if parts < 2 {
        return Err(Error::Config(format!("need at least 2 parts, got {parts}")));
    }
    if n < parts {
        return Err(Error::Config(format!("{n} items cannot fill {parts} parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let mut part = order[start..start + size].to_vec();
        part.sort_unstable();
        out.push(part);
        start += size;
    }
    Ok(out)
}
