//! Deterministic epoch batching: the permutation is a pure function of
//! (seed, epoch), every id appears exactly once, the last batch may be short.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};

const TAG_BATCH: u64 = 0x4241_5443_4849_5452;

pub fn batch_iter(
    ids: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if ids.is_empty() {
        return Err(Error::EmptyInput("batch_iter ids"));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = ids.to_vec();
    let mut rng = Rng::new(derive_seed(derive_seed(seed, TAG_BATCH), epoch as u64));
    rng.shuffle(&mut order);
    Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
}
