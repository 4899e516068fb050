//! Bucketed batching over variable-length context windows.
//!
//! An item goes to the first bucket whose boundary covers its window frame
//! count (the last bucket is unbounded), and batches are filled up to the
//! bucket's frame budget. A window longer than its bucket's budget becomes
//! a batch of one, with a warning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One schedulable unit: an opaque id plus the frame count of its context
/// window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketItem {
    pub id: usize,
    pub frames: usize,
}

pub fn bucket_batches(
    items: &[BucketItem],
    boundaries: &[usize],
    budgets: &[usize],
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if budgets.len() != boundaries.len() + 1 {
        return Err(Error::usage(format!(
            "need {} budgets for {} boundaries, got {}",
            boundaries.len() + 1,
            boundaries.len(),
            budgets.len()
        )));
    }
    if budgets.iter().any(|&b| b == 0) {
        return Err(Error::usage("budgets must be positive".to_string()));
    }

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut pending: Vec<Vec<usize>> = vec![Vec::new(); budgets.len()];
    let mut pending_frames: Vec<usize> = vec![0; budgets.len()];
    let mut batches: Vec<Vec<usize>> = Vec::new();

    for &pos in &order {
        let item = items[pos];
        let bucket = bucket_for(item.frames, boundaries);
        let budget = budgets[bucket];
        if item.frames > budget {
            log::warn!(
                "window of {} frames exceeds bucket budget {}; emitting a batch of one",
                item.frames,
                budget
            );
            batches.push(vec![item.id]);
            continue;
        }
        if pending_frames[bucket] + item.frames > budget {
            batches.push(std::mem::take(&mut pending[bucket]));
            pending_frames[bucket] = 0;
        }
        pending[bucket].push(item.id);
        pending_frames[bucket] += item.frames;
    }
    for bucket in pending {
        if !bucket.is_empty() {
            batches.push(bucket);
        }
    }
    Ok(batches)
}

/// First bucket whose boundary covers the frame count; the last bucket is
/// unbounded.
pub fn bucket_for(frames: usize, boundaries: &[usize]) -> usize {
    boundaries
        .iter()
        .position(|&b| b >= frames)
        .unwrap_or(boundaries.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BOUNDS: [usize; 3] = [300, 600, 1000];
    const BUDGETS: [usize; 4] = [4096, 2048, 1024, 256];

    #[test]
    fn window_of_450_frames_lands_in_second_bucket() {
        assert_eq!(bucket_for(450, &BOUNDS), 1);
        assert_eq!(BUDGETS[bucket_for(450, &BOUNDS)], 2048);
    }

    #[test]
    fn boundary_values_stay_in_their_bucket() {
        assert_eq!(bucket_for(300, &BOUNDS), 0);
        assert_eq!(bucket_for(301, &BOUNDS), 1);
        assert_eq!(bucket_for(1000, &BOUNDS), 2);
        assert_eq!(bucket_for(1001, &BOUNDS), 3);
    }

    #[test]
    fn empty_input_gives_empty_schedule() {
        let batches = bucket_batches(&[], &BOUNDS, &BUDGETS, 0).unwrap();
        assert!(batches.is_empty());
    }

    #[test]
    fn every_batch_respects_its_budget() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for round in 0..20 {
            let items: Vec<BucketItem> = (0..rng.random_range(1..200))
                .map(|id| BucketItem { id, frames: rng.random_range(10..1400) })
                .collect();
            let batches = bucket_batches(&items, &BOUNDS, &BUDGETS, round).unwrap();
            let emitted: usize = batches.iter().map(Vec::len).sum();
            assert_eq!(emitted, items.len(), "every item scheduled exactly once");
            for batch in &batches {
                if batch.len() == 1 {
                    continue; // oversized singletons are allowed
                }
                let frames: usize = batch.iter().map(|&id| items[id].frames).sum();
                let bucket = bucket_for(items[batch[0]].frames, &BOUNDS);
                assert!(
                    frames <= BUDGETS[bucket],
                    "batch of {frames} frames exceeds budget {}",
                    BUDGETS[bucket]
                );
            }
        }
    }

    #[test]
    fn overlong_window_becomes_singleton() {
        let items = [BucketItem { id: 0, frames: 5000 }, BucketItem { id: 1, frames: 50 }];
        let batches = bucket_batches(&items, &BOUNDS, &BUDGETS, 1).unwrap();
        assert!(batches.iter().any(|b| b == &vec![0]));
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let items: Vec<BucketItem> =
            (0..64).map(|id| BucketItem { id, frames: 40 + id }).collect();
        let a = bucket_batches(&items, &BOUNDS, &BUDGETS, 9).unwrap();
        let b = bucket_batches(&items, &BOUNDS, &BUDGETS, 9).unwrap();
        let c = bucket_batches(&items, &BOUNDS, &BUDGETS, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn budget_arity_checked() {
        assert!(bucket_batches(&[], &BOUNDS, &[1, 2], 0).is_err());
    }
}
