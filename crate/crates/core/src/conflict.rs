//! Conflict-aware sparsification: task vectors are pruned one after another,
//! and each later vector prefers positions no earlier vector kept.
//!
//! Within each group (block, row or whole tensor) a vector first fills its
//! quota from non-excluded positions by magnitude. Only when those run out is
//! the rest of the quota taken from already-claimed positions, again by
//! magnitude. Per group this gives the smallest overlap the quota allows,
//! `max(0, quota + claimed - group_len)` against the union of earlier masks.

use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::error::{Error, Result};
use crate::pruning::{check_keep, partition_top, Granularity};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Where a vector's quota shortfall is made up from when its non-excluded
/// candidates run out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Inside the same group, preserving the per-group quota.
    #[default]
    PerBlock,
    /// From the whole tensor's claimed positions; total count is preserved
    /// but individual groups may end up over or under quota.
    Global,
}

/// Validate a sparsification order: a permutation of `0..count`.
pub fn check_order(order: &[usize], count: usize) -> Result<()> {
    if order.is_empty() {
        return Err(Error::InvalidArgument("empty sparsification order".into()));
    }
    let mut seen = vec![false; count];
    for &i in order {
        if i >= count || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidArgument(format!(
                "order {order:?} is not a permutation of {count} vectors"
            )));
        }
    }
    if order.len() != count {
        return Err(Error::InvalidArgument(format!(
            "order {order:?} is not a permutation of {count} vectors"
        )));
    }
    Ok(())
}

/// Mask for one vector given the positions already claimed by earlier ones.
pub fn prune_excluding(
    values: &[f32],
    shape: &[usize],
    granularity: Granularity,
    claimed: &BitMask,
    fill: FillMode,
) -> BitMask {
    prune_with_quota(values, shape, granularity, claimed, fill, |_, quota| quota)
}

/// Like [`prune_excluding`] for the vector at position `rank` of an order of
/// `count` vectors. When all quotas fit side by side, each group's quota is
/// the cumulative quota through `rank + 1` vectors minus that through
/// `rank`, so rounding in tail blocks and coarse groups never forces an
/// overlap. Full n:m blocks and the first vector are unaffected.
pub fn prune_excluding_ranked(
    values: &[f32],
    shape: &[usize],
    granularity: Granularity,
    claimed: &BitMask,
    fill: FillMode,
    rank: usize,
    count: usize,
) -> BitMask {
    if !granularity.fits(count) {
        return prune_excluding(values, shape, granularity, claimed, fill);
    }
    prune_with_quota(values, shape, granularity, claimed, fill, |len, _| {
        granularity.group_quota(len, rank + 1) - granularity.group_quota(len, rank)
    })
}

fn prune_with_quota(
    values: &[f32],
    shape: &[usize],
    granularity: Granularity,
    claimed: &BitMask,
    fill: FillMode,
    quota_for: impl Fn(usize, usize) -> usize,
) -> BitMask {
    assert_eq!(values.len(), claimed.len(), "claimed mask length mismatch");
    let mut mask = BitMask::zeros(values.len());
    let mut free = Vec::new();
    let mut taken = Vec::new();
    let mut deficit = 0usize;
    granularity.for_each_group(shape, |start, len, quota| {
        let quota = quota_for(len, quota);
        free.clear();
        taken.clear();
        for i in start..start + len {
            if claimed.get(i) {
                taken.push(i);
            } else {
                free.push(i);
            }
        }
        let from_free = quota.min(free.len());
        partition_top(values, &mut free, from_free);
        for &i in &free[..from_free] {
            mask.set(i, true);
        }
        let short = quota - from_free;
        match fill {
            FillMode::PerBlock => {
                partition_top(values, &mut taken, short);
                for &i in &taken[..short] {
                    mask.set(i, true);
                }
            }
            FillMode::Global => deficit += short,
        }
    });
    if deficit > 0 {
        let mut pool: Vec<usize> = claimed.iter_ones().collect();
        partition_top(values, &mut pool, deficit);
        for &i in &pool[..deficit] {
            mask.set(i, true);
        }
    }
    mask
}

/// Conflict-aware masks for one tensor across `vectors`, pruned in `order`.
/// The result is indexed like `vectors`, not like `order`.
pub fn ca_sequential(
    name: &str,
    vectors: &[&Tensor],
    granularity: Granularity,
    order: &[usize],
    fill: FillMode,
) -> Result<Vec<BitMask>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(
            "conflict-aware pruning needs at least two task vectors".into(),
        ));
    }
    check_order(order, vectors.len())?;
    for v in &vectors[1..] {
        v.check_same_shape(vectors[0], name)?;
    }
    if vectors[0].is_empty() {
        return Err(Error::InvalidArgument(format!("tensor `{name}` is empty")));
    }
    match granularity {
        Granularity::Blocks { n, m } => crate::pruning::check_nm(n, m)?,
        Granularity::Layer { keep_fraction } | Granularity::Row { keep_fraction } => check_keep(keep_fraction)?,
    }

    let len = vectors[0].len();
    let shape = vectors[0].shape();
    let mut claimed = BitMask::zeros(len);
    let mut masks = vec![BitMask::zeros(len); vectors.len()];
    for (rank, &idx) in order.iter().enumerate() {
        let mask = prune_excluding_ranked(
            vectors[idx].data(),
            shape,
            granularity,
            &claimed,
            fill,
            rank,
            order.len(),
        );
        claimed.or_assign(&mask);
        masks[idx] = mask;
    }
    Ok(masks)
}

/// Same as [`ca_sequential`]; kept as the multi-vector entry point.
pub fn ca_multi(
    name: &str,
    vectors: &[&Tensor],
    granularity: Granularity,
    order: &[usize],
    fill: FillMode,
) -> Result<Vec<BitMask>> {
    ca_sequential(name, vectors, granularity, order, fill)
}

/// Random mask with a prescribed overlap rate against `mask_a`.
///
/// Keeps `keep_count(keep_fraction, N)` positions, of which
/// `round(target * |A|)` lie inside `mask_a` and the rest outside, each
/// chosen uniformly at random.
pub fn make_mask_with_target_overlap(
    mask_a: &BitMask,
    keep_fraction: f64,
    target_overlap_rate: f64,
    seed: u64,
) -> Result<BitMask> {
    check_keep(keep_fraction)?;
    if !(0.0..=1.0).contains(&target_overlap_rate) {
        return Err(Error::InvalidArgument(format!(
            "target overlap {target_overlap_rate} must be in [0, 1]"
        )));
    }
    let total = mask_a.len();
    let kept_a = mask_a.count_ones();
    let kept_b = crate::pruning::keep_count(keep_fraction, total);
    let shared = (target_overlap_rate * kept_a as f64).round() as usize;
    if shared > kept_a || shared > kept_b || kept_b - shared > total - kept_a {
        return Err(Error::InvalidArgument(format!(
            "overlap {target_overlap_rate} infeasible: |A|={kept_a}, |B|={kept_b}, N={total}"
        )));
    }
    let rng = CounterRng::new(seed, 0x006f_7665_726c_6170); // "overlap"
    let inside: Vec<usize> = mask_a.iter_ones().collect();
    let outside: Vec<usize> = mask_a.not().iter_ones().collect();
    let mut mask = BitMask::zeros(total);
    let mut counter = 0u64;
    for (pool, count) in [(inside, shared), (outside, kept_b - shared)] {
        for i in sample_without_replacement(pool, count, &rng, &mut counter) {
            mask.set(i, true);
        }
    }
    Ok(mask)
}

// Partial Fisher-Yates.
fn sample_without_replacement(mut pool: Vec<usize>, count: usize, rng: &CounterRng, counter: &mut u64) -> Vec<usize> {
    for i in 0..count {
        let j = i + rng.below_at(*counter, (pool.len() - i) as u64) as usize;
        *counter += 1;
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
