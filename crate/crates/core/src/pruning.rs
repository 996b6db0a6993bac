//! Mask generation for task-vector tensors.
//!
//! Magnitude is always `|delta|`. Ties are broken toward the lower flat index,
//! everywhere, so every mask is a pure function of its inputs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{row_len, Tensor};

/// How a mask is produced for one task vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum PruneSpec {
    MagnitudeLayer { keep_fraction: f64 },
    MagnitudeRow { keep_fraction: f64 },
    Random { keep_fraction: f64, seed: u64 },
    BalancedNm { n: usize, m: usize },
    TiesTrim { keep_fraction: f64 },
}

impl PruneSpec {
    /// Nominal fraction of entries kept.
    pub fn keep_fraction(&self) -> f64 {
        match *self {
            PruneSpec::MagnitudeLayer { keep_fraction }
            | PruneSpec::MagnitudeRow { keep_fraction }
            | PruneSpec::Random { keep_fraction, .. }
            | PruneSpec::TiesTrim { keep_fraction } => keep_fraction,
            PruneSpec::BalancedNm { n, m } => n as f64 / m as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PruneSpec::BalancedNm { n, m } => check_nm(n, m),
            _ => check_keep(self.keep_fraction()),
        }
    }

    /// Group structure for magnitude-family methods; `None` for random.
    pub fn granularity(&self) -> Option<Granularity> {
        match *self {
            PruneSpec::MagnitudeLayer { keep_fraction } | PruneSpec::TiesTrim { keep_fraction } => {
                Some(Granularity::Layer { keep_fraction })
            }
            PruneSpec::MagnitudeRow { keep_fraction } => Some(Granularity::Row { keep_fraction }),
            PruneSpec::BalancedNm { n, m } => Some(Granularity::Blocks { n, m }),
            PruneSpec::Random { .. } => None,
        }
    }

    /// Mask for a single tensor. TIES trimming is the layer-wise magnitude
    /// mask here; sign election needs every vector, see [`ties_trim_and_elect`].
    pub fn mask(&self, name: &str, tensor: &Tensor) -> Result<BitMask> {
        self.validate()?;
        match *self {
            PruneSpec::Random { keep_fraction, seed } => prune_random(tensor.len(), keep_fraction, seed, name),
            _ => {
                let g = self.granularity().expect("magnitude family");
                if tensor.is_empty() {
                    return Err(Error::InvalidArgument(format!("tensor `{name}` is empty")));
                }
                Ok(select_top(tensor.data(), tensor.shape(), g))
            }
        }
    }
}

/// Partition of a tensor into groups, each with its own keep quota.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Granularity {
    /// One group: the whole tensor.
    Layer { keep_fraction: f64 },
    /// One group per row of the last axis.
    Row { keep_fraction: f64 },
    /// Blocks of `m` consecutive elements along each row; a shorter tail
    /// block at the end of a row keeps `round_half_even(t*n/m)`.
    Blocks { n: usize, m: usize },
}

impl Granularity {
    /// Call `f(start, len, quota)` for each group, in flat order.
    pub fn for_each_group(&self, shape: &[usize], mut f: impl FnMut(usize, usize, usize)) {
        let total: usize = shape.iter().product();
        if total == 0 {
            return;
        }
        match *self {
            Granularity::Layer { keep_fraction } => f(0, total, keep_count(keep_fraction, total)),
            Granularity::Row { keep_fraction } => {
                let row = row_len(shape);
                let quota = keep_count(keep_fraction, row);
                for start in (0..total).step_by(row) {
                    f(start, row, quota);
                }
            }
            Granularity::Blocks { n, m } => {
                let row = row_len(shape);
                for row_start in (0..total).step_by(row) {
                    for off in (0..row).step_by(m) {
                        let len = m.min(row - off);
                        let quota = if len == m { n } else { tail_quota(len, n, m) };
                        f(row_start + off, len, quota);
                    }
                }
            }
        }
    }
}

impl Granularity {
    /// Quota of a group of `len` elements for `share` vectors' worth of the
    /// keep fraction: `share = 1` is the ordinary per-vector quota.
    pub(crate) fn group_quota(&self, len: usize, share: usize) -> usize {
        match *self {
            Granularity::Layer { keep_fraction } | Granularity::Row { keep_fraction } => {
                keep_count((share as f64 * keep_fraction).min(1.0), len)
            }
            Granularity::Blocks { n, m } => tail_quota(len, share * n, m).min(len),
        }
    }

    /// Whether `count` vectors' quotas fit side by side in every group.
    pub(crate) fn fits(&self, count: usize) -> bool {
        match *self {
            Granularity::Layer { keep_fraction } | Granularity::Row { keep_fraction } => {
                count as f64 * keep_fraction <= 1.0 + 1e-9
            }
            Granularity::Blocks { n, m } => count * n <= m,
        }
    }
}

pub(crate) fn check_keep(keep_fraction: f64) -> Result<()> {
    if keep_fraction > 0.0 && keep_fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} must be in (0, 1]"
        )))
    }
}

pub(crate) fn check_nm(n: usize, m: usize) -> Result<()> {
    if n >= 1 && n <= m {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("n:m = {n}:{m} requires 1 <= n <= m")))
    }
}

/// `ceil(keep_fraction * len)`, where products within 1e-9 of an integer
/// count as that integer (so 0.7 * 10 keeps 7, not 8).
pub fn keep_count(keep_fraction: f64, len: usize) -> usize {
    let x = keep_fraction * len as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * r.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k as usize).min(len)
}

/// Entries kept in a tail block of `len < m` elements.
pub fn tail_quota(len: usize, n: usize, m: usize) -> usize {
    let num = len * n;
    let (q, r) = (num / m, num % m);
    match (2 * r).cmp(&m) {
        Ordering::Greater => q + 1,
        Ordering::Equal => q + (q & 1),
        Ordering::Less => q,
    }
}

/// Ordering for "more important first": larger |v|, then lower index.
#[inline]
pub(crate) fn by_magnitude(values: &[f32]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b))
}

/// Move the `k` most important candidates to the front of `candidates`.
pub(crate) fn partition_top(values: &[f32], candidates: &mut [usize], k: usize) {
    if k == 0 || k >= candidates.len() {
        return;
    }
    let cmp = by_magnitude(values);
    if candidates.len() <= 32 {
        candidates.sort_unstable_by(cmp);
    } else {
        candidates.select_nth_unstable_by(k - 1, cmp);
    }
}

/// Keep the top-|·| entries of each group.
pub fn select_top(values: &[f32], shape: &[usize], granularity: Granularity) -> BitMask {
    let mut mask = BitMask::zeros(values.len());
    let mut scratch = Vec::new();
    granularity.for_each_group(shape, |start, len, quota| {
        scratch.clear();
        scratch.extend(start..start + len);
        partition_top(values, &mut scratch, quota);
        for &i in &scratch[..quota] {
            mask.set(i, true);
        }
    });
    mask
}

pub fn prune_magnitude_layer(values: &[f32], keep_fraction: f64) -> Result<BitMask> {
    check_keep(keep_fraction)?;
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot prune an empty tensor".into()));
    }
    Ok(select_top(
        values,
        &[values.len()],
        Granularity::Layer { keep_fraction },
    ))
}

pub fn prune_magnitude_row(values: &[f32], shape: &[usize], keep_fraction: f64) -> Result<BitMask> {
    check_keep(keep_fraction)?;
    if values.is_empty() || row_len(shape) == 0 {
        return Err(Error::InvalidArgument("cannot prune an empty row".into()));
    }
    Ok(select_top(values, shape, Granularity::Row { keep_fraction }))
}

/// Each bit kept independently with probability `keep_fraction`, drawn from
/// a counter-based generator keyed by `(seed, tensor_name, index)`.
pub fn prune_random(len: usize, keep_fraction: f64, seed: u64, tensor_name: &str) -> Result<BitMask> {
    check_keep(keep_fraction)?;
    let rng = CounterRng::for_tensor(seed, tensor_name);
    let mut mask = BitMask::zeros(len);
    for i in 0..len {
        if rng.uniform_at(i as u64) < keep_fraction {
            mask.set(i, true);
        }
    }
    Ok(mask)
}

pub fn prune_balanced_nm(values: &[f32], shape: &[usize], n: usize, m: usize) -> Result<BitMask> {
    check_nm(n, m)?;
    Ok(select_top(values, shape, Granularity::Blocks { n, m }))
}

/// TIES trimming plus sign election for one tensor across task vectors.
///
/// Each vector is trimmed layer-wise; the elected sign at a position is the
/// sign of the sum of retained values there (a zero sum elects `+`), and
/// retained entries of the opposite sign are dropped.
pub fn ties_trim_and_elect(name: &str, vectors: &[&Tensor], keep_fraction: f64) -> Result<Vec<BitMask>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(
            "sign election needs at least two task vectors".into(),
        ));
    }
    for v in &vectors[1..] {
        v.check_same_shape(vectors[0], name)?;
    }
    let mut masks = vectors
        .iter()
        .map(|v| prune_magnitude_layer(v.data(), keep_fraction))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..vectors[0].len() {
        let sum: f64 = vectors
            .iter()
            .zip(&masks)
            .filter(|(_, m)| m.get(i))
            .map(|(v, _)| v.data()[i] as f64)
            .sum();
        let elected = if sum < 0.0 { -1.0 } else { 1.0 };
        for (v, mask) in vectors.iter().zip(masks.iter_mut()) {
            if mask.get(i) && (v.data()[i] as f64) * elected < 0.0 {
                mask.set(i, false);
            }
        }
    }
    Ok(masks)
}
