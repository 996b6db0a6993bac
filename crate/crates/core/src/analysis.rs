//! Diagnostics over masks and masked task vectors: overlap rate, spatial
//! balance of retained weights, and orthogonality of merged deltas.

use serde::Serialize;

use crate::bitmask::BitMask;
use crate::error::{Error, Result};
use crate::pruning::check_keep;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapReport {
    /// `shared / kept_a`. Not symmetric in A and B.
    pub rate: f64,
    pub shared: usize,
    pub kept_a: usize,
    pub kept_b: usize,
}

pub fn overlap_rate(mask_a: &BitMask, mask_b: &BitMask) -> Result<OverlapReport> {
    if mask_a.len() != mask_b.len() {
        return Err(Error::InvalidArgument(format!(
            "masks have {} and {} bits",
            mask_a.len(),
            mask_b.len()
        )));
    }
    OverlapReport::from_counts(mask_a.count_and(mask_b), mask_a.count_ones(), mask_b.count_ones())
}

impl OverlapReport {
    pub fn from_counts(shared: usize, kept_a: usize, kept_b: usize) -> Result<Self> {
        if kept_a == 0 {
            return Err(Error::InvalidArgument("first mask keeps nothing".into()));
        }
        Ok(Self {
            rate: shared as f64 / kept_a as f64,
            shared,
            kept_a,
            kept_b,
        })
    }

    /// Popcount-weighted aggregate: the rate of the concatenated masks.
    pub fn aggregate<'a>(parts: impl IntoIterator<Item = &'a OverlapReport>) -> Result<Self> {
        let (mut shared, mut kept_a, mut kept_b) = (0, 0, 0);
        for p in parts {
            shared += p.shared;
            kept_a += p.kept_a;
            kept_b += p.kept_b;
        }
        Self::from_counts(shared, kept_a, kept_b)
    }
}

/// Expected overlap rate of A against an independent random mask B keeping
/// `keep_fraction_b` of entries.
pub fn expected_random_overlap(keep_fraction_b: f64) -> Result<f64> {
    check_keep(keep_fraction_b)?;
    Ok(keep_fraction_b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub band_rows: usize,
    pub band_cols: usize,
    /// Retained-weight count per cell, row-major over cells.
    pub grid: Vec<Vec<usize>>,
    pub mean: f64,
    pub variance: f64,
    /// Coefficient of variation (population std / mean); 0 when the mean is 0.
    pub cv: f64,
}

impl BalanceReport {
    pub fn total(&self) -> usize {
        self.grid.iter().flatten().sum()
    }

    /// One line per band row, comma-separated counts.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.grid {
            let line: Vec<String> = row.iter().map(usize::to_string).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Count retained weights in `band_rows x band_cols` cells of a 2-D mask.
/// Edge cells are smaller when the bands do not divide the shape.
pub fn balance_grid(
    mask: &BitMask,
    rows: usize,
    cols: usize,
    band_rows: usize,
    band_cols: usize,
) -> Result<BalanceReport> {
    if rows * cols != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "{rows}x{cols} does not match a mask of {} bits",
            mask.len()
        )));
    }
    if band_rows == 0 || band_cols == 0 {
        return Err(Error::InvalidArgument("band sizes must be at least 1".into()));
    }
    if band_rows > rows || band_cols > cols {
        return Err(Error::InvalidArgument(format!(
            "band {band_rows}x{band_cols} larger than tensor {rows}x{cols}"
        )));
    }
    let (grid_rows, grid_cols) = (rows.div_ceil(band_rows), cols.div_ceil(band_cols));
    let mut grid = vec![vec![0usize; grid_cols]; grid_rows];
    for i in mask.iter_ones() {
        grid[(i / cols) / band_rows][(i % cols) / band_cols] += 1;
    }
    let cells: Vec<f64> = grid.iter().flatten().map(|&c| c as f64).collect();
    let mean = cells.iter().sum::<f64>() / cells.len() as f64;
    let variance = cells.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / cells.len() as f64;
    let cv = if mean > 0.0 { variance.sqrt() / mean } else { 0.0 };
    Ok(BalanceReport {
        band_rows,
        band_cols,
        grid,
        mean,
        variance,
        cv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthoReport {
    /// `⟨τ'_i, τ'_j⟩_F` for every pair `i < j`, as `(i, j, value)`.
    pub inner_products: Vec<(usize, usize, f64)>,
    /// `‖λ_i τ'_i‖²_F` per vector.
    pub scaled_norms_sq: Vec<f64>,
    /// `‖Σ λ_i τ'_i‖²_F`, with the sum formed in F32 as the merge does.
    pub merged_norm_sq: f64,
    /// Merged norm minus the per-vector norms minus the cross terms.
    pub residual: f64,
    /// `|residual| / merged_norm_sq` (0 when the merged norm is 0).
    pub relative_residual: f64,
}

impl OrthoReport {
    pub fn all_orthogonal(&self) -> bool {
        self.inner_products.iter().all(|&(_, _, v)| v == 0.0)
    }

    /// Combine per-tensor reports into one over the concatenated tensors.
    pub fn accumulate<'a>(parts: impl IntoIterator<Item = &'a OrthoReport>) -> Option<OrthoReport> {
        let mut iter = parts.into_iter();
        let mut total = iter.next()?.clone();
        for p in iter {
            for (acc, x) in total.inner_products.iter_mut().zip(&p.inner_products) {
                acc.2 += x.2;
            }
            for (acc, x) in total.scaled_norms_sq.iter_mut().zip(&p.scaled_norms_sq) {
                *acc += x;
            }
            total.merged_norm_sq += p.merged_norm_sq;
            total.residual += p.residual;
        }
        total.relative_residual = if total.merged_norm_sq > 0.0 {
            total.residual.abs() / total.merged_norm_sq
        } else {
            total.residual.abs()
        };
        Some(total)
    }
}

/// Inner products and norm decomposition of masked task vectors.
///
/// Each product term is formed in F32 and accumulated in F64, so a pair with
/// disjoint supports yields exactly `0.0`.
pub fn ortho_check(vectors: &[&Tensor], lambdas: &[f32]) -> Result<OrthoReport> {
    if vectors.len() < 2 {
        return Err(Error::InvalidArgument(
            "orthogonality check needs at least two vectors".into(),
        ));
    }
    if lambdas.len() != vectors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coefficients for {} vectors",
            lambdas.len(),
            vectors.len()
        )));
    }
    for v in &vectors[1..] {
        v.check_same_shape(vectors[0], "<ortho>")?;
    }
    let k = vectors.len();
    let mut inner_products = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            inner_products.push((i, j, dot(vectors[i].data(), vectors[j].data())));
        }
    }
    let scaled: Vec<Vec<f32>> = vectors
        .iter()
        .zip(lambdas)
        .map(|(v, &l)| v.data().iter().map(|x| l * x).collect())
        .collect();
    let scaled_norms_sq: Vec<f64> = scaled.iter().map(|s| dot(s, s)).collect();
    let mut merged = vec![0f32; vectors[0].len()];
    for s in &scaled {
        for (acc, x) in merged.iter_mut().zip(s) {
            *acc += x;
        }
    }
    let merged_norm_sq = dot(&merged, &merged);
    let cross: f64 = inner_products
        .iter()
        .map(|&(i, j, v)| 2.0 * lambdas[i] as f64 * lambdas[j] as f64 * v)
        .sum();
    let residual = merged_norm_sq - scaled_norms_sq.iter().sum::<f64>() - cross;
    let relative_residual = if merged_norm_sq > 0.0 {
        residual.abs() / merged_norm_sq
    } else {
        residual.abs()
    };
    Ok(OrthoReport {
        inner_products,
        scaled_norms_sq,
        merged_norm_sq,
        residual,
        relative_residual,
    })
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y) as f64).sum()
}

/// Mask of the non-zero entries of a tensor.
pub fn nonzero_mask(tensor: &Tensor) -> BitMask {
    let mut mask = BitMask::zeros(tensor.len());
    for (i, v) in tensor.data().iter().enumerate() {
        if *v != 0.0 {
            mask.set(i, true);
        }
    }
    mask
}
