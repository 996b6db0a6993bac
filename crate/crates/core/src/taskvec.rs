//! Task vectors, masks, and the merge sum.
//!
//! Whole-model types ([`TaskVector`], [`SparsityMask`]) are thin maps over the
//! per-tensor functions, which are what the streaming merge engine calls.

use std::collections::BTreeMap;

use crate::bitmask::BitMask;
use crate::checkpoint::{Body, Checkpoint, TensorData};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-tensor deltas between a fine-tuned model and its base, in F32.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub entries: BTreeMap<String, Tensor>,
    pub fine_tuned: String,
    pub base: String,
}

impl TaskVector {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }
}

/// One bit per tensor element, row-major, keyed by tensor name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityMask {
    pub entries: BTreeMap<String, BitMask>,
}

impl SparsityMask {
    pub fn full_for(tv: &TaskVector) -> Self {
        Self {
            entries: tv
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), BitMask::ones(t.len())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&BitMask> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn count_ones(&self) -> usize {
        self.entries.values().map(BitMask::count_ones).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BitMask::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-vector λ, or one λ shared by every vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalingCoefficients {
    PerVector(Vec<f32>),
    Unified(f32),
}

impl ScalingCoefficients {
    /// λ for each of `count` vectors.
    pub fn resolve(&self, count: usize) -> Result<Vec<f32>> {
        let lambdas = match self {
            ScalingCoefficients::Unified(l) => vec![*l; count],
            ScalingCoefficients::PerVector(ls) => {
                if ls.len() != count {
                    return Err(Error::InvalidArgument(format!(
                        "{} coefficients for {count} task vectors",
                        ls.len()
                    )));
                }
                ls.clone()
            }
        };
        if let Some(bad) = lambdas.iter().find(|l| **l <= 0.0 || !l.is_finite()) {
            return Err(Error::InvalidArgument(format!("scaling coefficient {bad} must be > 0")));
        }
        Ok(lambdas)
    }
}

/// `fine_tuned - base` for one tensor.
pub fn delta_tensor(name: &str, fine_tuned: &Tensor, base: &Tensor) -> Result<Tensor> {
    fine_tuned.check_same_shape(base, name)?;
    let data = fine_tuned.data().iter().zip(base.data()).map(|(f, b)| f - b).collect();
    Ok(Tensor::new(base.shape().to_vec(), data))
}

/// Check that `fine_tuned` has the same floating tensors as `base`, with the
/// same shapes and dtypes.
pub fn check_alignment(base: &Checkpoint, fine_tuned: &Checkpoint) -> Result<()> {
    for meta in base.metas().iter().filter(|m| m.dtype.is_float()) {
        let other = fine_tuned
            .meta(&meta.name)
            .map_err(|_| Error::MissingTensor(meta.name.clone()))?;
        if other.dtype != meta.dtype {
            return Err(Error::DtypeMismatch {
                name: meta.name.clone(),
                left: other.dtype.to_string(),
                right: meta.dtype.to_string(),
            });
        }
        if other.shape != meta.shape {
            return Err(Error::shape(
                &meta.name,
                format!("shape {:?} does not match base {:?}", other.shape, meta.shape),
            ));
        }
    }
    for meta in fine_tuned.metas().iter().filter(|m| m.dtype.is_float()) {
        if !base.contains(&meta.name) {
            return Err(Error::MissingTensor(meta.name.clone()));
        }
    }
    Ok(())
}

/// Task vector of every floating tensor in `base`.
pub fn delta(fine_tuned: &Checkpoint, base: &Checkpoint) -> Result<TaskVector> {
    check_alignment(base, fine_tuned)?;
    let mut entries = BTreeMap::new();
    for meta in base.metas().iter().filter(|m| m.dtype.is_float()) {
        let b = base.read_tensor(&meta.name)?;
        let f = fine_tuned.read_tensor(&meta.name)?;
        entries.insert(meta.name.clone(), delta_tensor(&meta.name, &f, &b)?);
    }
    let label = |c: &Checkpoint| {
        c.path()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<memory>".into())
    };
    Ok(TaskVector {
        entries,
        fine_tuned: label(fine_tuned),
        base: label(base),
    })
}

pub fn apply_mask_tensor(tensor: &Tensor, mask: &BitMask) -> Result<Tensor> {
    check_mask_len("<tensor>", tensor, mask)?;
    let data = tensor
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.get(i) { v } else { 0.0 })
        .collect();
    Ok(Tensor::new(tensor.shape().to_vec(), data))
}

pub fn apply_mask(tv: &TaskVector, mask: &SparsityMask) -> Result<TaskVector> {
    if tv.entries.len() != mask.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "mask covers {} tensors, task vector has {}",
            mask.entries.len(),
            tv.entries.len()
        )));
    }
    let mut entries = BTreeMap::new();
    for (name, t) in &tv.entries {
        let bits = mask.get(name)?;
        check_mask_len(name, t, bits)?;
        entries.insert(name.clone(), apply_mask_tensor(t, bits)?);
    }
    Ok(TaskVector {
        entries,
        fine_tuned: tv.fine_tuned.clone(),
        base: tv.base.clone(),
    })
}

/// Multiplier applied to retained entries: `1 / keep_fraction`.
pub fn rescale_factor(keep_fraction: f64) -> Result<f32> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep fraction {keep_fraction} must be in (0, 1]"
        )));
    }
    Ok((1.0 / keep_fraction) as f32)
}

pub fn rescale_tensor(tensor: &Tensor, keep_fraction: f64) -> Result<Tensor> {
    let factor = rescale_factor(keep_fraction)?;
    let data = tensor.data().iter().map(|v| v * factor).collect();
    Ok(Tensor::new(tensor.shape().to_vec(), data))
}

pub fn rescale(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    let mut entries = BTreeMap::new();
    for (name, t) in &tv.entries {
        entries.insert(name.clone(), rescale_tensor(t, keep_fraction)?);
    }
    Ok(TaskVector {
        entries,
        fine_tuned: tv.fine_tuned.clone(),
        base: tv.base.clone(),
    })
}

/// One term of the merge sum.
#[derive(Debug, Clone, Copy)]
pub struct MergeTerm<'a> {
    pub delta: &'a Tensor,
    pub mask: &'a BitMask,
    pub lambda: f32,
}

/// `base + λ₁·(m₁⊙τ₁) + λ₂·(m₂⊙τ₂) + ...`, accumulated left to right in F32.
pub fn merge_tensor(name: &str, base: &Tensor, terms: &[MergeTerm<'_>]) -> Result<Vec<f32>> {
    if terms.is_empty() {
        return Err(Error::InvalidArgument("merge needs at least one task vector".into()));
    }
    for term in terms {
        term.delta.check_same_shape(base, name)?;
        check_mask_len(name, term.delta, term.mask)?;
    }
    let mut out = base.data().to_vec();
    for term in terms {
        let delta = term.delta.data();
        for (i, acc) in out.iter_mut().enumerate() {
            let masked = if term.mask.get(i) { delta[i] } else { 0.0 };
            *acc += term.lambda * masked;
        }
    }
    Ok(out)
}

/// Merge whole task vectors into `base`. Non-floating tensors are copied.
pub fn merge(
    base: &Checkpoint,
    vectors: &[(&TaskVector, &SparsityMask)],
    lambdas: &ScalingCoefficients,
) -> Result<Vec<TensorData>> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("merge needs at least one task vector".into()));
    }
    let lambdas = lambdas.resolve(vectors.len())?;
    let mut out = Vec::with_capacity(base.metas().len());
    for meta in base.metas() {
        let body = if meta.dtype.is_float() {
            let b = base.read_tensor(&meta.name)?;
            let terms = vectors
                .iter()
                .zip(&lambdas)
                .map(|((tv, mask), &lambda)| {
                    Ok(MergeTerm {
                        delta: tv.get(&meta.name)?,
                        mask: mask.get(&meta.name)?,
                        lambda,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Body::F32(merge_tensor(&meta.name, &b, &terms)?)
        } else {
            Body::Raw(base.raw(&meta.name)?.to_vec())
        };
        out.push(TensorData {
            name: meta.name.clone(),
            dtype: meta.dtype.clone(),
            shape: meta.shape.clone(),
            body,
        });
    }
    Ok(out)
}

fn check_mask_len(name: &str, tensor: &Tensor, mask: &BitMask) -> Result<()> {
    if mask.len() != tensor.len() {
        return Err(Error::shape(
            name,
            format!("mask has {} bits for {} elements", mask.len(), tensor.len()),
        ));
    }
    Ok(())
}
