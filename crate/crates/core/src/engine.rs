//! Runs a [`MergeRecipe`] end to end.
//!
//! Tensors are processed in name order, a batch at a time: each batch is
//! computed in parallel and then written sequentially, so the output is the
//! same at any thread count and only a batch of tensors is resident at once.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::OverlapReport;
use crate::bitmask::BitMask;
use crate::checkpoint::{encode_f32, Checkpoint, CheckpointWriter, Dtype, OutputSpec, TensorMeta};
use crate::conflict::{ca_sequential, FillMode};
use crate::error::{Error, Result};
use crate::pruning::{prune_balanced_nm, prune_random, select_top, ties_trim_and_elect, Granularity};
use crate::recipe::{MergeRecipe, Method};
use crate::taskvec::{check_alignment, delta_tensor, rescale_factor, MergeTerm};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub name: String,
    pub numel: usize,
    /// Realized keep fraction of each vector's mask.
    pub keep_fractions: Vec<f64>,
    /// `overlap[i][j]` = overlap rate of vector i against vector j; `None`
    /// when vector i keeps nothing.
    pub overlap: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub vectors: Vec<String>,
    pub lambdas: Vec<f32>,
    pub rescale_factor: Option<f32>,
    pub output: PathBuf,
    pub tensors: Vec<TensorReport>,
    /// Popcount-weighted overlap across all merged tensors.
    pub overlap: Vec<Vec<Option<f64>>>,
    /// Realized keep fraction per vector across all merged tensors.
    pub keep_fractions: Vec<f64>,
    pub wall_time_secs: f64,
}

/// Masks for one tensor under the recipe's method. `deltas` are in recipe
/// order; so are the returned masks.
pub fn masks_for_tensor(recipe: &MergeRecipe, name: &str, deltas: &[&Tensor]) -> Result<Vec<BitMask>> {
    let len = deltas[0].len();
    let shape = deltas[0].shape();
    if len == 0 {
        return Ok(vec![BitMask::zeros(0); deltas.len()]);
    }
    let keep = recipe.keep_fraction.unwrap_or(1.0);
    let nm = || (recipe.n.unwrap_or(1), recipe.m.unwrap_or(1));
    let independent =
        |g: Granularity| -> Vec<BitMask> { deltas.iter().map(|d| select_top(d.data(), shape, g)).collect() };
    Ok(match recipe.method {
        Method::TaskArithmetic => vec![BitMask::ones(len); deltas.len()],
        Method::Dare => {
            let seed = recipe
                .seed
                .ok_or_else(|| Error::InvalidArgument("dare requires a seed".into()))?;
            recipe
                .vectors
                .iter()
                .map(|v| prune_random(len, keep, seed, &format!("{}/{name}", v.name)))
                .collect::<Result<_>>()?
        }
        Method::MagnitudeLayer => independent(Granularity::Layer { keep_fraction: keep }),
        Method::MagnitudeRow => independent(Granularity::Row { keep_fraction: keep }),
        Method::Ties => ties_trim_and_elect(name, deltas, keep)?,
        Method::BsOnly => {
            let (n, m) = nm();
            deltas
                .iter()
                .map(|d| prune_balanced_nm(d.data(), shape, n, m))
                .collect::<Result<_>>()?
        }
        Method::Cabs | Method::CaOnly => {
            let g = match recipe.method {
                Method::Cabs => {
                    let (n, m) = nm();
                    Granularity::Blocks { n, m }
                }
                _ => Granularity::Layer { keep_fraction: keep },
            };
            if deltas.len() == 1 {
                independent(g)
            } else {
                ca_sequential(name, deltas, g, &recipe.order_indices()?, recipe.fill)?
            }
        }
    })
}

struct Computed {
    bytes: Vec<u8>,
    report: Option<TensorReport>,
    counts: Option<PairCounts>,
    artifacts: Vec<(Vec<u8>, Vec<u8>)>,
}

/// Raw counts behind the overlap matrix, summed across tensors.
#[derive(Debug, Clone)]
struct PairCounts {
    kept: Vec<usize>,
    shared: Vec<Vec<usize>>,
    numel: usize,
}

fn overlap_matrix(counts: &PairCounts) -> Vec<Vec<Option<f64>>> {
    let k = counts.kept.len();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    OverlapReport::from_counts(counts.shared[i][j], counts.kept[i], counts.kept[j])
                        .ok()
                        .map(|r| r.rate)
                })
                .collect()
        })
        .collect()
}

struct Inputs {
    base: Checkpoint,
    vectors: Vec<Checkpoint>,
}

fn open_inputs(recipe: &MergeRecipe) -> Result<Inputs> {
    let base = Checkpoint::open(&recipe.base)?;
    let vectors = recipe
        .vectors
        .iter()
        .map(|v| {
            let ft = Checkpoint::open(&v.path)?;
            check_alignment(&base, &ft)?;
            Ok(ft)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Inputs { base, vectors })
}

/// Output tensor layout: the base's tensors in name order.
pub fn output_layout(base: &Checkpoint) -> Vec<TensorMeta> {
    let mut metas = base.metas().to_vec();
    metas.sort_by(|a, b| a.name.cmp(&b.name));
    metas
}

fn compute_tensor(
    recipe: &MergeRecipe,
    inputs: &Inputs,
    meta: &TensorMeta,
    lambdas: &[f32],
    factor: Option<f32>,
    want_artifacts: bool,
) -> Result<Computed> {
    let name = &meta.name;
    if !meta.dtype.is_float() {
        return Ok(Computed {
            bytes: inputs.base.raw(name)?.to_vec(),
            report: None,
            counts: None,
            artifacts: Vec::new(),
        });
    }
    let base = inputs.base.read_tensor(name)?;
    let deltas = inputs
        .vectors
        .iter()
        .map(|ft| delta_tensor(name, &ft.read_tensor(name)?, &base))
        .collect::<Result<Vec<_>>>()?;
    let delta_refs: Vec<&Tensor> = deltas.iter().collect();
    let masks = masks_for_tensor(recipe, name, &delta_refs)?;

    let scaled: Vec<Tensor>;
    let effective: Vec<&Tensor> = match factor {
        Some(f) if f != 1.0 => {
            scaled = deltas
                .iter()
                .map(|d| Tensor::new(d.shape().to_vec(), d.data().iter().map(|v| v * f).collect()))
                .collect();
            scaled.iter().collect()
        }
        _ => delta_refs.clone(),
    };
    let terms: Vec<MergeTerm<'_>> = effective
        .iter()
        .zip(&masks)
        .zip(lambdas)
        .map(|((d, m), &lambda)| MergeTerm {
            delta: d,
            mask: m,
            lambda,
        })
        .collect();
    let merged = if base.is_empty() {
        Vec::new()
    } else {
        crate::taskvec::merge_tensor(name, &base, &terms)?
    };
    let bytes = encode_f32(&meta.dtype, &merged).expect("float dtype");

    let k = masks.len();
    let kept: Vec<usize> = masks.iter().map(BitMask::count_ones).collect();
    let shared: Vec<Vec<usize>> = (0..k)
        .map(|i| (0..k).map(|j| masks[i].count_and(&masks[j])).collect())
        .collect();
    let counts = PairCounts {
        kept,
        shared,
        numel: base.len(),
    };
    let report = TensorReport {
        name: name.clone(),
        numel: base.len(),
        keep_fractions: counts
            .kept
            .iter()
            .map(|&c| {
                if counts.numel == 0 {
                    0.0
                } else {
                    c as f64 / counts.numel as f64
                }
            })
            .collect(),
        overlap: overlap_matrix(&counts),
    };

    let artifacts = if want_artifacts {
        effective
            .iter()
            .zip(&masks)
            .map(|(d, m)| {
                let mask_bytes: Vec<u8> = (0..m.len()).map(|i| m.get(i) as u8).collect();
                let masked: Vec<f32> = d
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if m.get(i) { v } else { 0.0 })
                    .collect();
                (mask_bytes, encode_f32(&Dtype::F32, &masked).expect("f32"))
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(Computed {
        bytes,
        report: Some(report),
        counts: Some(counts),
        artifacts,
    })
}

struct ArtifactWriters {
    masks: Vec<CheckpointWriter>,
    deltas: Vec<CheckpointWriter>,
}

fn artifact_writers(recipe: &MergeRecipe, dir: &Path, layout: &[TensorMeta]) -> Result<ArtifactWriters> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let float: Vec<&TensorMeta> = layout.iter().filter(|m| m.dtype.is_float()).collect();
    let specs = |dtype: Dtype| -> Vec<OutputSpec> {
        float
            .iter()
            .map(|m| OutputSpec {
                name: m.name.clone(),
                dtype: dtype.clone(),
                shape: m.shape.clone(),
            })
            .collect()
    };
    let bool_dtype = Dtype::parse("BOOL")?;
    let mut masks = Vec::new();
    let mut deltas = Vec::new();
    for v in &recipe.vectors {
        masks.push(CheckpointWriter::create(
            dir.join(format!("{}.mask.safetensors", v.name)),
            &[],
            specs(bool_dtype.clone()),
        )?);
        deltas.push(CheckpointWriter::create(
            dir.join(format!("{}.delta.safetensors", v.name)),
            &[],
            specs(Dtype::F32),
        )?);
    }
    Ok(ArtifactWriters { masks, deltas })
}

/// Validate, merge, write the output checkpoint, and report.
pub fn run_recipe(recipe: &MergeRecipe) -> Result<RunReport> {
    let start = Instant::now();
    let violations = recipe.validate();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let lambdas = recipe.coefficients().resolve(recipe.vectors.len())?;
    execute(recipe, lambdas, start)
}

/// Like [`run_recipe`], but with explicit coefficients that replace the
/// recipe's own. Zero is accepted here (the vector then contributes
/// nothing), which lets a λ sweep include the base model itself.
pub fn run_with_lambdas(recipe: &MergeRecipe, lambdas: &[f64]) -> Result<RunReport> {
    let start = Instant::now();
    let mut probe = recipe.clone();
    probe.unified_lambda = Some(1.0);
    let mut violations = probe.validate();
    if lambdas.len() != recipe.vectors.len() {
        violations.push(format!(
            "{} coefficients for {} vectors",
            lambdas.len(),
            recipe.vectors.len()
        ));
    }
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        violations.push(format!("lambda = {l} must be finite and >= 0"));
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    execute(recipe, lambdas.iter().map(|&l| l as f32).collect(), start)
}

fn execute(recipe: &MergeRecipe, lambdas: Vec<f32>, start: Instant) -> Result<RunReport> {
    let factor = if recipe.rescale_enabled() {
        Some(rescale_factor(recipe.nominal_keep())?)
    } else {
        None
    };
    let inputs = open_inputs(recipe)?;
    let layout = output_layout(&inputs.base);
    let specs: Vec<OutputSpec> = layout
        .iter()
        .map(|m| OutputSpec {
            name: m.name.clone(),
            dtype: m.dtype.clone(),
            shape: m.shape.clone(),
        })
        .collect();
    info!(
        "merging {} task vectors into {} tensors with {:?}",
        recipe.vectors.len(),
        layout.len(),
        recipe.method
    );

    let mut writer = CheckpointWriter::create(&recipe.output, inputs.base.metadata(), specs)?;
    let mut artifacts = match &recipe.artifacts_dir {
        Some(dir) => Some(artifact_writers(recipe, dir, &layout)?),
        None => None,
    };

    let k = recipe.vectors.len();
    let mut totals = PairCounts {
        kept: vec![0; k],
        shared: vec![vec![0; k]; k],
        numel: 0,
    };
    let mut tensors = Vec::new();
    let batch = rayon::current_num_threads().max(1);
    for chunk in layout.chunks(batch) {
        let computed: Vec<Result<Computed>> = chunk
            .par_iter()
            .map(|meta| compute_tensor(recipe, &inputs, meta, &lambdas, factor, artifacts.is_some()))
            .collect();
        for (meta, c) in chunk.iter().zip(computed) {
            let c = c?;
            debug!("{}: {} bytes", meta.name, c.bytes.len());
            writer.write_next(&meta.name, &c.bytes)?;
            if let Some(w) = artifacts.as_mut() {
                for (i, (mask_bytes, delta_bytes)) in c.artifacts.iter().enumerate() {
                    w.masks[i].write_next(&meta.name, mask_bytes)?;
                    w.deltas[i].write_next(&meta.name, delta_bytes)?;
                }
            }
            if let Some(counts) = c.counts {
                totals.numel += counts.numel;
                for i in 0..k {
                    totals.kept[i] += counts.kept[i];
                    for j in 0..k {
                        totals.shared[i][j] += counts.shared[i][j];
                    }
                }
            }
            tensors.extend(c.report);
        }
    }
    writer.finish()?;
    if let Some(w) = artifacts {
        for wr in w.masks.into_iter().chain(w.deltas) {
            wr.finish()?;
        }
    }

    let report = RunReport {
        method: recipe.method,
        vectors: recipe.vectors.iter().map(|v| v.name.clone()).collect(),
        lambdas,
        rescale_factor: factor,
        output: recipe.output.clone(),
        tensors,
        overlap: overlap_matrix(&totals),
        keep_fractions: totals
            .kept
            .iter()
            .map(|&c| {
                if totals.numel == 0 {
                    0.0
                } else {
                    c as f64 / totals.numel as f64
                }
            })
            .collect(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(path) = &recipe.report {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Human-readable plan for a dry run; touches only headers.
pub fn plan(recipe: &MergeRecipe) -> Result<serde_json::Value> {
    let violations = recipe.validate_with_inputs();
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let base = Checkpoint::open(&recipe.base)?;
    let layout = output_layout(&base);
    let float = layout.iter().filter(|m| m.dtype.is_float()).count();
    Ok(serde_json::json!({
        "method": recipe.method,
        "vectors": recipe.vectors.iter().map(|v| &v.name).collect::<Vec<_>>(),
        "lambdas": recipe.coefficients().resolve(recipe.vectors.len())?,
        "rescale": recipe.rescale_enabled(),
        "nominal_keep_fraction": recipe.nominal_keep(),
        "order": recipe.order_indices()?,
        "fill": match recipe.fill { FillMode::PerBlock => "per_block", FillMode::Global => "global" },
        "tensors": layout.len(),
        "merged_tensors": float,
        "copied_tensors": layout.len() - float,
        "output": recipe.output,
    }))
}
