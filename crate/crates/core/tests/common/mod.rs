#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cabs_core::checkpoint::{write_checkpoint, Body, Dtype, TensorData};
use cabs_core::recipe::{MergeRecipe, Method, VectorEntry, RECIPE_VERSION};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("data")
}

pub fn normal(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Values on a 1/64 grid in [-4, 4): every sum and small-λ product of these
/// is exact in F32.
pub fn dyadic(rng: &mut StdRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-256i32..256) as f32 / 64.0).collect()
}

pub fn float_tensor(name: &str, shape: &[usize], values: Vec<f32>) -> TensorData {
    TensorData {
        name: name.to_string(),
        dtype: Dtype::F32,
        shape: shape.to_vec(),
        body: Body::F32(values),
    }
}

pub struct Family {
    pub dir: tempfile::TempDir,
    pub base: PathBuf,
    pub vectors: Vec<PathBuf>,
    pub shapes: Vec<(String, Vec<usize>)>,
}

/// Base model plus `k` fine-tuned models over the given float tensor shapes,
/// and one I64 tensor that must be copied through untouched.
pub fn family(seed: u64, k: usize, shapes: &[(&str, Vec<usize>)], exact: bool) -> Family {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let gen = |rng: &mut StdRng, n: usize| if exact { dyadic(rng, n) } else { normal(rng, n) };
    let ids = TensorData {
        name: "position_ids".into(),
        dtype: Dtype::I64,
        shape: vec![4],
        body: Body::Raw([3i64, 1, 4, 1].iter().flat_map(|v| v.to_le_bytes()).collect()),
    };
    let base: Vec<TensorData> = shapes
        .iter()
        .map(|(name, shape)| {
            let n = shape.iter().product();
            float_tensor(name, shape, gen(&mut rng, n))
        })
        .chain(std::iter::once(ids.clone()))
        .collect();
    let base_path = dir.path().join("base.safetensors");
    write_checkpoint(&base_path, &[("format".into(), "pt".into())], &base).unwrap();
    let mut vectors = Vec::new();
    for i in 0..k {
        let ft: Vec<TensorData> = base
            .iter()
            .map(|t| match &t.body {
                Body::F32(v) => {
                    let d = gen(&mut rng, v.len());
                    float_tensor(&t.name, &t.shape, v.iter().zip(d).map(|(b, d)| b + d / 4.0).collect())
                }
                Body::Raw(_) => t.clone(),
            })
            .collect();
        let p = dir.path().join(format!("ft{i}.safetensors"));
        write_checkpoint(&p, &[], &ft).unwrap();
        vectors.push(p);
    }
    Family {
        base: base_path,
        vectors,
        shapes: shapes.iter().map(|(n, s)| (n.to_string(), s.clone())).collect(),
        dir,
    }
}

pub fn recipe(fam: &Family, method: Method, lambdas: &[f64]) -> MergeRecipe {
    MergeRecipe {
        version: RECIPE_VERSION,
        base: fam.base.clone(),
        vectors: fam
            .vectors
            .iter()
            .zip(lambdas)
            .enumerate()
            .map(|(i, (p, &l))| VectorEntry {
                name: format!("v{i}"),
                path: p.clone(),
                lambda: Some(l),
            })
            .collect(),
        unified_lambda: None,
        method,
        keep_fraction: None,
        n: None,
        m: None,
        rescale: None,
        seed: None,
        order: None,
        fill: Default::default(),
        output: fam.dir.path().join("merged.safetensors"),
        artifacts_dir: None,
        report: None,
    }
}
