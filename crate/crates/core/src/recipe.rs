//! Merge recipes: a versioned JSON description of one merge.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::conflict::FillMode;
use crate::error::{Error, Result};
use crate::taskvec::{check_alignment, ScalingCoefficients};

pub const RECIPE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TaskArithmetic,
    Dare,
    MagnitudeLayer,
    MagnitudeRow,
    Ties,
    Cabs,
    CaOnly,
    BsOnly,
}

impl Method {
    fn needs_keep_fraction(self) -> bool {
        matches!(
            self,
            Method::Dare | Method::MagnitudeLayer | Method::MagnitudeRow | Method::Ties | Method::CaOnly
        )
    }

    fn needs_nm(self) -> bool {
        matches!(self, Method::Cabs | Method::BsOnly)
    }

    /// Whether retained entries are rescaled by `1 / keep` unless the recipe
    /// says otherwise.
    pub fn rescales_by_default(self) -> bool {
        self == Method::Dare
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorEntry {
    pub name: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub version: u32,
    pub base: PathBuf,
    pub vectors: Vec<VectorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unified_lambda: Option<f64>,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Defaults to on for `dare`, off otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Sparsification order by vector name; defaults to recipe order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
    #[serde(default)]
    pub fill: FillMode,
    pub output: PathBuf,
    /// Where to write per-vector masks and masked deltas, if anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts_dir: Option<PathBuf>,
    /// Where to write the run report JSON, if anywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl MergeRecipe {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Load a recipe file. Relative paths inside it are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut recipe = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            recipe.resolve_paths(dir);
        }
        Ok(recipe)
    }

    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.base);
        fix(&mut self.output);
        for v in &mut self.vectors {
            fix(&mut v.path);
        }
        if let Some(p) = self.artifacts_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.report.as_mut() {
            fix(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("recipe serializes")
    }

    /// Static checks. Reads no files.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != RECIPE_VERSION {
            v.push(format!(
                "unsupported recipe version {} (expected {RECIPE_VERSION})",
                self.version
            ));
        }
        if self.vectors.is_empty() {
            v.push("at least one task vector is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for e in &self.vectors {
            if e.name.is_empty() {
                v.push("task vector names must be non-empty".into());
            }
            if !names.insert(e.name.as_str()) {
                v.push(format!("duplicate task vector name `{}`", e.name));
            }
        }

        match self.unified_lambda {
            Some(l) => {
                if !(l > 0.0 && l.is_finite()) {
                    v.push(format!("unified_lambda = {l} must be > 0"));
                }
            }
            None => {
                for e in &self.vectors {
                    match e.lambda {
                        None => v.push(format!(
                            "vector `{}` has no lambda and no unified_lambda is set",
                            e.name
                        )),
                        Some(l) if !(l > 0.0 && l.is_finite()) => {
                            v.push(format!("vector `{}`: lambda = {l} must be > 0", e.name))
                        }
                        _ => {}
                    }
                }
            }
        }

        let method = self.method;
        match (method.needs_keep_fraction(), self.keep_fraction) {
            (true, None) => v.push(format!("method {method:?} requires keep_fraction")),
            (true, Some(k)) if !(k > 0.0 && k <= 1.0) => v.push(format!("keep_fraction = {k} must be in (0, 1]")),
            (false, Some(_)) => v.push(format!("method {method:?} does not take keep_fraction")),
            _ => {}
        }
        match (method.needs_nm(), self.n, self.m) {
            (true, Some(n), Some(m)) => {
                if n == 0 {
                    v.push("n must be at least 1".into());
                }
                if n > m {
                    v.push(format!("n = {n} exceeds m = {m}"));
                }
            }
            (true, _, _) => v.push(format!("method {method:?} requires both n and m")),
            (false, None, None) => {}
            (false, _, _) => v.push(format!("method {method:?} does not take n/m")),
        }
        if method == Method::Dare && self.seed.is_none() {
            v.push("method Dare requires a seed".into());
        }
        if method == Method::Ties && self.vectors.len() < 2 {
            v.push("method Ties requires at least two task vectors".into());
        }
        if let Some(order) = &self.order {
            if !matches!(method, Method::Cabs | Method::CaOnly) {
                v.push(format!("method {method:?} does not take an order"));
            }
            let mut sorted: Vec<&str> = order.iter().map(String::as_str).collect();
            sorted.sort_unstable();
            let mut want: Vec<&str> = self.vectors.iter().map(|e| e.name.as_str()).collect();
            want.sort_unstable();
            if sorted != want {
                v.push(format!("order {order:?} is not a permutation of the task vector names"));
            }
        }
        if self.output == self.base || self.vectors.iter().any(|e| e.path == self.output) {
            v.push("output must not overwrite an input checkpoint".into());
        }
        v
    }

    /// Static checks plus header-level checks of every input file.
    pub fn validate_with_inputs(&self) -> Vec<String> {
        let mut v = self.validate();
        let base = match Checkpoint::open(&self.base) {
            Ok(b) => b,
            Err(e) => {
                v.push(format!("base: {e}"));
                return v;
            }
        };
        for e in &self.vectors {
            match Checkpoint::open(&e.path) {
                Ok(ft) => {
                    if let Err(err) = check_alignment(&base, &ft) {
                        v.push(format!("vector `{}`: {err}", e.name));
                    }
                }
                Err(err) => v.push(format!("vector `{}`: {err}", e.name)),
            }
        }
        v
    }

    pub fn coefficients(&self) -> ScalingCoefficients {
        match self.unified_lambda {
            Some(l) => ScalingCoefficients::Unified(l as f32),
            None => {
                ScalingCoefficients::PerVector(self.vectors.iter().map(|e| e.lambda.unwrap_or(0.0) as f32).collect())
            }
        }
    }

    /// Vector indices in sparsification order.
    pub fn order_indices(&self) -> Result<Vec<usize>> {
        match &self.order {
            None => Ok((0..self.vectors.len()).collect()),
            Some(names) => names
                .iter()
                .map(|n| {
                    self.vectors
                        .iter()
                        .position(|e| &e.name == n)
                        .ok_or_else(|| Error::InvalidArgument(format!("order names unknown vector `{n}`")))
                })
                .collect(),
        }
    }

    /// Nominal keep fraction of each vector's mask.
    pub fn nominal_keep(&self) -> f64 {
        match self.method {
            Method::TaskArithmetic => 1.0,
            Method::Cabs | Method::BsOnly => match (self.n, self.m) {
                (Some(n), Some(m)) if m > 0 => n as f64 / m as f64,
                _ => 1.0,
            },
            _ => self.keep_fraction.unwrap_or(1.0),
        }
    }

    pub fn rescale_enabled(&self) -> bool {
        self.rescale.unwrap_or(self.method.rescales_by_default())
    }
}
