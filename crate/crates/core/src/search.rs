//! Two-step λ grid search: a coarse pass over the whole range, then a fine
//! pass around the coarse optimum. Scores come from an external evaluator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::run_with_lambdas;
use crate::error::{Error, Result};
use crate::recipe::MergeRecipe;

pub const SEARCH_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// One λ shared by every vector.
    #[default]
    Unified,
    /// One λ per vector; at most two vectors.
    PerVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RecipeSource {
    Path(PathBuf),
    Inline(Box<MergeRecipe>),
}

fn default_coarse() -> f64 {
    0.1
}
fn default_fine() -> f64 {
    0.01
}
fn default_range() -> [f64; 2] {
    [0.0, 3.0]
}
fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub version: u32,
    /// Recipe whose λ values are replaced at each grid point.
    pub recipe: RecipeSource,
    #[serde(default = "default_range")]
    pub range: [f64; 2],
    #[serde(default = "default_coarse")]
    pub coarse_step: f64,
    #[serde(default = "default_fine")]
    pub fine_step: f64,
    #[serde(default)]
    pub mode: SearchMode,
    /// Program and leading arguments; the checkpoint path is appended.
    pub evaluator: Vec<String>,
    /// Per-task objective weights; unlisted tasks weigh 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, f64>>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Keep intermediate merged checkpoints instead of deleting them.
    #[serde(default)]
    pub keep: bool,
    /// Score table CSV destination.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
    /// Directory for intermediate checkpoints; a temp dir when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
}

impl SearchSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SearchSpec = serde_json::from_str(&text)?;
        if let Some(dir) = path.parent() {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            match &mut spec.recipe {
                RecipeSource::Path(p) => fix(p),
                RecipeSource::Inline(r) => r.resolve_paths(dir),
            }
            if let Some(p) = spec.table.as_mut() {
                fix(p);
            }
            if let Some(p) = spec.workdir.as_mut() {
                fix(p);
            }
        }
        Ok(spec)
    }

    pub fn grid(&self) -> GridConfig {
        GridConfig {
            lo: self.range[0],
            hi: self.range[1],
            coarse_step: self.coarse_step,
            fine_step: self.fine_step,
            mode: self.mode,
            parallelism: self.parallelism,
            weights: self.weights.clone(),
        }
    }

    pub fn load_recipe(&self) -> Result<MergeRecipe> {
        match &self.recipe {
            RecipeSource::Path(p) => MergeRecipe::load(p),
            RecipeSource::Inline(r) => Ok((**r).clone()),
        }
    }
}

/// The numeric part of a search, independent of how scores are produced.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub coarse_step: f64,
    pub fine_step: f64,
    pub mode: SearchMode,
    pub parallelism: usize,
    pub weights: Option<BTreeMap<String, f64>>,
}

impl GridConfig {
    pub fn unified(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            coarse_step: 0.1,
            fine_step: 0.01,
            mode: SearchMode::Unified,
            parallelism: 1,
            weights: None,
        }
    }

    pub fn validate(&self, vectors: usize) -> Result<()> {
        let mut v = Vec::new();
        if self.lo.partial_cmp(&self.hi) != Some(std::cmp::Ordering::Less) {
            v.push(format!("range [{}, {}] must have lo < hi", self.lo, self.hi));
        }
        if self.lo.is_nan() || self.lo < 0.0 {
            v.push("range must be non-negative".into());
        }
        if !(self.coarse_step > 0.0 && self.fine_step > 0.0) {
            v.push("steps must be positive".into());
        }
        if self.fine_step > self.coarse_step {
            v.push(format!(
                "fine step {} exceeds coarse step {}",
                self.fine_step, self.coarse_step
            ));
        }
        if self.mode == SearchMode::PerVector && !(1..=2).contains(&vectors) {
            v.push(format!("per-vector mode supports at most 2 vectors, got {vectors}"));
        }
        if self.parallelism == 0 {
            v.push("parallelism must be at least 1".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub scores: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
}

impl EvalResult {
    pub fn new(scores: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let scores: BTreeMap<String, f64> = scores.into_iter().collect();
        if scores.is_empty() {
            return Err(Error::Evaluator("evaluator returned no scores".into()));
        }
        if let Some((task, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::Evaluator(format!("score for `{task}` is not finite: {s}")));
        }
        Ok(Self {
            scores,
            wall_time_secs: 0.0,
        })
    }

    pub fn objective(&self, weights: Option<&BTreeMap<String, f64>>) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (task, score) in &self.scores {
            let w = weights.and_then(|w| w.get(task)).copied().unwrap_or(1.0);
            num += w * score;
            den += w;
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Produces scores for a λ assignment (one value per vector, or one value in
/// unified mode).
pub trait Evaluate: Sync {
    fn evaluate(&self, lambdas: &[f64]) -> Result<EvalResult>;
}

impl<F> Evaluate for F
where
    F: Fn(&[f64]) -> Result<EvalResult> + Sync,
{
    fn evaluate(&self, lambdas: &[f64]) -> Result<EvalResult> {
        self(lambdas)
    }
}

/// Run the evaluator contract: `<command...> <checkpoint>`, which must exit 0
/// and print one JSON object of task scores on stdout.
pub fn invoke_evaluator(command: &[String], checkpoint: &Path) -> Result<EvalResult> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| Error::Evaluator("empty evaluator command".into()))?;
    if !checkpoint.exists() {
        return Err(Error::Evaluator(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let start = Instant::now();
    let output = Command::new(program)
        .args(args)
        .arg(checkpoint)
        .output()
        .map_err(|e| Error::Evaluator(format!("could not run `{program}`: {e}")))?;
    if !output.status.success() {
        return Err(Error::Evaluator(format!(
            "`{program}` exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let mut result = parse_scores(&stdout)?;
    result.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(result)
}

/// Parse evaluator stdout.
pub fn parse_scores(stdout: &str) -> Result<EvalResult> {
    let value: serde_json::Value = match serde_json::from_str(stdout.trim()) {
        Ok(v) => v,
        Err(e) => {
            let non_finite = ["NaN", "Infinity", "inf", "nan"].iter().any(|tok| stdout.contains(tok));
            return Err(Error::Evaluator(if non_finite {
                "evaluator returned a non-finite score".to_string()
            } else {
                format!("evaluator output is not a JSON object: {e}")
            }));
        }
    };
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Evaluator("evaluator output is not a JSON object".into()))?;
    let scores = obj
        .iter()
        .map(|(k, v)| {
            v.as_f64()
                .map(|s| (k.clone(), s))
                .ok_or_else(|| Error::Evaluator(format!("score for `{k}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::new(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub lambdas: Vec<f64>,
    pub result: EvalResult,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScoreTable {
    /// Column names for the λ values.
    pub lambda_columns: Vec<String>,
    /// One row per evaluated point, in evaluation order.
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let tasks: BTreeSet<&str> = self
            .rows
            .iter()
            .flat_map(|r| r.result.scores.keys().map(String::as_str))
            .collect();
        let mut out = String::new();
        let mut header: Vec<String> = self.lambda_columns.clone();
        header.extend(tasks.iter().map(|t| t.to_string()));
        header.push("mean".into());
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut cells: Vec<String> = row.lambdas.iter().map(|l| fmt_lambda(*l)).collect();
            for t in &tasks {
                cells.push(row.result.scores.get(*t).map(|s| s.to_string()).unwrap_or_default());
            }
            cells.push(row.objective.to_string());
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Row with the highest objective; ties go to the lexicographically
    /// smallest λ.
    pub fn best(&self) -> Option<&ScoreRow> {
        let mut best: Option<&ScoreRow> = None;
        for row in &self.rows {
            best = match best {
                None => Some(row),
                Some(b) if row.objective > b.objective => Some(row),
                Some(b) if row.objective == b.objective && lex_less(&row.lambdas, &b.lambdas) => Some(row),
                keep => keep,
            };
        }
        best
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .find(|(x, y)| x != y)
        .map(|(x, y)| x < y)
        .unwrap_or(false)
}

fn fmt_lambda(l: f64) -> String {
    let s = format!("{l:.6}");
    let s = s.trim_end_matches('0');
    s.strip_suffix('.').unwrap_or(s).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub best_lambdas: Vec<f64>,
    pub best_objective: f64,
    /// Best point of the coarse pass alone.
    pub coarse_best_lambdas: Vec<f64>,
    pub coarse_best_objective: f64,
    pub evaluations: usize,
    pub table: ScoreTable,
}

/// A failed search, with every score gathered before the failure.
#[derive(Debug)]
pub struct SearchFailure {
    pub error: Error,
    pub partial: ScoreTable,
}

impl std::fmt::Display for SearchFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} evaluations)", self.error, self.partial.rows.len())
    }
}

impl std::error::Error for SearchFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Points `from, from + step, ...` up to `to` inclusive, snapped to 1e-9 so
/// lattice values compare and print cleanly.
pub fn lattice(from: f64, to: f64, step: f64) -> Vec<f64> {
    let count = ((to - from) / step + 1e-9).floor() as i64;
    (0..=count.max(0)).map(|i| snap(from + i as f64 * step)).collect()
}

fn snap(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn key(lambdas: &[f64]) -> Vec<i64> {
    lambdas.iter().map(|l| (l * 1e6).round() as i64).collect()
}

fn product(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

struct Cache<'a, E: Evaluate + ?Sized> {
    evaluator: &'a E,
    config: &'a GridConfig,
    seen: HashMap<Vec<i64>, usize>,
    table: ScoreTable,
}

impl<E: Evaluate + ?Sized> Cache<'_, E> {
    /// Evaluate every point not yet scored. Returns the first error, after
    /// recording every success that preceded it in point order.
    fn run(&mut self, points: &[Vec<f64>]) -> Result<()> {
        let mut fresh: Vec<&Vec<f64>> = Vec::new();
        let mut queued = BTreeSet::new();
        for p in points {
            let k = key(p);
            if !self.seen.contains_key(&k) && queued.insert(k) {
                fresh.push(p);
            }
        }
        let evaluator = self.evaluator;
        if self.config.parallelism > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.config.parallelism)
                .build()
                .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
            let results: Vec<Result<EvalResult>> =
                pool.install(|| fresh.par_iter().map(|p| evaluator.evaluate(p)).collect());
            for (p, r) in fresh.into_iter().zip(results) {
                self.record(p, r?);
            }
        } else {
            for p in fresh {
                let r = evaluator.evaluate(p)?;
                self.record(p, r);
            }
        }
        Ok(())
    }

    fn record(&mut self, lambdas: &[f64], result: EvalResult) {
        let objective = result.objective(self.config.weights.as_ref());
        info!("lambda {lambdas:?}: objective {objective}");
        self.seen.insert(key(lambdas), self.table.rows.len());
        self.table.rows.push(ScoreRow {
            lambdas: lambdas.to_vec(),
            result,
            objective,
        });
    }

    fn best_of(&self, points: &[Vec<f64>]) -> &ScoreRow {
        let subset = ScoreTable {
            lambda_columns: Vec::new(),
            rows: points
                .iter()
                .map(|p| self.table.rows[self.seen[&key(p)]].clone())
                .collect(),
        };
        let best = subset.best().expect("non-empty grid").lambdas.clone();
        &self.table.rows[self.seen[&key(&best)]]
    }
}

/// Coarse grid, then fine grid over `[best - coarse, best + coarse]` clamped
/// to the range. `vectors` is the number of task vectors (only its count
/// matters, and only in per-vector mode).
pub fn grid_search<E: Evaluate + ?Sized>(
    config: &GridConfig,
    vector_names: &[String],
    evaluator: &E,
) -> std::result::Result<SearchOutcome, SearchFailure> {
    let fail = |error: Error, partial: ScoreTable| SearchFailure { error, partial };
    let lambda_columns = match config.mode {
        SearchMode::Unified => vec!["lambda".to_string()],
        SearchMode::PerVector => vector_names.iter().map(|n| format!("lambda_{n}")).collect(),
    };
    if let Err(e) = config.validate(vector_names.len()) {
        return Err(fail(e, ScoreTable::default()));
    }
    let dims = lambda_columns.len();
    let mut cache = Cache {
        evaluator,
        config,
        seen: HashMap::new(),
        table: ScoreTable {
            lambda_columns,
            rows: Vec::new(),
        },
    };

    let coarse_axis = lattice(config.lo, config.hi, config.coarse_step);
    let coarse = product(&vec![coarse_axis; dims]);
    if let Err(e) = cache.run(&coarse) {
        return Err(fail(e, cache.table));
    }
    let coarse_best = cache.best_of(&coarse).clone();

    let fine_axes: Vec<Vec<f64>> = coarse_best
        .lambdas
        .iter()
        .map(|&c| {
            let from = (c - config.coarse_step).max(config.lo);
            let to = (c + config.coarse_step).min(config.hi);
            lattice(snap(from), snap(to), config.fine_step)
        })
        .collect();
    let fine = product(&fine_axes);
    if let Err(e) = cache.run(&fine) {
        return Err(fail(e, cache.table));
    }
    let mut all = coarse;
    all.extend(fine);
    let best = cache.best_of(&all).clone();
    Ok(SearchOutcome {
        best_lambdas: best.lambdas,
        best_objective: best.objective,
        coarse_best_lambdas: coarse_best.lambdas,
        coarse_best_objective: coarse_best.objective,
        evaluations: cache.table.rows.len(),
        table: cache.table,
    })
}

/// Evaluates λ assignments by merging with the recipe and running the
/// external evaluator on the result.
pub struct RecipeEvaluator {
    recipe: MergeRecipe,
    command: Vec<String>,
    mode: SearchMode,
    workdir: PathBuf,
    keep: bool,
    _temp: Option<tempfile::TempDir>,
}

impl RecipeEvaluator {
    pub fn new(spec: &SearchSpec) -> Result<Self> {
        let recipe = spec.load_recipe()?;
        let (workdir, temp) = match &spec.workdir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                (dir.clone(), None)
            }
            None => {
                let t = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        Ok(Self {
            recipe,
            command: spec.evaluator.clone(),
            mode: spec.mode,
            workdir,
            keep: spec.keep,
            _temp: temp,
        })
    }

    pub fn recipe(&self) -> &MergeRecipe {
        &self.recipe
    }

    fn recipe_for(&self, lambdas: &[f64]) -> MergeRecipe {
        let mut r = self.recipe.clone();
        match self.mode {
            SearchMode::Unified => {
                r.unified_lambda = Some(lambdas[0]);
                for v in &mut r.vectors {
                    v.lambda = None;
                }
            }
            SearchMode::PerVector => {
                r.unified_lambda = None;
                for (v, &l) in r.vectors.iter_mut().zip(lambdas) {
                    v.lambda = Some(l);
                }
            }
        }
        let tag: Vec<String> = lambdas.iter().map(|l| fmt_lambda(*l)).collect();
        r.output = self.workdir.join(format!("merged_{}.safetensors", tag.join("_")));
        r.report = None;
        r.artifacts_dir = None;
        r
    }
}

impl Evaluate for RecipeEvaluator {
    fn evaluate(&self, lambdas: &[f64]) -> Result<EvalResult> {
        let recipe = self.recipe_for(lambdas);
        let per_vector = match self.mode {
            SearchMode::Unified => vec![lambdas[0]; recipe.vectors.len()],
            SearchMode::PerVector => lambdas.to_vec(),
        };
        run_with_lambdas(&recipe, &per_vector)?;
        let result = invoke_evaluator(&self.command, &recipe.output);
        if !self.keep {
            if let Err(e) = std::fs::remove_file(&recipe.output) {
                warn!("could not remove {}: {e}", recipe.output.display());
            }
        }
        result
    }
}

/// Run a search spec end to end, persisting the score table (partial on
/// failure) when the spec names one.
pub fn run_search(spec: &SearchSpec) -> std::result::Result<SearchOutcome, SearchFailure> {
    let evaluator = RecipeEvaluator::new(spec).map_err(|error| SearchFailure {
        error,
        partial: ScoreTable::default(),
    })?;
    let names: Vec<String> = evaluator.recipe().vectors.iter().map(|v| v.name.clone()).collect();
    let outcome = grid_search(&spec.grid(), &names, &evaluator);
    if let Some(path) = &spec.table {
        let table = match &outcome {
            Ok(o) => &o.table,
            Err(f) => &f.partial,
        };
        if let Err(e) = table.write_csv(path) {
            warn!("could not write score table: {e}");
        }
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn score(v: f64) -> Result<EvalResult> {
        EvalResult::new([("task".to_string(), v)])
    }

    #[test]
    fn lattice_points() {
        let l = lattice(0.0, 3.0, 0.1);
        assert_eq!(l.len(), 31);
        assert_eq!(l[12], 1.2);
        assert_eq!(*l.last().unwrap(), 3.0);
        assert_eq!(lattice(1.1, 1.3, 0.01).len(), 21);
    }

    #[test]
    fn quadratic_optimum() {
        let f = |l: &[f64]| score(-(l[0] - 1.23).powi(2));
        let out = grid_search(&GridConfig::unified(0.0, 3.0), &["a".into()], &f).unwrap();
        assert!((out.best_lambdas[0] - 1.23).abs() <= 0.01);
        assert_eq!(out.coarse_best_lambdas, vec![1.2]);
    }

    #[test]
    fn constant_evaluator_returns_lo() {
        let f = |_: &[f64]| score(0.5);
        let out = grid_search(&GridConfig::unified(0.3, 2.0), &["a".into()], &f).unwrap();
        assert_eq!(out.best_lambdas, vec![0.3]);
    }

    #[test]
    fn separable_per_vector_optimum() {
        let f = |l: &[f64]| score(-(l[0] - 0.5).powi(2) - (l[1] - 2.0).powi(2));
        let mut cfg = GridConfig::unified(0.0, 3.0);
        cfg.mode = SearchMode::PerVector;
        let out = grid_search(&cfg, &["a".into(), "b".into()], &f).unwrap();
        assert!((out.best_lambdas[0] - 0.5).abs() <= 0.01);
        assert!((out.best_lambdas[1] - 2.0).abs() <= 0.01);
        assert!(out.table.to_csv().starts_with("lambda_a,lambda_b,task,mean\n"));
        cfg.mode = SearchMode::PerVector;
        let three: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        assert!(grid_search(&cfg, &three, &f).is_err());
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let f = |l: &[f64]| score((3.0 * l[0]).sin() + 0.2 * l[0]);
        let g = |l: &[f64]| score(7.5 * ((3.0 * l[0]).sin() + 0.2 * l[0]));
        let cfg = GridConfig::unified(0.0, 3.0);
        let a = grid_search(&cfg, &["a".into()], &f).unwrap();
        let b = grid_search(&cfg, &["a".into()], &g).unwrap();
        assert_eq!(a.best_lambdas, b.best_lambdas);
    }

    #[test]
    fn fine_pass_stays_near_coarse_best_and_clamps() {
        let f = |l: &[f64]| score(-(l[0] - 0.04).powi(2));
        let out = grid_search(&GridConfig::unified(0.0, 3.0), &["a".into()], &f).unwrap();
        assert_eq!(out.coarse_best_lambdas, vec![0.0]);
        for row in &out.table.rows[31..] {
            assert!(row.lambdas[0] >= 0.0 && row.lambdas[0] <= 0.1 + 1e-12);
        }
        assert_eq!(out.best_lambdas, vec![0.04]);
        // [0, 0.1] at 0.01 is 11 points, 0 and 0.1 already scored
        assert_eq!(out.evaluations, 31 + 9);
    }

    #[test]
    fn each_point_evaluated_once() {
        let calls = AtomicUsize::new(0);
        let f = |l: &[f64]| {
            calls.fetch_add(1, Ordering::SeqCst);
            score(-(l[0] - 1.23).powi(2))
        };
        let mut cfg = GridConfig::unified(0.0, 3.0);
        cfg.parallelism = 4;
        let out = grid_search(&cfg, &["a".into()], &f).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), out.evaluations);
        assert_eq!(out.evaluations, 31 + 21 - 3);
        let serial = grid_search(&GridConfig::unified(0.0, 3.0), &["a".into()], &|l: &[f64]| {
            score(-(l[0] - 1.23).powi(2))
        })
        .unwrap();
        assert_eq!(serial.table, out.table);
    }

    #[test]
    fn failure_keeps_partial_table() {
        let f = |l: &[f64]| {
            if l[0] > 0.45 {
                Err(Error::Evaluator("boom".into()))
            } else {
                score(l[0])
            }
        };
        let err = grid_search(&GridConfig::unified(0.0, 3.0), &["a".into()], &f).unwrap_err();
        assert_eq!(err.partial.rows.len(), 5);
        assert_eq!(err.error.exit_code(), 4);
    }

    #[test]
    fn spec_validation() {
        let f = |_: &[f64]| score(0.0);
        let mut cfg = GridConfig::unified(2.0, 1.0);
        assert!(grid_search(&cfg, &["a".into()], &f).is_err());
        cfg = GridConfig::unified(0.0, 1.0);
        cfg.fine_step = 0.5;
        assert!(grid_search(&cfg, &["a".into()], &f).is_err());
    }

    #[test]
    fn parses_evaluator_output() {
        let r = parse_scores("{\"rte\": 0.74}\n").unwrap();
        assert_eq!(r.scores["rte"], 0.74);
        assert!(parse_scores("the model did great").is_err());
        let nan = parse_scores("{\"rte\": NaN}").unwrap_err();
        assert!(nan.to_string().contains("non-finite"));
        assert!(parse_scores("{}").is_err());
        assert!(parse_scores("[1, 2]").is_err());
        assert!(parse_scores("{\"rte\": \"high\"}").is_err());
    }

    #[test]
    fn weighted_objective() {
        let r = EvalResult::new([("a".to_string(), 1.0), ("b".to_string(), 3.0)]).unwrap();
        assert_eq!(r.objective(None), 2.0);
        let w: BTreeMap<String, f64> = [("a".to_string(), 3.0)].into_iter().collect();
        assert_eq!(r.objective(Some(&w)), 1.5);
    }
}
