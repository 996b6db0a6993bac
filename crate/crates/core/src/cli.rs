//! Command-line interface. `run` returns the process exit code so the whole
//! surface can be driven from tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::{json, Value};

use crate::analysis::{balance_grid, nonzero_mask, ortho_check, overlap_rate, OrthoReport, OverlapReport};
use crate::bitmask::BitMask;
use crate::checkpoint::{write_checkpoint, Body, Checkpoint, Dtype, TensorData};
use crate::conflict::FillMode;
use crate::engine::{plan, run_recipe};
use crate::error::{Error, Result};
use crate::recipe::MergeRecipe;
use crate::search::{run_search, SearchSpec};
use crate::taskvec::{check_alignment, delta_tensor};
use crate::tensor::row_len;

#[derive(Debug, Parser)]
#[command(
    name = "cabs",
    version,
    about = "Merge fine-tuned checkpoints through sparsified task vectors"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the recipe's random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: log::LevelFilter,
    /// Output path, for subcommands that write a file.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Print exactly one JSON document on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the task vector `fine_tuned - base` as a checkpoint.
    Diff {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        fine_tuned: PathBuf,
    },
    /// Run a merge recipe.
    Merge(MergeArgs),
    /// Diagnostics over masks or masked task vectors.
    Analyze {
        #[command(subcommand)]
        which: AnalyzeCommand,
    },
    /// Two-step λ grid search.
    Search {
        spec: PathBuf,
        /// Keep intermediate merged checkpoints.
        #[arg(long)]
        keep: bool,
    },
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    pub recipe: PathBuf,
    /// Validate and print the plan without writing anything.
    #[arg(long)]
    pub dry_run: bool,
    /// Comma-separated sparsification order by vector name.
    #[arg(long, value_delimiter = ',')]
    pub order: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub fill: Option<FillArg>,
    /// Write the run report JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Write per-vector masks and masked deltas into this directory.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FillArg {
    PerBlock,
    Global,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Overlap rate of A's retained entries against B's.
    Overlap { a: PathBuf, b: PathBuf },
    /// Retained-weight counts over a grid of bands for one tensor.
    Balance {
        input: PathBuf,
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 1)]
        band_rows: usize,
        #[arg(long)]
        band_cols: usize,
        /// Also write the grid as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Inner products and norm decomposition of masked task vectors.
    Ortho {
        #[arg(required = true, num_args = 2..)]
        vectors: Vec<PathBuf>,
        /// One λ per vector, comma-separated (default: all 1).
        #[arg(long, value_delimiter = ',')]
        lambda: Option<Vec<f32>>,
    },
}

/// Parse `args`, run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .target(env_logger::Target::Stderr)
        .try_init();

    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(value) => {
            if cli.json {
                println!("{value}");
            } else {
                print_human(&value);
            }
            0
        }
        Err(e) => {
            report_error(&e);
            e.exit_code()
        }
    }
}

fn report_error(e: &Error) {
    let mut body = json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    });
    if let Error::Validation(v) = e {
        body["violations"] = json!(v);
    }
    eprintln!("{body}");
}

fn print_human(value: &Value) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                match v {
                    Value::String(s) => println!("{k}: {s}"),
                    Value::Object(_) | Value::Array(_) => {
                        println!("{k}: {}", serde_json::to_string(v).unwrap_or_default())
                    }
                    other => println!("{k}: {other}"),
                }
            }
        }
        other => println!("{other}"),
    }
}

fn dispatch(cli: &Cli) -> Result<Value> {
    match &cli.command {
        Command::Diff { base, fine_tuned } => {
            let out = cli
                .output
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("diff requires --output".into()))?;
            cmd_diff(base, fine_tuned, out)
        }
        Command::Merge(args) => cmd_merge(cli, args),
        Command::Analyze { which } => match which {
            AnalyzeCommand::Overlap { a, b } => cmd_overlap(a, b),
            AnalyzeCommand::Balance {
                input,
                tensor,
                band_rows,
                band_cols,
                csv,
            } => cmd_balance(input, tensor, *band_rows, *band_cols, csv.as_deref()),
            AnalyzeCommand::Ortho { vectors, lambda } => cmd_ortho(vectors, lambda.as_deref()),
        },
        Command::Search { spec, keep } => {
            let mut spec = SearchSpec::load(spec)?;
            spec.keep |= *keep;
            if let Some(out) = &cli.output {
                spec.table = Some(out.clone());
            }
            if let Some(seed) = cli.seed {
                let mut recipe = spec.load_recipe()?;
                recipe.seed = Some(seed);
                spec.recipe = crate::search::RecipeSource::Inline(Box::new(recipe));
            }
            match run_search(&spec) {
                Ok(outcome) => Ok(json!({
                    "best_lambdas": outcome.best_lambdas,
                    "best_objective": outcome.best_objective,
                    "coarse_best_lambdas": outcome.coarse_best_lambdas,
                    "coarse_best_objective": outcome.coarse_best_objective,
                    "evaluations": outcome.evaluations,
                    "table": spec.table,
                })),
                Err(failure) => Err(failure.error),
            }
        }
    }
}

/// Write `fine_tuned - base` for every floating tensor, in F32.
/// Non-floating tensors are left out.
pub fn cmd_diff(base: &Path, fine_tuned: &Path, out: &Path) -> Result<Value> {
    let b = Checkpoint::open(base)?;
    let f = Checkpoint::open(fine_tuned)?;
    check_alignment(&b, &f)?;
    let mut tensors = Vec::new();
    for meta in b.metas().iter().filter(|m| m.dtype.is_float()) {
        let d = delta_tensor(&meta.name, &f.read_tensor(&meta.name)?, &b.read_tensor(&meta.name)?)?;
        tensors.push(TensorData {
            name: meta.name.clone(),
            dtype: Dtype::F32,
            shape: meta.shape.clone(),
            body: Body::F32(d.into_data()),
        });
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));
    write_checkpoint(out, &[], &tensors)?;
    info!("wrote {} delta tensors to {}", tensors.len(), out.display());
    Ok(json!({ "output": out, "tensors": tensors.len() }))
}

fn cmd_merge(cli: &Cli, args: &MergeArgs) -> Result<Value> {
    let mut recipe = MergeRecipe::load(&args.recipe)?;
    if let Some(order) = &args.order {
        recipe.order = Some(order.clone());
    }
    if let Some(fill) = args.fill {
        recipe.fill = match fill {
            FillArg::PerBlock => FillMode::PerBlock,
            FillArg::Global => FillMode::Global,
        };
    }
    if let Some(seed) = cli.seed {
        recipe.seed = Some(seed);
    }
    if let Some(out) = &cli.output {
        recipe.output = out.clone();
    }
    if let Some(r) = &args.report {
        recipe.report = Some(r.clone());
    }
    if let Some(a) = &args.artifacts {
        recipe.artifacts_dir = Some(a.clone());
    }
    if args.dry_run {
        return Ok(json!({ "dry_run": true, "plan": plan(&recipe)? }));
    }
    let report = run_recipe(&recipe)?;
    Ok(serde_json::to_value(report)?)
}

/// Retained positions of one tensor: non-zero entries of floating tensors,
/// non-zero bytes of one-byte tensors (BOOL/U8 mask files).
fn retained(ckpt: &Checkpoint, name: &str) -> Result<Option<BitMask>> {
    let meta = ckpt.meta(name)?;
    if meta.dtype.is_float() {
        return Ok(Some(nonzero_mask(&ckpt.read_tensor(name)?)));
    }
    if meta.dtype.width() == 1 {
        let raw = ckpt.raw(name)?;
        let mut mask = BitMask::zeros(raw.len());
        for (i, &b) in raw.iter().enumerate() {
            if b != 0 {
                mask.set(i, true);
            }
        }
        return Ok(Some(mask));
    }
    Ok(None)
}

fn shared_names(a: &Checkpoint, b: &Checkpoint) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for meta in a.metas() {
        let other = b
            .meta(&meta.name)
            .map_err(|_| Error::MissingTensor(meta.name.clone()))?;
        if other.shape != meta.shape {
            return Err(Error::shape(
                &meta.name,
                format!("shape {:?} does not match {:?}", meta.shape, other.shape),
            ));
        }
        names.push(meta.name.clone());
    }
    names.sort();
    Ok(names)
}

pub fn cmd_overlap(a: &Path, b: &Path) -> Result<Value> {
    let ca = Checkpoint::open(a)?;
    let cb = Checkpoint::open(b)?;
    let mut per_tensor = serde_json::Map::new();
    let mut parts = Vec::new();
    for name in shared_names(&ca, &cb)? {
        let (Some(ma), Some(mb)) = (retained(&ca, &name)?, retained(&cb, &name)?) else {
            continue;
        };
        let shared = ma.count_and(&mb);
        let (kept_a, kept_b) = (ma.count_ones(), mb.count_ones());
        let rate = overlap_rate(&ma, &mb).ok().map(|r| r.rate);
        per_tensor.insert(
            name,
            json!({ "rate": rate, "shared": shared, "kept_a": kept_a, "kept_b": kept_b }),
        );
        parts.push((shared, kept_a, kept_b));
    }
    let (shared, kept_a, kept_b) = parts
        .iter()
        .fold((0, 0, 0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    let aggregate = OverlapReport::from_counts(shared, kept_a, kept_b)?;
    Ok(json!({
        "rate": aggregate.rate,
        "shared": aggregate.shared,
        "kept_a": aggregate.kept_a,
        "kept_b": aggregate.kept_b,
        "tensors": per_tensor,
    }))
}

pub fn cmd_balance(
    input: &Path,
    tensor: &str,
    band_rows: usize,
    band_cols: usize,
    csv: Option<&Path>,
) -> Result<Value> {
    let ckpt = Checkpoint::open(input)?;
    let meta = ckpt.meta(tensor)?.clone();
    let mask = retained(&ckpt, tensor)?.ok_or_else(|| Error::UnsupportedDtype {
        name: tensor.to_string(),
        dtype: meta.dtype.to_string(),
    })?;
    let cols = row_len(&meta.shape);
    let rows = meta.numel().checked_div(cols).unwrap_or(0);
    let report = balance_grid(&mask, rows, cols, band_rows, band_cols)?;
    if let Some(path) = csv {
        std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(serde_json::to_value(report)?)
}

pub fn cmd_ortho(paths: &[PathBuf], lambdas: Option<&[f32]>) -> Result<Value> {
    let ckpts = paths.iter().map(Checkpoint::open).collect::<Result<Vec<_>>>()?;
    let lambdas: Vec<f32> = match lambdas {
        Some(l) => l.to_vec(),
        None => vec![1.0; ckpts.len()],
    };
    for c in &ckpts[1..] {
        shared_names(&ckpts[0], c)?;
    }
    let mut names: Vec<String> = ckpts[0]
        .metas()
        .iter()
        .filter(|m| m.dtype.is_float())
        .map(|m| m.name.clone())
        .collect();
    names.sort();
    let mut parts = Vec::new();
    for name in &names {
        let tensors = ckpts.iter().map(|c| c.read_tensor(name)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = tensors.iter().collect();
        parts.push(ortho_check(&refs, &lambdas)?);
    }
    let total = OrthoReport::accumulate(&parts)
        .ok_or_else(|| Error::InvalidArgument("no floating tensors to compare".into()))?;
    let mut value = serde_json::to_value(&total)?;
    value["orthogonal"] = json!(total.all_orthogonal());
    Ok(value)
}
