//! The `sgs` command-line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, FileConfig, Precision};
use crate::dependence::ALPHA_BETA_GRID;
use crate::error::{Result, SgsError};
use crate::net::{ParamRole, WeightsFile};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::reparam::{standard_equivalence_run, standard_mask_sets, MaskFamily};
use crate::scaling::ScalingRecord;
use crate::tensor::Scalar;
use crate::train::{init_network, kernel_magnitude_matrix, refresh_rng, refresh_scalings, train, Measure};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_EQUIVALENCE_FAIL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sgs", version, about = "Spatial gradient scaling experiments")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics, scalings and weights.
    Train(RunArgs),
    /// Train a masked branched conv and a coverage-scaled conv in lockstep.
    VerifyEquivalence(EquivalenceArgs),
    /// Compute per-layer dependence and scaling matrices without training.
    InspectScaling(RunArgs),
    /// Train one cell per k (or per alpha/beta pair) and tabulate validation accuracy.
    GridSearch(GridArgs),
    /// Per-layer kernel magnitude matrices of a weights file.
    Magnitude(MagnitudeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.precision`.
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
}

#[derive(Debug, Args)]
pub struct EquivalenceArgs {
    /// `3x3`, `7x7`, or a single odd size.
    #[arg(long, default_value = "3x3")]
    pub kernel: String,
    /// `full`, `acb`, `full_plus_center`, `all_rectangles` or `random:<n>:<seed>`.
    #[arg(long, default_value = "acb")]
    pub mask_family: String,
    #[arg(long, default_value = "sgd_momentum")]
    pub optimizer: String,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Larger rates can make the toy network's loss explode, and the
    /// divergence then measures amplified rounding noise.
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub tolerance: f64,
    /// Directory for `divergence.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated k values; defaults to 2..=7 when no alpha/beta grid is given.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    /// Use the standard alpha/beta grid for both axes.
    #[arg(long)]
    pub alpha_beta: bool,
    #[arg(long, default_value_t = 0.2)]
    pub validation_fraction: f64,
    /// Cells trained in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct MagnitudeArgs {
    /// `weights.json` written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<SgsError> for CliError {
    fn from(e: SgsError) -> Self {
        let code = match e {
            SgsError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub fn run(cli: Cli) -> std::result::Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::VerifyEquivalence(a) => cmd_verify_equivalence(&a),
        Command::InspectScaling(a) => cmd_inspect_scaling(&a),
        Command::GridSearch(a) => cmd_grid_search(&a),
        Command::Magnitude(a) => cmd_magnitude(&a),
    }
}

/// Parses arguments, runs, and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_config(a: &RunArgs) -> Result<(FileConfig, ExperimentConfig)> {
    let mut file = FileConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        file.train.seed = seed;
    }
    if let Some(p) = &a.precision {
        file.train.precision = p.parse().map_err(|_| SgsError::Config(format!("bad precision {p}")))?;
    }
    let exp = file.resolve()?;
    Ok((file, exp))
}

fn prepare_out(dir: &Path, file: &FileConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SgsError::io(dir, e))?;
    write_text(&dir.join("resolved_config.toml"), &file.to_toml()?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SgsError::io(path, e))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| SgsError::Numeric(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn write_jsonl<V: Serialize>(path: &Path, rows: &[V]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| SgsError::Numeric(e.to_string()))?);
        out.push('\n');
    }
    write_text(path, &out)
}

fn write_csv<V: Serialize>(path: &Path, rows: &[V]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| SgsError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| SgsError::Numeric(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| SgsError::io(path, e))
}

fn train_to_dir<T: Scalar>(exp: &ExperimentConfig, out: &Path) -> Result<()> {
    let (tr, te) = exp.data.load::<T>(exp.training.seed)?;
    let outcome = train(&exp.network, &tr, &te, &exp.training)?;
    write_csv(&out.join("metrics.csv"), &outcome.metrics)?;
    write_jsonl(&out.join("scalings.jsonl"), &outcome.scalings)?;
    write_jsonl(&out.join("dependence.jsonl"), &outcome.dependences)?;
    let mut net = outcome.network;
    write_json(&out.join("weights.json"), &net.export_weights())
}

fn cmd_train(a: &RunArgs) -> std::result::Result<(), CliError> {
    let (file, exp) = load_config(a)?;
    prepare_out(&a.out, &file)?;
    match exp.precision {
        Precision::F32 => train_to_dir::<f32>(&exp, &a.out)?,
        Precision::F64 => train_to_dir::<f64>(&exp, &a.out)?,
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn parse_kernel(s: &str) -> Result<(usize, usize)> {
    let bad = || SgsError::Config(format!("bad kernel '{s}' (expected e.g. 3x3)"));
    let (a, b) = match s.split_once('x') {
        Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => {
            let k = s.parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    if a == 0 || b == 0 {
        return Err(bad());
    }
    Ok((a, b))
}

#[derive(Serialize)]
struct EquivalenceSummary {
    kernel: [usize; 2],
    mask_family: String,
    optimizer: String,
    branches: usize,
    steps: usize,
    max_divergence: f64,
    max_forward_divergence: f64,
    max_loss: f64,
    equivalence_guaranteed: bool,
    verdict: &'static str,
}

const UNSTABLE_LOSS: f64 = 20.0;

fn cmd_verify_equivalence(a: &EquivalenceArgs) -> std::result::Result<(), CliError> {
    let kernel = parse_kernel(&a.kernel)?;
    let family: MaskFamily = a.mask_family.parse()?;
    let masks = standard_mask_sets(kernel, family).map_err(|e| SgsError::Config(e.to_string()))?;
    let kind: OptimizerKind = a
        .optimizer
        .parse()
        .map_err(|e: SgsError| SgsError::Config(e.to_string()))?;
    let optimizer = OptimizerConfig::for_kind(kind, a.momentum, a.weight_decay);
    let report = standard_equivalence_run(&masks, optimizer, a.lr, a.steps, a.seed)?;
    let max = report.max_divergence();
    let verdict = if !report.equivalence_guaranteed {
        "NO_GUARANTEE"
    } else if max <= a.tolerance {
        "PASS"
    } else {
        "FAIL"
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| SgsError::io(dir, e))?;
        report.write_csv_file(&dir.join("divergence.csv"))?;
        write_json(
            &dir.join("equivalence.json"),
            &EquivalenceSummary {
                kernel: [kernel.0, kernel.1],
                mask_family: a.mask_family.clone(),
                optimizer: report.optimizer.clone(),
                branches: report.branches,
                steps: a.steps,
                max_divergence: max,
                max_forward_divergence: report.max_forward_divergence,
                max_loss: report.max_loss,
                equivalence_guaranteed: report.equivalence_guaranteed,
                verdict,
            },
        )?;
    }
    if report.max_loss > UNSTABLE_LOSS {
        log::warn!(
            "training loss reached {:.3e}; lower --lr for a meaningful divergence",
            report.max_loss
        );
    }
    match verdict {
        "NO_GUARANTEE" => {
            log::warn!("{} is not a linear optimizer: no equivalence guarantee", report.optimizer);
            println!(
                "NO GUARANTEE ({}, non-linear optimizer): max divergence {max:.3e}",
                report.optimizer
            );
            Ok(())
        }
        "PASS" => {
            println!(
                "PASS: {} branches, {} steps, max divergence {max:.3e} <= {:.1e}",
                report.branches, a.steps, a.tolerance
            );
            Ok(())
        }
        _ => Err(CliError {
            code: EXIT_EQUIVALENCE_FAIL,
            message: format!("FAIL: max divergence {max:.3e} > {:.1e}", a.tolerance),
        }),
    }
}

#[derive(Serialize)]
struct LayerInspection {
    layer: usize,
    kernel: [usize; 2],
    dependence: Option<Vec<f64>>,
    scaling: Vec<f64>,
}

fn inspect<T: Scalar>(exp: &ExperimentConfig) -> Result<Vec<LayerInspection>> {
    let (tr, _) = exp.data.load::<T>(exp.training.seed)?;
    let mut net = init_network::<T>(&exp.network, exp.training.seed)?;
    let mut rng = refresh_rng(exp.training.seed);
    let r = refresh_scalings(&mut net, &tr, &exp.training.sgs, exp.training.batch_size, &mut rng)?;
    Ok(r.scalings
        .iter()
        .zip(&r.dependences)
        .enumerate()
        .map(|(layer, (g, s))| LayerInspection {
            layer,
            kernel: [g.rows(), g.cols()],
            dependence: s.as_ref().map(|s| s.values().to_vec()),
            scaling: g.values().to_vec(),
        })
        .collect())
}

fn cmd_inspect_scaling(a: &RunArgs) -> std::result::Result<(), CliError> {
    let (file, exp) = load_config(a)?;
    prepare_out(&a.out, &file)?;
    let layers = match exp.precision {
        Precision::F32 => inspect::<f32>(&exp)?,
        Precision::F64 => inspect::<f64>(&exp)?,
    };
    write_json(&a.out.join("inspect.json"), &layers)?;
    println!("wrote {}", a.out.join("inspect.json").display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct GridRow {
    cell: usize,
    k: Option<f64>,
    alpha: Option<f64>,
    beta: Option<f64>,
    validation_acc: f64,
    final_train_loss: f64,
}

fn grid_cells(a: &GridArgs, base: &ExperimentConfig) -> Vec<(ExperimentConfig, GridRow)> {
    let mut cells = Vec::new();
    let row = |cell, k, alpha, beta| GridRow {
        cell,
        k,
        alpha,
        beta,
        validation_acc: f64::NAN,
        final_train_loss: f64::NAN,
    };
    let (alphas, betas) = if a.alpha_beta {
        (ALPHA_BETA_GRID.to_vec(), ALPHA_BETA_GRID.to_vec())
    } else {
        (a.alphas.clone(), a.betas.clone())
    };
    if !alphas.is_empty() || !betas.is_empty() {
        let alphas = if alphas.is_empty() { vec![1.0] } else { alphas };
        let betas = if betas.is_empty() { vec![1.0] } else { betas };
        for &alpha in &alphas {
            for &beta in &betas {
                let mut exp = base.clone();
                exp.training.sgs.enabled = true;
                exp.training.sgs.measure = Measure::AlphaBeta { alpha, beta };
                cells.push((exp, row(cells.len(), None, Some(alpha), Some(beta))));
            }
        }
    } else {
        let ks = if a.ks.is_empty() {
            vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]
        } else {
            a.ks.clone()
        };
        for &k in &ks {
            let mut exp = base.clone();
            exp.training.sgs.enabled = true;
            exp.training.sgs.k = k;
            cells.push((exp, row(cells.len(), Some(k), None, None)));
        }
    }
    cells
}

fn run_cell<T: Scalar>(exp: &ExperimentConfig, fraction: f64, mut row: GridRow) -> Result<GridRow> {
    exp.training.validate()?;
    let (tr, _) = exp.data.load::<T>(exp.training.seed)?;
    let (fit, val) = tr.split(fraction, exp.training.seed)?;
    let out = train(&exp.network, &fit, &val, &exp.training)?;
    let last = out
        .metrics
        .last()
        .ok_or_else(|| SgsError::Numeric("no epochs run".into()))?;
    row.validation_acc = last.eval_acc;
    row.final_train_loss = last.train_loss;
    Ok(row)
}

fn cmd_grid_search(a: &GridArgs) -> std::result::Result<(), CliError> {
    if !(a.validation_fraction > 0.0 && a.validation_fraction < 1.0) {
        return Err(SgsError::Config(format!(
            "--validation-fraction must lie in (0, 1), got {}",
            a.validation_fraction
        ))
        .into());
    }
    let (file, base) = load_config(&a.run)?;
    prepare_out(&a.run.out, &file)?;
    let cells = grid_cells(a, &base);
    for (exp, _) in &cells {
        exp.training.validate()?;
    }
    let jobs = a.jobs.max(1);
    let mut rows: Vec<Option<Result<GridRow>>> = Vec::new();
    rows.resize_with(cells.len(), || None);
    for chunk_start in (0..cells.len()).step_by(jobs) {
        let chunk = &cells[chunk_start..(chunk_start + jobs).min(cells.len())];
        let results: Vec<Result<GridRow>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(exp, row)| {
                    let row = row.clone();
                    s.spawn(move || match exp.precision {
                        Precision::F32 => run_cell::<f32>(exp, a.validation_fraction, row),
                        Precision::F64 => run_cell::<f64>(exp, a.validation_fraction, row),
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(SgsError::Numeric("grid cell panicked".into()))))
                .collect()
        });
        for (i, r) in results.into_iter().enumerate() {
            rows[chunk_start + i] = Some(r);
        }
    }
    let rows: Vec<GridRow> = rows
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect::<Result<_>>()?;
    let path = a.run.out.join("grid.csv");
    write_csv(&path, &rows)?;
    if let Some(best) = rows
        .iter()
        .max_by(|x, y| x.validation_acc.total_cmp(&y.validation_acc).then(y.cell.cmp(&x.cell)))
    {
        let setting = match (best.k, best.alpha, best.beta) {
            (Some(k), _, _) => format!("k={k}"),
            (None, Some(a), Some(b)) => format!("alpha={a} beta={b}"),
            _ => String::new(),
        };
        println!(
            "best cell {}: {setting} validation_acc={:.4}",
            best.cell, best.validation_acc
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct MagnitudeRow {
    layer: usize,
    name: String,
    kernel: [usize; 2],
    values: Vec<f64>,
}

fn cmd_magnitude(a: &MagnitudeArgs) -> std::result::Result<(), CliError> {
    let text = fs::read_to_string(&a.weights).map_err(|e| SgsError::io(&a.weights, e))?;
    let weights: WeightsFile = serde_json::from_str(&text).map_err(|e| SgsError::Format {
        path: a.weights.clone(),
        message: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for p in weights.params.iter().filter(|p| p.role == ParamRole::ConvWeight) {
        let m = kernel_magnitude_matrix(&p.tensor()?)?;
        rows.push(MagnitudeRow {
            layer: p.conv_index.unwrap_or(rows.len()),
            name: p.name.clone(),
            kernel: [m.rows(), m.cols()],
            values: m.values().to_vec(),
        });
    }
    let text = serde_json::to_string_pretty(&rows).map_err(|e| SgsError::Numeric(e.to_string()))? + "\n";
    match &a.out {
        Some(path) => write_text(path, &text)?,
        None => {
            std::io::stdout()
                .write_all(text.as_bytes())
                .map_err(|e| SgsError::io("<stdout>", e))?;
        }
    }
    Ok(())
}

/// Reads back a `scalings.jsonl` file.
pub fn read_scaling_history(path: &Path) -> Result<Vec<ScalingRecord>> {
    let text = fs::read_to_string(path).map_err(|e| SgsError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| SgsError::Format {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        })
        .collect()
}
