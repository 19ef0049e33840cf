//! Command-line entry point.
//!
//! Each subcommand resolves its configuration as: built-in defaults, then
//! `--preset`, then `--config FILE` (strict JSON, unknown keys rejected),
//! then explicit flags. Outputs land in `--out` (default: `$INDLAB_OUT` or
//! the current directory). Exit codes: 0 success, 1 validation error,
//! 2 numerical failure.

mod output;
mod presets;

pub use presets::{preset, Preset, PRESET_NAMES};

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{generate, BasisMode, DataMode, QueryMode};
use crate::error::{Error, Result};
use crate::flow::{
    default_t_max, integrate_flow, scaling_scan, sgd_vs_flow, SgdVsFlowConfig, StepControl,
};
use crate::matrix::MaskMode;
use crate::model::WeightSet;
use crate::pseudo::{project, PseudoIndex, PseudoParams};
use crate::reference::{interpret, std_train, StdModel, StdTrainConfig};
use crate::train::{structure_residual_scan, train, ScanConfig, TrainConfig};

#[derive(Parser)]
#[command(
    name = "indlab",
    version,
    about = "Induction-head training dynamics laboratory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ICL sequence batches (binary file + JSON sidecar).
    GenData(GenDataArgs),
    /// Train the disentangled model, logging the 19 pseudo-parameters.
    Train(TrainArgs),
    /// Project a saved weight file onto the structured subspace.
    Project(ProjectArgs),
    /// Integrate the three-parameter gradient flow; report emergence times.
    Flow(FlowArgs),
    /// Fit emergence-time scaling over several context lengths.
    ScanN(ScanNArgs),
    /// Compare discrete ablated SGD against the continuous flow.
    SgdVsFlow(SgdVsFlowArgs),
    /// Train the standard reference transformer with AdamW.
    StdTrain(StdTrainArgs),
    /// Emit interpretability block maps for a model checkpoint.
    Interpret(InterpretArgs),
    /// Measure the off-structure gradient residual across batch sizes.
    ResidualScan(ResidualScanArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Output directory (default: $INDLAB_OUT, else the working directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Load the full subcommand config from a JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a named preset.
    #[arg(long)]
    preset: Option<String>,
}

impl CommonArgs {
    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("INDLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = std::fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn parse_mask(s: &str) -> Result<MaskMode> {
    match s {
        "inclusive" => Ok(MaskMode::CausalInclusiveSelf),
        "exclusive" => Ok(MaskMode::CausalExclusiveSelf),
        other => Err(Error::Invalid(format!(
            "--mask must be inclusive or exclusive, got '{other}'"
        ))),
    }
}

fn parse_data_mode(
    data: &str,
    query: Option<&str>,
    basis: Option<&str>,
    scale: Option<f64>,
) -> Result<DataMode> {
    match data {
        "gaussian" => {
            let query = match query.unwrap_or("uniform") {
                "uniform" => QueryMode::Uniform,
                "last" => QueryMode::Last,
                other => {
                    return Err(Error::Invalid(format!(
                        "--query must be uniform or last, got '{other}'"
                    )))
                }
            };
            Ok(DataMode::Gaussian {
                query,
                scale: scale.unwrap_or(1.0),
            })
        }
        "orthonormal" => {
            let basis = match basis.unwrap_or("canonical") {
                "canonical" => BasisMode::Canonical,
                "rotated" => BasisMode::RandomRotation,
                other => {
                    return Err(Error::Invalid(format!(
                        "--basis must be canonical or rotated, got '{other}'"
                    )))
                }
            };
            Ok(DataMode::Orthonormal { basis })
        }
        other => Err(Error::Invalid(format!(
            "--data must be gaussian or orthonormal, got '{other}'"
        ))),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub n_pairs: usize,
    pub dim: usize,
    pub batch: usize,
    pub seed: u64,
    pub data: DataMode,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            n_pairs: 8,
            dim: 16,
            batch: 64,
            seed: 0,
            data: DataMode::gaussian(),
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of item-label pairs N.
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    /// Embedding dimension D (even).
    #[arg(long)]
    dim: Option<usize>,
    /// Batch size B.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Data distribution: gaussian | orthonormal.
    #[arg(long)]
    data: Option<String>,
    /// Query position for gaussian data: uniform | last.
    #[arg(long)]
    query: Option<String>,
    /// Basis for orthonormal data: canonical | rotated.
    #[arg(long)]
    basis: Option<String>,
    /// Entry standard deviation for gaussian data.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Serialize)]
struct GenDataSidecar<'a> {
    magic: &'a str,
    version: u32,
    n_pairs: usize,
    dim: usize,
    batch: usize,
    seed: u64,
    data: &'a DataMode,
    shapes: serde_json::Value,
    payload_order: [&'a str; 3],
}

fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = resolve_plain_config(&args.common, GenDataConfig::default())?;
    if let Some(v) = args.n_pairs {
        cfg.n_pairs = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.data.is_some() || args.query.is_some() || args.basis.is_some() || args.scale.is_some() {
        let base = match (&cfg.data, args.data.as_deref()) {
            (_, Some(d)) => d.to_string(),
            (DataMode::Gaussian { .. }, None) => "gaussian".into(),
            (DataMode::Orthonormal { .. }, None) => "orthonormal".into(),
        };
        cfg.data = parse_data_mode(
            &base,
            args.query.as_deref(),
            args.basis.as_deref(),
            args.scale,
        )?;
    }

    let batch = generate(&cfg.data, cfg.n_pairs, cfg.dim, cfg.batch, cfg.seed)?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    let bin_path = dir.join("data.bin");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    batch.write_binary(&cfg.data, &mut f)?;
    drop(f);
    let sidecar = GenDataSidecar {
        magic: "ICLD",
        version: 1,
        n_pairs: cfg.n_pairs,
        dim: cfg.dim,
        batch: cfg.batch,
        seed: cfg.seed,
        data: &cfg.data,
        shapes: serde_json::json!({
            "inputs": [cfg.batch, 2 * cfg.n_pairs + 1, 2 * cfg.dim],
            "targets": [cfg.batch, cfg.dim],
            "queries": [cfg.batch],
        }),
        payload_order: ["inputs", "targets", "queries"],
    };
    output::write_json(&dir.join("data.json"), &sidecar)?;
    println!("wrote {} and sidecar data.json", bin_path.display());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Learning rate.
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Causal mask: inclusive | exclusive.
    #[arg(long)]
    mask: Option<String>,
    /// Data distribution: gaussian | orthonormal.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    /// Restrict training to these pseudo-parameters, e.g. a3,b2,g3.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    log_every: Option<usize>,
}

fn default_train_config() -> TrainConfig {
    TrainConfig {
        n_pairs: 8,
        dim: 16,
        batch: 512,
        learning_rate: 1.0,
        steps: 400,
        seed: 0,
        mask_mode: MaskMode::CausalInclusiveSelf,
        data: DataMode::gaussian(),
        ablation: None,
        log_every: 10,
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = match resolve_preset(&args.common)? {
        Some(Preset::Train(cfg)) => cfg,
        Some(_) => return Err(Error::Invalid("preset is not a train preset".into())),
        None => default_train_config(),
    };
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(v) = args.n_pairs {
        cfg.n_pairs = v;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(m) = &args.mask {
        cfg.mask_mode = parse_mask(m)?;
    }
    if args.data.is_some() || args.query.is_some() || args.basis.is_some() || args.scale.is_some() {
        let base = match (&cfg.data, args.data.as_deref()) {
            (_, Some(d)) => d.to_string(),
            (DataMode::Gaussian { .. }, None) => "gaussian".into(),
            (DataMode::Orthonormal { .. }, None) => "orthonormal".into(),
        };
        cfg.data = parse_data_mode(
            &base,
            args.query.as_deref(),
            args.basis.as_deref(),
            args.scale,
        )?;
    }
    if let Some(list) = &args.ablate {
        cfg.ablation = Some(PseudoIndex::parse_list(list)?);
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }

    let traj = train(&cfg)?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_trajectory_csv(&dir.join("trajectory.csv"), &traj)?;
    traj.final_weights.save_to(&dir.join("final_weights.bin"))?;
    println!(
        "trained {} steps: loss {} -> {} (trajectory.csv, final_weights.bin)",
        cfg.steps,
        traj.initial_loss(),
        traj.final_loss()
    );
    Ok(())
}

// ----------------------------------------------------------------- project

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Weight file produced by `train` (final_weights.bin).
    #[arg(long)]
    weights: PathBuf,
}

#[derive(Serialize)]
struct ProjectReport {
    alpha: [f64; 3],
    beta: [f64; 12],
    gamma: [f64; 4],
    residuals: ResidualTriple,
    relative: ResidualTriple,
}

#[derive(Serialize)]
struct ResidualTriple {
    w1: f64,
    w2: f64,
    w3: f64,
}

fn run_project(args: &ProjectArgs) -> Result<()> {
    let w = WeightSet::load_from(&args.weights)?;
    let report = project(&w)?;
    let json = ProjectReport {
        alpha: report.params.alpha,
        beta: report.params.beta,
        gamma: report.params.gamma,
        residuals: ResidualTriple {
            w1: report.residual_fro[0],
            w2: report.residual_fro[1],
            w3: report.residual_fro[2],
        },
        relative: ResidualTriple {
            w1: report.relative_residual[0],
            w2: report.relative_residual[1],
            w3: report.relative_residual[2],
        },
    };
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_json(&dir.join("project.json"), &json)?;
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

// -------------------------------------------------------------------- flow

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowCliConfig {
    pub n_pairs: usize,
    pub threshold: f64,
    pub step_control: StepControl,
    /// Integration horizon; defaults to 100 N^2.
    pub t_max: Option<f64>,
}

#[derive(Args)]
struct FlowArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_param_step: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
}

fn run_flow(args: &FlowArgs) -> Result<()> {
    let n_default = args.n_pairs.unwrap_or(8);
    let mut cfg = FlowCliConfig {
        n_pairs: n_default,
        threshold: 0.5,
        step_control: StepControl::default_for(n_default),
        t_max: None,
    };
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(v) = args.n_pairs {
        cfg.n_pairs = v;
        cfg.step_control.max_dt = StepControl::default_for(v).max_dt;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.max_param_step {
        cfg.step_control.max_param_step = v;
    }
    if let Some(v) = args.t_max {
        cfg.t_max = Some(v);
    }
    let t_max = cfg.t_max.unwrap_or_else(|| default_t_max(cfg.n_pairs));
    let (traj, record) = integrate_flow(cfg.n_pairs, cfg.threshold, &cfg.step_control, t_max)?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_flow_csv(&dir.join("flow_trajectory.csv"), &traj)?;
    output::write_json(&dir.join("emergence.json"), &record)?;
    println!("{}", serde_json::to_string_pretty(&record)?);
    Ok(())
}

// ------------------------------------------------------------------ scan-n

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanNConfig {
    pub n_list: Vec<usize>,
    pub threshold: f64,
    pub step_control: StepControl,
}

#[derive(Args)]
struct ScanNArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated context lengths, e.g. 8,16,32,64.
    #[arg(long = "n")]
    n_list: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    max_param_step: Option<f64>,
    /// Worker threads for the per-N integrations.
    #[arg(long)]
    jobs: Option<usize>,
}

fn run_scan_n(args: &ScanNArgs) -> Result<()> {
    let mut cfg = ScanNConfig {
        n_list: vec![8, 16, 32, 64],
        threshold: 0.5,
        step_control: StepControl::default_for(8),
    };
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(list) = &args.n_list {
        cfg.n_list = list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("bad context length '{p}'")))
            })
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.max_param_step {
        cfg.step_control.max_param_step = v;
    }
    let summary = with_jobs(args.jobs, || {
        scaling_scan(&cfg.n_list, cfg.threshold, &cfg.step_control)
    })?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_json(&dir.join("scan.json"), &summary)?;
    println!(
        "slopes: T_gamma {:.3}, T_beta {:.3}, T_alpha {:.3}, t_ICL {:.3} (scan.json)",
        summary.slope_t_gamma, summary.slope_t_beta, summary.slope_t_alpha, summary.slope_t_icl
    );
    Ok(())
}

// ------------------------------------------------------------- sgd-vs-flow

#[derive(Args)]
struct SgdVsFlowArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_steps: Option<usize>,
}

fn run_sgd_vs_flow(args: &SgdVsFlowArgs) -> Result<()> {
    let mut cfg = match resolve_preset(&args.common)? {
        Some(Preset::SgdVsFlow(cfg)) => cfg,
        Some(_) => return Err(Error::Invalid("preset is not an sgd-vs-flow preset".into())),
        None => SgdVsFlowConfig {
            n_pairs: 4,
            dim: 16,
            batch: 4,
            learning_rate: 0.05,
            threshold: 0.5,
            seed: 0,
            max_steps: 2_000_000,
            step_control: StepControl::default_for(4),
        },
    };
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(v) = args.n_pairs {
        cfg.n_pairs = v;
        cfg.step_control.max_dt = StepControl::default_for(v).max_dt;
    }
    if let Some(v) = args.dim {
        cfg.dim = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_steps {
        cfg.max_steps = v;
    }
    let report = sgd_vs_flow(&cfg)?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_comparison_csv(&dir.join("sgd_vs_flow.csv"), &report.table)?;
    output::write_json(&dir.join("sgd_vs_flow.json"), &report)?;
    println!(
        "time ratios sgd/flow: alpha {:.4}, beta {:.4}, gamma {:.4}; max deviation {:.4}",
        report.ratio_alpha, report.ratio_beta, report.ratio_gamma, report.max_rel_deviation
    );
    Ok(())
}

// --------------------------------------------------------------- std-train

#[derive(Args)]
struct StdTrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    head_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    block: Option<usize>,
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_every: Option<usize>,
}

fn run_std_train(args: &StdTrainArgs) -> Result<()> {
    let mut cfg = match resolve_preset(&args.common)? {
        Some(Preset::StdTrain(cfg)) => cfg,
        Some(_) => return Err(Error::Invalid("preset is not a std-train preset".into())),
        None => StdTrainConfig::desk_scale(0),
    };
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(v) = args.dim {
        cfg.model.dim = v;
    }
    if let Some(v) = args.head_dim {
        cfg.model.head_dim = v;
    }
    if let Some(v) = args.vocab {
        cfg.model.vocab = v;
    }
    if let Some(v) = args.block {
        cfg.model.block = v;
    }
    if let Some(v) = args.n_pairs {
        cfg.n_pairs = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    let (model, curve) = std_train(&cfg)?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    model.save_to(&dir.join("model.bin"))?;
    output::write_loss_curve_csv(&dir.join("loss_curve.csv"), &curve)?;
    let last = curve.last().unwrap();
    println!(
        "trained {} steps: loss {:.4}, accuracy {:.3} (model.bin, loss_curve.csv)",
        cfg.steps, last.loss, last.accuracy
    );
    Ok(())
}

// --------------------------------------------------------------- interpret

#[derive(Args)]
struct InterpretArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model checkpoint produced by `std-train`.
    #[arg(long)]
    checkpoint: PathBuf,
}

fn run_interpret(args: &InterpretArgs) -> Result<()> {
    let model = StdModel::load_from(&args.checkpoint)?;
    let report = interpret(&model);
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    for block in &report.blocks {
        output::write_matrix_csv(
            &dir.join(format!("interpret_{}.csv", block.name)),
            &block.matrix,
        )?;
    }
    output::write_json(&dir.join("dominance.json"), &report.dominance)?;
    println!(
        "wrote {} block maps; positional subdiagonal margin {:.2} sigmas",
        report.blocks.len(),
        report.dominance.margin_sigmas
    );
    Ok(())
}

// ------------------------------------------------------------ residual-scan

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualScanCliConfig {
    pub point: PseudoParams,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub scan: ScanConfig,
}

impl Default for ResidualScanCliConfig {
    fn default() -> Self {
        let mut point = PseudoParams::zeros();
        point.alpha[2] = 0.5;
        point.beta[1] = 0.5;
        point.gamma[2] = 0.5;
        ResidualScanCliConfig {
            point,
            batch_sizes: vec![64, 256, 1024, 4096],
            seeds: (1..=8).collect(),
            scan: ScanConfig {
                n_pairs: 8,
                dim: 16,
                mask_mode: MaskMode::CausalInclusiveSelf,
                data: DataMode::gaussian(),
            },
        }
    }
}

#[derive(Args)]
struct ResidualScanArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated batch sizes.
    #[arg(long)]
    batch_sizes: Option<String>,
    /// Number of seeds (1..=k).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long = "n")]
    n_pairs: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
}

fn run_residual_scan(args: &ResidualScanArgs) -> Result<()> {
    let mut cfg = ResidualScanCliConfig::default();
    if let Some(path) = &args.common.config {
        cfg = load_config_file(path)?;
    }
    if let Some(list) = &args.batch_sizes {
        cfg.batch_sizes = list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Invalid(format!("bad batch size '{p}'")))
            })
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(k) = args.seeds {
        cfg.seeds = (1..=k).collect();
    }
    if let Some(v) = args.n_pairs {
        cfg.scan.n_pairs = v;
    }
    if let Some(v) = args.dim {
        cfg.scan.dim = v;
    }
    let rows = with_jobs(args.jobs, || {
        structure_residual_scan(&cfg.point, &cfg.batch_sizes, &cfg.seeds, &cfg.scan)
    })?;
    let dir = args.common.out_dir();
    ensure_dir(&dir)?;
    output::write_json(&dir.join("residual_scan.json"), &rows)?;
    for row in &rows {
        println!(
            "B = {:>6}: mean relative residual {:.5} (stderr {:.5})",
            row.batch, row.mean_relative_residual, row.std_error
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- helpers

fn resolve_preset(common: &CommonArgs) -> Result<Option<Preset>> {
    match &common.preset {
        Some(name) => Ok(Some(preset(name)?)),
        None => Ok(None),
    }
}

/// Resolve a config that has no preset form: defaults, then config file.
fn resolve_plain_config<T: DeserializeOwned>(common: &CommonArgs, default: T) -> Result<T> {
    if common.preset.is_some() {
        return Err(Error::Invalid("this subcommand has no presets".into()));
    }
    match &common.config {
        Some(path) => load_config_file(path),
        None => Ok(default),
    }
}

/// Run a closure on a dedicated rayon pool when --jobs is given.
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None | Some(0) => f(),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Invalid(format!("cannot build thread pool: {e}")))?;
            pool.install(f)
        }
    }
}

/// CLI entry point; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; keep their conventional exit 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Command::GenData(args) => run_gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Project(args) => run_project(args),
        Command::Flow(args) => run_flow(args),
        Command::ScanN(args) => run_scan_n(args),
        Command::SgdVsFlow(args) => run_sgd_vs_flow(args),
        Command::StdTrain(args) => run_std_train(args),
        Command::Interpret(args) => run_interpret(args),
        Command::ResidualScan(args) => run_residual_scan(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
