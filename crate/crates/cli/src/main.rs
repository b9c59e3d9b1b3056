//! `valley` — experiment workbench for networks with skip connections to
//! the output layer.
//!
//! Every subcommand reads a JSON config file and emits a JSON result to
//! stdout (or `--out`). Exit codes: 0 on success, 2 on validation or
//! assumption failures (bad configs, malformed data, unmet structural
//! preconditions), 3 on numerical failures (rank deficiency, divergence,
//! failed certificates).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use valley_core::certificate::{certify, CertificateConfig};
use valley_core::data::{load_csv, load_idx_pair, synth_dataset, Dataset};
use valley_core::engine::{ParamLayout, ParamState};
use valley_core::landscape::{deep_skinny_demo, landscape_slice_with, DirectionNorm};
use valley_core::losses::LossKind;
use valley_core::netgraph::{local1d, mlp, ActivationKind, AugmentOptions, NetworkSpec};
use valley_core::solvers::{
    escape_path, init_truncated_gaussian, random_feature_fit, sgd_train, SgdConfig,
};
use valley_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "valley",
    version,
    about = "Workbench for networks with skip connections to the output layer",
    after_help = "Exit codes: 0 success, 2 validation/assumption failure, 3 numerical failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the JSON result to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on a single thread with single-partition reductions, making all
    /// floating-point results bit-reproducible across machines.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network description for structural violations (and, with a
    /// dataset, the theory assumptions).
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Add randomly drawn skip connections up to a target count and write
    /// the augmented network.
    Augment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Construct parameters that certify a full-rank feature matrix and
    /// verify the determinant bound.
    Certify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Freeze random hidden weights and solve the output layer by least
    /// squares.
    SolveRand {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train with SGD + Nesterov momentum under a milestone schedule.
    TrainSgd {
        #[arg(long)]
        config: PathBuf,
    },
    /// Walk the straight output-weight segment whose endpoint has loss ε/2.
    EscapePath {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample the loss on a 2-D slice along filter-normalized random
    /// directions.
    Landscape {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a deep narrow chain MLP with and without output skips.
    DemoSkinny {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Where a network description comes from: a file path, or an inline
/// builder for the two stock families.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum NetworkSource {
    Path(PathBuf),
    Mlp {
        d: usize,
        widths: Vec<usize>,
        m: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
        #[serde(default = "default_true")]
        skip_last_layer: bool,
    },
    Local1d {
        d: usize,
        window: usize,
        stride: usize,
        filters: usize,
        m: usize,
        #[serde(default = "default_activation")]
        activation: ActivationKind,
        #[serde(default)]
        share_weights: bool,
    },
}

/// Where training data comes from: a CSV path, an IDX image/label pair, or
/// a synthetic blob generator.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum DatasetSource {
    Csv(PathBuf),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Synth {
        n: usize,
        d: usize,
        m: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_activation() -> ActivationKind {
    ActivationKind::Sigmoid
}

fn default_true() -> bool {
    true
}

fn default_separation() -> f64 {
    2.0
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

fn default_n_samples() -> usize {
    100
}

fn default_extent() -> f64 {
    1.0
}

fn default_resolution() -> usize {
    41
}

fn default_norm() -> DirectionNorm {
    DirectionNorm::PerBlock
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ValidateConfig {
    network: NetworkSource,
    #[serde(default)]
    dataset: Option<DatasetSource>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AugmentConfig {
    network: NetworkSource,
    target_m: usize,
    #[serde(default)]
    layer_range: Option<(usize, usize)>,
    #[serde(default)]
    keep_last_layer: bool,
    #[serde(default)]
    seed: u64,
    output: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CertifyConfig {
    network: NetworkSource,
    dataset: DatasetSource,
    #[serde(default)]
    certificate: CertificateConfig,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    params_out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveRandConfig {
    network: NetworkSource,
    dataset: DatasetSource,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    rank_tol: Option<f64>,
    #[serde(default)]
    params_out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    network: NetworkSource,
    dataset: DatasetSource,
    #[serde(default = "default_loss")]
    loss: LossKind,
    #[serde(default)]
    sgd: SgdConfig,
    /// Resume from a parameter file instead of a fresh truncated-Gaussian
    /// draw (`.json` or binary checkpoint, by extension).
    #[serde(default)]
    init: Option<PathBuf>,
    #[serde(default)]
    params_out: Option<PathBuf>,
    #[serde(default)]
    history_out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EscapeConfig {
    network: NetworkSource,
    dataset: DatasetSource,
    params: PathBuf,
    epsilon: f64,
    #[serde(default = "default_n_samples")]
    n_samples: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LandscapeConfig {
    network: NetworkSource,
    dataset: DatasetSource,
    params: PathBuf,
    #[serde(default = "default_extent")]
    extent: f64,
    #[serde(default = "default_resolution")]
    resolution: usize,
    #[serde(default = "default_loss")]
    loss: LossKind,
    #[serde(default = "default_norm")]
    normalization: DirectionNorm,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    csv_out: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoConfig {
    depth: usize,
    width: usize,
    dataset: DatasetSource,
    #[serde(default = "default_activation")]
    activation: ActivationKind,
    with_skips: bool,
    #[serde(default)]
    sgd: SgdConfig,
    #[serde(default)]
    params_out: Option<PathBuf>,
}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))
}

fn load_network(source: &NetworkSource) -> Result<NetworkSpec> {
    match source {
        NetworkSource::Path(p) => NetworkSpec::load(p),
        NetworkSource::Mlp {
            d,
            widths,
            m,
            activation,
            skip_last_layer,
        } => mlp(*d, widths, *m, *activation, *skip_last_layer),
        NetworkSource::Local1d {
            d,
            window,
            stride,
            filters,
            m,
            activation,
            share_weights,
        } => local1d(
            *d,
            *window,
            *stride,
            *filters,
            *m,
            *activation,
            *share_weights,
        ),
    }
}

fn load_dataset(source: &DatasetSource) -> Result<Dataset> {
    match source {
        DatasetSource::Csv(p) => load_csv(p),
        DatasetSource::Idx { images, labels } => load_idx_pair(images, labels),
        DatasetSource::Synth {
            n,
            d,
            m,
            separation,
            seed,
        } => synth_dataset(*n, *d, *m, *separation, *seed),
    }
}

/// Loads parameters from `.json` (portable) or binary checkpoint files.
fn load_params(layout: &ParamLayout, path: &Path) -> Result<ParamState> {
    if path.extension().is_some_and(|e| e == "json") {
        ParamState::load_json(path)
    } else {
        ParamState::load_checkpoint(layout, path)
    }
}

fn save_params(params: &ParamState, layout: &ParamLayout, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        params.save_json(path)
    } else {
        params.save_checkpoint(layout, path)
    }
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Parse(e.to_string()))
}

fn cmd_validate(config: &Path) -> Result<(Value, u8)> {
    let cfg: ValidateConfig = read_config(config)?;
    let spec = load_network(&cfg.network)?;
    let validation = spec.validate();
    let mut code = if validation.is_valid() { 0 } else { 2 };
    let mut out = json!({
        "d": spec.d,
        "hidden_units": spec.h,
        "outputs": spec.m,
        "skip_count": spec.skip_count(),
        "validation": to_value(&validation)?,
    });
    if let (true, Some(src)) = (validation.is_valid(), cfg.dataset.as_ref()) {
        let data = load_dataset(src)?;
        let assumptions = spec.check_assumptions(&data)?;
        if !assumptions.all_ok() {
            code = 2;
        }
        out["assumptions"] = to_value(&assumptions)?;
    }
    Ok((out, code))
}

fn cmd_augment(config: &Path, seed: Option<u64>) -> Result<(Value, u8)> {
    let mut cfg: AugmentConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = load_network(&cfg.network)?;
    let augmented = spec.augment_with_skips(
        cfg.target_m,
        cfg.seed,
        &AugmentOptions {
            layer_range: cfg.layer_range,
            keep_last_layer: cfg.keep_last_layer,
        },
    )?;
    augmented.save(&cfg.output)?;
    Ok((
        json!({
            "written": cfg.output,
            "skip_count": augmented.skip_count(),
            "hidden_units": augmented.h,
        }),
        0,
    ))
}

fn cmd_certify(config: &Path, seed: Option<u64>) -> Result<(Value, u8)> {
    let mut cfg: CertifyConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = load_network(&cfg.network)?;
    let data = load_dataset(&cfg.dataset)?;
    let (params, report) = certify(&spec, &data, &cfg.certificate, cfg.seed)?;
    if let Some(path) = &cfg.params_out {
        let layout = ParamLayout::of(&spec)?;
        save_params(&params, &layout, path)?;
    }
    let code = if report.passed { 0 } else { 3 };
    Ok((to_value(&report)?, code))
}

fn cmd_solve_rand(config: &Path, seed: Option<u64>) -> Result<(Value, u8)> {
    let mut cfg: SolveRandConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = load_network(&cfg.network)?;
    let data = load_dataset(&cfg.dataset)?;
    let outcome = random_feature_fit(&spec, &data, cfg.seed, cfg.rank_tol)?;
    if let Some(path) = &cfg.params_out {
        let layout = ParamLayout::of(&spec)?;
        save_params(&outcome.params, &layout, path)?;
    }
    Ok((
        json!({
            "report": to_value(&outcome.report)?,
            "residual_norm": outcome.residual_norm,
            "effective_rank": outcome.effective_rank,
            "rank_deficient": outcome.rank_deficient,
        }),
        0,
    ))
}

fn cmd_train(config: &Path, seed: Option<u64>, deterministic: bool) -> Result<(Value, u8)> {
    let mut cfg: TrainConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.sgd.seed = s;
    }
    if deterministic {
        cfg.sgd.deterministic = true;
    }
    let spec = load_network(&cfg.network)?;
    let data = load_dataset(&cfg.dataset)?;
    let layout = ParamLayout::of(&spec)?;
    let params0 = match &cfg.init {
        Some(path) => load_params(&layout, path)?,
        None => init_truncated_gaussian(&spec, cfg.sgd.seed)?,
    };
    match sgd_train(&spec, &data, &params0, &cfg.sgd, cfg.loss) {
        Ok((params, history)) => {
            if let Some(path) = &cfg.params_out {
                save_params(&params, &layout, path)?;
            }
            if let Some(path) = &cfg.history_out {
                let text = serde_json::to_string_pretty(&history)
                    .map_err(|e| Error::Parse(e.to_string()))?;
                std::fs::write(path, text)?;
            }
            let last = history.epochs.last();
            Ok((
                json!({
                    "epochs_run": history.epochs.len(),
                    "final_loss": last.map(|e| e.loss),
                    "final_errors": last.map(|e| e.train_errors),
                    "history": to_value(&history)?,
                }),
                0,
            ))
        }
        // Divergence still reports the history gathered so far, then exits
        // through the numerical-failure code.
        Err(Error::Diverged { at_epoch, history }) => Ok((
            json!({
                "diverged_at_epoch": at_epoch,
                "history": to_value(&history)?,
            }),
            3,
        )),
        Err(e) => Err(e),
    }
}

fn cmd_escape(config: &Path) -> Result<(Value, u8)> {
    let cfg: EscapeConfig = read_config(config)?;
    let spec = load_network(&cfg.network)?;
    let data = load_dataset(&cfg.dataset)?;
    let layout = ParamLayout::of(&spec)?;
    let params = load_params(&layout, &cfg.params)?;
    let report = escape_path(&spec, &params, &data, cfg.epsilon, cfg.n_samples)?;
    Ok((to_value(&report)?, 0))
}

fn cmd_landscape(config: &Path, seed: Option<u64>) -> Result<(Value, u8)> {
    let mut cfg: LandscapeConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let spec = load_network(&cfg.network)?;
    let data = load_dataset(&cfg.dataset)?;
    let layout = ParamLayout::of(&spec)?;
    let params = load_params(&layout, &cfg.params)?;
    let grid = landscape_slice_with(
        &spec,
        &data,
        &params,
        cfg.seed,
        cfg.extent,
        cfg.resolution,
        cfg.loss,
        cfg.normalization,
    )?;
    if let Some(path) = &cfg.csv_out {
        grid.write_csv(path)?;
    }
    Ok((to_value(&grid)?, 0))
}

fn cmd_demo_skinny(config: &Path, seed: Option<u64>, deterministic: bool) -> Result<(Value, u8)> {
    let mut cfg: DemoConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.sgd.seed = s;
    }
    if deterministic {
        cfg.sgd.deterministic = true;
    }
    let data = load_dataset(&cfg.dataset)?;
    let outcome = deep_skinny_demo(
        cfg.depth,
        cfg.width,
        &data,
        cfg.activation,
        cfg.with_skips,
        &cfg.sgd,
    )?;
    if let Some(path) = &cfg.params_out {
        let layout = ParamLayout::of(&outcome.spec)?;
        save_params(&outcome.params, &layout, path)?;
    }
    let last = outcome.history.epochs.last();
    Ok((
        json!({
            "with_skips": cfg.with_skips,
            "skip_count": outcome.spec.skip_count(),
            "hidden_units": outcome.spec.h,
            "epochs_run": outcome.history.epochs.len(),
            "final_loss": last.map(|e| e.loss),
            "final_errors": last.map(|e| e.train_errors),
            "history": to_value(&outcome.history)?,
        }),
        0,
    ))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    let (value, code) = match &cli.command {
        Command::Validate { config } => cmd_validate(config)?,
        Command::Augment { config } => cmd_augment(config, cli.seed)?,
        Command::Certify { config } => cmd_certify(config, cli.seed)?,
        Command::SolveRand { config } => cmd_solve_rand(config, cli.seed)?,
        Command::TrainSgd { config } => cmd_train(config, cli.seed, cli.deterministic)?,
        Command::EscapePath { config } => cmd_escape(config)?,
        Command::Landscape { config } => cmd_landscape(config, cli.seed)?,
        Command::DemoSkinny { config } => cmd_demo_skinny(config, cli.seed, cli.deterministic)?,
    };
    emit(&value, cli.out.as_deref())?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.deterministic {
        // A single-thread pool forces one reduction partition everywhere.
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Error::Numerical(format!("thread pool: {e}"))),
        }
    } else {
        run(&cli)
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
