use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tasfar::dataio::{load_csv_with, Dataset, ScenarioSpec, SplitRule, Standardizer};
use tasfar::pipeline::{
    adapt, baseline_naive_selftrain, evaluate, sweep, train_source, write_manifest, write_sweep_csv,
    AdaptationConfig, PipelineFailure, SourceTrainConfig, SweepGrid,
};
use tasfar::{gen_scenario, Error, Regressor};

#[derive(Parser)]
#[command(name = "tasfar", version, about = "Source-free adaptation of dropout regressors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a source model on a labeled CSV.
    TrainSource(TrainSourceArgs),
    /// Adapt a source model to an unlabeled target CSV.
    Adapt(AdaptArgs),
    /// Score a model on a labeled CSV and print metrics as JSON.
    Evaluate(EvaluateArgs),
    /// Generate source and target CSVs from a scenario JSON.
    GenScenario(GenScenarioArgs),
    /// Map and pseudo-label quality over a grid of cells, q and eta.
    Sweep(SweepArgs),
    /// Partition a CSV by a row predicate into source and target files.
    Split(SplitArgs),
}

#[derive(Args)]
struct Columns {
    /// Label column names, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    /// Feature column names, comma separated (default: every non-label column).
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
}

#[derive(Args)]
struct ModelInput {
    /// Model file written by `train-source` or `adapt`.
    #[arg(long)]
    model: PathBuf,
    /// Standardizer JSON (default: `<model>.scaler.json`, then the one next
    /// to the source model for adapted models).
    #[arg(long)]
    scaler: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// Training options as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output model file; the standardizer goes to `<out>.scaler.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Tasfar,
    Naive,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Target CSV; label columns, if present, are used only for reporting.
    #[arg(long)]
    target: PathBuf,
    /// Labeled held-out source CSV.
    #[arg(long)]
    calibration: PathBuf,
    /// Adaptation config JSON (default: built-in defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Labeled held-out target CSV for reporting.
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    columns: Columns,
    #[arg(long, value_enum, default_value = "tasfar")]
    method: MethodArg,
    /// Output directory for model, manifest, pseudo-labels, maps and predictions.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelInput,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    columns: Columns,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenScenarioArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    source_out: PathBuf,
    #[arg(long)]
    target_out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelInput,
    /// Labeled target CSV.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    columns: Columns,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    grid_cells: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "40")]
    segments_q: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.9")]
    eta: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Rows matching this rule form the target, e.g. `dis<2.5`.
    #[arg(long)]
    rule: SplitRule,
    #[arg(long)]
    source_out: PathBuf,
    #[arg(long)]
    target_out: PathBuf,
    /// Also move this fraction of source rows to a calibration file.
    #[arg(long, requires = "calibration_out")]
    calibration_fraction: Option<f64>,
    #[arg(long)]
    calibration_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn scaler_sidecar(model: &Path) -> PathBuf {
    let mut name = model.as_os_str().to_owned();
    name.push(".scaler.json");
    PathBuf::from(name)
}

impl ModelInput {
    fn load(&self) -> Result<(Regressor<f64>, Standardizer)> {
        let model = Regressor::<f64>::load(&self.model)?;
        let path = self.scaler.clone().unwrap_or_else(|| scaler_sidecar(&self.model));
        let scaler = Standardizer::load(&path)?;
        if scaler.mean.len() != model.input_dim() {
            return Err(Error::Schema(format!(
                "standardizer has {} features, model expects {}",
                scaler.mean.len(),
                model.input_dim()
            ))
            .into());
        }
        Ok((model, scaler))
    }
}

fn load_labeled(path: &Path, columns: &Columns, scaler: &Standardizer) -> Result<Dataset<f64>> {
    Ok(load_csv_with(path, &columns.labels, &scaler.feature_names, Some(scaler))?)
}

/// Labeled when the label columns exist, unlabeled otherwise.
fn load_target(path: &Path, columns: &Columns, scaler: &Standardizer) -> Result<Dataset<f64>> {
    match load_csv_with(path, &columns.labels, &scaler.feature_names, Some(scaler)) {
        Ok(d) => Ok(d),
        Err(Error::Schema(_)) => Ok(load_csv_with(path, &[], &scaler.feature_names, Some(scaler))?),
        Err(e) => Err(e.into()),
    }
}

fn adaptation_config(path: Option<&Path>) -> Result<AdaptationConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(AdaptationConfig::from_json(&text)?)
        }
        None => Ok(AdaptationConfig::default()),
    }
}

fn train_source_cmd(args: &TrainSourceArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SourceTrainConfig::default(),
    };
    if let Some(h) = &args.hidden {
        cfg.hidden = h.clone();
    }
    cfg.dropout_rate = args.dropout.unwrap_or(cfg.dropout_rate);
    cfg.learning_rate = args.learning_rate.unwrap_or(cfg.learning_rate);
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = args.seed.unwrap_or(cfg.seed);

    let data = load_csv_with::<f64>(&args.data, &args.columns.labels, &args.columns.features, None)?;
    log::info!("training on {} rows of {}", data.len(), args.data.display());
    let (model, history) = train_source(&data, &cfg)?;
    model.save(&args.out)?;
    let scaler = data.standardizer.as_ref().expect("loaded datasets carry a standardizer");
    scaler.save(scaler_sidecar(&args.out))?;
    let summary = serde_json::json!({
        "rows": data.len(),
        "dropped_rows": data.dropped_rows,
        "config": cfg,
        "final_loss": history.last(),
        "loss_history": history,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn adapt_cmd(args: &AdaptArgs) -> Result<()> {
    let cfg = adaptation_config(args.config.as_deref())?;
    let (model, scaler) = args.model.load()?;
    let target = load_target(&args.target, &args.columns, &scaler)?;
    let calibration = load_labeled(&args.calibration, &args.columns, &scaler)?;
    let test = args
        .test
        .as_deref()
        .map(|p| load_labeled(p, &args.columns, &scaler))
        .transpose()?;
    let run = match args.method {
        MethodArg::Tasfar => adapt(&model, &target, &cfg, &calibration, test.as_ref()),
        MethodArg::Naive => baseline_naive_selftrain(&model, &target, &cfg, &calibration, test.as_ref()),
    };
    let mut output = match run {
        Ok(o) => o,
        Err(failure) => {
            if let Some(partial) = &failure.partial {
                write_manifest(partial, &args.out)?;
            }
            return Err(failure.into());
        }
    };
    output.write_artifacts(&args.out)?;
    scaler.save(scaler_sidecar(&args.out.join(tasfar::pipeline::MODEL_FILE)))?;
    let r = &output.report;
    log::info!(
        "uncertain ratio {:.3}, epochs {}, mse reduction {:?}%",
        r.uncertain_ratio,
        r.epochs_run,
        r.mse_reduction_pct
    );
    println!("{}", args.out.join(tasfar::pipeline::MANIFEST_FILE).display());
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let (model, scaler) = args.model.load()?;
    let data = load_labeled(&args.data, &args.columns, &scaler)?;
    let text = serde_json::to_string_pretty(&evaluate(&model, &data)?)?;
    match &args.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn gen_scenario_cmd(args: &GenScenarioArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec).with_context(|| format!("reading {}", args.spec.display()))?;
    let spec = ScenarioSpec::from_json(&text)?;
    let (source, target) = gen_scenario::<f64>(&spec)?;
    source.save_csv(&args.source_out)?;
    target.save_csv(&args.target_out)?;
    Ok(())
}

fn sweep_cmd(args: &SweepArgs) -> Result<()> {
    let cfg = adaptation_config(args.config.as_deref())?;
    let (model, scaler) = args.model.load()?;
    let target = load_labeled(&args.target, &args.columns, &scaler)?;
    let calibration = load_labeled(&args.calibration, &args.columns, &scaler)?;
    let grid = SweepGrid {
        grid_cells: args.grid_cells.clone(),
        segments_q: args.segments_q.clone(),
        eta: args.eta.clone(),
    };
    let rows = sweep(&model, &target, &calibration, &cfg, &grid)?;
    let file = std::fs::File::create(&args.out).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    write_sweep_csv(&rows, file)?;
    Ok(())
}

fn split_cmd(args: &SplitArgs) -> Result<()> {
    let io = |path: &Path, e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let file = std::fs::File::open(&args.data).map_err(|e| io(&args.data, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(Error::from)?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == args.rule.column)
        .ok_or_else(|| Error::Schema(format!("column `{}` not found in {}", args.rule.column, args.data.display())))?;
    let (mut source, mut target) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.map_err(Error::from)?;
        let cell = record.get(col).unwrap_or("").trim();
        if args.rule.matches(cell)? {
            target.push(record);
        } else {
            source.push(record);
        }
    }
    if source.is_empty() || target.is_empty() {
        let side = if source.is_empty() { "source" } else { "target" };
        return Err(Error::Data(format!("rule `{}` leaves the {side} side empty", args.rule)).into());
    }
    let mut calibration = Vec::new();
    if let Some(fraction) = args.calibration_fraction {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("calibration fraction must lie in [0, 1), got {fraction}")).into());
        }
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..source.len()).collect();
        idx.shuffle(&mut tasfar::rng::seeded(args.seed));
        let take = (fraction * source.len() as f64).round() as usize;
        let mut chosen = vec![false; source.len()];
        for &i in &idx[..take] {
            chosen[i] = true;
        }
        let (cal, rest): (Vec<_>, Vec<_>) = source.into_iter().zip(chosen).partition(|(_, c)| *c);
        calibration = cal.into_iter().map(|(r, _)| r).collect();
        source = rest.into_iter().map(|(r, _)| r).collect();
    }
    let write = |path: &Path, rows: &[csv::StringRecord]| -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&headers).map_err(Error::from)?;
        for r in rows {
            w.write_record(r).map_err(Error::from)?;
        }
        w.flush().map_err(|e| io(path, e))?;
        Ok(())
    };
    write(&args.source_out, &source)?;
    write(&args.target_out, &target)?;
    if let Some(p) = &args.calibration_out {
        write(p, &calibration)?;
    }
    println!(
        "source {} target {} calibration {}",
        source.len(),
        target.len(),
        calibration.len()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.exit_code() as u8;
        }
        if let Some(f) = cause.downcast_ref::<PipelineFailure>() {
            return f.error.exit_code() as u8;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainSource(a) => train_source_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::GenScenario(a) => gen_scenario_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Split(a) => split_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
