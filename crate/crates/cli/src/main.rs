use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crimemap_cli::config::{self, LoadedConfig};
use crimemap_cli::pipeline::{self, StageRecord};
use crimemap_cli::CliError;
use crimemap_core::geo::LatLon;
use crimemap_core::synth::{generate_city, SynthCityConfig};

/// Crime-report pipeline: ingest, label, fetch tiles, train, evaluate and map.
#[derive(Parser)]
#[command(name = "crimemap", version)]
struct Cli {
    /// Pipeline configuration file (TOML with dotted keys).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.iterations=500. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Cap on worker threads for every pool [default: the config's `workers`, 8]
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Permit network requests when imagery.provider = "remote".
    #[arg(long, global = true, default_value_t = false)]
    allow_remote: bool,
    /// Increase log detail on stderr (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter the report file into ingest/reports.jsonl.
    Ingest,
    /// Score grid cells, bin them into three levels and balance the classes.
    Label,
    /// Acquire one tile per balanced cell into dataset/.
    Fetch,
    /// Train a fresh model on the whole dataset.
    Train,
    /// Replace a trained model's head and train it on this city's dataset.
    Finetune {
        /// Model file to start from.
        #[arg(long, value_name = "PATH")]
        base: PathBuf,
    },
    /// Repeated stratified hold-out evaluation.
    Eval,
    /// Predict a label for every grid cell and compare with the official map.
    PredictMap {
        /// Model file [default: <output_dir>/model/model.bin]
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
    },
    /// Render map files as GeoJSON layers and PNG.
    Render {
        /// Map JSON to render; repeatable [default: this city's official and predicted maps]
        #[arg(long = "map", value_name = "PATH")]
        maps: Vec<PathBuf>,
        /// Pixels per cell side [default: render.scale from the config, 4]
        #[arg(long)]
        scale: Option<u32>,
    },
    /// ingest, label, fetch, eval, train, predict-map and render in sequence.
    FullRun,
    /// Write a seeded synthetic city's reports (and optionally a starter config).
    SynthCity {
        /// Report CSV to write.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Layout seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        rows: usize,
        #[arg(long, default_value_t = 40)]
        cols: usize,
        #[arg(long, default_value_t = 30.0)]
        cell_side_m: f64,
        /// Latitude of the south-west corner.
        #[arg(long, default_value_t = 41.80, allow_negative_numbers = true)]
        lat: f64,
        /// Longitude of the south-west corner.
        #[arg(long, default_value_t = -87.70, allow_negative_numbers = true)]
        lon: f64,
        /// Also write a pipeline config for the city here.
        #[arg(long, value_name = "PATH")]
        write_config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Invalid("--config is required for this command".into()))?;
    config::load(path, &cli.set)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::SynthCity {
        out,
        seed,
        rows,
        cols,
        cell_side_m,
        lat,
        lon,
        write_config,
    } = &cli.command
    {
        return synth_city(out, *seed, *rows, *cols, *cell_side_m, LatLon { lat: *lat, lon: *lon }, write_config.as_ref());
    }
    let cfg = load_config(&cli)?;
    let workers = cli.workers.unwrap_or(cfg.config.workers);
    if workers == 0 {
        return Err(CliError::Invalid("--workers must be at least 1".into()));
    }
    // Training parallelism runs on the global pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    log::info!("config hash {}", cfg.hash);
    let allow = cli.allow_remote;
    let model_default = cfg.out(pipeline::MODEL);
    let scale = cfg.config.render.scale;
    let stage = |name: &str, rec: Result<StageRecord, CliError>| -> Result<StageRecord, CliError> {
        let rec = rec?;
        pipeline::write_run_manifest(&cfg, name, &rec)?;
        Ok(rec)
    };
    match &cli.command {
        Command::Ingest => stage("ingest", pipeline::ingest(&cfg)).map(drop),
        Command::Label => stage("label", pipeline::label(&cfg)).map(drop),
        Command::Fetch => stage("fetch", pipeline::fetch(&cfg, workers, allow)).map(drop),
        Command::Train => stage("train", pipeline::train_stage(&cfg)).map(drop),
        Command::Finetune { base } => stage("finetune", pipeline::finetune(&cfg, base)).map(drop),
        Command::Eval => stage("eval", pipeline::eval(&cfg)).map(drop),
        Command::PredictMap { model } => {
            let model = model.clone().unwrap_or(model_default);
            stage("predict-map", pipeline::predict(&cfg, &model, workers, allow)).map(drop)
        }
        Command::Render { maps, scale: s } => {
            let s = s.unwrap_or(scale);
            if s == 0 {
                return Err(CliError::Invalid("--scale must be at least 1".into()));
            }
            stage("render", pipeline::render(&cfg, maps, s)).map(drop)
        }
        Command::FullRun => {
            let mut all = StageRecord::default();
            let steps: [(&str, &dyn Fn() -> Result<StageRecord, CliError>); 7] = [
                ("ingest", &|| pipeline::ingest(&cfg)),
                ("label", &|| pipeline::label(&cfg)),
                ("fetch", &|| pipeline::fetch(&cfg, workers, allow)),
                ("eval", &|| pipeline::eval(&cfg)),
                ("train", &|| pipeline::train_stage(&cfg)),
                ("predict-map", &|| pipeline::predict(&cfg, &model_default, workers, allow)),
                ("render", &|| pipeline::render(&cfg, &[], scale)),
            ];
            for (name, f) in steps {
                log::info!("full-run: {name}");
                let rec = stage(name, f())?;
                if all.inputs.is_empty() {
                    all.inputs = rec.inputs;
                }
                all.outputs.extend(rec.outputs);
            }
            pipeline::write_run_manifest(&cfg, "full-run", &all).map(drop)
        }
        Command::SynthCity { .. } => unreachable!("handled above"),
    }
}

fn synth_city(
    out: &PathBuf,
    seed: u64,
    rows: usize,
    cols: usize,
    cell_side_m: f64,
    south_west: LatLon,
    write_config: Option<&PathBuf>,
) -> Result<(), CliError> {
    let cfg = SynthCityConfig {
        rows,
        cols,
        cell_side_m,
        south_west,
        seed,
        ..SynthCityConfig::default()
    };
    let city = generate_city(&cfg).map_err(|e| CliError::Invalid(format!("synthetic city: {e}")))?;
    pipeline::write_reports_csv(out, &city.reports)?;
    log::info!("wrote {} reports to {}", city.reports.len(), out.display());
    if let Some(path) = write_config {
        let b = city.grid.bbox();
        let reports = out
            .canonicalize()
            .map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
        let text = format!(
            "city = \"synth{seed}\"\n\
             reports = {reports:?}\n\
             output_dir = \"out_synth{seed}\"\n\
             grid.bbox = {{ lat_min = {:?}, lat_max = {:?}, lon_min = {:?}, lon_max = {:?} }}\n\
             grid.cell_side_m = {cell_side_m:?}\n\
             imagery.synthetic_seed = {seed}\n",
            b.lat_min, b.lat_max, b.lon_min, b.lon_max
        );
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
