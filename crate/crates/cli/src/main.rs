use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uwb_core::netsim::EventTrace;
use uwb_core::twr::{calibrate, read_calibration_samples};
use uwb_core::ExperimentConfig;
use uwb_harness::drift::{run_driftplot, write_drift_csv};
use uwb_harness::pipeline::{
    localize, read_positions_csv, read_truth_csv, write_positions_csv, write_truth_csv,
};
use uwb_harness::report::{build_report, AccuracyReport};
use uwb_harness::sweep::{run_sweep, sweep_rows, write_sweep_csv, SweepParameter};
use uwb_harness::{load_config, run_experiment, simulate, HarnessError};

#[derive(Parser)]
#[command(name = "uwbloc", version, about = "Simulate and evaluate UWB TWR and TDoA localization")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol and write trace.jsonl.
    Simulate,
    /// Solve a trace; writes positions.csv and truth.csv.
    Localize {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Score positions against truth; writes report.json.
    Report {
        #[arg(long)]
        positions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Adds message counts to the report.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Meters, comma separated. Defaults to the config's thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
    /// Simulate, localize and report in one go.
    Run,
    /// Repeat the run for several values of one parameter; writes sweep.csv.
    Sweep {
        /// sync_interval_s, timestamp_noise_sigma_s, method or filter.
        #[arg(long)]
        parameter: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
    /// Received-interval drift between two anchors; writes drift.csv.
    Driftplot {
        #[arg(long)]
        f_sync: f64,
        #[arg(long)]
        duration: f64,
    },
    /// Fit a range calibration from a CSV with true_m,measured_m columns.
    Calibrate {
        #[arg(long)]
        samples: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| HarnessError::invalid("--config is required for this command"))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, HarnessError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn read_trace(path: &Path) -> Result<EventTrace, HarnessError> {
    EventTrace::read_jsonl(open(path)?).map_err(|e| HarnessError::invalid(format!("{}: {e}", path.display())))
}

fn csv_err(path: &str) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::runtime(format!("{path}: {e}"))
}

fn write_report(out: &Path, report: &AccuracyReport) -> Result<(), HarnessError> {
    let path = out.join("report.json");
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    fs::write(&path, report.to_json() + "\n").map_err(|e| HarnessError::io(path, e))?;
    println!("{}", report.table());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::Simulate => {
            let cfg = config(cli)?;
            let trace = simulate(&cfg)?;
            trace
                .write_jsonl(create(&cli.out, "trace.jsonl")?)
                .map_err(HarnessError::runtime)?;
            println!(
                "epochs {}  messages {}  drops {}",
                cfg.epochs,
                trace.messages(),
                trace.drops()
            );
        }
        Command::Localize { trace } => {
            let cfg = config(cli)?;
            let trace = read_trace(trace)?;
            let loc = localize(&cfg, &trace)?;
            write_positions_csv(create(&cli.out, "positions.csv")?, &loc.rows).map_err(csv_err("positions.csv"))?;
            write_truth_csv(create(&cli.out, "truth.csv")?, &loc.truth).map_err(csv_err("truth.csv"))?;
            if !loc.tdoa.is_empty() {
                uwb_core::tdoa::write_tdoa_csv(create(&cli.out, "tdoa.csv")?, &loc.tdoa)
                    .map_err(csv_err("tdoa.csv"))?;
            }
            println!("epochs {}  fixes {}", loc.rows.len(), loc.fixes());
        }
        Command::Report {
            positions,
            truth,
            trace,
            thresholds,
        } => {
            let cfg = config(cli)?;
            let rows = read_positions_csv(open(positions)?)
                .map_err(|e| HarnessError::invalid(format!("{}: {e}", positions.display())))?;
            let truth_rows = read_truth_csv(open(truth)?)
                .map_err(|e| HarnessError::invalid(format!("{}: {e}", truth.display())))?;
            let trace = trace.as_deref().map(read_trace).transpose()?;
            let thresholds = thresholds.clone().unwrap_or_else(|| cfg.thresholds_m.clone());
            let report = build_report(&cfg, &rows, &truth_rows, &thresholds, trace.as_ref())?;
            write_report(&cli.out, &report)?;
        }
        Command::Run => {
            let cfg = config(cli)?;
            let exp = run_experiment(&cfg)?;
            exp.trace
                .write_jsonl(create(&cli.out, "trace.jsonl")?)
                .map_err(HarnessError::runtime)?;
            write_positions_csv(create(&cli.out, "positions.csv")?, &exp.localization.rows)
                .map_err(csv_err("positions.csv"))?;
            write_truth_csv(create(&cli.out, "truth.csv")?, &exp.localization.truth).map_err(csv_err("truth.csv"))?;
            write_report(&cli.out, &exp.report)?;
        }
        Command::Sweep { parameter, values } => {
            let cfg = config(cli)?;
            let parameter: SweepParameter = parameter.parse()?;
            let points = run_sweep(&cfg, parameter, values)?;
            let rows = sweep_rows(parameter, &points);
            write_sweep_csv(create(&cli.out, "sweep.csv")?, &rows).map_err(csv_err("sweep.csv"))?;
            for p in &points {
                let pct: Vec<String> = p
                    .report
                    .thresholds
                    .iter()
                    .map(|t| format!("<={:.0}cm {:.1}%", t.threshold_m * 100.0, t.pct_within))
                    .collect();
                println!(
                    "{parameter}={:<10} {}  mean {:.4} m",
                    p.value,
                    pct.join("  "),
                    p.report.mean_error_m
                );
            }
        }
        Command::Driftplot { f_sync, duration } => {
            let cfg = config(cli)?;
            let r = run_driftplot(&cfg, *f_sync, *duration)?;
            write_drift_csv(create(&cli.out, "drift.csv")?, &r.rows).map_err(csv_err("drift.csv"))?;
            println!(
                "anchors {} and {}: slope {:.3} ns/s ({:.2} m of range error per second)",
                r.anchor_a,
                r.anchor_b,
                r.slope_ns_per_s,
                r.range_error_per_second_m()
            );
        }
        Command::Calibrate { samples } => {
            let data = read_calibration_samples(open(samples)?)
                .map_err(|e| HarnessError::invalid(format!("{}: {e}", samples.display())))?;
            let model = calibrate(&data).map_err(|e| HarnessError::invalid(e.to_string()))?;
            let json = serde_json::to_string_pretty(&model).expect("model serializes");
            let path = cli.out.join("calibration.json");
            fs::create_dir_all(&cli.out).map_err(|e| HarnessError::io(&cli.out, e))?;
            fs::write(&path, json.clone() + "\n").map_err(|e| HarnessError::io(path, e))?;
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
