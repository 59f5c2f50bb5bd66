use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand, ValueEnum};
use eloss_core::analysis::{
    curves_svg, curves_table, mavp_abs, max_metric, sweep_table, write_curves_table,
    write_sweep_table, Curve, SweepRow,
};
use eloss_core::entropy::{entropy_first, entropy_kl, EntropyConfig};
use eloss_core::experiment::{run, write_run_dir, ExperimentConfig, RunDir};
use eloss_core::samples::SampleMatrix;
use eloss_core::trainer::RunStatus;
use eloss_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "eloss", version, about = "k-NN entropy, Eloss training and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the differential entropy of a headerless CSV sample file.
    Entropy {
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Use the first-neighbor formula instead of the k-NN one.
        #[arg(long)]
        first: bool,
        /// Print only the JSON record.
        #[arg(long)]
        json: bool,
    },
    /// Train from one or more experiment configs.
    Train {
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        /// Override the seed; repeat to run several seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Number of runs trained at once.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        json: bool,
    },
    /// Summarize finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Curves)]
        mode: Mode,
        /// Also write CSV/JSON/SVG files here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Curves,
    Anomaly,
    Sweep,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Domain(_) | Error::DegenerateGradient { .. } | Error::UndefinedBaseline => {
                EXIT_NUMERIC
            }
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_USAGE, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn epsilon_override() -> Result<Option<f64>, Failure> {
    match std::env::var("ELOSS_EPSILON") {
        Ok(v) => v
            .trim()
            .parse::<f64>()
            .map(Some)
            .map_err(|_| usage(format!("ELOSS_EPSILON: cannot parse {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn cmd_entropy(csv: &Path, k: usize, first: bool, json: bool) -> Result<(), Failure> {
    let config = match epsilon_override()? {
        Some(e) => EntropyConfig::new(e)?,
        None => EntropyConfig::default(),
    };
    let samples = SampleMatrix::from_csv_path(csv)?;
    let est = if first {
        if k != 1 {
            return Err(usage("--first implies k = 1"));
        }
        entropy_first(&samples, &config)?
    } else {
        entropy_kl(&samples, k, &config)?
    };
    let record = serde_json::to_string(&est).map_err(|e| usage(e.to_string()))?;
    if !json {
        println!("value: {}", est.value);
        println!("k: {}", est.k);
        println!("n: {}", est.n);
        println!("d: {}", est.d);
        println!("clamped_count: {}", est.clamped_count);
    }
    println!("{record}");
    Ok(())
}

struct Job {
    config: ExperimentConfig,
    dir: PathBuf,
}

fn cmd_train(
    configs: &[PathBuf],
    seeds: &[u64],
    out: &Path,
    parallel: usize,
    json: bool,
) -> Result<(), Failure> {
    if parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    let epsilon = epsilon_override()?;
    let mut jobs = Vec::new();
    for path in configs {
        let raw = ExperimentConfig::load(path)?;
        let seed_list: Vec<Option<u64>> =
            if seeds.is_empty() { vec![None] } else { seeds.iter().copied().map(Some).collect() };
        for seed in seed_list {
            let config = raw.clone().materialize(seed, epsilon)?;
            let dir = out.join(config.run_name()?);
            jobs.push(Job { config, dir });
        }
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunStatus, Error>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallel.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let r = run(&job.config).and_then(|o| {
                    write_run_dir(&job.dir, &job.config, &o)?;
                    Ok(o.log.status.clone())
                });
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut worst: Option<Failure> = None;
    for (job, r) in jobs.iter().zip(results.into_inner().expect("results lock")) {
        let dir = job.dir.display();
        match r.expect("every job ran") {
            Ok(status) => {
                let diverged = matches!(status, RunStatus::Diverged { .. });
                if json {
                    let v = serde_json::json!({ "dir": dir.to_string(), "status": status });
                    println!("{v}");
                } else {
                    println!("{dir}: {}", if diverged { "diverged" } else { "completed" });
                }
                if diverged && worst.is_none() {
                    worst = Some(Failure { code: EXIT_NUMERIC, message: format!("{dir}: training diverged") });
                }
            }
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("{dir}: {}", f.message);
                if worst.as_ref().is_none_or(|w| w.code < f.code) {
                    worst = Some(f);
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

fn validation_curve(run: &RunDir) -> Result<Curve, Failure> {
    Ok(Curve::new(run.log.validation_curve())?)
}

fn write_out(out: Option<&Path>, name: &str, contents: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}

fn cmd_report(runs: &[PathBuf], mode: Mode, out: Option<&Path>, json: bool) -> Result<(), Failure> {
    let dirs = runs.iter().map(RunDir::open).collect::<Result<Vec<_>, _>>()?;
    match mode {
        Mode::Curves => {
            let series = dirs
                .iter()
                .map(|d| Ok((d.name(), validation_curve(d)?)))
                .collect::<Result<Vec<_>, Failure>>()?;
            let rows = curves_table(&series)?;
            let mut csv = Vec::new();
            write_curves_table(&rows, &mut csv)?;
            emit(&csv, &rows, json)?;
            write_out(out, "curves.csv", &csv)?;
            write_out(out, "curves.svg", curves_svg("validation metric", &series).as_bytes())?;
        }
        Mode::Anomaly => {
            let mut all = Vec::new();
            for d in &dirs {
                let report = d.anomaly_report()?;
                let mut csv = Vec::new();
                report.write_csv(&mut csv)?;
                if !json {
                    if dirs.len() > 1 {
                        println!("# {}", d.name());
                    }
                    print!("{}", String::from_utf8_lossy(&csv));
                }
                write_out(out, &format!("anomaly-{}.csv", d.name()), &csv)?;
                write_out(out, &format!("anomaly-{}.json", d.name()), report.to_json()?.as_bytes())?;
                all.push(report);
            }
            if json {
                println!("{}", serde_json::to_string(&all).map_err(|e| usage(e.to_string()))?);
            }
        }
        Mode::Sweep => {
            let mut rows = Vec::new();
            let mut series = Vec::new();
            for d in &dirs {
                let curve = validation_curve(d)?;
                rows.push(SweepRow {
                    run: d.name(),
                    coverage: d.config.train.eloss_coverage,
                    max: max_metric(&curve)?,
                    mavp_abs: mavp_abs(&curve)?,
                    ms_per_step: d.ms_per_step(),
                });
                series.push((format!("coverage {}", d.config.train.eloss_coverage), curve));
            }
            let rows = sweep_table(rows);
            let mut csv = Vec::new();
            write_sweep_table(&rows, &mut csv)?;
            emit(&csv, &rows, json)?;
            write_out(out, "sweep.csv", &csv)?;
            write_out(out, "sweep.svg", curves_svg("validation metric by coverage", &series).as_bytes())?;
        }
    }
    Ok(())
}

fn emit<T: serde::Serialize>(csv: &[u8], rows: &T, json: bool) -> Result<(), Failure> {
    if json {
        println!("{}", serde_json::to_string(rows).map_err(|e| usage(e.to_string()))?);
    } else {
        print!("{}", String::from_utf8_lossy(csv));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Entropy { csv, k, first, json } => cmd_entropy(csv, *k, *first, *json),
        Command::Train { configs, seeds, out, parallel, json } => {
            cmd_train(configs, seeds, out, *parallel, *json)
        }
        Command::Report { runs, mode, out, json } => cmd_report(runs, *mode, out.as_deref(), *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
