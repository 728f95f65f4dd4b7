//! Batch driver for the adapter-serving engine: generate traces, run
//! trace-driven simulations and sweeps, print tensor-parallel cost tables,
//! and run the property suites.

mod config;

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use loramux_core::engine::Engine;
use loramux_core::metrics::{compute, MetricsReport, Reward};
use loramux_core::tp::comm_cost;
use loramux_core::verify;
use loramux_core::workload::{downsample_real, gen_synthetic, parse_raw_log, Trace};

use config::{ExperimentFile, GenerateFile};

const OUT_DIR_ENV: &str = "LORAMUX_OUT_DIR";

#[derive(Parser)]
#[command(name = "loramux", version, about = "Multi-adapter serving simulator and cost model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload trace file (synthetic, or downsampled from a raw log).
    Generate {
        /// TOML config; flags below override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output trace path.
        #[arg(long, default_value = "trace.txt")]
        out: PathBuf,
        #[arg(long)]
        setting: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_adapters: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        cv: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run a trace-driven serving simulation (or a sweep) and write event
    /// logs, metrics, and a summary CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config and LORAMUX_OUT_DIR.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the tensor-parallel communication/memory cost table over a
    /// (devices, hidden, rank) grid.
    Tp {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        devices: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4096,5120,7168,8192")]
        hidden: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        rank: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        batch_tokens: u64,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every property suite and print one pass/fail line per check.
    Verify,
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    // Usage errors are validation failures (exit 1); help and version are
    // successes.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate { config, out, setting, seed, n_adapters, alpha, rate, cv, duration } => {
            cmd_generate(config, out, setting, seed, n_adapters, alpha, rate, cv, duration)
        }
        Command::Simulate { config, out_dir } => cmd_simulate(&config, out_dir),
        Command::Tp { devices, hidden, rank, batch_tokens, out } => {
            cmd_tp(&devices, &hidden, &rank, batch_tokens, out)
        }
        Command::Verify => cmd_verify(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    config: Option<PathBuf>,
    out: PathBuf,
    setting: Option<String>,
    seed: Option<u64>,
    n_adapters: Option<usize>,
    alpha: Option<f64>,
    rate: Option<f64>,
    cv: Option<f64>,
    duration: Option<f64>,
) -> Result<(), CliError> {
    let mut file = match config {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            GenerateFile::parse(&text).map_err(CliError::Validation)?
        }
        None => GenerateFile::parse("").map_err(CliError::Validation)?,
    };
    if setting.is_some() {
        file.setting = setting;
    }
    if let Some(name) = &file.setting {
        if loramux_core::settings::setting(name).is_none() {
            return Err(CliError::Validation(format!("unknown setting {name:?}")));
        }
    }

    let trace = if let Some(log_path) = &file.real_log {
        let rate = rate.or(file.rate).ok_or_else(|| {
            CliError::Validation("real-log mode requires `rate`".into())
        })?;
        let duration = duration.or(file.duration).unwrap_or(300.0);
        let reader = fs::File::open(log_path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", log_path.display())))?;
        let raw = parse_raw_log(BufReader::new(reader)).map_err(CliError::runtime)?;
        let workload = file.workload();
        downsample_real(&raw, rate, duration, &workload.rank_list, seed.unwrap_or(workload.seed))
            .map_err(|e| CliError::Validation(e.to_string()))?
    } else {
        let mut workload = file.workload();
        if let Some(v) = seed {
            workload.seed = v;
        }
        if let Some(v) = n_adapters {
            workload.n_adapters = v;
        }
        if let Some(v) = alpha {
            workload.alpha = v;
        }
        if let Some(v) = rate {
            workload.total_rate = v;
        }
        if let Some(v) = cv {
            workload.cv = v;
        }
        if let Some(v) = duration {
            workload.duration = v;
        }
        workload.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        gen_synthetic(&workload).map_err(CliError::runtime)?
    };

    let mut buf = Vec::new();
    trace.write_to(&mut buf).map_err(CliError::runtime)?;
    fs::write(&out, &buf).map_err(CliError::runtime)?;
    println!(
        "wrote {} requests over {} adapters to {}",
        trace.entries.len(),
        trace.meta.n_adapters,
        out.display()
    );
    Ok(())
}

struct PointResult {
    label: String,
    report: MetricsReport,
    events_jsonl: Vec<u8>,
    frag_jsonl: Vec<u8>,
}

fn run_point(trace: &Trace, file: &ExperimentFile, label: String) -> Result<PointResult, String> {
    let setup = file.engine_setup();
    let mut engine = Engine::from_trace(trace, setup.clone());
    let mut frag_jsonl = Vec::new();
    let mut steps = 0u64;
    engine
        .run_with(|e| {
            steps += 1;
            if steps % 64 == 0 {
                let record = serde_json::json!({
                    "time": e.now(),
                    "report": e.pool().fragmentation_report(),
                });
                frag_jsonl.extend_from_slice(record.to_string().as_bytes());
                frag_jsonl.push(b'\n');
            }
        })
        .map_err(|e| format!("{label}: {e}"))?;
    let report = compute(
        engine.events(),
        setup.scheduler.slo_first_token,
        Reward::Linear { tl_max: setup.scheduler.slo_first_token },
    )
    .map_err(|e| format!("{label}: {e}"))?;
    let mut events_jsonl = Vec::new();
    loramux_core::events::write_jsonl(engine.events(), &mut events_jsonl)
        .map_err(|e| format!("{label}: {e}"))?;
    Ok(PointResult { label, report, events_jsonl, frag_jsonl })
}

fn cmd_simulate(config_path: &Path, out_dir_flag: Option<PathBuf>) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config_path.display())))?;
    let file = ExperimentFile::parse(&text).map_err(CliError::Validation)?;
    file.validate().map_err(CliError::Validation)?;

    let out_dir = out_dir_flag
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| file.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out_dir).map_err(CliError::runtime)?;

    // Each point is an independent simulation; sweeps run in parallel.
    let points: Vec<(String, Trace)> = if let Some(sweep) = &file.sweep {
        sweep
            .n_adapters
            .iter()
            .map(|&n| {
                let workload = file.synthetic_for(n);
                gen_synthetic(&workload).map(|t| (format!("n{n}"), t)).map_err(CliError::runtime)
            })
            .collect::<Result<_, _>>()?
    } else if let Some(path) = &file.trace {
        let reader = fs::File::open(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let trace = Trace::read_from(BufReader::new(reader))
            .map_err(|e| CliError::Validation(e.to_string()))?;
        vec![("trace".to_string(), trace)]
    } else {
        let workload = file.workload.as_ref().expect("validated");
        let full = file.synthetic_for(workload.n_adapters);
        vec![(
            format!("n{}", full.n_adapters),
            gen_synthetic(&full).map_err(CliError::runtime)?,
        )]
    };

    let results: Vec<PointResult> = points
        .par_iter()
        .map(|(label, trace)| run_point(trace, &file, label.clone()))
        .collect::<Result<_, _>>()
        .map_err(CliError::Runtime)?;

    let mut summary = String::new();
    summary.push_str("label,");
    summary.push_str(MetricsReport::csv_header());
    summary.push('\n');
    for r in &results {
        fs::write(out_dir.join(format!("events_{}.jsonl", r.label)), &r.events_jsonl)
            .map_err(CliError::runtime)?;
        fs::write(out_dir.join(format!("fragmentation_{}.jsonl", r.label)), &r.frag_jsonl)
            .map_err(CliError::runtime)?;
        let metrics_json =
            serde_json::to_string_pretty(&r.report).map_err(CliError::runtime)?;
        fs::write(out_dir.join(format!("metrics_{}.json", r.label)), metrics_json)
            .map_err(CliError::runtime)?;
        summary.push_str(&format!("{},{}\n", r.label, r.report.csv_row()));
        println!(
            "{}: throughput {:.3} req/s, first token {:.3}s avg, attainment {:.3}, aborted {}",
            r.label,
            r.report.throughput,
            r.report.avg_first_token_latency,
            r.report.slo_attainment,
            r.report.aborted
        );
    }
    fs::write(out_dir.join("summary.csv"), summary).map_err(CliError::runtime)?;
    println!("outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_tp(
    devices: &[usize],
    hidden: &[usize],
    rank: &[usize],
    batch_tokens: u64,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let header = "devices,batch_tokens,hidden,rank,base_comm_elements,lora_comm_elements,\
                  lora_base_ratio,per_device_weight_elements";
    let mut table = String::from(header);
    table.push('\n');
    for &h in hidden {
        for &r in rank {
            for &n in devices {
                let report = comm_cost(n, batch_tokens, h, r)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
                table.push_str(&format!(
                    "{n},{batch_tokens},{h},{r},{},{},{:.8},{}\n",
                    report.base_comm_elements,
                    report.lora_comm_elements,
                    report.ratio,
                    report.per_device_weight_elements
                ));
            }
        }
    }
    print!("{table}");
    if let Some(path) = out {
        fs::write(&path, table).map_err(CliError::runtime)?;
    }
    Ok(())
}

fn cmd_verify() -> Result<(), CliError> {
    let reports = verify::run_all();
    let mut stdout = std::io::stdout().lock();
    let mut failures = 0;
    for r in &reports {
        writeln!(
            stdout,
            "[{}] {:2} {:40} {:6.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.id,
            r.name,
            r.seconds,
            r.detail
        )
        .map_err(CliError::runtime)?;
        if !r.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Runtime(format!("{failures} of {} checks failed", reports.len())));
    }
    writeln!(stdout, "all {} checks passed", reports.len()).map_err(CliError::runtime)?;
    Ok(())
}
