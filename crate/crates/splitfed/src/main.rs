//! Command-line front end: traffic tables, training runs, gradient checks,
//! and synthetic data generation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splitfed::arch::ArchSpec;
use splitfed::config::ExperimentConfig;
use splitfed::data::{save_segments, synth_generate};
use splitfed::error::Error;
use splitfed::federation::{run_experiment, Scheme};
use splitfed::nn::gradcheck::run_suite;
use splitfed::protocol::{traffic_bytes, AccountingMode};

#[derive(Parser)]
#[command(name = "splitfed", version, about = "Split federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-round synchronization traffic for all schemes and device counts
    Traffic(TrafficArgs),
    /// Run a training experiment from a configuration file
    Train(TrainArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic labeled segment dataset as CSV
    SynthData(SynthDataArgs),
}

#[derive(Args)]
struct TrafficArgs {
    /// Architecture: builtin name (desk_small, reference_full) or a file path
    #[arg(long, default_value = "reference_full")]
    arch: String,
    /// Device counts to tabulate
    #[arg(long, value_delimiter = ',', default_values_t = vec![16u64, 32, 64])]
    devices: Vec<u64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    cut_index: usize,
    /// Top-K fraction for the sparsified scheme
    #[arg(long, default_value_t = 0.1)]
    k: f64,
    /// Also write the table as CSV to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override config entries, e.g. --set experiment.devices=16
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (shorthand for --set experiment.out_dir=...)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Scheme name: centralized, fedavg, splitnn, split-sparse
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    error_feedback: Option<bool>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Randomized cases per layer kind
    #[arg(long, default_value_t = 50)]
    cases: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    positive_rate: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SPLITFED_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Traffic(args) => cmd_traffic(args),
        Command::Train(args) => cmd_train(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::SynthData(args) => cmd_synth_data(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn resolve_arch(name: &str) -> splitfed::error::Result<ArchSpec> {
    match name {
        "desk_small" => Ok(ArchSpec::desk_small()),
        "reference_full" => Ok(ArchSpec::reference_full()),
        path => ArchSpec::load(path),
    }
}

fn cmd_traffic(args: TrafficArgs) -> splitfed::error::Result<ExitCode> {
    let graph = resolve_arch(&args.arch)?.to_graph()?;
    let schemes: [(&str, Scheme); 3] = [
        ("FedAvg", Scheme::FedAvg),
        ("SplitNN", Scheme::SplitNn),
        (
            "Proposed",
            Scheme::SplitSparse { fraction: args.k, error_feedback: false },
        ),
    ];

    let mut rows = Vec::new();
    for (label, scheme) in &schemes {
        for &devices in &args.devices {
            let values = traffic_bytes(
                scheme,
                &graph,
                args.cut_index,
                devices,
                args.batch_size,
                AccountingMode::ValuesOnly,
            )?;
            let wire = traffic_bytes(
                scheme,
                &graph,
                args.cut_index,
                devices,
                args.batch_size,
                AccountingMode::OnWire,
            )?;
            rows.push((*label, devices, values, wire));
        }
    }

    println!(
        "{:<10} {:>8} {:>16} {:>16} {:>12}",
        "scheme", "devices", "values_bytes", "wire_bytes", "values_human"
    );
    for (label, devices, values, wire) in &rows {
        println!(
            "{:<10} {:>8} {:>16} {:>16} {:>12}",
            label,
            devices,
            values,
            wire,
            human_bytes(*values)
        );
    }

    if let Some(path) = args.out {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "scheme,devices,values_bytes,wire_bytes")?;
        for (label, devices, values, wire) in &rows {
            writeln!(f, "{label},{devices},{values},{wire}")?;
        }
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn human_bytes(b: u64) -> String {
    let b = b as f64;
    if b >= 1e9 {
        format!("{:.2} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.1} MB", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.1} kB", b / 1e3)
    } else {
        format!("{b} B")
    }
}

fn cmd_train(args: TrainArgs) -> splitfed::error::Result<ExitCode> {
    let mut overrides = args.overrides.clone();
    if let Some(out) = &args.out {
        overrides.push(format!("experiment.out_dir=\"{}\"", out.display()));
    }
    if let Some(seed) = args.seed {
        overrides.push(format!("experiment.seed={seed}"));
    }
    if let Some(scheme) = &args.scheme {
        overrides.push(format!("experiment.scheme=\"{scheme}\""));
    }
    if let Some(devices) = args.devices {
        overrides.push(format!("experiment.devices={devices}"));
    }
    if let Some(k) = args.k {
        overrides.push(format!("experiment.k={k}"));
    }
    if let Some(rounds) = args.rounds {
        overrides.push(format!("experiment.rounds={rounds}"));
    }
    if let Some(ef) = args.error_feedback {
        overrides.push(format!("experiment.error_feedback={ef}"));
    }

    let cfg = ExperimentConfig::load(&args.config, &overrides)?;
    let outcome = run_experiment(&cfg)?;
    println!(
        "final accuracy {:.4} after {} rounds ({} up / {} down wire bytes)",
        outcome.final_accuracy,
        outcome.rounds.len(),
        outcome.ledger.up_wire,
        outcome.ledger.down_wire
    );
    println!("metrics: {}/metrics.csv", cfg.experiment.out_dir);
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> splitfed::error::Result<ExitCode> {
    let results = run_suite(args.cases, args.seed)?;
    let mut all_passed = true;
    for r in &results {
        println!(
            "{:<22} cases {:>4}  max rel err {:.3e}  worst {:<28} {}",
            r.kind,
            r.cases,
            r.max_rel_err,
            r.worst_tensor,
            if r.passed { "ok" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_synth_data(args: SynthDataArgs) -> splitfed::error::Result<ExitCode> {
    let ds = synth_generate(args.size, args.seed, args.positive_rate)?;
    save_segments(&ds, &args.out)?;
    println!("wrote {} segments to {}", ds.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
