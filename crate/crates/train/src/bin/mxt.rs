//! Command-line front end: tensor quantization, training runs, quantizer
//! sweeps, and checkpoint diagnostics.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numeric abort
//! (non-finite loss), 1 anything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mxfp4::container;
use mxfp4::{quantize_matrix, Fp4Format, GroupAxis, QuantStream, Rounding, ScaleRule};
use mxfp4_train::config::TrainConfig;
use mxfp4_train::diagnose::diagnose;
use mxfp4_train::error::{Result, TrainError};
use mxfp4_train::harness;
use mxfp4_train::metrics::MetricRecord;
use mxfp4_train::runner::{ablate, impact, render_table, AblateGrid};

#[derive(Parser)]
#[command(name = "mxt", version, about = "Block-scaled 4-bit tensor and training tool")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Row,
    Col,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    TruncationFree,
    Microscaling,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoundArg {
    Deterministic,
    Stochastic,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    E2m1,
    E3m0,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Backward,
    Format,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a dense tensor (MXD1 in, MXT1 out) or reconstruct a
    /// quantized one (MXT1 in, MXD1 out); the direction follows the input
    /// file's magic.
    Quantize {
        input: PathBuf,
        output: PathBuf,
        /// Blocking axis for quantization.
        #[arg(long, value_enum, default_value_t = AxisArg::Row)]
        axis: AxisArg,
        #[arg(long, value_enum, default_value_t = RuleArg::TruncationFree)]
        rule: RuleArg,
        #[arg(long, value_enum, default_value_t = RoundArg::Deterministic)]
        rounding: RoundArg,
        #[arg(long, value_enum, default_value_t = FormatArg::E2m1)]
        format: FormatArg,
        /// Required for stochastic rounding.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one training configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train once per quantizer mask (none, q1..q6 alone, all).
    Impact {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here as well as the table to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Small ablation grids around the base config.
    Ablate {
        #[arg(long, value_enum)]
        grid: GridArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resume a checkpoint for a diagnostics window and report oscillation
    /// metrics plus a confidence histogram.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn cmd_quantize(
    input: &Path,
    output: &Path,
    axis: AxisArg,
    rule: RuleArg,
    rounding: RoundArg,
    format: FormatArg,
    seed: Option<u64>,
) -> Result<()> {
    let bytes = read_all(input)?;
    let magic = bytes.get(..4).ok_or_else(|| {
        TrainError::Config(format!("{}: too short for a tensor container", input.display()))
    })?;
    let mut out = BufWriter::new(File::create(output)?);
    match magic {
        m if m == container::DENSE_MAGIC => {
            let rounding = match rounding {
                RoundArg::Deterministic => Rounding::Deterministic,
                RoundArg::Stochastic => Rounding::Stochastic,
            };
            let seed = match (rounding, seed) {
                (Rounding::Stochastic, None) => {
                    return Err(TrainError::Config(
                        "stochastic rounding needs --seed for reproducibility".into(),
                    ))
                }
                (_, s) => s.unwrap_or(0),
            };
            let dense = container::read_dense(&mut bytes.as_slice())?;
            let q = quantize_matrix(
                &dense,
                match axis {
                    AxisArg::Row => GroupAxis::RowGroups,
                    AxisArg::Col => GroupAxis::ColGroups,
                },
                match format {
                    FormatArg::E2m1 => Fp4Format::E2M1,
                    FormatArg::E3m0 => Fp4Format::E3M0,
                },
                match rule {
                    RuleArg::TruncationFree => ScaleRule::TruncationFree,
                    RuleArg::Microscaling => ScaleRule::Microscaling,
                },
                rounding,
                &QuantStream::new(seed, 0, 0),
            )?;
            container::write_quantized(&mut out, &q)?;
            eprintln!(
                "quantized {}x{} -> {} blocks",
                q.rows(),
                q.cols(),
                q.blocks().len()
            );
        }
        m if m == container::QUANTIZED_MAGIC => {
            let q = container::read_quantized(&mut bytes.as_slice())?;
            container::write_dense(&mut out, &q.dequantize())?;
            eprintln!("reconstructed {}x{}", q.rows(), q.cols());
        }
        m => {
            return Err(TrainError::Config(format!(
                "{}: unknown magic {:02x?} (expected MXD1 or MXT1)",
                input.display(),
                m
            )))
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_train(config: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let res = harness::run(&cfg)?;
    for r in &res.records {
        if let MetricRecord::Eval { step, val_loss, val_acc } = r {
            println!("step {step:>6}  val_loss {val_loss:.4}  val_acc {val_acc:.4}");
        }
    }
    println!(
        "final: step {}  val_loss {:.4}  val_acc {:.4}",
        res.steps_run, res.final_val_loss, res.final_val_acc
    );
    if let Some(d) = res.last_diag {
        println!(
            "last window: wq_rate {:.6}  osc_fraction {:.4}  flip_mean {:.4}  conf_mean {:.4}",
            d.wq_rate, d.osc_fraction, d.flip_mean, d.conf_mean
        );
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_cli(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Quantize { input, output, axis, rule, rounding, format, seed } => {
            cmd_quantize(&input, &output, axis, rule, rounding, format, seed)
        }
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Impact { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let report = impact(&cfg)?;
            print!("{}", render_table(&report));
            if out.is_some() {
                write_json(&report, out.as_deref())?;
            }
            Ok(())
        }
        Cmd::Ablate { grid, config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let report = ablate(
                &cfg,
                match grid {
                    GridArg::Backward => AblateGrid::Backward,
                    GridArg::Format => AblateGrid::Format,
                },
            )?;
            print!("{}", render_table(&report));
            if out.is_some() {
                write_json(&report, out.as_deref())?;
            }
            Ok(())
        }
        Cmd::Diagnose { checkpoint, window, out } => {
            if window == 0 {
                return Err(TrainError::Config("--window must be at least 1".into()));
            }
            let report = diagnose(&checkpoint, window)?;
            write_json(&report, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
