use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cil_core::harness::{curve_points, emit_curve, run_experiment, sweep, ExperimentConfig, RunRecord};
use cil_core::membudget::{align_budget, exemplar_equivalent, mb_to_bytes, megabytes};
use cil_core::metrics::metrics_rows;

#[derive(Parser)]
#[command(
    name = "cil",
    version,
    about = "Memory-aligned class-incremental learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Figure {
    Gradnorm,
    Shift,
    Cka,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write `record.json` into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the config at several total budgets (MB) and print the curve CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated budgets in MB.
        #[arg(long)]
        memory_points: String,
        /// Directory for the run records and `curve.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exemplar count that fills a total budget next to a model.
    Align {
        #[arg(long)]
        params: u64,
        #[arg(long)]
        bytes_per_exemplar: u64,
        #[arg(long)]
        target_mb: f64,
        #[arg(long, default_value_t = 4)]
        bytes_per_param: u64,
    },
    /// Per-method metrics table over every run record in a directory tree.
    Metrics {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        table: PathBuf,
    },
    /// CSV series of one recorded probe.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        figure: Figure,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let record = run_experiment(&cfg)?;
            fs::create_dir_all(&out)?;
            let path = out.join("record.json");
            record.save(&path)?;
            println!(
                "{}: average {:.2}, last {:.2}, {:.4} MB -> {}",
                record.method().name(),
                record.average_accuracy,
                record.last_accuracy,
                record.memory_mb(),
                path.display()
            );
        }
        Command::Sweep {
            config,
            memory_points,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let points = memory_points
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .with_context(|| format!("bad memory point {s:?}"))
                })
                .collect::<Result<Vec<_>>>()?;
            let records = sweep(&cfg, &points)?;
            let csv = emit_curve(&records)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                for (r, mb) in records.iter().zip(&points) {
                    r.save(&dir.join(format!("{}-{mb}mb.json", r.method().name())))?;
                }
                fs::write(dir.join("curve.csv"), &csv)?;
            }
            print!("{csv}");
        }
        Command::Align {
            params,
            bytes_per_exemplar,
            target_mb,
            bytes_per_param,
        } => {
            if bytes_per_exemplar == 0 {
                bail!("bytes per exemplar must be at least 1");
            }
            let target = mb_to_bytes(target_mb);
            let model_bytes = params * bytes_per_param;
            let exemplars = align_budget(target, model_bytes, bytes_per_exemplar, 0)?;
            let report = serde_json::json!({
                "model_bytes": model_bytes,
                "model_mb": megabytes(model_bytes),
                "exemplar_equivalent_of_model": exemplar_equivalent(params, bytes_per_param, bytes_per_exemplar),
                "target_bytes": target,
                "exemplars": exemplars,
                "used_mb": megabytes(model_bytes + exemplars * bytes_per_exemplar),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Metrics { runs, table } => {
            let mut by_method: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
            for path in record_files(&runs)? {
                let r = RunRecord::load(&path).with_context(|| format!("reading {}", path.display()))?;
                by_method.entry(r.method().name().to_string()).or_default().push(r);
            }
            if by_method.is_empty() {
                bail!("no run records under {}", runs.display());
            }
            let mut w = csv::Writer::from_path(&table)?;
            for (method, records) in &by_method {
                for row in metrics_rows(method, &curve_points(records)?)? {
                    w.serialize(row)?;
                }
            }
            w.flush()?;
        }
        Command::Probe { run, figure } => {
            let record = RunRecord::load(&run).with_context(|| format!("reading {}", run.display()))?;
            let Some(trace) = record.probes else {
                bail!("{} was recorded without probes", run.display());
            };
            let mut out = std::io::stdout().lock();
            match figure {
                Figure::Gradnorm | Figure::Shift => {
                    let series = if matches!(figure, Figure::Gradnorm) {
                        &trace.grad_norms
                    } else {
                        &trace.shift_mse
                    };
                    writeln!(out, "block,value,stage")?;
                    for (stage, row) in series.iter().enumerate() {
                        for (block, v) in row.iter().enumerate() {
                            writeln!(out, "{block},{v},{stage}")?;
                        }
                    }
                }
                Figure::Cka => {
                    let (Some(shallow), Some(deep)) = (&trace.cka_shallow, &trace.cka_deep) else {
                        bail!("{} has no cross-backbone CKA (single-backbone method?)", run.display());
                    };
                    writeln!(out, "depth,row,col,value")?;
                    for (name, m) in [("shallow", shallow), ("deep", deep)] {
                        for (i, row) in m.iter().enumerate() {
                            for (j, v) in row.iter().enumerate() {
                                writeln!(out, "{name},{i},{j},{v}")?;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Every `*.json` file under `dir`, sorted.
fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "json") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}
