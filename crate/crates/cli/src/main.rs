use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moelab::harness::{run_experiment, Checkpoint, RunConfig};
use moelab::metrics::{emit_csv, emit_overlay, emit_plots, emit_snapshot_csv, RunRecord};
use moelab::parallel_sim::{dtype_bytes, ep_traffic};
use moelab::LabError;

#[derive(Parser)]
#[command(
    name = "moelab",
    version,
    about = "MoE routing and load-balancing experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, plots and a checkpoint.
    Run {
        config: PathBuf,
        /// Dotted-path override, e.g. `--set model.seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Overlay deviation curves of finished runs and summarize them.
    Compare {
        #[arg(num_args = 2.., required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "compare")]
        out: PathBuf,
    },
    /// Bytes moved per expert-parallel exchange.
    Traffic {
        micro_batch: u64,
        top_k: u64,
        hidden: u64,
        /// fp8, int8, fp16, bf16, fp32 or fp64
        dtype: String,
    },
    /// Print the default run configuration.
    DumpDefaults,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides } => cmd_run(&config, &overrides),
        Command::Compare { dirs, out } => cmd_compare(&dirs, &out),
        Command::Traffic {
            micro_batch,
            top_k,
            hidden,
            dtype,
        } => cmd_traffic(micro_batch, top_k, hidden, &dtype),
        Command::DumpDefaults => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_traffic(mbs: u64, k: u64, d: u64, dtype: &str) -> Result<(), Failure> {
    let bytes =
        dtype_bytes(dtype).ok_or_else(|| Failure::Usage(format!("unknown dtype `{dtype}`")))?;
    let t = ep_traffic(mbs, k, d, bytes).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{t}");
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(LabError::io(path, e).to_string())
}

fn cmd_run(config: &Path, overrides: &[String]) -> Result<(), Failure> {
    let text = fs::read_to_string(config)
        .map_err(|e| Failure::Usage(LabError::io(config, e).to_string()))?;
    let cfg = RunConfig::from_toml(&text, overrides)?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let resolved = out.join("resolved_config.toml");
    fs::write(&resolved, cfg.to_toml()).map_err(|e| io_err(&resolved, e))?;

    let exp = run_experiment(cfg)?;
    let record = &exp.record;
    emit_csv(record, &out.join("metrics.csv"))?;
    emit_snapshot_csv(record, &out.join("snapshots.csv"))?;
    if !record.steps.is_empty() || !record.snapshots.is_empty() {
        emit_plots(record, &out)?;
    }
    Checkpoint::capture(&exp).save(&out.join("checkpoint.bin"))?;

    if let Some(last) = record.steps.last() {
        println!(
            "{} ({}) step {}: task_loss {:.6} balance_loss {:.6}",
            record.run_id, record.strategy, last.step, last.task_loss, last.balance_loss
        );
        for (l, s) in last.layers.iter().enumerate() {
            println!(
                "  layer {l}: k={} max_dev {:+.4} min_dev {:+.4} p_std {:.6} bias_norm {:.4}",
                s.top_k,
                s.max_dev,
                s.min_dev,
                std_dev(&s.mean_probs),
                s.bias_norm
            );
        }
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn load_record(dir: &Path) -> Result<RunRecord, Failure> {
    let path = dir.join("checkpoint.bin");
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "{} is not a finished run directory",
            dir.display()
        )));
    }
    Ok(Checkpoint::load(&path)?.meta.record)
}

fn cmd_compare(dirs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let records: Vec<RunRecord> = dirs
        .iter()
        .map(|d| load_record(d))
        .collect::<Result<_, _>>()?;
    let grid = |r: &RunRecord| r.steps.iter().map(|s| s.step).collect::<Vec<_>>();
    let base = &records[0];
    for (r, d) in records.iter().zip(dirs).skip(1) {
        if grid(r) != grid(base) {
            return Err(Failure::Usage(format!(
                "{} has a different step grid from {}",
                d.display(),
                dirs[0].display()
            )));
        }
        if r.num_layers != base.num_layers {
            return Err(Failure::Usage(format!(
                "{} has {} layers, {} has {}",
                d.display(),
                r.num_layers,
                dirs[0].display(),
                base.num_layers
            )));
        }
    }
    if base.steps.is_empty() {
        return Err(Failure::Usage("runs have no logged steps".into()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let layers: Vec<usize> = base
        .tracked_layers
        .iter()
        .copied()
        .filter(|l| records.iter().all(|r| r.tracked_layers.contains(l)))
        .collect();
    let refs: Vec<&RunRecord> = records.iter().collect();
    for &l in &layers {
        emit_overlay(&refs, l, &out.join(format!("deviation_l{l}.svg")))?;
    }

    let mut header = vec![
        "run".to_string(),
        "strategy".into(),
        "task_loss".into(),
        "balance_loss".into(),
    ];
    for l in 0..base.num_layers {
        header.push(format!("max_dev_l{l}"));
        header.push(format!("min_dev_l{l}"));
    }
    let row_of = |r: &RunRecord| -> Vec<f64> {
        let last = r.steps.last().expect("checked non-empty");
        let mut v = vec![last.task_loss, last.balance_loss];
        for s in &last.layers {
            v.push(s.max_dev);
            v.push(s.min_dev);
        }
        v
    };
    let base_row = row_of(base);
    let mut table = String::new();
    table.push_str(&header.join(","));
    table.push('\n');
    let mut max_diff: f64 = 0.0;
    for (r, d) in records.iter().zip(dirs) {
        let row = row_of(r);
        for (a, b) in row.iter().zip(&base_row) {
            max_diff = max_diff.max((a - b).abs());
        }
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        table.push_str(&format!(
            "{},{},{}\n",
            d.display(),
            r.strategy,
            cells.join(",")
        ));
    }
    let summary = out.join("summary.csv");
    fs::write(&summary, &table).map_err(|e| io_err(&summary, e))?;
    print!("{table}");
    println!("max difference from {}: {max_diff:.8e}", dirs[0].display());
    Ok(())
}
