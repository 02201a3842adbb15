use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use instmap::pipeline::{self, ExperimentConfig, SweepAxis};
use instmap::{Error, Result};

/// Multi-agent instance-level implicit mapping simulator.
#[derive(Parser)]
#[command(name = "instmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    CommRate,
    Ablation,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, align and co-train, then evaluate and write reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run this seed only.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        rounds: Option<u32>,
        /// Train agents one after another within each round.
        #[arg(long)]
        sequential: bool,
    },
    /// Run the pipeline once per axis value and write a comparison CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        sequential: bool,
    },
    /// Rank the instances of a finished run against a class query.
    Retrieve {
        /// Output directory of a previous `run`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        query_class: u32,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.5])]
        weights: Vec<f64>,
        /// Angular noise added to the class features, degrees.
        #[arg(long, default_value_t = 0.0)]
        noise_deg: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

fn load(path: &Path, seed: Option<u64>, agents: Option<usize>, rounds: Option<u32>, sequential: bool) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = agents {
        cfg.agents = a;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    cfg.sequential |= sequential;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out, seed, agents, rounds, sequential } => {
            let cfg = load(&config, seed, agents, rounds, sequential)?;
            for &s in &cfg.seeds {
                let dir = if cfg.seeds.len() == 1 { out.clone() } else { out.join(format!("seed_{s}")) };
                let res = pipeline::run(&cfg, s)?;
                pipeline::write_outputs(&res, &cfg, &dir)?;
                let r = &res.report;
                println!(
                    "seed {s}: completion ratio {:.2}%, completion {:.2} cm, F-mIoU {:.2}%, {} bytes sent -> {}",
                    r.completion_ratio_pct,
                    r.completion_cm,
                    r.f_miou,
                    r.traffic.total.sent_bytes,
                    dir.display()
                );
            }
        }
        Command::Sweep { config, out, axis, seed, rounds, sequential } => {
            let cfg = load(&config, seed, None, rounds, sequential)?;
            let axis = match axis {
                Axis::CommRate => SweepAxis::CommRate,
                Axis::Ablation => SweepAxis::Ablation,
            };
            let rows = pipeline::sweep(&cfg, axis, Some(&out))?;
            println!("{}", pipeline::SweepRow::CSV_HEADER);
            for r in &rows {
                println!("{}", r.csv_row());
            }
        }
        Command::Retrieve { run, query_class, weights, noise_deg, seed, top } => {
            let w = match weights.as_slice() {
                [a, b] => (*a, *b),
                _ => return Err(Error::Config("--weights takes two values".into())),
            };
            let ranked = pipeline::retrieve_in_run(&run, query_class, w, noise_deg, seed)?;
            let classes: std::collections::BTreeMap<u32, Option<u32>> =
                pipeline::read_instances(&run)?.into_iter().map(|e| (e.global_id, e.class_id)).collect();
            println!("rank,global_id,class_id,score");
            for (i, (g, s)) in ranked.iter().take(top).enumerate() {
                let c = classes.get(g).copied().flatten().map_or(String::new(), |c| c.to_string());
                println!("{},{g},{c},{s:.6}", i + 1);
            }
        }
    }
    Ok(())
}

fn out_dir(cmd: &Command) -> Option<&Path> {
    match cmd {
        Command::Run { out, .. } | Command::Sweep { out, .. } => Some(out),
        Command::Retrieve { .. } => None,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("INSTMAP_LOG", "info")).init();
    let cli = Cli::parse();
    let dir = out_dir(&cli.command).map(Path::to_path_buf);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let kind = match &e {
                Error::Config(_) | Error::Toml(_) => "config",
                Error::Io(_) => "io",
                _ => "pipeline",
            };
            if let Some(d) = dir {
                let body = serde_json::json!({ "kind": kind, "error": e.to_string() });
                if std::fs::create_dir_all(&d).is_ok() {
                    let _ = std::fs::write(d.join("error.json"), body.to_string() + "\n");
                }
            }
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
