use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sprint_cli::commands::{self, ReplayStatus};
use sprint_cli::config::{config_error, ConfigError, RunConfig};
use sprint_cli::report::{self, CommandResult};

#[derive(Parser)]
#[command(name = "sprint", version, about = "Block-diffusion decoding, training checks and packing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSONL file the reports are appended to.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every configured variant for every run.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Agreement and cost ratios between two generate report files.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        label_a: Option<String>,
        #[arg(long)]
        label_b: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Pack a JSONL corpus into fixed-capacity sequences.
    Pack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        shards: Option<PathBuf>,
    },
    /// Router load-balancing simulation on a fixed token stream.
    Moesim {
        #[command(flatten)]
        common: Common,
    },
    /// Train the toy flow teacher and distilled student, then evaluate.
    Flow {
        #[command(flatten)]
        common: Common,
    },
    /// Re-execute every report in a file and check the results match.
    Replay {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load(common: &Common) -> anyhow::Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate { common, jobs } => {
            let cfg = load(&common)?;
            let reports = commands::generate(&cfg, common.seed, jobs)?;
            for r in &reports {
                if let CommandResult::Generate(g) = &r.result {
                    println!(
                        "run {} {:<12} nfe {:>4} attended {:>8} tokens {:?}",
                        g.run, g.label, g.nfe, g.attended, g.tokens
                    );
                }
            }
            commands::persist(common.out.as_deref(), &reports)?;
        }
        Command::Compare { a, b, label_a, label_b, out } => {
            let ra = report::read(&a)?;
            let rb = report::read(&b)?;
            let r = commands::compare_report(&ra, label_a.as_deref(), &rb, label_b.as_deref())?;
            if let CommandResult::Compare(c) = &r.result {
                println!(
                    "{} vs {}: agreement {:.4}, nfe ratio {:.4}, attended ratio {:.4}, wall ratio {:.4} over {} runs",
                    c.a,
                    c.b,
                    c.agreement,
                    c.nfe_ratio,
                    c.attended_ratio,
                    c.wall_ratio,
                    c.pairs.len()
                );
            }
            commands::persist(out.as_deref(), &[r])?;
        }
        Command::Gradcheck { common } => {
            let cfg = load(&common)?;
            let r = commands::gradcheck(&cfg, common.seed)?;
            let CommandResult::Gradcheck(g) = &r.result else { unreachable!() };
            println!("{:<12} {:>7} {:>12} result", "loss", "params", "max rel err");
            for row in &g.rows {
                println!(
                    "{:<12} {:>7} {:>12.3e} {}",
                    row.loss,
                    row.params,
                    row.max_rel_error,
                    if row.passed { "ok" } else { "FAIL" }
                );
            }
            let passed = g.passed;
            commands::persist(common.out.as_deref(), &[r])?;
            return Ok(passed);
        }
        Command::Pack { common, corpus, shards } => {
            let mut cfg = load(&common)?;
            if corpus.is_some() {
                cfg.pack.corpus = corpus;
            }
            if shards.is_some() {
                cfg.pack.shards = shards;
            }
            let r = commands::pack(&cfg, common.seed)?;
            if let CommandResult::Pack(p) = &r.result {
                println!(
                    "{} samples into {} sequences of {}: padding {} (naive {}, batch-max {}), utilization {:.4}",
                    p.samples, p.sequences, p.capacity, p.padding, p.naive_padding, p.batch_max_padding, p.utilization
                );
            }
            commands::persist(common.out.as_deref(), &[r])?;
        }
        Command::Moesim { common } => {
            let cfg = load(&common)?;
            let r = commands::moesim(&cfg, common.seed)?;
            if let CommandResult::Moesim(m) = &r.result {
                println!("gap {:.4} -> {:.4}, final load {:?}", m.initial_gap, m.final_gap, m.final_load);
            }
            commands::persist(common.out.as_deref(), &[r])?;
        }
        Command::Flow { common } => {
            let cfg = load(&common)?;
            let r = commands::flow(&cfg, common.seed)?;
            if let CommandResult::Flow(f) = &r.result {
                for c in &f.report.per_code {
                    println!(
                        "code {}: teacher self {:.5}, student {:.5}, ratio {:.3}",
                        c.code, c.teacher_self_distance, c.student_distance, c.ratio
                    );
                }
            }
            commands::persist(common.out.as_deref(), &[r])?;
        }
        Command::Replay { file, jobs } => {
            let reports = report::read(&file)?;
            if reports.is_empty() {
                return Err(config_error(format!("{} holds no reports", file.display())));
            }
            let outcomes = commands::replay(&reports, jobs)?;
            let mut ok = true;
            for o in &outcomes {
                println!("line {:>4} {:<10} {:?}", o.line, o.command, o.status);
                ok &= o.status != ReplayStatus::Diverged;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
