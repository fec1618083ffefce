use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uavmec::harness::{audit_outputs, emit_plot_data, run_sweep, run_training, validate_against_oracle};
use uavmec::{ExperimentConfig, HarnessError, Result};
use uavmec_core::agents::AgentKind;

#[derive(Parser)]
#[command(name = "uavmec", version, about = "Train, sweep and validate UAV edge-computing agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed (and per capacity when a sweep is set).
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from existing checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate trained checkpoints across UAV CPU capacities.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Write plot-ready CSV files from the metric files.
    Plotdata {
        #[command(flatten)]
        common: Common,
    },
    /// Compare a single-device policy with the per-slot grid oracle.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Replay evaluation traces and check every constraint.
    Audit {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Agent kind: ddpg, td3 or mtd3.
    #[arg(long, value_parser = parse_agent)]
    agent: Option<AgentKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` applied after the file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_agent(s: &str) -> std::result::Result<AgentKind, String> {
    AgentKind::parse(s).ok_or_else(|| format!("unknown agent `{s}`; expected ddpg, td3 or mtd3"))
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(a) = self.agent {
            cfg.agent_kind = a;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let report = run_training(&cfg, resume)?;
            for r in &report.runs {
                println!(
                    "{} seed {}{}: {} slots, {} updates, final mean reward {:.6}, efficiency {:.6e} bit/s",
                    r.agent.name(),
                    r.seed,
                    r.uav_cpu_cap.map(|c| format!(" capacity {c:e}")).unwrap_or_default(),
                    r.env_steps,
                    r.updates,
                    r.final_mean_reward,
                    r.final_efficiency
                );
            }
        }
        Command::Sweep { common } => {
            let cfg = common.load()?;
            let agents: Vec<AgentKind> = match common.agent {
                Some(a) => vec![a],
                None => AgentKind::ALL.to_vec(),
            };
            let res = run_sweep(&cfg, &agents)?;
            println!("agent  capacity  efficiency(bit/s)  queue_local  queue_uav  queue_cloud");
            for r in &res.rows {
                println!(
                    "{:<6} {:<9e} {:.6e}±{:.1e} {:.4e} {:.4e} {:.4e}",
                    r.agent.name(),
                    r.uav_cpu_cap,
                    r.efficiency.mean,
                    r.efficiency.se,
                    r.queue_local.mean,
                    r.queue_uav.mean,
                    r.queue_cloud.mean
                );
            }
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Plotdata { common } => {
            let cfg = common.load()?;
            for p in emit_plot_data(&cfg.out)? {
                println!("{}", p.display());
            }
        }
        Command::Validate { common } => {
            let cfg = common.load()?;
            let rep = validate_against_oracle(&cfg, cfg.agent_kind)?;
            for s in &rep.seeds {
                println!("seed {}: policy gap {:.6}, random gap {:.6}", s.seed, s.policy_gap, s.random_gap);
            }
            println!(
                "mean gap: policy {:.6} ± {:.6}, random {:.6} ± {:.6}; margin {:.2} standard errors",
                rep.policy_gap.mean, rep.policy_gap.se, rep.random_gap.mean, rep.random_gap.se, rep.margin_in_se
            );
            if !rep.passed {
                return Err(HarnessError::Validation(
                    "policy gap is not below the random gap by 3 standard errors".into(),
                ));
            }
        }
        Command::Audit { common } => {
            let cfg = common.load()?;
            let rep = audit_outputs(&cfg.out)?;
            println!(
                "{} episodes, {} slots: {} violations, {} replay mismatches",
                rep.episodes, rep.slots, rep.violations, rep.mismatches
            );
            for m in &rep.messages {
                println!("  {m}");
            }
            if !rep.ok() {
                return Err(HarnessError::Audit(format!(
                    "{} violations, {} mismatches",
                    rep.violations, rep.mismatches
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors count as configuration errors (exit 1); clap's own
    // default of 2 is reserved for audit and validation failures.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
