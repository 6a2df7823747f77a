use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use skippy_core::generators::generate_instance;
use skippy_core::geometry::Mode;
use skippy_core::harness::{constants_for, emit_metrics_dir, run_experiment, verify_instance, RunConfig};
use skippy_core::io::write_mdp_file;
use skippy_core::learner::Opt1Mode;
use std::path::PathBuf;

/// Experiments with skippy policies under linear q-realizability.
#[derive(Parser)]
#[command(name = "skippy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured instance as an MDP file.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the learner for every repeat and write logs, summary.csv and metric tables.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Run the oracle checks on the configured instance and print a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Print the constants the learner would use on the configured instance.
    Constants {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the run seed (and the instance seed for `generate`).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// theory or practical.
    #[arg(long)]
    mode: Option<Mode>,
    /// search or oracle.
    #[arg(long)]
    opt1: Option<Opt1Mode>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.run.out = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.learner.mode = mode;
        }
        if let Some(opt1) = self.opt1 {
            cfg.learner.opt1 = opt1;
        }
        cfg.check()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { common } => {
            let cfg = common.load()?;
            let spec = match common.seed {
                Some(s) => cfg.instance.with_seed(s),
                None => cfg.instance.clone(),
            };
            let Some(out) = &common.out else { bail!("generate needs --out <file.json>") };
            let inst = generate_instance(&spec)?;
            write_mdp_file(out, &inst.mdp, Some(&inst.phi))?;
            eprintln!(
                "wrote {} ({} states, eta_hat {:.3e}, {})",
                out.display(),
                inst.mdp.num_states(),
                inst.metadata.eta_hat,
                inst.metadata.sample_description
            );
        }
        Command::Run { common, repeats } => {
            let mut cfg = common.load()?;
            if let Some(r) = repeats {
                cfg.run.repeats = r;
            }
            cfg.check()?;
            let out = cfg.run.out.clone();
            let rows = run_experiment(&cfg, &out)?;
            emit_metrics_dir(&out)?;
            for r in &rows {
                println!(
                    "seed {} v_star {:.6} v_pi {:.6} episodes {} q_updates {} {}",
                    r.seed, r.v_star, r.v_pi, r.episodes, r.q_updates, r.terminated_by
                );
            }
            if rows.iter().all(|r| r.terminated_by.starts_with("error")) {
                bail!("every run failed");
            }
        }
        Command::Verify { common } => {
            let cfg = common.load()?;
            let inst = generate_instance(&cfg.instance)?;
            let consts = constants_for(&cfg, inst.phi.dim, inst.mdp.horizon(), inst.phi.l1, inst.phi.l2)?;
            let report = verify_instance(&inst, &consts, cfg.run.seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Constants { common } => {
            let cfg = common.load()?;
            let inst = generate_instance(&cfg.instance)?;
            let consts = constants_for(&cfg, inst.phi.dim, inst.mdp.horizon(), inst.phi.l1, inst.phi.l2)?;
            for (k, v) in consts.report() {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}
