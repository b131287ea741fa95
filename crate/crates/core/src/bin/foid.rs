use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use foid::harness::{self, OutputFormat, ScenarioConfig, StrategyKind};

#[derive(Parser)]
#[command(name = "foid", version, about = "Fair optimal inverter dispatch on LV feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads, 0 = all cores.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full PV sweep over every configured strategy.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
        /// Restrict to one strategy.
        #[arg(long)]
        strategy: Option<StrategyKind>,
        /// Replace the c_kappa list.
        #[arg(long, value_delimiter = ',')]
        ck: Option<Vec<f64>>,
    },
    /// One scenario, one strategy.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Available PV per household, kW.
        #[arg(long)]
        pv: f64,
        #[arg(long, default_value = "oid")]
        strategy: StrategyKind,
        #[arg(long, default_value_t = 0.1)]
        ck: f64,
        /// Write the row here instead of printing a table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        format: Option<OutputFormat>,
    },
    /// Linearization error against the AC power flow at every sweep point.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Single PV level instead of the sweep, kW per household.
        #[arg(long)]
        pv: Option<f64>,
    },
}

fn config(common: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &common.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Sweep {
            common,
            out,
            format,
            strategy,
            ck,
        } => {
            let mut cfg = config(&common)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(f) = format {
                cfg.format = f;
            }
            if let Some(s) = strategy {
                cfg.strategies = vec![s];
            }
            if let Some(ck) = ck {
                cfg.c_kappa = ck;
            }
            cfg.validate()?;
            let case = cfg.case()?;
            let hh = case.net.households().len();
            let rows = harness::run_sweep(&cfg)?;
            let ext = harness::run_extended(&cfg)?;
            let ext_name = cfg.format.extension();
            let sweep_path = cfg.out_dir.join(format!("sweep.{ext_name}"));
            let ext_path = cfg.out_dir.join(format!("extended.{ext_name}"));
            harness::export(&rows, hh, cfg.format, &sweep_path)?;
            harness::export(&ext, hh, cfg.format, &ext_path)?;
            let failed = rows.iter().chain(&ext).filter(|r| r.status.starts_with("error")).count();
            println!(
                "{} sweep rows -> {}\n{} extended rows -> {}",
                rows.len(),
                sweep_path.display(),
                ext.len(),
                ext_path.display()
            );
            if failed > 0 {
                eprintln!("{failed} rows failed; see the status column");
            }
        }
        Command::Solve {
            common,
            pv,
            strategy,
            ck,
            out,
            format,
        } => {
            if !(pv.is_finite() && pv >= 0.0) {
                bail!("--pv must be a finite, non-negative kW value");
            }
            let cfg = config(&common)?;
            let case = cfg.case()?;
            let ck = if strategy == StrategyKind::Foid { ck } else { 0.0 };
            let row = harness::run_one(&case, &cfg, pv, strategy, ck).row;
            match out {
                Some(path) => {
                    let f = format.unwrap_or(cfg.format);
                    harness::export(std::slice::from_ref(&row), row.pc.len(), f, &path)?;
                    println!("wrote {}", path.display());
                }
                None => {
                    println!(
                        "{} pv={} kW/household ratio={:.3} ck={} status={}",
                        row.strategy, row.scenario_kw, row.ratio, row.ck, row.status
                    );
                    println!(
                        "curtailment {:.4} kW  losses {:.4} kW  max V {:.5} pu  fairness {:.4e}",
                        row.total_curtailment_kw, row.losses_kw, row.max_v_pu, row.fairness_variance
                    );
                    println!("{:>9} {:>10} {:>10}", "household", "p_c kW", "q_c kVAr");
                    for (i, (p, q)) in row.pc.iter().zip(&row.qc).enumerate() {
                        println!("{:>9} {:>10.4} {:>10.4}", i + 1, p, q);
                    }
                }
            }
        }
        Command::Validate { common, pv } => {
            let cfg = config(&common)?;
            let case = cfg.case()?;
            let pvs = match pv {
                Some(p) => vec![p],
                None => cfg.sweep.points(),
            };
            let report = harness::validation_report(&case, &pvs)?;
            println!("{:>8} {:>7} {:>12} {:>12} {:>10}", "pv_kw", "ratio", "err_pu", "re_err_pu", "max|V|ac");
            let mut worst: f64 = 0.0;
            for r in &report {
                worst = worst.max(r.max_error_pu);
                println!(
                    "{:>8.3} {:>7.3} {:>12.3e} {:>12.3e} {:>10.5}",
                    r.scenario_kw, r.ratio, r.max_error_pu, r.max_bound_error_pu, r.max_v_ac_pu
                );
            }
            println!("worst |V| error {worst:.3e} pu");
        }
    }
    Ok(())
}
