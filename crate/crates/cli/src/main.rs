use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _};
use cfcredit::harness::{RunOutput, Trainer};
use cfcredit::presets;
use cfcredit_cli::error::io_err;
use cfcredit_cli::{checkpoint, config, output, policy_file, verify};
use clap::{Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "cfcredit", version, about = "Counterfactual credit assignment experiments for multi-agent policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.csv, report.json,
    /// policies.txt and checkpoint.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates in total, leaving a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Run several configurations over seeds 0..k and tabulate final metrics.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance checks and print one verdict per criterion.
    Verify {
        /// Only run these criteria.
        #[arg(long, value_delimiter = ',')]
        criteria: Vec<usize>,
    },
    /// List the built-in environments.
    Presets,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out, resume, stop_after } => run(&config, seed, &out, resume.as_deref(), stop_after),
        Command::Compare { configs, seeds, out } => compare(&configs, seeds, &out),
        Command::Verify { criteria } => Ok(run_verify(&criteria)?),
        Command::Presets => {
            for p in presets::PRESETS {
                println!("{:<22} {}", p.name, p.summary);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run(config_path: &Path, seed: Option<u64>, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> anyhow::Result<ExitCode> {
    let mut cfg = config::load_config(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut trainer = match resume {
        Some(path) => {
            let t = checkpoint::load(path)?;
            if t.config() != &cfg {
                bail!("checkpoint {} was written for a different configuration", path.display());
            }
            info!("resuming {} at update {}", cfg.name, t.update_index());
            t
        }
        None => Trainer::new(cfg.clone())?,
    };
    let stop = stop_after.unwrap_or(cfg.n_updates).min(cfg.n_updates);
    while trainer.update_index() < stop {
        let (summary, record) = trainer.step()?;
        log::debug!("update {} mean episode return {:.4}", summary.update, summary.mean_episode_return);
        if let Some(r) = record {
            info!("update {:>4}  return {:.4}  regret {:.4}", r.update, r.mean_return, r.regret);
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    checkpoint::save(&out.join("checkpoint.json"), &trainer)?;
    policy_file::write_policies(&out.join("policies.txt"), trainer.policies())?;
    if !trainer.is_finished() {
        info!("stopped at update {}; resume with --resume {}", trainer.update_index(), out.join("checkpoint.json").display());
        return Ok(ExitCode::SUCCESS);
    }
    let result = trainer.output()?;
    output::write_results(out, &result)?;
    print_summary(&result);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(run: &RunOutput) {
    let r = &run.report;
    println!(
        "{} seed {}: return {:.4} -> {:.4} (optimum {}), regret {:.4}",
        r.name,
        r.seed,
        r.initial.mean_return,
        r.final_metrics.mean_return,
        r.optimum.map_or("n/a".into(), |o| format!("{o:.4}")),
        r.final_metrics.regret
    );
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn compare(paths: &[PathBuf], seeds: u64, out: &Path) -> anyhow::Result<ExitCode> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let configs = paths.iter().map(|p| config::load_config(p)).collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!("compared configs need distinct names");
    }
    let jobs: Vec<_> = configs
        .iter()
        .flat_map(|c| {
            (0..seeds).map(move |s| {
                let mut c = c.clone();
                c.seed = s;
                c
            })
        })
        .collect();
    let results: Vec<RunOutput> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|c| s.spawn(move || cfcredit::harness::run_experiment(c.clone()))).collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow::anyhow!("worker panicked"))?.map_err(anyhow::Error::from))
            .collect::<anyhow::Result<_>>()
    })?;
    for run in &results {
        let dir = out.join(&run.report.name).join(format!("seed-{}", run.report.seed));
        output::write_results(&dir, run)?;
    }
    let summary_path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).with_context(|| summary_path.display().to_string())?;
    w.write_record(["config", "seeds", "final_return_mean", "final_return_se", "regret_mean", "frozen_return_mean"])?;
    println!("{:<20} {:>6} {:>14} {:>10} {:>12} {:>10}", "config", "seeds", "final return", "se", "regret", "frozen");
    for c in &configs {
        let runs: Vec<&RunOutput> = results.iter().filter(|r| r.report.name == c.name).collect();
        let (m, se) = mean_se(&runs.iter().map(|r| r.report.final_metrics.mean_return).collect::<Vec<_>>());
        let (reg, _) = mean_se(&runs.iter().map(|r| r.report.final_metrics.regret).collect::<Vec<_>>());
        let frozen: Vec<f64> = runs.iter().filter_map(|r| r.report.frozen_return).collect();
        let frozen = if frozen.is_empty() { String::new() } else { mean_se(&frozen).0.to_string() };
        w.write_record([c.name.clone(), seeds.to_string(), m.to_string(), se.to_string(), reg.to_string(), frozen.clone()])?;
        let frozen_col = frozen.parse::<f64>().map_or("n/a".into(), |f| format!("{f:.4}"));
        println!("{:<20} {:>6} {:>14.4} {:>10.4} {:>12.4} {:>10}", c.name, seeds, m, se, reg, frozen_col);
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn run_verify(ids: &[usize]) -> anyhow::Result<ExitCode> {
    let selected: Vec<&verify::Criterion> = if ids.is_empty() {
        verify::CRITERIA.iter().collect()
    } else {
        ids.iter().map(|&id| verify::criterion(id).with_context(|| format!("no criterion {id}"))).collect::<Result<_, _>>()?
    };
    let mut failed = 0;
    for c in selected {
        let outcome = verify::run(c);
        println!("{}", outcome.line());
        failed += usize::from(!outcome.passed);
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
