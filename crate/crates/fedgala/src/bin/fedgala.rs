//! Command-line front end: single runs, leave-one-domain-out evaluation,
//! the statistical check suite, and parameter sweeps. Outputs are plain
//! CSV/JSON files in the chosen directory; identical config and seed give
//! byte-identical files.

use std::path::PathBuf;
use std::process::ExitCode;

use fedgala::config::ExperimentConfig;
use fedgala::error::{Error, Result};
use fedgala::outputs;
use fedgala::probe::{leave_one_domain_out, run_single_experiment};
use fedgala::protocol::build_family;
use fedgala::sweeps::{run_sweep, SweepKind};
use fedgala::theory::{run_theory_suite, TheorySuiteConfig};

const USAGE: &str = "\
fedgala - federated gradient-alignment simulator on synthetic Gaussian domains

USAGE:
  fedgala run    --config PATH [--seed N] [--out DIR] [--jobs N]
  fedgala lodo   --config PATH [--seed N] [--out DIR] [--jobs N]
  fedgala theory [--config PATH] [--seed N] [--out DIR] [--jobs N]
  fedgala sweep  --config PATH [--grid KIND] [--seed N] [--out DIR] [--jobs N]

SUBCOMMANDS:
  run     One protocol run on the client domains, probed on the held-out
          last domain. Writes resolved.cfg, domains.csv, rounds.csv,
          probe.csv and final_model.bin.
  lodo    Leave-one-domain-out: one protocol run per held-out domain.
          Writes resolved.cfg, rounds.csv and probe.csv.
  theory  The statistical check suite. Writes resolved.cfg, theory/*.csv
          and verdicts.json; exits nonzero if any check fails.
  sweep   Grid over one knob (tau, epochs, iterations, batch, comm_freq).
          Writes resolved.cfg and sweep.csv.

OPTIONS:
  --config PATH   Experiment config file (key = value lines).
  --seed N        Override the config seed.
  --out DIR       Output directory (default: out/).
  --jobs N        Worker thread cap.
  --grid KIND     Sweep kind (default: tau).
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    jobs: Option<usize>,
    grid: SweepKind,
}

fn parse_args(mut argv: Vec<String>) -> Result<Args> {
    if argv.is_empty() {
        return Err(Error::Usage(USAGE.to_string()));
    }
    let command = argv.remove(0);
    let mut args = Args {
        command,
        config: None,
        seed: None,
        out: PathBuf::from("out"),
        jobs: None,
        grid: SweepKind::Tau,
    };
    let mut it = argv.into_iter();
    while let Some(flag) = it.next() {
        let mut value = |name: &str| {
            it.next().ok_or_else(|| Error::Usage(format!("{name} expects a value")))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value("--config")?)),
            "--seed" => {
                args.seed = Some(value("--seed")?.parse().map_err(|_| {
                    Error::Usage("--seed expects an unsigned integer".to_string())
                })?)
            }
            "--out" => args.out = PathBuf::from(value("--out")?),
            "--jobs" => {
                args.jobs = Some(value("--jobs")?.parse().map_err(|_| {
                    Error::Usage("--jobs expects an unsigned integer".to_string())
                })?)
            }
            "--grid" => args.grid = SweepKind::parse(&value("--grid")?)?,
            "--help" | "-h" => return Err(Error::Usage(USAGE.to_string())),
            other => return Err(Error::Usage(format!("unknown flag `{other}`\n\n{USAGE}"))),
        }
    }
    Ok(args)
}

fn load_config(args: &Args, required: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None if required => {
            return Err(Error::Usage("--config is required for this subcommand".to_string()))
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(args: &Args) -> Result<()> {
    let cfg = load_config(args, true)?;
    let single = run_single_experiment(&cfg)?;
    let family = build_family(&cfg)?;
    outputs::write_resolved_config(&args.out, &cfg)?;
    outputs::write_domains_csv(&args.out, &family)?;
    let agg_iters = single.run.records.first().map_or(0, |r| r.weights_per_iteration.len());
    outputs::write_rounds_csv(&args.out, &[(single.target, &single.run.records)], agg_iters)?;
    let probe_rows: Vec<_> =
        single.probes.iter().map(|p| (*p, cfg.algorithm.as_str())).collect();
    outputs::write_probe_csv(&args.out, &probe_rows)?;
    outputs::write_checkpoint(&args.out, &single.run.final_global)?;
    for p in &single.probes {
        println!(
            "target {} fraction {:.2}: accuracy {:.4}",
            p.target_domain, p.labeled_fraction, p.accuracy
        );
    }
    Ok(())
}

fn cmd_lodo(args: &Args) -> Result<()> {
    let cfg = load_config(args, true)?;
    let specs = fedgala::protocol::build_domain_specs(&cfg)?;
    let family = build_family(&cfg)?;
    let outcome = fedgala::probe::leave_one_domain_out_on(&cfg, &specs, &family)?;
    outputs::write_resolved_config(&args.out, &cfg)?;
    let agg_iters = outcome
        .runs
        .first()
        .and_then(|(_, run)| run.records.first())
        .map_or(0, |r| r.weights_per_iteration.len());
    let round_refs: Vec<(usize, &[fedgala::protocol::RoundRecord])> =
        outcome.runs.iter().map(|(t, run)| (*t, run.records.as_slice())).collect();
    outputs::write_rounds_csv(&args.out, &round_refs, agg_iters)?;
    let probe_rows: Vec<_> =
        outcome.probes.iter().map(|p| (*p, cfg.algorithm.as_str())).collect();
    outputs::write_probe_csv(&args.out, &probe_rows)?;
    for p in &outcome.probes {
        println!(
            "target {} fraction {:.2}: accuracy {:.4}",
            p.target_domain, p.labeled_fraction, p.accuracy
        );
    }
    let mean: f64 =
        outcome.probes.iter().map(|p| p.accuracy).sum::<f64>() / outcome.probes.len() as f64;
    println!("mean accuracy {mean:.4}");
    Ok(())
}

fn cmd_theory(args: &Args) -> Result<()> {
    let cfg = load_config(args, false)?;
    let suite = TheorySuiteConfig::desk_scale(cfg.seed, cfg.theory_summary, cfg.theory_seeds);
    let result = run_theory_suite(&suite)?;
    outputs::write_resolved_config(&args.out, &cfg)?;
    let verdicts = outputs::write_theory_artifacts(&args.out, &result)?;
    let mut all_pass = true;
    for v in &verdicts {
        println!(
            "{}: {} (statistic {:.6}, threshold {:.6})",
            v.name,
            if v.pass { "pass" } else { "FAIL" },
            v.statistic,
            v.threshold
        );
        all_pass &= v.pass;
    }
    if !all_pass {
        return Err(Error::Precondition("one or more checks failed".to_string()));
    }
    Ok(())
}

fn cmd_sweep(args: &Args) -> Result<()> {
    let cfg = load_config(args, true)?;
    let rows = run_sweep(&cfg, args.grid)?;
    outputs::write_resolved_config(&args.out, &cfg)?;
    outputs::write_sweep_csv(&args.out, &rows)?;
    for row in &rows {
        let mean: f64 =
            row.probes.iter().map(|p| p.accuracy).sum::<f64>() / row.probes.len().max(1) as f64;
        println!(
            "{} = {}: mean accuracy {:.4} ({} rounds)",
            row.sweep, row.value, mean, row.rounds_run
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(jobs) = args.jobs {
        fedgala::exec::configure_jobs(jobs);
    }
    let result = match args.command.as_str() {
        "run" => cmd_run(&args),
        "lodo" => cmd_lodo(&args),
        "theory" => cmd_theory(&args),
        "sweep" => cmd_sweep(&args),
        other => Err(Error::Usage(format!("unknown subcommand `{other}`\n\n{USAGE}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
