//! Parameter sweeps: the single-target grids over tau, local epochs,
//! aggregation iterations and batch size, plus the communication-frequency
//! trade-off where a fixed total epoch budget is split into rounds of E
//! local epochs.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::probe::{run_single_experiment, ProbeResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Tau,
    Epochs,
    Iterations,
    Batch,
    CommFreq,
}

impl SweepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepKind::Tau => "tau",
            SweepKind::Epochs => "epochs",
            SweepKind::Iterations => "iterations",
            SweepKind::Batch => "batch",
            SweepKind::CommFreq => "comm_freq",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepKind::Tau),
            "epochs" => Ok(SweepKind::Epochs),
            "iterations" => Ok(SweepKind::Iterations),
            "batch" => Ok(SweepKind::Batch),
            "comm_freq" => Ok(SweepKind::CommFreq),
            _ => Err(Error::Usage(format!(
                "unknown sweep `{s}` (valid: tau, epochs, iterations, batch, comm_freq)"
            ))),
        }
    }
}

/// One grid value's probe results.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub value: f64,
    pub rounds_run: usize,
    pub probes: Vec<ProbeResult>,
}

/// Run the default grid for a sweep kind against the config's single-target
/// experiment (train on the client domains, probe the held-out last one).
pub fn run_sweep(cfg: &ExperimentConfig, kind: SweepKind) -> Result<Vec<SweepRow>> {
    match kind {
        SweepKind::Tau => {
            let grid = [-0.1, 0.0, 0.1];
            grid.iter()
                .map(|&tau| {
                    let mut c = cfg.clone();
                    c.tau = tau;
                    sweep_row(&c, "tau", tau)
                })
                .collect()
        }
        SweepKind::Epochs => {
            let grid = [5usize, 7, 9];
            grid.iter()
                .map(|&e| {
                    let mut c = cfg.clone();
                    c.local_epochs = e;
                    sweep_row(&c, "epochs", e as f64)
                })
                .collect()
        }
        SweepKind::Iterations => (1usize..=7)
            .map(|iters| {
                let mut c = cfg.clone();
                c.agg_iterations = iters;
                sweep_row(&c, "iterations", iters as f64)
            })
            .collect(),
        SweepKind::Batch => {
            let grid = [32usize, 64, 128, 256];
            grid.iter()
                .map(|&b| {
                    let mut c = cfg.clone();
                    c.batch_size = b;
                    sweep_row(&c, "batch", b as f64)
                })
                .collect()
        }
        SweepKind::CommFreq => {
            communication_frequency_sweep(cfg, cfg.rounds * cfg.local_epochs, &[1, 5, 7, 9])
        }
    }
}

/// Fix the total local-epoch budget and vary how often clients aggregate:
/// for each E the protocol runs T = total/E rounds of E local epochs.
pub fn communication_frequency_sweep(
    cfg: &ExperimentConfig,
    total_local_epochs: usize,
    e_values: &[usize],
) -> Result<Vec<SweepRow>> {
    if total_local_epochs == 0 {
        return Err(Error::EmptyRequest("communication frequency sweep with zero total epochs"));
    }
    e_values
        .iter()
        .map(|&e| {
            if e == 0 {
                return Err(Error::EmptyRequest("communication frequency sweep with E = 0"));
            }
            let rounds = total_local_epochs / e;
            let dropped = total_local_epochs % e;
            if dropped != 0 {
                eprintln!(
                    "warning: total epochs {total_local_epochs} not divisible by E = {e}; dropping {dropped}"
                );
            }
            let mut c = cfg.clone();
            c.local_epochs = e;
            c.rounds = rounds;
            sweep_row(&c, "comm_freq", e as f64)
        })
        .collect()
}

fn sweep_row(cfg: &ExperimentConfig, sweep: &'static str, value: f64) -> Result<SweepRow> {
    let single = run_single_experiment(cfg)?;
    Ok(SweepRow { sweep, value, rounds_run: cfg.rounds, probes: single.probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderChoice, ExperimentConfig, LossChoice};

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seed: 5,
            clients: 2,
            rounds: 6,
            local_epochs: 1,
            batch_size: 8,
            encoder: EncoderChoice::OneLayer,
            loss: LossChoice::BinaryContrastive,
            domain_count: 3,
            features: 3,
            samples_per_domain: 24,
            mlp_arch: vec![3, 6, 3],
            labeled_fractions: vec![0.2],
            probe_epochs: 20,
            ..Default::default()
        }
    }

    #[test]
    fn comm_freq_budget_splits_into_rounds() {
        let cfg = tiny_cfg();
        let rows = communication_frequency_sweep(&cfg, 6, &[1, 2, 3, 6]).unwrap();
        let rounds: Vec<usize> = rows.iter().map(|r| r.rounds_run).collect();
        assert_eq!(rounds, vec![6, 3, 2, 1]);
        // E equal to the budget aggregates exactly once.
        assert_eq!(rows.last().unwrap().rounds_run, 1);
    }

    #[test]
    fn tau_sweep_covers_grid() {
        let rows = run_sweep(&tiny_cfg(), SweepKind::Tau).unwrap();
        let taus: Vec<f64> = rows.iter().map(|r| r.value).collect();
        assert_eq!(taus, vec![-0.1, 0.0, 0.1]);
        for row in &rows {
            assert_eq!(row.probes.len(), 1);
        }
    }
}
