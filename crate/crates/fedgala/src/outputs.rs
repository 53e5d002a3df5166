//! On-disk run artifacts: versioned CSVs, the verdict JSON, the config
//! echo. All text is UTF-8 with LF endings; every real number is written
//! with 17 significant digits so byte equality follows from bit equality.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::domains::DomainSample;
use crate::error::Result;
use crate::probe::ProbeResult;
use crate::protocol::RoundRecord;
use crate::sweeps::SweepRow;
use crate::textio::fmt_g17;
use crate::theory::TheorySuiteResult;

pub const SCHEMA_LINE: &str = "# schema=1";

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::File::create(path)?)
}

pub fn write_resolved_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let mut f = create(&dir.join("resolved.cfg"))?;
    f.write_all(cfg.canonical().as_bytes())?;
    Ok(())
}

pub fn write_domains_csv(dir: &Path, family: &[DomainSample]) -> Result<()> {
    let mut f = create(&dir.join("domains.csv"))?;
    crate::domains::write_family_csv(&mut f, family)
}

/// Round telemetry: discard accounting and aggregation weights per client
/// per round.
pub fn write_rounds_csv(
    dir: &Path,
    runs: &[(usize, &[RoundRecord])],
    agg_iterations: usize,
) -> Result<()> {
    let mut f = create(&dir.join("rounds.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    let mut header = String::from(
        "target_domain,round,client_id,considered,discarded,discard_ratio,mean_loss,aug_hash",
    );
    for i in 1..=agg_iterations {
        header.push_str(&format!(",weight_iter{i}"));
    }
    header.push_str(",global_param_norm");
    writeln!(f, "{header}")?;
    for (target, records) in runs {
        for rec in *records {
            for c in &rec.clients {
                let mut fields = vec![
                    target.to_string(),
                    rec.round.to_string(),
                    c.client_id.to_string(),
                    c.considered.to_string(),
                    c.discarded.to_string(),
                    fmt_g17(c.discard_ratio),
                    fmt_g17(c.mean_loss),
                    format!("{:016x}", c.aug_hash),
                ];
                for i in 0..agg_iterations {
                    let w = rec
                        .weights_per_iteration
                        .get(i)
                        .map(|ws| ws[c.client_id])
                        .unwrap_or(f64::NAN);
                    fields.push(fmt_g17(w));
                }
                fields.push(fmt_g17(rec.global_param_norm));
                writeln!(f, "{}", fields.join(","))?;
            }
        }
    }
    Ok(())
}

pub fn write_probe_csv(dir: &Path, rows: &[(ProbeResult, &str)]) -> Result<()> {
    let mut f = create(&dir.join("probe.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "target_domain,labeled_fraction,accuracy,seed,algorithm")?;
    for (r, algorithm) in rows {
        writeln!(
            f,
            "{},{},{},{},{algorithm}",
            r.target_domain,
            fmt_g17(r.labeled_fraction),
            fmt_g17(r.accuracy),
            r.seed
        )?;
    }
    Ok(())
}

pub fn write_sweep_csv(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut f = create(&dir.join("sweep.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "sweep,value,rounds,target_domain,labeled_fraction,accuracy,seed")?;
    for row in rows {
        for p in &row.probes {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                row.sweep,
                fmt_g17(row.value),
                row.rounds_run,
                p.target_domain,
                fmt_g17(p.labeled_fraction),
                fmt_g17(p.accuracy),
                p.seed
            )?;
        }
    }
    Ok(())
}

/// One pass/fail verdict with its statistic and pinned threshold.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub name: &'static str,
    pub pass: bool,
    pub statistic: f64,
    pub threshold: f64,
}

pub fn write_verdicts_json(dir: &Path, verdicts: &[Verdict]) -> Result<()> {
    let mut f = create(&dir.join("verdicts.json"))?;
    writeln!(f, "{{")?;
    for (i, v) in verdicts.iter().enumerate() {
        let comma = if i + 1 < verdicts.len() { "," } else { "" };
        writeln!(
            f,
            "  \"{}\": {{\"pass\": {}, \"statistic\": {}, \"threshold\": {}}}{comma}",
            v.name,
            v.pass,
            fmt_g17(v.statistic),
            fmt_g17(v.threshold)
        )?;
    }
    writeln!(f, "}}")?;
    Ok(())
}

/// Write every theory-check CSV plus the verdict file; returns the verdicts.
pub fn write_theory_artifacts(dir: &Path, result: &TheorySuiteResult) -> Result<Vec<Verdict>> {
    let theory_dir = dir.join("theory");
    fs::create_dir_all(&theory_dir)?;

    let mut f = create(&theory_dir.join("mi_agreement.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "sigma,features,mi_closed_form,mi_empirical,abs_error")?;
    for r in &result.mi_rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            fmt_g17(r.sigma),
            r.features,
            fmt_g17(r.closed_form),
            fmt_g17(r.empirical),
            fmt_g17(r.abs_error)
        )?;
    }

    let mut f = create(&theory_dir.join("taylor_cov.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "trial,dim,features,max_rel_error")?;
    for r in &result.taylor_rows {
        writeln!(f, "{},{},{},{}", r.trial, r.dim, r.features, fmt_g17(r.max_rel_error))?;
    }

    let mut f = create(&theory_dir.join("grad_cov_trend.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "seed,domain_cov,grad_cov_summary,var_diff_summary,mi")?;
    for (seed, points) in &result.trend.per_seed {
        for p in points {
            writeln!(
                f,
                "{},{},{},{},{}",
                seed,
                fmt_g17(p.domain_cov),
                fmt_g17(p.grad_cov_summary),
                fmt_g17(p.var_diff_summary),
                fmt_g17(p.mi)
            )?;
        }
    }

    let mut f = create(&theory_dir.join("var_diff_trend.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "seed,mi,var_diff_summary")?;
    for (seed, points) in &result.trend.per_seed {
        for p in points {
            writeln!(f, "{},{},{}", seed, fmt_g17(p.mi), fmt_g17(p.var_diff_summary))?;
        }
    }

    let mut f = create(&theory_dir.join("discard_covariance.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "trial,before,after,holds")?;
    for r in &result.removal_rows {
        writeln!(f, "{},{},{},{}", r.trial, fmt_g17(r.before), fmt_g17(r.after), r.holds)?;
    }

    let mut f = create(&theory_dir.join("sign_checks.csv"))?;
    writeln!(f, "{SCHEMA_LINE}")?;
    writeln!(f, "mode,trial,fraction,degenerate")?;
    for r in &result.sign_rows {
        writeln!(f, "{},{},{},{}", r.mode, r.trial, fmt_g17(r.fraction), r.degenerate)?;
    }

    let verdicts = vec![
        Verdict {
            name: "mi_agreement",
            pass: result.mi_max_error <= 0.02,
            statistic: result.mi_max_error,
            threshold: 0.02,
        },
        Verdict {
            name: "taylor_cov",
            pass: result.taylor_max_rel_error <= 0.02,
            statistic: result.taylor_max_rel_error,
            threshold: 0.02,
        },
        Verdict {
            name: "grad_cov_trend",
            pass: result.trend.grad_cov_spearman_drop_one >= 0.8,
            statistic: result.trend.grad_cov_spearman_drop_one,
            threshold: 0.8,
        },
        Verdict {
            name: "var_diff_trend",
            pass: result.trend.var_diff_vs_mi_spearman <= -0.8,
            statistic: result.trend.var_diff_vs_mi_spearman,
            threshold: -0.8,
        },
        Verdict {
            name: "discard_covariance",
            pass: result.removal_holds_rate >= 0.95 && result.removal_constructed_holds,
            statistic: result.removal_holds_rate,
            threshold: 0.95,
        },
        Verdict {
            name: "sign_supervised",
            pass: result.supervised_min_fraction == 1.0,
            statistic: result.supervised_min_fraction,
            threshold: 1.0,
        },
        Verdict {
            name: "sign_ssl_positive",
            pass: result.ssl_positive_min_fraction == 1.0,
            statistic: result.ssl_positive_min_fraction,
            threshold: 1.0,
        },
        Verdict {
            name: "sign_ssl_negative",
            pass: result.ssl_negative_fraction == 1.0,
            statistic: result.ssl_negative_fraction,
            threshold: 1.0,
        },
    ];
    write_verdicts_json(dir, &verdicts)?;
    Ok(verdicts)
}

pub fn write_checkpoint(dir: &Path, params: &crate::encoders::LayeredParams) -> Result<()> {
    let mut f = create(&dir.join("final_model.bin"))?;
    crate::encoders::save_params(&mut f, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::ProbeResult;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("fedgala-test-{}-{}", std::process::id(), tag));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn probe_csv_layout() {
        let dir = tmpdir("probe");
        let rows = vec![(
            ProbeResult { target_domain: 2, labeled_fraction: 0.1, accuracy: 0.75, seed: 42 },
            "fedgala",
        )];
        write_probe_csv(&dir, &rows).unwrap();
        let text = fs::read_to_string(dir.join("probe.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema=1");
        assert_eq!(lines[1], "target_domain,labeled_fraction,accuracy,seed,algorithm");
        assert!(lines[2].starts_with("2,"));
        assert!(lines[2].ends_with(",fedgala"));
        assert!(text.ends_with('\n'));
        assert!(!text.contains('\r'));
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn verdict_json_shape() {
        let dir = tmpdir("verdicts");
        let verdicts = vec![
            Verdict { name: "a", pass: true, statistic: 0.5, threshold: 1.0 },
            Verdict { name: "b", pass: false, statistic: 2.0, threshold: 1.0 },
        ];
        write_verdicts_json(&dir, &verdicts).unwrap();
        let text = fs::read_to_string(dir.join("verdicts.json")).unwrap();
        assert!(text.starts_with("{\n"));
        assert!(text.contains("\"a\": {\"pass\": true"));
        assert!(text.contains("\"b\": {\"pass\": false"));
        assert!(text.trim_end().ends_with('}'));
        fs::remove_dir_all(&dir).unwrap();
    }
}
