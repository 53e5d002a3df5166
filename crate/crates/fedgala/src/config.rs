//! Experiment configuration: a flat `key = value` text format with dotted
//! section prefixes, chosen for diff-friendliness. Full-line `#` comments
//! and blank lines are ignored. Unknown keys are rejected with the list of
//! valid ones; every value error carries its line number.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::theory::CovSummary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    FedGala,
    FedAvgSsl,
    FedGalaReweight,
    FedGalaL2,
    FedGalaProx,
    LocalOnly,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedGala => "fedgala",
            Algorithm::FedAvgSsl => "fedavg_ssl",
            Algorithm::FedGalaReweight => "fedgala_reweight",
            Algorithm::FedGalaL2 => "fedgala_l2",
            Algorithm::FedGalaProx => "fedgala_prox",
            Algorithm::LocalOnly => "local_only",
        }
    }

    fn parse(s: &str, line: usize) -> Result<Self> {
        match s {
            "fedgala" => Ok(Algorithm::FedGala),
            "fedavg_ssl" => Ok(Algorithm::FedAvgSsl),
            "fedgala_reweight" => Ok(Algorithm::FedGalaReweight),
            "fedgala_l2" => Ok(Algorithm::FedGalaL2),
            "fedgala_prox" => Ok(Algorithm::FedGalaProx),
            "local_only" => Ok(Algorithm::LocalOnly),
            _ => Err(Error::Config {
                line,
                message: format!(
                    "unknown algorithm `{s}` (valid: fedgala, fedavg_ssl, fedgala_reweight, fedgala_l2, fedgala_prox, local_only)"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderChoice {
    OneLayer,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossChoice {
    BinaryContrastive,
    Ntxent,
}

/// Every knob of one experiment. `resolve` fills defaults; the canonical
/// echo writes every key back out so a run directory records exactly what
/// it ran with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub agg_iterations: usize,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub reweight_factor: f64,
    pub l2_lambda: f64,
    pub prox_mu: f64,
    pub weight_by_size: bool,
    pub encoder: EncoderChoice,
    pub mlp_arch: Vec<usize>,
    pub loss: LossChoice,
    pub temperature: f64,
    pub domain_count: usize,
    pub features: usize,
    pub samples_per_domain: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub labeled_fractions: Vec<f64>,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    pub theory_summary: CovSummary,
    pub theory_seeds: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            clients: 3,
            rounds: 100,
            local_epochs: 7,
            batch_size: 128,
            tau: 0.0,
            agg_iterations: 3,
            learning_rate: 0.05,
            algorithm: Algorithm::FedGala,
            reweight_factor: 0.01,
            l2_lambda: 0.001,
            prox_mu: 0.001,
            weight_by_size: false,
            encoder: EncoderChoice::Mlp,
            mlp_arch: vec![8, 32, 16],
            loss: LossChoice::Ntxent,
            temperature: 0.5,
            domain_count: 4,
            features: 8,
            samples_per_domain: 2000,
            rho_min: 0.4,
            rho_max: 0.9,
            labeled_fractions: vec![0.1, 0.3],
            probe_epochs: 100,
            probe_learning_rate: 0.1,
            theory_summary: CovSummary::MeanDiag,
            theory_seeds: 5,
        }
    }
}

const VALID_KEYS: &[&str] = &[
    "seed",
    "protocol.clients",
    "protocol.rounds",
    "protocol.local_epochs",
    "protocol.batch_size",
    "protocol.tau",
    "protocol.agg_iterations",
    "protocol.learning_rate",
    "protocol.algorithm",
    "protocol.reweight_factor",
    "protocol.l2_lambda",
    "protocol.prox_mu",
    "protocol.weight_by_size",
    "model.encoder",
    "model.mlp_arch",
    "loss.kind",
    "loss.temperature",
    "domain.count",
    "domain.features",
    "domain.samples_per_domain",
    "domain.rho_min",
    "domain.rho_max",
    "eval.labeled_fractions",
    "eval.probe_epochs",
    "eval.probe_learning_rate",
    "theory.summary",
    "theory.seeds",
];

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Usage(format!("file not found: {}", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.apply(key.trim(), value.trim(), line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse_u64(value, key, line)?,
            "protocol.clients" => self.clients = parse_usize(value, key, line)?,
            "protocol.rounds" => self.rounds = parse_usize(value, key, line)?,
            "protocol.local_epochs" => self.local_epochs = parse_usize(value, key, line)?,
            "protocol.batch_size" => self.batch_size = parse_usize(value, key, line)?,
            "protocol.tau" => self.tau = parse_f64(value, key, line)?,
            "protocol.agg_iterations" => self.agg_iterations = parse_usize(value, key, line)?,
            "protocol.learning_rate" => self.learning_rate = parse_f64(value, key, line)?,
            "protocol.algorithm" => self.algorithm = Algorithm::parse(value, line)?,
            "protocol.reweight_factor" => self.reweight_factor = parse_f64(value, key, line)?,
            "protocol.l2_lambda" => self.l2_lambda = parse_f64(value, key, line)?,
            "protocol.prox_mu" => self.prox_mu = parse_f64(value, key, line)?,
            "protocol.weight_by_size" => self.weight_by_size = parse_bool(value, key, line)?,
            "model.encoder" => {
                self.encoder = match value {
                    "one_layer" => EncoderChoice::OneLayer,
                    "mlp" => EncoderChoice::Mlp,
                    _ => {
                        return Err(Error::Config {
                            line,
                            message: format!("unknown encoder `{value}` (valid: one_layer, mlp)"),
                        })
                    }
                }
            }
            "model.mlp_arch" => self.mlp_arch = parse_usize_list(value, key, line)?,
            "loss.kind" => {
                self.loss = match value {
                    "binary_contrastive" => LossChoice::BinaryContrastive,
                    "ntxent" => LossChoice::Ntxent,
                    _ => {
                        return Err(Error::Config {
                            line,
                            message: format!(
                                "unknown loss `{value}` (valid: binary_contrastive, ntxent)"
                            ),
                        })
                    }
                }
            }
            "loss.temperature" => self.temperature = parse_f64(value, key, line)?,
            "domain.count" => self.domain_count = parse_usize(value, key, line)?,
            "domain.features" => self.features = parse_usize(value, key, line)?,
            "domain.samples_per_domain" => {
                self.samples_per_domain = parse_usize(value, key, line)?
            }
            "domain.rho_min" => self.rho_min = parse_f64(value, key, line)?,
            "domain.rho_max" => self.rho_max = parse_f64(value, key, line)?,
            "eval.labeled_fractions" => self.labeled_fractions = parse_f64_list(value, key, line)?,
            "eval.probe_epochs" => self.probe_epochs = parse_usize(value, key, line)?,
            "eval.probe_learning_rate" => {
                self.probe_learning_rate = parse_f64(value, key, line)?
            }
            "theory.summary" => {
                self.theory_summary = match value {
                    "mean_diag" => CovSummary::MeanDiag,
                    "trace" => CovSummary::Trace,
                    "frobenius" => CovSummary::FrobeniusSym,
                    _ => {
                        return Err(Error::Config {
                            line,
                            message: format!(
                                "unknown summary `{value}` (valid: mean_diag, trace, frobenius)"
                            ),
                        })
                    }
                }
            }
            "theory.seeds" => self.theory_seeds = parse_u64(value, key, line)?,
            _ => {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key `{key}`; valid keys: {}", VALID_KEYS.join(", ")),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Err(Error::Config { line: 0, message });
        if self.clients == 0 {
            return bad("protocol.clients must be at least 1".into());
        }
        if self.local_epochs == 0 {
            return bad("protocol.local_epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("protocol.batch_size must be at least 1".into());
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return bad(format!("protocol.tau must lie in [-1, 1], got {}", self.tau));
        }
        if self.learning_rate <= 0.0 {
            return bad("protocol.learning_rate must be positive".into());
        }
        if self.reweight_factor <= 0.0 || self.reweight_factor > 1.0 {
            return bad("protocol.reweight_factor must lie in (0, 1]".into());
        }
        if self.l2_lambda < 0.0 || self.prox_mu < 0.0 {
            return bad("regularizer coefficients must be nonnegative".into());
        }
        if self.temperature <= 0.0 {
            return bad("loss.temperature must be positive".into());
        }
        if self.features == 0 {
            return bad("domain.features must be at least 1".into());
        }
        if self.domain_count < 2 {
            return bad("domain.count must be at least 2 (one target plus clients)".into());
        }
        if self.clients >= self.domain_count {
            return bad(format!(
                "protocol.clients ({}) must leave a held-out domain (domain.count {})",
                self.clients, self.domain_count
            ));
        }
        if self.samples_per_domain == 0 {
            return bad("domain.samples_per_domain must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.rho_min)
            || !(0.0..=1.0).contains(&self.rho_max)
            || self.rho_min > self.rho_max
        {
            return bad("domain.rho_min/rho_max must satisfy 0 <= min <= max <= 1".into());
        }
        if self.labeled_fractions.is_empty()
            || self.labeled_fractions.iter().any(|f| *f <= 0.0 || *f >= 1.0)
        {
            return bad("eval.labeled_fractions must be a nonempty list within (0, 1)".into());
        }
        if self.probe_epochs == 0 || self.probe_learning_rate <= 0.0 {
            return bad("probe epochs must be >= 1 and probe learning rate positive".into());
        }
        match (self.encoder, self.loss) {
            (EncoderChoice::OneLayer, LossChoice::BinaryContrastive) => {}
            (EncoderChoice::Mlp, LossChoice::Ntxent) => {}
            _ => {
                return bad(
                    "loss.kind must match model.encoder (one_layer with binary_contrastive, mlp with ntxent)"
                        .into(),
                )
            }
        }
        if self.encoder == EncoderChoice::Mlp {
            if self.mlp_arch.len() < 2 || self.mlp_arch.contains(&0) {
                return bad("model.mlp_arch needs at least two nonzero widths".into());
            }
            if self.mlp_arch[0] != self.features {
                return bad(format!(
                    "model.mlp_arch first width ({}) must equal domain.features ({})",
                    self.mlp_arch[0], self.features
                ));
            }
        }
        if self.theory_seeds == 0 {
            return bad("theory.seeds must be at least 1".into());
        }
        Ok(())
    }

    /// Canonical echo with every key present, fixed order, LF endings.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let arch: Vec<String> = self.mlp_arch.iter().map(|w| w.to_string()).collect();
        let fractions: Vec<String> = self.labeled_fractions.iter().map(|f| f.to_string()).collect();
        let summary = match self.theory_summary {
            CovSummary::MeanDiag => "mean_diag",
            CovSummary::Trace => "trace",
            CovSummary::FrobeniusSym => "frobenius",
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "protocol.clients = {}", self.clients);
        let _ = writeln!(s, "protocol.rounds = {}", self.rounds);
        let _ = writeln!(s, "protocol.local_epochs = {}", self.local_epochs);
        let _ = writeln!(s, "protocol.batch_size = {}", self.batch_size);
        let _ = writeln!(s, "protocol.tau = {}", self.tau);
        let _ = writeln!(s, "protocol.agg_iterations = {}", self.agg_iterations);
        let _ = writeln!(s, "protocol.learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "protocol.algorithm = {}", self.algorithm.as_str());
        let _ = writeln!(s, "protocol.reweight_factor = {}", self.reweight_factor);
        let _ = writeln!(s, "protocol.l2_lambda = {}", self.l2_lambda);
        let _ = writeln!(s, "protocol.prox_mu = {}", self.prox_mu);
        let _ = writeln!(s, "protocol.weight_by_size = {}", self.weight_by_size);
        let _ = writeln!(
            s,
            "model.encoder = {}",
            match self.encoder {
                EncoderChoice::OneLayer => "one_layer",
                EncoderChoice::Mlp => "mlp",
            }
        );
        let _ = writeln!(s, "model.mlp_arch = {}", arch.join(","));
        let _ = writeln!(
            s,
            "loss.kind = {}",
            match self.loss {
                LossChoice::BinaryContrastive => "binary_contrastive",
                LossChoice::Ntxent => "ntxent",
            }
        );
        let _ = writeln!(s, "loss.temperature = {}", self.temperature);
        let _ = writeln!(s, "domain.count = {}", self.domain_count);
        let _ = writeln!(s, "domain.features = {}", self.features);
        let _ = writeln!(s, "domain.samples_per_domain = {}", self.samples_per_domain);
        let _ = writeln!(s, "domain.rho_min = {}", self.rho_min);
        let _ = writeln!(s, "domain.rho_max = {}", self.rho_max);
        let _ = writeln!(s, "eval.labeled_fractions = {}", fractions.join(","));
        let _ = writeln!(s, "eval.probe_epochs = {}", self.probe_epochs);
        let _ = writeln!(s, "eval.probe_learning_rate = {}", self.probe_learning_rate);
        let _ = writeln!(s, "theory.summary = {summary}");
        let _ = writeln!(s, "theory.seeds = {}", self.theory_seeds);
        s
    }
}

fn parse_u64(v: &str, key: &str, line: usize) -> Result<u64> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("`{key}` expects an unsigned integer, got `{v}`"),
    })
}

fn parse_usize(v: &str, key: &str, line: usize) -> Result<usize> {
    v.parse().map_err(|_| Error::Config {
        line,
        message: format!("`{key}` expects an unsigned integer, got `{v}`"),
    })
}

fn parse_f64(v: &str, key: &str, line: usize) -> Result<f64> {
    let x: f64 = v.parse().map_err(|_| Error::Config {
        line,
        message: format!("`{key}` expects a real number, got `{v}`"),
    })?;
    if !x.is_finite() {
        return Err(Error::Config { line, message: format!("`{key}` must be finite, got `{v}`") });
    }
    Ok(x)
}

fn parse_bool(v: &str, key: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config {
            line,
            message: format!("`{key}` expects true or false, got `{v}`"),
        }),
    }
}

fn parse_f64_list(v: &str, key: &str, line: usize) -> Result<Vec<f64>> {
    v.split(',').map(|p| parse_f64(p.trim(), key, line)).collect()
}

fn parse_usize_list(v: &str, key: &str, line: usize) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(p.trim(), key, line)).collect()
}
