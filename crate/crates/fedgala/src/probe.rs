//! Linear-probe evaluation of frozen encoders on held-out domains, plus the
//! leave-one-domain-out orchestration.
//!
//! The probe is a single linear layer with softmax trained by full-batch
//! gradient descent on a seeded labeled split of the target domain;
//! accuracy is measured on the complement. The encoder is never modified.

use crate::config::ExperimentConfig;
use crate::domains::{DomainSample, LabelRule};
use crate::encoders::LayeredParams;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::dot;
use crate::local_align::EncoderKind;
use crate::protocol::{build_domain_specs, build_family, run_protocol};
use crate::rng::RngStream;

/// One probe measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub target_domain: usize,
    pub labeled_fraction: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// Embed one sample with a frozen encoder. The one-layer model scores with
/// its raw inner product; the MLP produces its output layer.
pub fn embed(kind: &EncoderKind, params: &LayeredParams, x: &[f64]) -> Result<Vec<f64>> {
    match kind {
        EncoderKind::OneLayer => Ok(vec![dot(&params.layers[0].values, x)]),
        EncoderKind::Mlp(arch) => arch.forward(params, x),
    }
}

/// Train a linear probe on `labeled_fraction` of the target domain and
/// report accuracy on the rest.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    kind: &EncoderKind,
    encoder: &LayeredParams,
    target: &DomainSample,
    rule: &LabelRule,
    labeled_fraction: f64,
    epochs: usize,
    learning_rate: f64,
    stream: RngStream,
) -> Result<ProbeResult> {
    if !(0.0 < labeled_fraction && labeled_fraction < 1.0) {
        return Err(Error::Precondition(format!(
            "labeled fraction must lie in (0, 1), got {labeled_fraction}"
        )));
    }
    let n = target.len();
    if n < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: n });
    }

    // Frozen features and latent-rule labels.
    let mut features = Vec::with_capacity(n);
    for i in 0..n {
        features.push(embed(kind, encoder, target.data.row(i))?);
    }
    let labels: Vec<usize> = (0..n).map(|i| rule.evaluate(target.latent.row(i))).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let classes = classes.max(2);
    let dim = features[0].len();

    let n_train = ((labeled_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = labeled_split(n, n_train, &labels, stream)?;

    // Softmax regression, zero init, full-batch gradient descent.
    let mut weights = vec![vec![0.0; dim + 1]; classes]; // last entry is bias
    let inv_train = 1.0 / train_idx.len() as f64;
    for _ in 0..epochs {
        let mut grads = vec![vec![0.0; dim + 1]; classes];
        for &i in &train_idx {
            let probs = softmax_probs(&weights, &features[i]);
            for (c, grad_row) in grads.iter_mut().enumerate() {
                let err = probs[c] - if labels[i] == c { 1.0 } else { 0.0 };
                for (gk, fk) in grad_row[..dim].iter_mut().zip(&features[i]) {
                    *gk += err * fk;
                }
                grad_row[dim] += err;
            }
        }
        for (w_row, g_row) in weights.iter_mut().zip(&grads) {
            for (w, g) in w_row.iter_mut().zip(g_row) {
                *w -= learning_rate * inv_train * g;
            }
        }
    }

    let mut correct = 0usize;
    for &i in &test_idx {
        let probs = softmax_probs(&weights, &features[i]);
        let pred = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap();
        if pred == labels[i] {
            correct += 1;
        }
    }
    Ok(ProbeResult {
        target_domain: target.domain_id,
        labeled_fraction,
        accuracy: correct as f64 / test_idx.len() as f64,
        seed: stream.seed,
    })
}

/// Seeded disjoint split of 0..n into (labeled, held-out). Reshuffles with
/// the next derived stream when the labeled part comes out single-class,
/// logging each retry.
fn labeled_split(
    n: usize,
    n_train: usize,
    labels: &[usize],
    stream: RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let max_attempts: u64 = 20;
    for attempt in 0..max_attempts {
        let mut order: Vec<usize> = (0..n).collect();
        stream.derive(attempt).draws().shuffle(&mut order);
        let (train, test) = order.split_at(n_train);
        let first = labels[train[0]];
        if train.iter().any(|&i| labels[i] != first) {
            return Ok((train.to_vec(), test.to_vec()));
        }
        eprintln!("warning: probe split attempt {attempt} had a single class; reshuffling");
    }
    Err(Error::DegenerateSplit { attempts: max_attempts as usize })
}

fn softmax_probs(weights: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let dim = x.len();
    let logits: Vec<f64> = weights.iter().map(|w| dot(&w[..dim], x) + w[dim]).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// A single-target experiment: protocol trained on the first
/// `cfg.clients` domains, probed on the last domain of the family.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub run: crate::protocol::ProtocolRun,
    pub target: usize,
    pub probes: Vec<ProbeResult>,
}

pub fn run_single_experiment(cfg: &ExperimentConfig) -> Result<SingleRun> {
    let specs = build_domain_specs(cfg)?;
    let family = build_family(cfg)?;
    let target = cfg.domain_count - 1;
    let train: Vec<DomainSample> = family[..cfg.clients].to_vec();
    let run = run_protocol(cfg, &train)?;
    let kind = match cfg.encoder {
        crate::config::EncoderChoice::OneLayer => EncoderKind::OneLayer,
        crate::config::EncoderChoice::Mlp => {
            EncoderKind::Mlp(crate::encoders::MlpArch::new(cfg.mlp_arch.clone())?)
        }
    };
    let probe_stream = RngStream::new(cfg.seed, 0).derive(0x9e0 + target as u64);
    let probes = cfg
        .labeled_fractions
        .iter()
        .map(|&fraction| {
            linear_probe(
                &kind,
                &run.final_global,
                &family[target],
                &specs[target].label_rule,
                fraction,
                cfg.probe_epochs,
                cfg.probe_learning_rate,
                probe_stream,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SingleRun { run, target, probes })
}

/// Everything a leave-one-domain-out evaluation produces: the probe rows
/// plus the per-target protocol telemetry.
#[derive(Debug, Clone)]
pub struct LodoOutcome {
    pub probes: Vec<ProbeResult>,
    pub runs: Vec<(usize, crate::protocol::ProtocolRun)>,
}

/// For each domain of the family: train the protocol on the others (one
/// client per domain) and probe the frozen result on the held-out one, at
/// every configured labeled fraction. Results come back ordered by
/// (target, fraction).
pub fn leave_one_domain_out(cfg: &ExperimentConfig) -> Result<Vec<ProbeResult>> {
    let specs = build_domain_specs(cfg)?;
    let family = build_family(cfg)?;
    Ok(leave_one_domain_out_on(cfg, &specs, &family)?.probes)
}

/// Leave-one-domain-out over a prebuilt family. Exposed so callers can keep
/// the label rules (for example to audit that training never evaluated
/// them) and the round telemetry.
pub fn leave_one_domain_out_on(
    cfg: &ExperimentConfig,
    specs: &[crate::domains::DomainSpec],
    family: &[DomainSample],
) -> Result<LodoOutcome> {
    if family.len() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: family.len() });
    }
    let kind = match cfg.encoder {
        crate::config::EncoderChoice::OneLayer => EncoderKind::OneLayer,
        crate::config::EncoderChoice::Mlp => {
            EncoderKind::Mlp(crate::encoders::MlpArch::new(cfg.mlp_arch.clone())?)
        }
    };

    let targets: Vec<usize> = (0..family.len()).collect();
    let per_target = exec::map_slice(
        &targets,
        |&target| -> Result<(usize, crate::protocol::ProtocolRun, Vec<ProbeResult>)> {
            let train: Vec<DomainSample> =
                family.iter().filter(|d| d.domain_id != target).cloned().collect();
            let run = run_protocol(cfg, &train)?;
            let probe_stream = RngStream::new(cfg.seed, 0).derive(0x9e0 + target as u64);
            let probes = cfg
                .labeled_fractions
                .iter()
                .map(|&fraction| {
                    linear_probe(
                        &kind,
                        &run.final_global,
                        &family[target],
                        &specs[target].label_rule,
                        fraction,
                        cfg.probe_epochs,
                        cfg.probe_learning_rate,
                        probe_stream,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((target, run, probes))
        },
    );

    let mut outcome = LodoOutcome { probes: Vec::new(), runs: Vec::new() };
    for r in per_target {
        let (target, run, probes) = r?;
        outcome.probes.extend(probes);
        outcome.runs.push((target, run));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EncoderChoice, ExperimentConfig, LossChoice};
    use crate::domains::{generate_family, DomainSpec};
    use crate::encoders::MlpArch;
    use crate::linalg::Matrix;
    use crate::textio::fnv1a64_f64;

    fn tiny_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seed: 91,
            clients: 2,
            rounds: 2,
            local_epochs: 1,
            batch_size: 8,
            encoder: EncoderChoice::OneLayer,
            loss: LossChoice::BinaryContrastive,
            domain_count: 3,
            features: 4,
            samples_per_domain: 40,
            mlp_arch: vec![4, 8, 4],
            labeled_fractions: vec![0.2],
            probe_epochs: 50,
            ..Default::default()
        }
    }

    fn sample_with_rule(n: usize, features: usize, seed: u64) -> (DomainSample, LabelRule) {
        let rule = LabelRule::new(vec![1.0; features], 0.0);
        let spec = DomainSpec::new(vec![0.7; features], rule.clone()).unwrap();
        let fam = generate_family(&[spec], n, RngStream::new(seed, 0)).unwrap();
        (fam.into_iter().next().unwrap(), rule)
    }

    #[test]
    fn probe_does_not_modify_encoder() {
        let (sample, rule) = sample_with_rule(60, 4, 1);
        let arch = MlpArch::new(vec![4, 6, 3]).unwrap();
        let params = arch.init_params(RngStream::new(2, 0));
        let before = fnv1a64_f64(&params.flatten());
        let kind = EncoderKind::Mlp(arch);
        linear_probe(&kind, &params, &sample, &rule, 0.3, 50, 0.1, RngStream::new(3, 0)).unwrap();
        assert_eq!(fnv1a64_f64(&params.flatten()), before);
    }

    #[test]
    fn probe_split_is_disjoint_and_covers() {
        // Degenerate encoder keeps the probe fast; we assert on structure
        // via accuracy being computed (test set nonempty) and determinism.
        let (sample, rule) = sample_with_rule(50, 4, 4);
        let kind = EncoderKind::OneLayer;
        let params = crate::encoders::one_layer_params(vec![0.5; 4]);
        let a = linear_probe(&kind, &params, &sample, &rule, 0.1, 50, 0.1, RngStream::new(5, 0))
            .unwrap();
        let b = linear_probe(&kind, &params, &sample, &rule, 0.1, 50, 0.1, RngStream::new(5, 0))
            .unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy));
    }

    #[test]
    fn linearly_separable_embeddings_probe_high() {
        // Labels equal the sign of the first embedding coordinate: an
        // identity encoder makes them separable.
        let n = 200;
        let features = 3;
        let mut data = Matrix::zeros(n, features);
        let mut latent = Matrix::zeros(n, features);
        let mut draws = RngStream::new(6, 0).draws();
        for i in 0..n {
            for j in 0..features {
                let v = draws.normal();
                data.set(i, j, v);
                latent.set(i, j, v);
            }
        }
        let sample = DomainSample { domain_id: 0, data, latent };
        let rule = LabelRule::new(vec![1.0, 0.0, 0.0], 0.0);
        let arch = MlpArch::new(vec![3, 3]).unwrap();
        let mut params = arch.zero_params();
        for i in 0..3 {
            params.layers[0].values[i * 3 + i] = 1.0;
        }
        let kind = EncoderKind::Mlp(arch);
        let res =
            linear_probe(&kind, &params, &sample, &rule, 0.3, 200, 0.5, RngStream::new(7, 0))
                .unwrap();
        assert!(res.accuracy >= 0.95, "accuracy {}", res.accuracy);
    }

    #[test]
    fn random_encoder_probe_lands_near_raw_feature_probe() {
        // Oracle: probing the raw features directly (identity encoder). A
        // random encoder of the default geometry (4x hidden expansion) is a
        // random feature map and should land in the same band.
        let (sample, rule) = sample_with_rule(400, 4, 8);
        let raw_arch = MlpArch::new(vec![4, 4]).unwrap();
        let mut raw_params = raw_arch.zero_params();
        for i in 0..4 {
            raw_params.layers[0].values[i * 4 + i] = 1.0;
        }
        let raw = linear_probe(
            &EncoderKind::Mlp(raw_arch),
            &raw_params,
            &sample,
            &rule,
            0.3,
            400,
            0.5,
            RngStream::new(9, 0),
        )
        .unwrap();

        let arch = MlpArch::new(vec![4, 16, 8]).unwrap();
        let params = arch.init_params(RngStream::new(10, 0));
        let rand = linear_probe(
            &EncoderKind::Mlp(arch),
            &params,
            &sample,
            &rule,
            0.3,
            400,
            0.5,
            RngStream::new(9, 0),
        )
        .unwrap();
        assert!(
            (rand.accuracy - raw.accuracy).abs() <= 0.1,
            "random-encoder {} vs raw {}",
            rand.accuracy,
            raw.accuracy
        );
    }

    #[test]
    fn split_is_disjoint_and_covers() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let (train, test) = labeled_split(40, 12, &labels, RngStream::new(11, 0)).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(test.len(), 28);
        let mut all: Vec<usize> = train.iter().chain(test.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn single_class_target_is_degenerate() {
        let labels = vec![1usize; 30];
        assert!(matches!(
            labeled_split(30, 5, &labels, RngStream::new(12, 0)),
            Err(Error::DegenerateSplit { .. })
        ));
    }

    #[test]
    fn more_labels_help_on_average() {
        // Trend over 5 seeds: a 30% labeled split should not probe worse
        // than a 10% one on average.
        let (sample, rule) = sample_with_rule(400, 6, 13);
        let arch = MlpArch::new(vec![6, 12, 6]).unwrap();
        let params = arch.init_params(RngStream::new(14, 0));
        let kind = EncoderKind::Mlp(arch);
        let mut acc10 = 0.0;
        let mut acc30 = 0.0;
        for seed in 0..5 {
            let s = RngStream::new(15, seed);
            acc10 += linear_probe(&kind, &params, &sample, &rule, 0.1, 100, 0.2, s)
                .unwrap()
                .accuracy
                / 5.0;
            acc30 += linear_probe(&kind, &params, &sample, &rule, 0.3, 100, 0.2, s)
                .unwrap()
                .accuracy
                / 5.0;
        }
        assert!(acc30 >= acc10 - 1e-9, "acc30 {acc30} vs acc10 {acc10}");
    }

    #[test]
    fn lodo_runs_one_protocol_per_domain() {
        let cfg = tiny_cfg();
        let results = leave_one_domain_out(&cfg).unwrap();
        // 3 domains x 1 fraction.
        assert_eq!(results.len(), 3);
        let targets: Vec<usize> = results.iter().map(|r| r.target_domain).collect();
        assert_eq!(targets, vec![0, 1, 2]);
    }

    #[test]
    fn lodo_deterministic() {
        let cfg = tiny_cfg();
        let a = leave_one_domain_out(&cfg).unwrap();
        let b = leave_one_domain_out(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_never_evaluates_labels() {
        // The protocol path never even receives a label rule (enforced by
        // its signature); the audit below pins that down end to end: after
        // a full leave-one-domain-out run, the only evaluations on record
        // are the ones the probes made, one per target row per probe call.
        let cfg = tiny_cfg();
        let specs = crate::protocol::build_domain_specs(&cfg).unwrap();
        let family = build_family(&cfg).unwrap();
        let _ = leave_one_domain_out_on(&cfg, &specs, &family).unwrap();
        // All specs share one rule clone, hence one counter.
        let total = specs[0].label_rule.evaluations();
        let probe_calls = family.len() as u64 * cfg.labeled_fractions.len() as u64;
        assert_eq!(total, probe_calls * cfg.samples_per_domain as u64);
    }
}
