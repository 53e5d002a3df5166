//! The communication-round loop: broadcast, local training, aggregation,
//! global step, telemetry.
//!
//! Clients within a round run in parallel; every cross-client reduction
//! (aggregation, stats ordering) happens in ascending client-id order, so
//! results do not depend on scheduling. All randomness flows through
//! streams derived from the experiment seed.

use crate::config::{Algorithm, EncoderChoice, ExperimentConfig, LossChoice};
use crate::domains::{generate_family, sample_affine_aug, DomainSample, DomainSpec, LabelRule};
use crate::encoders::{one_layer_params, LayeredParams, MlpArch};
use crate::error::{Error, Result};
use crate::exec;
use crate::global_align::{aligned_aggregate, apply_global_update, client_updates, fedavg_aggregate_by_size};
use crate::local_align::{local_round, ClientState, EncoderKind, LocalRound, LossKind};
use crate::rng::RngStream;
use crate::variants::{LocalMode, VariantConfig};

/// Per-client slice of one round's telemetry.
#[derive(Debug, Clone)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub considered: u64,
    pub discarded: u64,
    pub discard_ratio: f64,
    pub mean_loss: f64,
    pub aug_hash: u64,
}

/// One communication round of telemetry.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundRecord>,
    /// Aggregation weight history: `weights_per_iteration[iter][client]`.
    pub weights_per_iteration: Vec<Vec<f64>>,
    pub fallback_used: bool,
    pub global_param_norm: f64,
}

/// Output of a full protocol run.
#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub final_global: LayeredParams,
    pub records: Vec<RoundRecord>,
}

/// Domain specs for a config: loadings drawn uniformly in
/// [rho_min, rho_max] per domain, one shared labeling rule on the latent.
pub fn build_domain_specs(cfg: &ExperimentConfig) -> Result<Vec<DomainSpec>> {
    let base = RngStream::new(cfg.seed, 0);
    let mut rule_draws = base.derive(0xbe1).draws();
    let mut weight: Vec<f64> = (0..cfg.features).map(|_| rule_draws.normal()).collect();
    let norm = crate::linalg::norm(&weight);
    for w in &mut weight {
        *w /= norm;
    }
    let rule = LabelRule::new(weight, 0.0);
    (0..cfg.domain_count)
        .map(|d| {
            let mut draws = base.derive(0x0d5 + d as u64).draws();
            let rho: Vec<f64> =
                (0..cfg.features).map(|_| draws.uniform_in(cfg.rho_min, cfg.rho_max)).collect();
            DomainSpec::new(rho, rule.clone())
        })
        .collect()
}

/// The full synthetic family for a config.
pub fn build_family(cfg: &ExperimentConfig) -> Result<Vec<DomainSample>> {
    let specs = build_domain_specs(cfg)?;
    generate_family(&specs, cfg.samples_per_domain, RngStream::new(cfg.seed, 0).derive(0xfa))
}

fn encoder_kind(cfg: &ExperimentConfig) -> Result<EncoderKind> {
    match cfg.encoder {
        EncoderChoice::OneLayer => Ok(EncoderKind::OneLayer),
        EncoderChoice::Mlp => Ok(EncoderKind::Mlp(MlpArch::new(cfg.mlp_arch.clone())?)),
    }
}

fn loss_kind(cfg: &ExperimentConfig) -> LossKind {
    match cfg.loss {
        LossChoice::BinaryContrastive => LossKind::BinaryContrastive,
        LossChoice::Ntxent => LossKind::Ntxent { temperature: cfg.temperature },
    }
}

fn init_params(cfg: &ExperimentConfig, kind: &EncoderKind, stream: RngStream) -> LayeredParams {
    match kind {
        EncoderKind::OneLayer => {
            let bound = 1.0 / (cfg.features as f64).sqrt();
            let mut draws = stream.draws();
            one_layer_params((0..cfg.features).map(|_| draws.uniform_in(-bound, bound)).collect())
        }
        EncoderKind::Mlp(arch) => arch.init_params(stream),
    }
}

/// Effective local/server knobs per algorithm variant.
struct AlgorithmPlan {
    tau: f64,
    agg_iterations: usize,
    variant: VariantConfig,
    aggregate: bool,
    plain_average: bool,
}

fn plan(cfg: &ExperimentConfig) -> Result<AlgorithmPlan> {
    let base = VariantConfig::default();
    let plan = match cfg.algorithm {
        Algorithm::FedGala => AlgorithmPlan {
            tau: cfg.tau,
            agg_iterations: cfg.agg_iterations,
            variant: base,
            aggregate: true,
            plain_average: false,
        },
        Algorithm::FedAvgSsl => AlgorithmPlan {
            tau: -1.0,
            agg_iterations: 0,
            variant: base,
            aggregate: true,
            plain_average: true,
        },
        Algorithm::FedGalaReweight => AlgorithmPlan {
            tau: cfg.tau,
            agg_iterations: cfg.agg_iterations,
            variant: VariantConfig { local_mode: LocalMode::Reweight(cfg.reweight_factor), ..base },
            aggregate: true,
            plain_average: false,
        },
        Algorithm::FedGalaL2 => AlgorithmPlan {
            tau: cfg.tau,
            agg_iterations: cfg.agg_iterations,
            variant: VariantConfig { l2_lambda: cfg.l2_lambda, ..base },
            aggregate: true,
            plain_average: false,
        },
        Algorithm::FedGalaProx => AlgorithmPlan {
            tau: cfg.tau,
            agg_iterations: cfg.agg_iterations,
            variant: VariantConfig { prox_mu: cfg.prox_mu, ..base },
            aggregate: true,
            plain_average: false,
        },
        Algorithm::LocalOnly => AlgorithmPlan {
            tau: -1.0,
            agg_iterations: 0,
            variant: base,
            aggregate: false,
            plain_average: true,
        },
    };
    plan.variant.validate()?;
    Ok(plan)
}

/// Run T communication rounds on the given training domains (one client per
/// domain). Round 1 trains without filtering; every later round filters
/// against the reference from the two most recent global models.
pub fn run_protocol(cfg: &ExperimentConfig, train_domains: &[DomainSample]) -> Result<ProtocolRun> {
    if train_domains.is_empty() {
        return Err(Error::EmptyRequest("run_protocol with no training domains"));
    }
    let kind = encoder_kind(cfg)?;
    if let EncoderKind::Mlp(arch) = &kind {
        if arch.input_dim() != cfg.features {
            return Err(Error::DimensionMismatch {
                context: "run_protocol mlp input width",
                expected: cfg.features,
                got: arch.input_dim(),
            });
        }
    }
    let loss = loss_kind(cfg);
    let plan = plan(cfg)?;
    let base = RngStream::new(cfg.seed, 0);

    let mut global = init_params(cfg, &kind, base.derive(0x141));
    let mut prev_global: Option<LayeredParams> = None;
    let mut client_params: Vec<LayeredParams> =
        (0..train_domains.len()).map(|_| global.clone()).collect();
    let sizes: Vec<usize> = train_domains.iter().map(DomainSample::len).collect();
    let mut records = Vec::with_capacity(cfg.rounds);

    let clients: Vec<ClientState> = train_domains
        .iter()
        .enumerate()
        .map(|(i, d)| ClientState {
            id: i,
            params: global.clone(),
            data: d.clone(),
            rng: base.derive(0xc11 + i as u64),
            learning_rate: cfg.learning_rate,
        })
        .collect();

    for round in 1..=cfg.rounds {
        let aug = sample_affine_aug(cfg.features, base.derive(0xa6000 + round as u64));
        let opts = LocalRound {
            epochs: cfg.local_epochs,
            batch_size: cfg.batch_size,
            tau: plan.tau,
            aug: &aug,
            loss,
            encoder: &kind,
            variant: plan.variant,
            round,
        };

        // Broadcast and local training. With aggregation, every client
        // starts from the global model; local_only clients continue from
        // their own parameters.
        let starts: Vec<&LayeredParams> = if plan.aggregate {
            (0..clients.len()).map(|_| &global).collect()
        } else {
            client_params.iter().collect()
        };
        let cells: Vec<usize> = (0..clients.len()).collect();
        let outcomes = exec::map_slice(&cells, |&i| {
            local_round(&clients[i], starts[i], prev_global.as_ref(), &opts)
        });

        let mut round_clients = Vec::with_capacity(clients.len());
        let mut new_client_params = Vec::with_capacity(clients.len());
        for (i, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome?;
            round_clients.push(ClientRoundRecord {
                client_id: i,
                considered: outcome.stats.considered,
                discarded: outcome.stats.discarded,
                discard_ratio: outcome.stats.ratio(),
                mean_loss: outcome.mean_loss,
                aug_hash: outcome.aug_hash,
            });
            new_client_params.push(outcome.params);
        }
        debug_assert!(round_clients.windows(2).all(|w| w[0].aug_hash == w[1].aug_hash));
        client_params = new_client_params;

        let (next_global, weights, fallback) = if plan.aggregate {
            let updates = client_updates(&client_params, &global, round)?;
            if plan.plain_average {
                let update = if cfg.weight_by_size {
                    fedavg_aggregate_by_size(&updates, &sizes)?
                } else {
                    aligned_aggregate(&updates, 0)?.final_update
                };
                (apply_global_update(&global, &update)?, Vec::new(), false)
            } else {
                let report = aligned_aggregate(&updates, plan.agg_iterations)?;
                (
                    apply_global_update(&global, &report.final_update)?,
                    report.weights_per_iteration,
                    report.fallback_used,
                )
            }
        } else {
            // No aggregation: track the client average for telemetry only.
            let updates = client_updates(&client_params, &global, round)?;
            let mean = aligned_aggregate(&updates, 0)?.final_update;
            (apply_global_update(&global, &mean)?, Vec::new(), false)
        };

        if !next_global.is_finite() {
            return Err(Error::NonFinite {
                round,
                detail: "global parameters left the finite range after aggregation".to_string(),
            });
        }

        records.push(RoundRecord {
            round,
            clients: round_clients,
            weights_per_iteration: weights,
            fallback_used: fallback,
            global_param_norm: next_global.l2_norm(),
        });

        prev_global = Some(global);
        global = next_global;
    }

    Ok(ProtocolRun { final_global: global, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            seed: 77,
            clients: 2,
            rounds: 3,
            local_epochs: 1,
            batch_size: 8,
            tau: 0.0,
            agg_iterations: 3,
            learning_rate: 0.05,
            encoder: crate::config::EncoderChoice::OneLayer,
            loss: crate::config::LossChoice::BinaryContrastive,
            domain_count: 3,
            features: 4,
            samples_per_domain: 24,
            mlp_arch: vec![4, 8, 4],
            ..Default::default()
        }
    }

    #[test]
    fn zero_rounds_returns_initialization() {
        let mut cfg = small_cfg();
        cfg.rounds = 0;
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        assert!(run.records.is_empty());
        let again = run_protocol(&cfg, &family[..2]).unwrap();
        assert_eq!(run.final_global, again.final_global);
    }

    #[test]
    fn protocol_is_deterministic() {
        let cfg = small_cfg();
        let family = build_family(&cfg).unwrap();
        let a = run_protocol(&cfg, &family[..2]).unwrap();
        let b = run_protocol(&cfg, &family[..2]).unwrap();
        assert_eq!(a.final_global, b.final_global);
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.global_param_norm.to_bits(), rb.global_param_norm.to_bits());
        }
    }

    #[test]
    fn round_accounting_matches_batches_and_layers() {
        let cfg = small_cfg();
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        // ceil(24/8) = 3 batches, 1 epoch, 1 layer for the one-layer model.
        for rec in &run.records {
            for c in &rec.clients {
                assert_eq!(c.considered, 3);
            }
        }
    }

    #[test]
    fn first_round_discards_nothing_later_rounds_may() {
        let cfg = small_cfg();
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        for c in &run.records[0].clients {
            assert_eq!(c.discarded, 0);
        }
    }

    #[test]
    fn fedgala_keep_all_equals_fedavg_bitwise() {
        let mut cfg = small_cfg();
        cfg.tau = -1.0;
        cfg.agg_iterations = 0;
        let family = build_family(&cfg).unwrap();
        let a = run_protocol(&cfg, &family[..2]).unwrap();
        let mut avg_cfg = cfg.clone();
        avg_cfg.algorithm = Algorithm::FedAvgSsl;
        let b = run_protocol(&avg_cfg, &family[..2]).unwrap();
        assert_eq!(a.final_global, b.final_global);
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.global_param_norm.to_bits(), rb.global_param_norm.to_bits());
        }
    }

    #[test]
    fn aug_hash_identical_across_clients_each_round() {
        let cfg = small_cfg();
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        for rec in &run.records {
            let h0 = rec.clients[0].aug_hash;
            assert!(rec.clients.iter().all(|c| c.aug_hash == h0));
        }
    }

    #[test]
    fn weights_recorded_for_aligned_rounds() {
        let cfg = small_cfg();
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        for rec in &run.records {
            assert_eq!(rec.weights_per_iteration.len(), 3);
            for w in &rec.weights_per_iteration {
                assert_eq!(w.len(), 2);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_ntxent_protocol_runs() {
        let mut cfg = small_cfg();
        cfg.encoder = crate::config::EncoderChoice::Mlp;
        cfg.loss = crate::config::LossChoice::Ntxent;
        cfg.mlp_arch = vec![4, 6, 3];
        cfg.rounds = 2;
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        assert_eq!(run.records.len(), 2);
        assert!(run.final_global.is_finite());
        // Four named layers: two weight blocks and two bias blocks.
        assert_eq!(run.final_global.layers.len(), 4);
    }

    #[test]
    fn single_client_keep_all_matches_centralized_sgd_oracle() {
        // With one client, keep-all filtering and plain averaging, the
        // protocol must reduce to ordinary SGD on that client's data. The
        // oracle below replays the same stream derivations through an
        // independent training loop.
        let cfg = ExperimentConfig {
            seed: 313,
            clients: 1,
            rounds: 3,
            local_epochs: 2,
            batch_size: 8,
            tau: -1.0,
            algorithm: Algorithm::FedAvgSsl,
            learning_rate: 0.07,
            encoder: crate::config::EncoderChoice::OneLayer,
            loss: crate::config::LossChoice::BinaryContrastive,
            domain_count: 2,
            features: 3,
            samples_per_domain: 20,
            mlp_arch: vec![3, 4, 2],
            ..Default::default()
        };
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..1]).unwrap();

        let base = RngStream::new(cfg.seed, 0);
        let mut draws = base.derive(0x141).draws();
        let bound = 1.0 / (3f64).sqrt();
        let mut w: Vec<f64> = (0..3).map(|_| draws.uniform_in(-bound, bound)).collect();
        let client_stream = base.derive(0xc11);
        let data = &family[0];
        for round in 1..=3usize {
            let aug = sample_affine_aug(3, base.derive(0xa6000 + round as u64));
            for epoch in 0..2usize {
                let mut order: Vec<usize> = (0..20).collect();
                client_stream
                    .derive(0x5u64 ^ ((round as u64) << 20) ^ (epoch as u64))
                    .draws()
                    .shuffle(&mut order);
                for chunk in order.chunks(8) {
                    let mut anchors = crate::linalg::Matrix::zeros(chunk.len(), 3);
                    for (r, &i) in chunk.iter().enumerate() {
                        anchors.row_mut(r).copy_from_slice(data.data.row(i));
                    }
                    let batch = crate::losses::ContrastiveBatch::from_anchors(
                        anchors,
                        chunk.to_vec(),
                        &aug,
                    )
                    .unwrap();
                    let (_, g) =
                        crate::losses::binary_contrastive_loss(&w, &batch).unwrap();
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= 0.07 * gi;
                    }
                }
            }
        }
        // The server applies prev + (client - prev), which costs about one
        // ulp per round against the oracle's direct trajectory.
        for (a, b) in run.final_global.layers[0].values.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn local_only_never_filters_or_weighs() {
        let mut cfg = small_cfg();
        cfg.algorithm = Algorithm::LocalOnly;
        let family = build_family(&cfg).unwrap();
        let run = run_protocol(&cfg, &family[..2]).unwrap();
        for rec in &run.records {
            assert!(rec.weights_per_iteration.is_empty());
            for c in &rec.clients {
                assert_eq!(c.discarded, 0);
            }
        }
    }
}
