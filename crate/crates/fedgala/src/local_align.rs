//! Client-side layer-wise gradient filtering against the reference
//! direction, plus the per-round local training loop.
//!
//! The reference for round `t` is the per-layer difference of the two most
//! recent global models. A batch gradient layer is applied only when its
//! cosine with the reference layer exceeds `tau`; otherwise the layer is
//! skipped and counted as discarded. Round 1 has no previous global model,
//! so filtering is bypassed and every gradient applies.

use std::collections::BTreeMap;

use crate::domains::{AffineAug, DomainSample};
use crate::encoders::{shape_matches, LayeredParams, MlpArch, UpdateDelta};
use crate::error::{Error, Result};
use crate::linalg::{cosine, Matrix};
use crate::losses::{binary_contrastive_loss, ntxent_loss, ContrastiveBatch};
use crate::rng::RngStream;
use crate::variants::{LocalMode, VariantConfig};

/// Which SSL objective a client trains with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// One-layer scorer with the pairwise binary cross-entropy.
    BinaryContrastive,
    /// MLP encoder with NT-Xent at the given temperature.
    Ntxent { temperature: f64 },
}

/// Encoder selection for protocol runs.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderKind {
    OneLayer,
    Mlp(MlpArch),
}

/// Everything one client owns.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: LayeredParams,
    pub data: DomainSample,
    pub rng: RngStream,
    pub learning_rate: f64,
}

/// Discard accounting, total and per layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscardStats {
    pub considered: u64,
    pub discarded: u64,
    pub per_layer: BTreeMap<String, (u64, u64)>,
}

impl DiscardStats {
    pub fn ratio(&self) -> f64 {
        if self.considered == 0 {
            0.0
        } else {
            self.discarded as f64 / self.considered as f64
        }
    }

    fn record(&mut self, layer: &str, discarded: bool) {
        self.considered += 1;
        let entry = self.per_layer.entry(layer.to_string()).or_insert((0, 0));
        entry.0 += 1;
        if discarded {
            self.discarded += 1;
            entry.1 += 1;
        }
    }

    /// Associative merge; callers fold in ascending client order.
    pub fn merge(&mut self, other: &DiscardStats) {
        self.considered += other.considered;
        self.discarded += other.discarded;
        for (name, (c, d)) in &other.per_layer {
            let entry = self.per_layer.entry(name.clone()).or_insert((0, 0));
            entry.0 += c;
            entry.1 += d;
        }
    }
}

/// Per-layer difference of consecutive global models.
pub fn compute_reference(
    global_now: &LayeredParams,
    global_prev: &LayeredParams,
    round: usize,
) -> Result<UpdateDelta> {
    global_now.subtract(global_prev, round)
}

/// Keep a layer when its cosine with the reference clears `tau`. The
/// comparison is strict, except that `tau = -1` keeps everything so it
/// reproduces plain SGD exactly.
pub fn layer_kept(grad_layer: &[f64], ref_layer: &[f64], tau: f64) -> Result<bool> {
    if tau <= -1.0 {
        return Ok(true);
    }
    Ok(cosine(grad_layer, ref_layer)? > tau)
}

/// One filtered SGD step over every layer.
pub fn filtered_sgd_step(
    params: &LayeredParams,
    learning_rate: f64,
    batch_grad: &UpdateDelta,
    reference: &UpdateDelta,
    tau: f64,
) -> Result<(LayeredParams, DiscardStats)> {
    step_with_mode(params, learning_rate, batch_grad, reference, tau, LocalMode::Discard)
}

/// Filtered step with the variant hook: discard drops unaligned layers,
/// reweight scales them by a factor instead. Stats count unaligned layers
/// either way.
pub fn step_with_mode(
    params: &LayeredParams,
    learning_rate: f64,
    batch_grad: &UpdateDelta,
    reference: &UpdateDelta,
    tau: f64,
    mode: LocalMode,
) -> Result<(LayeredParams, DiscardStats)> {
    if !shape_matches(params, batch_grad) {
        return Err(Error::ShapeMismatch {
            context: "filtered_sgd_step",
            detail: "gradient shape differs from parameters".to_string(),
        });
    }
    if !shape_matches(params, reference) {
        return Err(Error::ShapeMismatch {
            context: "filtered_sgd_step",
            detail: "reference shape differs from parameters".to_string(),
        });
    }
    let mut new_params = params.clone();
    let mut stats = DiscardStats::default();
    for (l, layer) in new_params.layers.iter_mut().enumerate() {
        let grad = &batch_grad.layers[l].values;
        let kept = layer_kept(grad, &reference.layers[l].values, tau)?;
        stats.record(&layer.name, !kept);
        let factor = match (kept, mode) {
            (true, _) => 1.0,
            (false, LocalMode::Discard) => 0.0,
            (false, LocalMode::Reweight(f)) => f,
        };
        if factor != 0.0 {
            for (p, g) in layer.values.iter_mut().zip(grad) {
                *p -= learning_rate * factor * g;
            }
        }
    }
    Ok((new_params, stats))
}

/// Apply every layer unconditionally (round-1 bypass); the layers still
/// count as considered so discard ratios stay comparable across rounds.
fn unfiltered_step(
    params: &LayeredParams,
    learning_rate: f64,
    batch_grad: &UpdateDelta,
) -> Result<(LayeredParams, DiscardStats)> {
    if !shape_matches(params, batch_grad) {
        return Err(Error::ShapeMismatch {
            context: "unfiltered_step",
            detail: "gradient shape differs from parameters".to_string(),
        });
    }
    let mut new_params = params.clone();
    let mut stats = DiscardStats::default();
    for (l, layer) in new_params.layers.iter_mut().enumerate() {
        stats.record(&layer.name, false);
        for (p, g) in layer.values.iter_mut().zip(&batch_grad.layers[l].values) {
            *p -= learning_rate * g;
        }
    }
    Ok((new_params, stats))
}

/// Options shared by every client in a round.
#[derive(Debug, Clone)]
pub struct LocalRound<'a> {
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub aug: &'a AffineAug,
    pub loss: LossKind,
    pub encoder: &'a EncoderKind,
    pub variant: VariantConfig,
    pub round: usize,
}

/// Outcome of one client's local training for a round.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub params: LayeredParams,
    pub stats: DiscardStats,
    pub mean_loss: f64,
    pub aug_hash: u64,
}

/// Run `epochs` shuffled passes over the client's data.
///
/// The client starts from `global_now` (the broadcast), computes an SSL
/// gradient per batch, adds any regularizer terms, and applies the filtered
/// step against the reference derived from the two most recent global
/// models. `global_prev = None` marks the first round, where filtering is
/// bypassed.
pub fn local_round(
    client: &ClientState,
    global_now: &LayeredParams,
    global_prev: Option<&LayeredParams>,
    opts: &LocalRound<'_>,
) -> Result<LocalOutcome> {
    let n = client.data.len();
    if n == 0 {
        return Err(Error::EmptyRequest("local_round on a client with no data"));
    }
    let mut batch_size = opts.batch_size.max(1);
    if batch_size > n {
        eprintln!(
            "warning: client {} batch size {} exceeds dataset size {}; clamping",
            client.id, batch_size, n
        );
        batch_size = n;
    }
    let reference = match global_prev {
        Some(prev) => Some(compute_reference(global_now, prev, opts.round)?),
        None => None,
    };

    let mut params = global_now.clone();
    let mut stats = DiscardStats::default();
    let mut loss_sum = 0.0;
    let mut batches = 0u64;

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_draws =
            client.rng.derive(0x5u64 ^ ((opts.round as u64) << 20) ^ (epoch as u64)).draws();
        shuffle_draws.shuffle(&mut order);

        for chunk in order.chunks(batch_size) {
            let (loss, mut grad) = batch_gradient(&params, &client.data, chunk, opts)?;
            if !grad.is_finite() || !loss.is_finite() {
                return Err(Error::NonFinite {
                    round: opts.round,
                    detail: format!("client {} produced a non-finite batch gradient", client.id),
                });
            }
            opts.variant.add_regularizer_terms(&mut grad, &params, global_now)?;
            let stepped = match &reference {
                Some(reference) => step_with_mode(
                    &params,
                    client.learning_rate,
                    &grad,
                    reference,
                    opts.tau,
                    opts.variant.local_mode,
                )?,
                None => unfiltered_step(&params, client.learning_rate, &grad)?,
            };
            params = stepped.0;
            stats.merge(&stepped.1);
            loss_sum += loss;
            batches += 1;
        }
    }
    let mean_loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
    Ok(LocalOutcome { params, stats, mean_loss, aug_hash: opts.aug.hash() })
}

/// SSL loss and gradient for one batch of sample indices.
fn batch_gradient(
    params: &LayeredParams,
    data: &DomainSample,
    indices: &[usize],
    opts: &LocalRound<'_>,
) -> Result<(f64, UpdateDelta)> {
    let feature_count = data.feature_count();
    let mut anchors = Matrix::zeros(indices.len(), feature_count);
    for (r, &i) in indices.iter().enumerate() {
        anchors.row_mut(r).copy_from_slice(data.data.row(i));
    }
    let batch = ContrastiveBatch::from_anchors(anchors, indices.to_vec(), opts.aug)?;

    match (&opts.loss, opts.encoder) {
        (LossKind::BinaryContrastive, EncoderKind::OneLayer) => {
            let w = &params.layers[0].values;
            let (loss, grad) = binary_contrastive_loss(w, &batch)?;
            let mut delta = UpdateDelta::zeros_like(params, opts.round);
            delta.layers[0].values = grad;
            Ok((loss, delta))
        }
        (LossKind::Ntxent { temperature }, EncoderKind::Mlp(arch)) => {
            let b = batch.len();
            if b < 2 {
                // A single-sample trailing batch carries no negatives; it
                // contributes nothing but still counts as a step.
                eprintln!("warning: skipping single-sample batch (no negatives)");
                return Ok((0.0, UpdateDelta::zeros_like(params, opts.round)));
            }
            // Interleave anchor/positive embeddings: rows 2k and 2k+1 pair.
            let mut inputs = Matrix::zeros(2 * b, feature_count);
            for k in 0..b {
                inputs.row_mut(2 * k).copy_from_slice(batch.anchors.row(k));
                inputs.row_mut(2 * k + 1).copy_from_slice(batch.positives.row(k));
            }
            let mut embeddings = Matrix::zeros(2 * b, arch.embedding_dim());
            for r in 0..2 * b {
                let e = arch.forward(params, inputs.row(r))?;
                embeddings.row_mut(r).copy_from_slice(&e);
            }
            let (loss, upstream) = ntxent_loss(&embeddings, *temperature)?;
            let mut grad = arch.backward(params, &inputs, &upstream)?;
            grad.round = opts.round;
            Ok((loss, grad))
        }
        _ => Err(Error::Precondition(
            "loss kind does not match encoder kind (binary_contrastive needs one_layer, ntxent needs mlp)"
                .to_string(),
        )),
    }
}
