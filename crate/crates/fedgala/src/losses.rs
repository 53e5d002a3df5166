//! Self-supervised objectives.
//!
//! `binary_contrastive_loss` is the pairwise cross-entropy for the one-layer
//! scorer: an anchor against its own augmentation is a positive pair, an
//! anchor against every other in-batch sample is a negative pair, and the
//! loss is summed over pairs so gradient magnitudes match the closed forms
//! in `encoders`.
//!
//! `ntxent_loss` is the normalized-temperature cross-entropy over cosine
//! similarities used with the MLP encoder. Reduction is the sum over
//! positive pairs of the two-direction average, i.e. half the sum of the
//! per-anchor terms.

use crate::domains::{apply_augmentation, AffineAug};
use crate::encoders::{one_layer_contrastive_grad, one_layer_forward};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix, ZERO_NORM_EPS};

/// Probability clamp applied before logs.
const PROB_EPS: f64 = 1e-12;

/// A batch of anchors with their broadcast-augmented positives.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub anchors: Matrix,
    pub positives: Matrix,
    pub batch_indices: Vec<usize>,
}

impl ContrastiveBatch {
    /// Build from anchor rows by applying the round augmentation.
    pub fn from_anchors(anchors: Matrix, indices: Vec<usize>, aug: &AffineAug) -> Result<Self> {
        let mut positives = Matrix::zeros(anchors.rows(), anchors.cols());
        for i in 0..anchors.rows() {
            let p = apply_augmentation(anchors.row(i), aug)?;
            positives.row_mut(i).copy_from_slice(&p);
        }
        Ok(ContrastiveBatch { anchors, positives, batch_indices: indices })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }

    /// Check the recorded positives really are the augmentation of the
    /// anchors, bitwise.
    pub fn positives_match(&self, aug: &AffineAug) -> Result<bool> {
        for i in 0..self.len() {
            let expect = apply_augmentation(self.anchors.row(i), aug)?;
            if expect != self.positives.row(i) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

fn bce(y_hat: f64, positive: bool) -> f64 {
    let p = y_hat.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Summed BCE over all positive and in-batch negative pairs plus its exact
/// gradient with respect to the one-layer weights.
pub fn binary_contrastive_loss(w: &[f64], batch: &ContrastiveBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyRequest("binary_contrastive_loss on empty batch"));
    }
    if batch.anchors.cols() != w.len() {
        return Err(Error::DimensionMismatch {
            context: "binary_contrastive_loss",
            expected: w.len(),
            got: batch.anchors.cols(),
        });
    }
    let b = batch.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for i in 0..b {
        let anchor = batch.anchors.row(i);
        // Positive pair: anchor vs its own augmentation.
        let y_hat = one_layer_forward(w, anchor, batch.positives.row(i))?;
        loss += bce(y_hat, true);
        let g = one_layer_contrastive_grad(w, anchor, batch.positives.row(i), true)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
        // Negative pairs: anchor vs every other sample in the batch.
        for j in 0..b {
            if j == i {
                continue;
            }
            let other = batch.anchors.row(j);
            let y_hat = one_layer_forward(w, anchor, other)?;
            loss += bce(y_hat, false);
            let g = one_layer_contrastive_grad(w, anchor, other, false)?;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v;
            }
        }
    }
    Ok((loss, grad))
}

/// NT-Xent over interleaved embeddings: rows `2k` and `2k + 1` are a
/// positive pair. Returns the loss and its exact gradient at the
/// embeddings.
pub fn ntxent_loss(embeddings: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    let d = embeddings.cols();
    if d == 0 || n < 4 || !n.is_multiple_of(2) {
        return Err(Error::BatchTooSmall { needed: 4, got: n });
    }
    if temperature <= 0.0 {
        return Err(Error::Precondition("temperature must be positive".to_string()));
    }

    // Unit directions; a zero embedding has no direction and similarity 0.
    let mut norms = Vec::with_capacity(n);
    let mut units = Matrix::zeros(n, d);
    for i in 0..n {
        let nrm = norm(embeddings.row(i));
        norms.push(nrm);
        if nrm >= ZERO_NORM_EPS {
            for j in 0..d {
                units.set(i, j, embeddings.get(i, j) / nrm);
            }
        }
    }

    let sim = |i: usize, j: usize, units: &Matrix| dot(units.row(i), units.row(j)) / temperature;
    let partner = |i: usize| if i.is_multiple_of(2) { i + 1 } else { i - 1 };

    // Per-anchor softmax over all other rows.
    let mut loss = 0.0;
    let mut coeff = Matrix::zeros(n, n); // d(loss)/d(sim[i][j]), j != i
    for i in 0..n {
        let p = partner(i);
        let mut max_s = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                max_s = max_s.max(sim(i, j, &units));
            }
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (sim(i, j, &units) - max_s).exp();
            }
        }
        loss += 0.5 * (-(sim(i, p, &units) - max_s) + denom.ln());
        for j in 0..n {
            if j == i {
                continue;
            }
            let soft = (sim(i, j, &units) - max_s).exp() / denom;
            let indicator = if j == p { 1.0 } else { 0.0 };
            coeff.set(i, j, 0.5 * (soft - indicator));
        }
    }

    // Chain through the cosine normalization.
    let mut grad = Matrix::zeros(n, d);
    for (i, &norm_i) in norms.iter().enumerate() {
        if norm_i < ZERO_NORM_EPS {
            continue; // no direction, gradient contribution defined as zero
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let c = coeff.get(i, j) + coeff.get(j, i);
            if c == 0.0 {
                continue;
            }
            let uij = dot(units.row(i), units.row(j));
            for k in 0..d {
                let dsim = (units.get(j, k) - uij * units.get(i, k)) / norm_i / temperature;
                let g = grad.get(i, k) + c * dsim;
                grad.set(i, k, g);
            }
        }
    }
    Ok((loss, grad))
}
