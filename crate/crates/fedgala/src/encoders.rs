//! Model families and their exact gradients.
//!
//! Two encoders: a one-layer sigmoid scorer whose contrastive gradient has a
//! closed form, and a small tanh MLP with hand-written reverse mode. Both
//! keep their parameters in [`LayeredParams`], the per-layer flat vectors
//! that are the unit of communication between clients and server.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::linalg::{dot, sigmoid, Matrix};
use crate::rng::RngStream;

/// One named flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f64>,
}

/// The full parameter set of one model, client or global.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    pub layers: Vec<Layer>,
}

impl LayeredParams {
    pub fn new(layers: Vec<Layer>) -> Self {
        LayeredParams { layers }
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for l in &self.layers {
            out.extend_from_slice(&l.values);
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers.iter().map(|l| dot(&l.values, &l.values)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &LayeredParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.name == b.name && a.values.len() == b.values.len())
    }

    pub fn check_same_shape(&self, other: &LayeredParams, context: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context,
                detail: format!(
                    "left has {} layer(s), right has {}",
                    self.layers.len(),
                    other.layers.len()
                ),
            })
        }
    }

    /// Per-layer difference `self - other`, tagged with a round index.
    pub fn subtract(&self, other: &LayeredParams, round: usize) -> Result<UpdateDelta> {
        self.check_same_shape(other, "LayeredParams::subtract")?;
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Layer {
                name: a.name.clone(),
                values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
            })
            .collect();
        Ok(UpdateDelta { layers, round })
    }

    /// Per-layer sum `self + delta`.
    pub fn add_delta(&self, delta: &UpdateDelta) -> Result<LayeredParams> {
        if !shape_matches(self, delta) {
            return Err(Error::ShapeMismatch {
                context: "LayeredParams::add_delta",
                detail: "delta shape differs from parameters".to_string(),
            });
        }
        let layers = self
            .layers
            .iter()
            .zip(&delta.layers)
            .map(|(p, d)| Layer {
                name: p.name.clone(),
                values: p.values.iter().zip(&d.values).map(|(x, y)| x + y).collect(),
            })
            .collect();
        Ok(LayeredParams { layers })
    }
}

/// Per-layer difference of two parameter sets; also the shape gradients and
/// server updates travel in.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub layers: Vec<Layer>,
    pub round: usize,
}

impl UpdateDelta {
    pub fn zeros_like(params: &LayeredParams, round: usize) -> Self {
        UpdateDelta {
            layers: params
                .layers
                .iter()
                .map(|l| Layer { name: l.name.clone(), values: vec![0.0; l.values.len()] })
                .collect(),
            round,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.values);
        }
        out
    }

    pub fn scale(&self, c: f64) -> UpdateDelta {
        UpdateDelta {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { name: l.name.clone(), values: l.values.iter().map(|v| c * v).collect() })
                .collect(),
            round: self.round,
        }
    }

    /// self += c * other (shapes must already agree).
    pub fn axpy(&mut self, c: f64, other: &UpdateDelta) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += c * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.values.iter().all(|v| v.is_finite()))
    }
}

pub fn shape_matches(params: &LayeredParams, delta: &UpdateDelta) -> bool {
    params.layers.len() == delta.layers.len()
        && params
            .layers
            .iter()
            .zip(&delta.layers)
            .all(|(a, b)| a.name == b.name && a.values.len() == b.values.len())
}

// ---------------------------------------------------------------------------
// One-layer sigmoid encoder (single row vector, no bias)
// ---------------------------------------------------------------------------

pub const ONE_LAYER_NAME: &str = "w";

pub fn one_layer_params(weights: Vec<f64>) -> LayeredParams {
    LayeredParams::new(vec![Layer { name: ONE_LAYER_NAME.to_string(), values: weights }])
}

/// sigmoid(<w, x1> - <w, x2>).
pub fn one_layer_forward(w: &[f64], x1: &[f64], x2: &[f64]) -> Result<f64> {
    if w.len() != x1.len() || w.len() != x2.len() {
        return Err(Error::DimensionMismatch {
            context: "one_layer_forward",
            expected: w.len(),
            got: x1.len().max(x2.len()),
        });
    }
    Ok(sigmoid(dot(w, x1) - dot(w, x2)))
}

/// Closed-form gradient of the binary cross-entropy contrastive loss with
/// respect to `w`: `(sigmoid(w x1 - w x2) - 1)(x1 - x2)` on positive pairs,
/// `sigmoid(w x1 - w x2)(x1 - x2)` on negative pairs.
pub fn one_layer_contrastive_grad(
    w: &[f64],
    x1: &[f64],
    x2: &[f64],
    is_positive: bool,
) -> Result<Vec<f64>> {
    let y_hat = one_layer_forward(w, x1, x2)?;
    let factor = if is_positive { y_hat - 1.0 } else { y_hat };
    Ok(x1.iter().zip(x2).map(|(a, b)| factor * (a - b)).collect())
}

// ---------------------------------------------------------------------------
// Small MLP encoder (tanh hidden layers, linear output)
// ---------------------------------------------------------------------------

/// Architecture as the full width list, input first. `[8, 32, 16]` means two
/// transforms, 8 -> 32 (tanh) and 32 -> 16 (linear), embedding dimension 16.
/// Each transform's weight matrix and bias vector are separate named layers
/// so alignment filtering sees the same granularity as named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpArch {
    pub widths: Vec<usize>,
}

impl MlpArch {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Precondition(
                "mlp architecture needs at least two nonzero widths".to_string(),
            ));
        }
        Ok(MlpArch { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn transforms(&self) -> usize {
        self.widths.len() - 1
    }

    /// Fresh parameters, each block uniform in +-1/sqrt(fan_in).
    pub fn init_params(&self, stream: RngStream) -> LayeredParams {
        let mut draws = stream.draws();
        let mut layers = Vec::new();
        for k in 0..self.transforms() {
            let fan_in = self.widths[k];
            let fan_out = self.widths[k + 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight: Vec<f64> =
                (0..fan_in * fan_out).map(|_| draws.uniform_in(-bound, bound)).collect();
            let bias: Vec<f64> = (0..fan_out).map(|_| draws.uniform_in(-bound, bound)).collect();
            layers.push(Layer { name: format!("fc{k}.weight"), values: weight });
            layers.push(Layer { name: format!("fc{k}.bias"), values: bias });
        }
        LayeredParams::new(layers)
    }

    pub fn zero_params(&self) -> LayeredParams {
        let mut layers = Vec::new();
        for k in 0..self.transforms() {
            layers.push(Layer {
                name: format!("fc{k}.weight"),
                values: vec![0.0; self.widths[k] * self.widths[k + 1]],
            });
            layers.push(Layer { name: format!("fc{k}.bias"), values: vec![0.0; self.widths[k + 1]] });
        }
        LayeredParams::new(layers)
    }

    fn check_params(&self, params: &LayeredParams) -> Result<()> {
        let expected = self.zero_params();
        params.check_same_shape(&expected, "MlpArch::check_params")
    }

    /// Deterministic embedding of one input.
    pub fn forward(&self, params: &LayeredParams, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp_forward",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut h = x.to_vec();
        for k in 0..self.transforms() {
            h = self.transform(params, k, &h, k + 1 < self.transforms());
        }
        Ok(h)
    }

    fn transform(&self, params: &LayeredParams, k: usize, h: &[f64], tanh: bool) -> Vec<f64> {
        let fan_in = self.widths[k];
        let fan_out = self.widths[k + 1];
        let w = &params.layers[2 * k].values;
        let b = &params.layers[2 * k + 1].values;
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let z = dot(&w[o * fan_in..(o + 1) * fan_in], h) + b[o];
            out.push(if tanh { z.tanh() } else { z });
        }
        out
    }

    /// Exact reverse-mode gradient, summed over the batch.
    ///
    /// `upstream` holds d(loss)/d(embedding) per row of `batch`; the result
    /// is shaped exactly like the parameters so alignment can filter per
    /// layer.
    pub fn backward(
        &self,
        params: &LayeredParams,
        batch: &Matrix,
        upstream: &Matrix,
    ) -> Result<UpdateDelta> {
        self.check_params(params)?;
        if batch.cols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp_backward",
                expected: self.input_dim(),
                got: batch.cols(),
            });
        }
        if upstream.rows() != batch.rows() || upstream.cols() != self.embedding_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp_backward upstream",
                expected: self.embedding_dim() * batch.rows(),
                got: upstream.cols() * upstream.rows(),
            });
        }
        let mut grad = UpdateDelta::zeros_like(params, 0);
        for r in 0..batch.rows() {
            // Forward pass keeping the post-activation of every stage.
            let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.transforms() + 1);
            acts.push(batch.row(r).to_vec());
            for k in 0..self.transforms() {
                let h = self.transform(params, k, &acts[k], k + 1 < self.transforms());
                acts.push(h);
            }
            // Backward pass.
            let mut delta = upstream.row(r).to_vec();
            for k in (0..self.transforms()).rev() {
                let fan_in = self.widths[k];
                let fan_out = self.widths[k + 1];
                // Differentiate through tanh for hidden transforms.
                if k + 1 < self.transforms() {
                    for (d, a) in delta.iter_mut().zip(&acts[k + 1]) {
                        *d *= 1.0 - a * a;
                    }
                }
                let input = &acts[k];
                {
                    let gw = &mut grad.layers[2 * k].values;
                    for o in 0..fan_out {
                        for i in 0..fan_in {
                            gw[o * fan_in + i] += delta[o] * input[i];
                        }
                    }
                    let gb = &mut grad.layers[2 * k + 1].values;
                    for o in 0..fan_out {
                        gb[o] += delta[o];
                    }
                }
                if k > 0 {
                    let w = &params.layers[2 * k].values;
                    let mut next = vec![0.0; fan_in];
                    for o in 0..fan_out {
                        for (i, n) in next.iter_mut().enumerate() {
                            *n += delta[o] * w[o * fan_in + i];
                        }
                    }
                    delta = next;
                }
            }
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// Flat binary checkpoint
// ---------------------------------------------------------------------------

/// Serialize: u64-LE layer count, then per layer u64-LE name length, the
/// UTF-8 name and a u64-LE width, then every layer's values as f64-LE in
/// declaration order.
pub fn save_params<W: Write>(out: &mut W, params: &LayeredParams) -> Result<()> {
    out.write_all(&(params.layers.len() as u64).to_le_bytes())?;
    for l in &params.layers {
        out.write_all(&(l.name.len() as u64).to_le_bytes())?;
        out.write_all(l.name.as_bytes())?;
        out.write_all(&(l.values.len() as u64).to_le_bytes())?;
    }
    for l in &params.layers {
        for v in &l.values {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_params<R: Read>(input: &mut R) -> Result<LayeredParams> {
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut names = Vec::with_capacity(count);
    let mut widths = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut u64buf)?;
        let name_len = u64::from_le_bytes(u64buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        input.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Config { line: 0, message: "checkpoint layer name not UTF-8".into() })?;
        input.read_exact(&mut u64buf)?;
        names.push(name);
        widths.push(u64::from_le_bytes(u64buf) as usize);
    }
    let mut layers = Vec::with_capacity(count);
    let mut f64buf = [0u8; 8];
    for (name, width) in names.into_iter().zip(widths) {
        let mut values = Vec::with_capacity(width);
        for _ in 0..width {
            input.read_exact(&mut f64buf)?;
            values.push(f64::from_le_bytes(f64buf));
        }
        layers.push(Layer { name, values });
    }
    Ok(LayeredParams::new(layers))
}
