//! Synthetic multi-domain Gaussian data with controlled cross-domain
//! covariance, the shared affine augmentation, and Gaussian mutual
//! information.
//!
//! Each domain loads its features onto a latent factor shared across the
//! family: feature `f` of domain `i` is
//! `x_i^f = rho_i[f] * z^f + sqrt(1 - rho_i[f]^2) * eps_i^f`,
//! which keeps every feature standardized (mean 0, variance 1), keeps
//! features independent within a domain, and makes the population
//! cross-domain covariance of feature `f` exactly `rho_i[f] * rho_j[f]`.

use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{dot, sym_condition_number, Matrix};
use crate::rng::RngStream;
use crate::textio::{fmt_g17, fnv1a64_f64};

/// Linear labeling rule on the shared latent, used only by evaluation.
///
/// Every evaluation is counted; the counter is shared across clones of the
/// rule, so a protocol run can be audited for label access after the fact.
#[derive(Debug, Clone)]
pub struct LabelRule {
    pub weight: Vec<f64>,
    pub threshold: f64,
    evals: Arc<AtomicU64>,
}

impl PartialEq for LabelRule {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.threshold == other.threshold
    }
}

impl LabelRule {
    pub fn new(weight: Vec<f64>, threshold: f64) -> Self {
        LabelRule { weight, threshold, evals: Arc::new(AtomicU64::new(0)) }
    }

    /// Class of one latent row (0 or 1).
    pub fn evaluate(&self, latent: &[f64]) -> usize {
        self.evals.fetch_add(1, Ordering::Relaxed);
        usize::from(dot(&self.weight, latent) > self.threshold)
    }

    /// How many times this rule (including its clones) has labeled a row.
    pub fn evaluations(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }
}

/// One synthetic domain: per-feature loadings onto the shared latent plus
/// the labeling rule evaluation uses later.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub rho: Vec<f64>,
    pub label_rule: LabelRule,
}

impl DomainSpec {
    pub fn new(rho: Vec<f64>, label_rule: LabelRule) -> Result<Self> {
        if rho.is_empty() {
            return Err(Error::EmptyRequest("DomainSpec with zero features"));
        }
        if rho.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Precondition(
                "domain loadings must lie in [0, 1]".to_string(),
            ));
        }
        Ok(DomainSpec { rho, label_rule })
    }

    pub fn feature_count(&self) -> usize {
        self.rho.len()
    }
}

/// Samples drawn for one domain. `latent` keeps the shared factor draws so
/// evaluation can label rows; the training path only ever reads `data`.
#[derive(Debug, Clone)]
pub struct DomainSample {
    pub domain_id: usize,
    pub data: Matrix,
    pub latent: Matrix,
}

impl DomainSample {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn feature_count(&self) -> usize {
        self.data.cols()
    }
}

/// The per-round augmentation `A x + B`, broadcast to every client.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineAug {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl AffineAug {
    pub fn identity(features: usize) -> Self {
        AffineAug { a: Matrix::identity(features), b: vec![0.0; features] }
    }

    /// Fingerprint for asserting the broadcast invariant.
    pub fn hash(&self) -> u64 {
        let mut all = self.a.data().to_vec();
        all.extend_from_slice(&self.b);
        fnv1a64_f64(&all)
    }
}

/// Draw a fresh augmentation: a small symmetric perturbation of the
/// identity plus a small shift. The perturbation scale is halved until the
/// condition number is under 100 so augmented samples stay bounded.
pub fn sample_affine_aug(features: usize, stream: RngStream) -> AffineAug {
    let mut draws = stream.draws();
    let mut raw = Matrix::zeros(features, features);
    for i in 0..features {
        for j in 0..features {
            raw.set(i, j, draws.normal());
        }
    }
    // Symmetrize the perturbation.
    let mut sym = Matrix::zeros(features, features);
    for i in 0..features {
        for j in 0..features {
            sym.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
        }
    }
    let b: Vec<f64> = (0..features).map(|_| 0.1 * draws.normal()).collect();

    let mut scale = 0.1;
    loop {
        let mut a = Matrix::identity(features);
        for i in 0..features {
            for j in 0..features {
                a.set(i, j, a.get(i, j) + scale * sym.get(i, j));
            }
        }
        if sym_condition_number(&a).unwrap_or(f64::INFINITY) < 100.0 {
            return AffineAug { a, b };
        }
        scale *= 0.5;
    }
}

/// Apply `A x + B`.
pub fn apply_augmentation(x: &[f64], aug: &AffineAug) -> Result<Vec<f64>> {
    if x.len() != aug.b.len() {
        return Err(Error::DimensionMismatch {
            context: "apply_augmentation",
            expected: aug.b.len(),
            got: x.len(),
        });
    }
    let mut y = aug.a.mat_vec(x)?;
    for (yi, bi) in y.iter_mut().zip(&aug.b) {
        *yi += bi;
    }
    Ok(y)
}

/// Generate one sample set per spec, all sharing the same latent draws.
pub fn generate_family(
    specs: &[DomainSpec],
    n_per_domain: usize,
    stream: RngStream,
) -> Result<Vec<DomainSample>> {
    let features = match specs.first() {
        Some(s) => s.feature_count(),
        None => return Err(Error::EmptyRequest("generate_family with no specs")),
    };
    if n_per_domain == 0 {
        return Err(Error::EmptyRequest("generate_family with n_per_domain = 0"));
    }
    for s in specs {
        if s.feature_count() != features {
            return Err(Error::DimensionMismatch {
                context: "generate_family",
                expected: features,
                got: s.feature_count(),
            });
        }
    }

    let mut latent_draws = stream.derive(0x1a7e).draws();
    let mut latent = Matrix::zeros(n_per_domain, features);
    for i in 0..n_per_domain {
        for j in 0..features {
            latent.set(i, j, latent_draws.normal());
        }
    }

    let samples = exec::map_range(specs.len(), |d| {
        let mut eps = stream.derive(0x0d00 + d as u64).draws();
        let mut data = Matrix::zeros(n_per_domain, features);
        for i in 0..n_per_domain {
            for (j, &r) in specs[d].rho.iter().enumerate() {
                let noise = (1.0 - r * r).sqrt();
                data.set(i, j, r * latent.get(i, j) + noise * eps.normal());
            }
        }
        DomainSample { domain_id: d, data, latent: latent.clone() }
    });
    Ok(samples)
}

/// Closed-form mutual information of standardized bivariate-Gaussian
/// feature pairs, in nats: -1/2 * sum_f ln(1 - cov[f]^2).
pub fn mutual_information_closed_form(cov: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &c in cov {
        if c.abs() >= 1.0 {
            return Err(Error::Divergence { context: "mutual_information_closed_form", value: c });
        }
        total += -0.5 * (1.0 - c * c).ln();
    }
    Ok(total)
}

/// Sample-based estimate: per-feature sample correlation pushed through the
/// closed form.
pub fn mutual_information_empirical(a: &DomainSample, b: &DomainSample) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "mutual_information_empirical",
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.feature_count() != b.feature_count() {
        return Err(Error::DimensionMismatch {
            context: "mutual_information_empirical",
            expected: a.feature_count(),
            got: b.feature_count(),
        });
    }
    let corr = feature_correlations(&a.data, &b.data);
    let mut total = 0.0;
    for c in corr {
        if c.abs() >= 1.0 - 1e-9 {
            return Err(Error::Divergence { context: "mutual_information_empirical", value: c });
        }
        total += -0.5 * (1.0 - c * c).ln();
    }
    Ok(total)
}

/// Per-feature Pearson correlation between two equally shaped matrices.
pub fn feature_correlations(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let f = a.cols();
    let mut out = Vec::with_capacity(f);
    for j in 0..f {
        let mut ma = 0.0;
        let mut mb = 0.0;
        for i in 0..n {
            ma += a.get(i, j);
            mb += b.get(i, j);
        }
        ma /= n as f64;
        mb /= n as f64;
        let mut cab = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..n {
            let da = a.get(i, j) - ma;
            let db = b.get(i, j) - mb;
            cab += da * db;
            va += da * da;
            vb += db * db;
        }
        let denom = (va * vb).sqrt();
        out.push(if denom < 1e-300 { 1.0 } else { cab / denom });
    }
    out
}

/// Per-feature sample covariance between two equally shaped matrices
/// (normalized by n - 1).
pub fn feature_covariances(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let f = a.cols();
    let mut out = Vec::with_capacity(f);
    for j in 0..f {
        let mut ma = 0.0;
        let mut mb = 0.0;
        for i in 0..n {
            ma += a.get(i, j);
            mb += b.get(i, j);
        }
        ma /= n as f64;
        mb /= n as f64;
        let mut cab = 0.0;
        for i in 0..n {
            cab += (a.get(i, j) - ma) * (b.get(i, j) - mb);
        }
        out.push(cab / (n as f64 - 1.0));
    }
    out
}

/// Write a family as columnar text: one header row naming the features,
/// then one comma-separated row per sample.
pub fn write_family_csv<W: Write>(out: &mut W, family: &[DomainSample]) -> Result<()> {
    let features = family.first().map_or(0, DomainSample::feature_count);
    let header: Vec<String> =
        std::iter::once("domain_id".to_string()).chain((0..features).map(|f| format!("f{f}"))).collect();
    writeln!(out, "{}", header.join(","))?;
    for sample in family {
        for i in 0..sample.len() {
            let mut fields = Vec::with_capacity(features + 1);
            fields.push(sample.domain_id.to_string());
            for j in 0..features {
                fields.push(fmt_g17(sample.data.get(i, j)));
            }
            writeln!(out, "{}", fields.join(","))?;
        }
    }
    Ok(())
}
