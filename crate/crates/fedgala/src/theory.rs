//! Executable checks of the statistical properties the protocol relies on:
//! the Gaussian mutual-information identity, the Taylor estimate of
//! cross-client gradient covariance, the domain-shift/gradient-covariance
//! trend, the variance-of-difference counterpart, the effect of removing an
//! unaligned gradient on set covariance, and the sign structure of the
//! gradient derivatives.

use crate::domains::{
    generate_family, mutual_information_closed_form, mutual_information_empirical,
    sample_affine_aug, AffineAug, DomainSpec, LabelRule,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{cosine, dot, sigmoid, Matrix};
use crate::rng::RngStream;

/// A set of gradient draws, one row per underlying data draw.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub vectors: Matrix,
    pub source_domain: usize,
}

impl GradientSample {
    pub fn count(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// How a d x d covariance matrix is reduced to one number for trends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovSummary {
    MeanDiag,
    Trace,
    FrobeniusSym,
}

impl CovSummary {
    pub fn apply(&self, m: &Matrix) -> f64 {
        let d = m.rows();
        match self {
            CovSummary::MeanDiag => (0..d).map(|i| m.get(i, i)).sum::<f64>() / d as f64,
            CovSummary::Trace => (0..d).map(|i| m.get(i, i)).sum(),
            CovSummary::FrobeniusSym => {
                let mut sum = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        let s = 0.5 * (m.get(i, j) + m.get(j, i));
                        sum += s * s;
                    }
                }
                sum.sqrt()
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Covariance estimators
// ---------------------------------------------------------------------------

/// First-order estimate of Cov(g_i, g_j): entry (m, n) is
/// sum_f cov[f] * jac_i[m, f] * jac_j[n, f], with the Jacobians evaluated at
/// the (zero) feature means.
pub fn taylor_cov_estimate(
    jac_i: &Matrix,
    jac_j: &Matrix,
    feature_cov: &[f64],
) -> Result<Matrix> {
    if jac_i.rows() != jac_j.rows() || jac_i.cols() != jac_j.cols() {
        return Err(Error::DimensionMismatch {
            context: "taylor_cov_estimate",
            expected: jac_i.cols() * jac_i.rows(),
            got: jac_j.cols() * jac_j.rows(),
        });
    }
    if feature_cov.len() != jac_i.cols() {
        return Err(Error::DimensionMismatch {
            context: "taylor_cov_estimate feature_cov",
            expected: jac_i.cols(),
            got: feature_cov.len(),
        });
    }
    let d = jac_i.rows();
    let f = jac_i.cols();
    let mut out = Matrix::zeros(d, d);
    for m in 0..d {
        for n in 0..d {
            let mut acc = 0.0;
            for (k, &cov_k) in feature_cov.iter().enumerate().take(f) {
                acc += cov_k * jac_i.get(m, k) * jac_j.get(n, k);
            }
            out.set(m, n, acc);
        }
    }
    Ok(out)
}

/// Sample cross-covariance over paired rows, normalized by M - 1.
pub fn empirical_grad_cov(a: &GradientSample, b: &GradientSample) -> Result<Matrix> {
    if a.count() != b.count() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "empirical_grad_cov",
            expected: a.count() * a.dim(),
            got: b.count() * b.dim(),
        });
    }
    if a.count() < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: a.count() });
    }
    let m = a.count();
    let d = a.dim();
    let mut mean_a = vec![0.0; d];
    let mut mean_b = vec![0.0; d];
    for r in 0..m {
        for c in 0..d {
            mean_a[c] += a.vectors.get(r, c);
            mean_b[c] += b.vectors.get(r, c);
        }
    }
    for c in 0..d {
        mean_a[c] /= m as f64;
        mean_b[c] /= m as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for r in 0..m {
        for (i, ma) in mean_a.iter().enumerate() {
            let da = a.vectors.get(r, i) - ma;
            for (j, mb) in mean_b.iter().enumerate() {
                let db = b.vectors.get(r, j) - mb;
                cov.set(i, j, cov.get(i, j) + da * db);
            }
        }
    }
    let norm = 1.0 / (m as f64 - 1.0);
    for i in 0..d {
        for j in 0..d {
            cov.set(i, j, cov.get(i, j) * norm);
        }
    }
    Ok(cov)
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks on ties. Needs three or
/// more points.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "spearman",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: x.len() });
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    let denom = (vx * vy).sqrt();
    if denom < 1e-300 {
        return Err(Error::Precondition("spearman input is constant".to_string()));
    }
    Ok(num / denom)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Trend experiment (two one-layer clients trained per the analytic setup)
// ---------------------------------------------------------------------------

/// Setup for the domain-shift trend runs: two clients with the one-layer
/// sigmoid encoder, pairwise binary contrastive loss with the whole dataset
/// as negatives, a shared affine augmentation per epoch, and an averaging
/// aggregation after every epoch.
#[derive(Debug, Clone)]
pub struct TrendExperiment {
    pub features: usize,
    pub n_per_domain: usize,
    pub seeds: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub summary: CovSummary,
    pub base_seed: u64,
}

impl Default for TrendExperiment {
    fn default() -> Self {
        TrendExperiment {
            features: 8,
            n_per_domain: 2000,
            seeds: 5,
            epochs: 1,
            learning_rate: 0.05,
            summary: CovSummary::MeanDiag,
            base_seed: 1,
        }
    }
}

/// One grid point of a trend run.
#[derive(Debug, Clone, Copy)]
pub struct TrendPoint {
    pub domain_cov: f64,
    pub grad_cov_summary: f64,
    pub var_diff_summary: f64,
    pub mi: f64,
}

/// Trend outcome over a covariance grid.
#[derive(Debug, Clone)]
pub struct TrendOutcome {
    /// Raw points per seed, grid-ordered.
    pub per_seed: Vec<(u64, Vec<TrendPoint>)>,
    /// Seed-averaged points, sorted by domain covariance.
    pub points: Vec<TrendPoint>,
    /// Spearman of grad covariance summary vs domain covariance.
    pub grad_cov_spearman: f64,
    /// Best Spearman after dropping a single grid point (outlier allowance).
    pub grad_cov_spearman_drop_one: f64,
    pub dropped_index: Option<usize>,
    /// Spearman of var(g_i - g_j) summary vs mutual information.
    pub var_diff_vs_mi_spearman: f64,
}

/// Per-sample gradient of the contrastive objective at shared weights `w`:
/// positive-pair term against the augmentation of the sample plus the
/// negative terms against every other sample of the dataset.
fn per_sample_gradients(w: &[f64], data: &Matrix, aug: &AffineAug) -> Result<Matrix> {
    let n = data.rows();
    let f = data.cols();
    let scores: Vec<f64> = (0..n).map(|r| dot(w, data.row(r))).collect();
    let rows = exec::map_range(n, |r| {
        let x = data.row(r);
        let x_aug = crate::domains::apply_augmentation(x, aug).expect("aug dims");
        let pos_score = sigmoid(scores[r] - dot(w, &x_aug));
        let mut g: Vec<f64> = (0..f).map(|k| (pos_score - 1.0) * (x[k] - x_aug[k])).collect();
        for m in 0..n {
            if m == r {
                continue;
            }
            let s = sigmoid(scores[r] - scores[m]);
            let xm = data.row(m);
            for k in 0..f {
                g[k] += s * (x[k] - xm[k]);
            }
        }
        g
    });
    Matrix::from_rows(rows)
}

/// Run the trend experiment over a grid of per-feature domain covariances.
pub fn run_trend_experiment(exp: &TrendExperiment, grid: &[f64]) -> Result<TrendOutcome> {
    if grid.len() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: grid.len() });
    }
    if grid.iter().any(|c| !(0.0 < *c && *c < 1.0)) {
        return Err(Error::Precondition("trend grid entries must lie in (0, 1)".to_string()));
    }
    let mut sorted_grid = grid.to_vec();
    sorted_grid.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let cells: Vec<(u64, usize)> = (0..exp.seeds)
        .flat_map(|s| (0..sorted_grid.len()).map(move |g| (s, g)))
        .collect();
    let results = exec::map_slice(&cells, |&(seed, gi)| {
        trend_cell(exp, sorted_grid[gi], seed).map(|p| (seed, gi, p))
    });

    let mut per_seed: Vec<(u64, Vec<TrendPoint>)> = (0..exp.seeds)
        .map(|s| {
            (
                s,
                vec![
                    TrendPoint { domain_cov: 0.0, grad_cov_summary: 0.0, var_diff_summary: 0.0, mi: 0.0 };
                    sorted_grid.len()
                ],
            )
        })
        .collect();
    for r in results {
        let (seed, gi, p) = r?;
        per_seed[seed as usize].1[gi] = p;
    }

    let mut points = Vec::with_capacity(sorted_grid.len());
    for gi in 0..sorted_grid.len() {
        let mut cov = 0.0;
        let mut var = 0.0;
        for (_, pts) in &per_seed {
            cov += pts[gi].grad_cov_summary;
            var += pts[gi].var_diff_summary;
        }
        points.push(TrendPoint {
            domain_cov: sorted_grid[gi],
            grad_cov_summary: cov / exp.seeds as f64,
            var_diff_summary: var / exp.seeds as f64,
            mi: per_seed[0].1[gi].mi,
        });
    }

    let xs: Vec<f64> = points.iter().map(|p| p.domain_cov).collect();
    let cov_ys: Vec<f64> = points.iter().map(|p| p.grad_cov_summary).collect();
    let grad_cov_spearman = spearman(&xs, &cov_ys)?;

    let mut best = grad_cov_spearman;
    let mut dropped = None;
    if points.len() > 3 {
        for drop in 0..points.len() {
            let xs_d: Vec<f64> =
                xs.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, v)| *v).collect();
            let ys_d: Vec<f64> =
                cov_ys.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, v)| *v).collect();
            let rho = spearman(&xs_d, &ys_d)?;
            if rho > best {
                best = rho;
                dropped = Some(drop);
            }
        }
    }

    let mis: Vec<f64> = points.iter().map(|p| p.mi).collect();
    let var_ys: Vec<f64> = points.iter().map(|p| p.var_diff_summary).collect();
    let var_diff_vs_mi_spearman = spearman(&mis, &var_ys)?;

    Ok(TrendOutcome {
        per_seed,
        points,
        grad_cov_spearman,
        grad_cov_spearman_drop_one: best,
        dropped_index: dropped,
        var_diff_vs_mi_spearman,
    })
}

/// One (covariance, seed) cell: generate the two-domain family, train one
/// round per the analytic setup, and collect paired per-sample gradients at
/// the shared post-aggregation weights.
fn trend_cell(exp: &TrendExperiment, domain_cov: f64, seed: u64) -> Result<TrendPoint> {
    let stream = RngStream::new(exp.base_seed ^ (seed.wrapping_mul(0x9e37)), 0)
        .derive((domain_cov * 1e6) as u64);
    let rho = domain_cov.sqrt();
    let rule = LabelRule::new(vec![1.0; exp.features], 0.0);
    let specs = vec![
        DomainSpec::new(vec![rho; exp.features], rule.clone())?,
        DomainSpec::new(vec![rho; exp.features], rule)?,
    ];
    let family = generate_family(&specs, exp.n_per_domain, stream.derive(1))?;

    // Shared init.
    let bound = 1.0 / (exp.features as f64).sqrt();
    let mut wdraws = stream.derive(2).draws();
    let mut w: Vec<f64> = (0..exp.features).map(|_| wdraws.uniform_in(-bound, bound)).collect();

    // Train: per epoch, each client steps on the pair-mean gradient of the
    // full-dataset objective, then the server averages.
    let n = exp.n_per_domain as f64;
    let pair_norm = 1.0 / (n * n);
    for epoch in 0..exp.epochs {
        let aug = sample_affine_aug(exp.features, stream.derive(3 + epoch as u64));
        let grads = exec::map_slice(&family, |sample| {
            per_sample_gradients(&w, &sample.data, &aug).map(|g| {
                let mut total = vec![0.0; exp.features];
                for r in 0..g.rows() {
                    for (k, t) in total.iter_mut().enumerate() {
                        *t += g.get(r, k);
                    }
                }
                total
            })
        });
        let mut stepped = Vec::with_capacity(family.len());
        for g in grads {
            let g = g?;
            let wi: Vec<f64> =
                w.iter().zip(&g).map(|(wk, gk)| wk - exp.learning_rate * pair_norm * gk).collect();
            stepped.push(wi);
        }
        // Averaging aggregation after each epoch.
        for k in 0..exp.features {
            w[k] = stepped.iter().map(|wi| wi[k]).sum::<f64>() / stepped.len() as f64;
        }
    }

    // Collect paired per-sample gradients at the shared weights under a
    // fresh shared augmentation.
    let aug = sample_affine_aug(exp.features, stream.derive(1000));
    let g_i = GradientSample {
        vectors: per_sample_gradients(&w, &family[0].data, &aug)?,
        source_domain: 0,
    };
    let g_j = GradientSample {
        vectors: per_sample_gradients(&w, &family[1].data, &aug)?,
        source_domain: 1,
    };
    if !g_i.vectors.is_finite() || !g_j.vectors.is_finite() {
        return Err(Error::NonFinite {
            round: 0,
            detail: format!("trend training diverged at domain covariance {domain_cov}"),
        });
    }

    let cov = empirical_grad_cov(&g_i, &g_j)?;
    let mut diff = Matrix::zeros(g_i.count(), g_i.dim());
    for r in 0..g_i.count() {
        for c in 0..g_i.dim() {
            diff.set(r, c, g_i.vectors.get(r, c) - g_j.vectors.get(r, c));
        }
    }
    let diff_sample = GradientSample { vectors: diff, source_domain: 0 };
    let var_diff = empirical_grad_cov(&diff_sample, &diff_sample)?;

    Ok(TrendPoint {
        domain_cov,
        grad_cov_summary: exp.summary.apply(&cov),
        var_diff_summary: exp.summary.apply(&var_diff),
        mi: mutual_information_closed_form(&vec![domain_cov; exp.features])?,
    })
}

// ---------------------------------------------------------------------------
// Removing an unaligned vector raises set covariance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RemovalCheck {
    pub before: f64,
    pub after: f64,
    pub holds: bool,
}

/// Check that dropping the single gradient of `g_j` whose cosine with
/// `g_est` is negative raises the mean-diagonal cross-covariance of the two
/// sets.
///
/// Preconditions are validated, not assumed: every row of `g_i` and every
/// other row of `g_j` must have positive cosine with `g_est`, and exactly
/// one row of `g_j` must have negative cosine. The covariance pairs rows,
/// so removing row K of `g_j` removes the pair.
pub fn removal_raises_covariance(
    g_i: &GradientSample,
    g_j: &GradientSample,
    g_est: &[f64],
) -> Result<RemovalCheck> {
    if g_i.count() != g_j.count() || g_i.dim() != g_j.dim() {
        return Err(Error::DimensionMismatch {
            context: "removal_raises_covariance",
            expected: g_i.count() * g_i.dim(),
            got: g_j.count() * g_j.dim(),
        });
    }
    if g_i.count() < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: g_i.count() });
    }
    for r in 0..g_i.count() {
        if cosine(g_i.vectors.row(r), g_est)? <= 0.0 {
            return Err(Error::Precondition(format!(
                "row {r} of the first set is not positively aligned with the reference"
            )));
        }
    }
    let mut offender = None;
    for r in 0..g_j.count() {
        let c = cosine(g_j.vectors.row(r), g_est)?;
        if c < 0.0 {
            if offender.is_some() {
                return Err(Error::Precondition(
                    "more than one unaligned vector in the second set".to_string(),
                ));
            }
            offender = Some(r);
        } else if c == 0.0 {
            return Err(Error::Precondition(format!(
                "row {r} of the second set has zero cosine with the reference"
            )));
        }
    }
    let offender = offender.ok_or_else(|| {
        Error::Precondition("no unaligned vector to remove in the second set".to_string())
    })?;

    let before = CovSummary::MeanDiag.apply(&empirical_grad_cov(g_i, g_j)?);
    let keep: Vec<usize> = (0..g_i.count()).filter(|&r| r != offender).collect();
    let sub = |g: &GradientSample| -> GradientSample {
        let rows: Vec<Vec<f64>> = keep.iter().map(|&r| g.vectors.row(r).to_vec()).collect();
        GradientSample {
            vectors: Matrix::from_rows(rows).expect("same widths"),
            source_domain: g.source_domain,
        }
    };
    let after = CovSummary::MeanDiag.apply(&empirical_grad_cov(&sub(g_i), &sub(g_j))?);
    Ok(RemovalCheck { before, after, holds: after > before })
}

/// Draw one precondition-satisfying instance: paired gradient sets built
/// from a shared aligned component, with one pair's second element flipped
/// to play the unaligned gradient. Returns (g_i, g_j, g_est) with g_est the
/// average of both sets.
pub fn sample_removal_instance(
    dim: usize,
    count: usize,
    stream: RngStream,
) -> (GradientSample, GradientSample, Vec<f64>) {
    'retry: for attempt in 0..1000 {
        let mut draws = stream.derive(attempt).draws();
        // Common direction.
        let mut e: Vec<f64> = (0..dim).map(|_| draws.normal()).collect();
        let en = crate::linalg::norm(&e);
        for v in &mut e {
            *v /= en;
        }
        let mut rows_i = Vec::with_capacity(count);
        let mut rows_j = Vec::with_capacity(count);
        for _ in 0..count {
            // Paired draws share most of their variation, the way gradients
            // from paired samples do.
            let strength = 1.0 + 0.3 * draws.normal().abs();
            let shared: Vec<f64> =
                (0..dim).map(|k| strength * e[k] + 0.5 * draws.normal()).collect();
            let a: Vec<f64> = shared.iter().map(|s| s + 0.1 * draws.normal()).collect();
            let b: Vec<f64> = shared.iter().map(|s| s + 0.1 * draws.normal()).collect();
            rows_i.push(a);
            rows_j.push(b);
        }
        // Flip the last pair's second element into the unaligned gradient.
        let last = count - 1;
        for v in &mut rows_j[last] {
            *v *= -1.5;
        }
        // Reference: average of both sets.
        let mut g_est = vec![0.0; dim];
        for row in rows_i.iter().chain(rows_j.iter()) {
            for (acc, v) in g_est.iter_mut().zip(row) {
                *acc += v;
            }
        }
        for v in &mut g_est {
            *v /= (2 * count) as f64;
        }
        // Validate the cosine preconditions.
        for row in &rows_i {
            if cosine(row, &g_est).unwrap() <= 0.0 {
                continue 'retry;
            }
        }
        for (r, row) in rows_j.iter().enumerate() {
            let c = cosine(row, &g_est).unwrap();
            if r == last {
                if c >= 0.0 {
                    continue 'retry;
                }
            } else if c <= 0.0 {
                continue 'retry;
            }
        }
        return (
            GradientSample { vectors: Matrix::from_rows(rows_i).unwrap(), source_domain: 0 },
            GradientSample { vectors: Matrix::from_rows(rows_j).unwrap(), source_domain: 1 },
            g_est,
        );
    }
    panic!("could not sample a precondition-satisfying instance");
}

// ---------------------------------------------------------------------------
// Derivative sign checks
// ---------------------------------------------------------------------------

/// Which setting the sign check runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignCheckMode {
    /// Positive-pair contrastive gradient with a shared augmentation.
    SslPositive,
    /// Negative-pair gradient summed over each client's own dataset.
    SslNegative,
    /// Per-sample gradient of a shared logistic-regression classifier.
    SupervisedLogistic,
}

#[derive(Debug, Clone, Copy)]
pub struct SignCheckResult {
    /// Fraction of feature dimensions with a positive derivative product.
    pub fraction: f64,
    /// True when the derivatives vanished identically (no sign to compare).
    pub degenerate: bool,
}

const FD_STEP: f64 = 1e-5;
const ZERO_DERIV: f64 = 1e-9;

fn central_diff(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + FD_STEP) - f(at - FD_STEP)) / (2.0 * FD_STEP)
}

/// Positive-pair gradient component f as a function of the sample, with the
/// augmentation defining the positive.
fn ssl_positive_grad_component(w: &[f64], aug: &AffineAug, x: &[f64], f: usize) -> f64 {
    let x_aug = crate::domains::apply_augmentation(x, aug).expect("aug dims");
    let s = sigmoid(dot(w, x) - dot(w, &x_aug));
    (s - 1.0) * (x[f] - x_aug[f])
}

/// Dataset-summed negative-pair gradient component f.
fn ssl_negative_grad_component(w: &[f64], dataset: &Matrix, x: &[f64], f: usize) -> f64 {
    let score = dot(w, x);
    let mut acc = 0.0;
    for m in 0..dataset.rows() {
        let xm = dataset.row(m);
        acc += sigmoid(score - dot(w, xm)) * (x[f] - xm[f]);
    }
    acc
}

/// Logistic-regression per-sample gradient component f: (sigmoid(w x + b) - y) x_f.
fn logistic_grad_component(w: &[f64], b: f64, y: f64, x: &[f64], f: usize) -> f64 {
    (sigmoid(dot(w, x) + b) - y) * x[f]
}

/// Evaluate the per-feature derivative of the gradient at the feature mean
/// (zero) for two clients and report the fraction of features whose sign
/// product is positive.
pub fn derivative_sign_check(
    mode: SignCheckMode,
    features: usize,
    dataset_size: usize,
    stream: RngStream,
) -> Result<SignCheckResult> {
    let mut draws = stream.derive(1).draws();
    let w: Vec<f64> = (0..features).map(|_| draws.normal()).collect();
    match mode {
        SignCheckMode::SslPositive => {
            let aug = sample_affine_aug(features, stream.derive(2));
            Ok(sign_fraction(features, |f| {
                let d_i = central_diff(
                    |t| {
                        let mut x = vec![0.0; features];
                        x[f] = t;
                        ssl_positive_grad_component(&w, &aug, &x, f)
                    },
                    0.0,
                );
                let d_j = central_diff(
                    |t| {
                        let mut x = vec![0.0; features];
                        x[f] = t;
                        ssl_positive_grad_component(&w, &aug, &x, f)
                    },
                    0.0,
                );
                (d_i, d_j)
            }))
        }
        SignCheckMode::SslNegative => {
            // Each client evaluates over its own domain's dataset.
            let rule = LabelRule::new(vec![1.0; features], 0.0);
            let specs = vec![
                DomainSpec::new(vec![0.6; features], rule.clone())?,
                DomainSpec::new(vec![0.6; features], rule)?,
            ];
            let family = generate_family(&specs, dataset_size, stream.derive(3))?;
            Ok(sign_fraction(features, |f| {
                let d_i = central_diff(
                    |t| {
                        let mut x = vec![0.0; features];
                        x[f] = t;
                        ssl_negative_grad_component(&w, &family[0].data, &x, f)
                    },
                    0.0,
                );
                let d_j = central_diff(
                    |t| {
                        let mut x = vec![0.0; features];
                        x[f] = t;
                        ssl_negative_grad_component(&w, &family[1].data, &x, f)
                    },
                    0.0,
                );
                (d_i, d_j)
            }))
        }
        SignCheckMode::SupervisedLogistic => {
            let b = draws.normal();
            let mut worst = SignCheckResult { fraction: 1.0, degenerate: false };
            for y in [0.0, 1.0] {
                let res = sign_fraction(features, |f| {
                    let d_i = central_diff(
                        |t| {
                            let mut x = vec![0.0; features];
                            x[f] = t;
                            logistic_grad_component(&w, b, y, &x, f)
                        },
                        0.0,
                    );
                    let d_j = central_diff(
                        |t| {
                            let mut x = vec![0.0; features];
                            x[f] = t;
                            logistic_grad_component(&w, b, y, &x, f)
                        },
                        0.0,
                    );
                    (d_i, d_j)
                });
                if res.fraction < worst.fraction {
                    worst = res;
                }
                worst.degenerate |= res.degenerate;
            }
            Ok(worst)
        }
    }
}

fn sign_fraction(features: usize, eval: impl Fn(usize) -> (f64, f64)) -> SignCheckResult {
    let mut positive = 0usize;
    let mut degenerate = false;
    for f in 0..features {
        let (d_i, d_j) = eval(f);
        let product = d_i * d_j;
        if product > ZERO_DERIV * ZERO_DERIV {
            positive += 1;
        } else if product.abs() <= ZERO_DERIV * ZERO_DERIV {
            degenerate = true;
        }
    }
    SignCheckResult { fraction: positive as f64 / features as f64, degenerate }
}

// ---------------------------------------------------------------------------
// Mutual information estimator agreement
// ---------------------------------------------------------------------------

/// One grid cell of the estimator-agreement check.
#[derive(Debug, Clone, Copy)]
pub struct MiAgreementRow {
    pub sigma: f64,
    pub features: usize,
    pub closed_form: f64,
    pub empirical: f64,
    pub abs_error: f64,
}

/// Closed form on the true covariance vs the formula on the sample
/// covariance, over sigma in {0.1..0.9} and feature counts {1, 4}.
pub fn mi_agreement_rows(n: usize, base_seed: u64) -> Result<Vec<MiAgreementRow>> {
    let sigmas: Vec<f64> = (1..=9).map(|k| k as f64 / 10.0).collect();
    let cases: Vec<(f64, usize)> =
        sigmas.iter().flat_map(|&s| [1usize, 4].map(|f| (s, f))).collect();
    let rows = exec::map_slice(&cases, |&(sigma, features)| -> Result<MiAgreementRow> {
        let rho = sigma.sqrt();
        let rule = LabelRule::new(vec![1.0; features], 0.0);
        let specs = vec![
            DomainSpec::new(vec![rho; features], rule.clone())?,
            DomainSpec::new(vec![rho; features], rule)?,
        ];
        let stream = RngStream::new(base_seed, (sigma * 100.0) as u64 + features as u64);
        let family = generate_family(&specs, n, stream)?;
        let closed_form = mutual_information_closed_form(&vec![sigma; features])?;
        let empirical = mutual_information_empirical(&family[0], &family[1])?;
        Ok(MiAgreementRow {
            sigma,
            features,
            closed_form,
            empirical,
            abs_error: (closed_form - empirical).abs(),
        })
    });
    rows.into_iter().collect()
}

/// Maximum absolute error of the estimator-agreement grid, in nats.
pub fn mi_agreement_check(n: usize, base_seed: u64) -> Result<f64> {
    Ok(mi_agreement_rows(n, base_seed)?
        .iter()
        .map(|r| r.abs_error)
        .fold(0.0, f64::max))
}

/// One randomized linear-map instance for the Taylor-estimate check.
#[derive(Debug, Clone, Copy)]
pub struct TaylorRow {
    pub trial: usize,
    pub dim: usize,
    pub features: usize,
    pub max_rel_error: f64,
}

/// Draw random Jacobians and a feature-covariance vector, push 10^6-ish
/// paired Gaussian samples through the linear maps, and compare the
/// Monte-Carlo gradient covariance against the closed-form estimate. For a
/// linear map the estimate is exact, so the difference is pure sampling
/// noise. Returns max |difference| relative to the largest estimate entry.
pub fn taylor_mc_agreement(
    dim: usize,
    features: usize,
    samples: usize,
    stream: RngStream,
) -> Result<f64> {
    let mut draws = stream.draws();
    let jac_i = Matrix::from_rows(
        (0..dim).map(|_| (0..features).map(|_| draws.normal()).collect()).collect::<Vec<_>>(),
    )?;
    let jac_j = Matrix::from_rows(
        (0..dim).map(|_| (0..features).map(|_| draws.normal()).collect()).collect::<Vec<_>>(),
    )?;
    let feature_cov: Vec<f64> = (0..features).map(|_| draws.uniform_in(0.1, 0.9)).collect();
    let rhos: Vec<f64> = feature_cov.iter().map(|c| c.sqrt()).collect();

    // Accumulate sums in parallel chunks, combined in chunk order.
    let chunks = 64usize;
    let per_chunk = samples.div_ceil(chunks);
    let partials = exec::map_range(chunks, |chunk| {
        let mut d = stream.derive(1000 + chunk as u64).draws();
        let take = per_chunk.min(samples.saturating_sub(chunk * per_chunk));
        let mut sum_i = vec![0.0; dim];
        let mut sum_j = vec![0.0; dim];
        let mut cross = vec![0.0; dim * dim];
        for _ in 0..take {
            let mut xi = vec![0.0; features];
            let mut xj = vec![0.0; features];
            for k in 0..features {
                let z = d.normal();
                let noise = (1.0 - feature_cov[k]).sqrt();
                xi[k] = rhos[k] * z + noise * d.normal();
                xj[k] = rhos[k] * z + noise * d.normal();
            }
            let gi = jac_i.mat_vec(&xi).expect("dims");
            let gj = jac_j.mat_vec(&xj).expect("dims");
            for a in 0..dim {
                sum_i[a] += gi[a];
                sum_j[a] += gj[a];
                for b in 0..dim {
                    cross[a * dim + b] += gi[a] * gj[b];
                }
            }
        }
        (take, sum_i, sum_j, cross)
    });
    let mut count = 0usize;
    let mut sum_i = vec![0.0; dim];
    let mut sum_j = vec![0.0; dim];
    let mut cross = vec![0.0; dim * dim];
    for (take, si, sj, cr) in partials {
        count += take;
        for a in 0..dim {
            sum_i[a] += si[a];
            sum_j[a] += sj[a];
        }
        for (acc, v) in cross.iter_mut().zip(&cr) {
            *acc += v;
        }
    }
    let n = count as f64;
    let taylor = taylor_cov_estimate(&jac_i, &jac_j, &feature_cov)?;
    let scale = taylor.data().iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut max_rel = 0.0f64;
    for a in 0..dim {
        for b in 0..dim {
            let mc = (cross[a * dim + b] - sum_i[a] * sum_j[b] / n) / (n - 1.0);
            max_rel = max_rel.max((mc - taylor.get(a, b)).abs() / scale);
        }
    }
    Ok(max_rel)
}

/// The deterministic outlier construction: the second set is its own mean
/// duplicated plus one antiparallel vector, the first set is constant with
/// one deviation toward the reference.
pub fn constructed_removal_example() -> (GradientSample, GradientSample, Vec<f64>) {
    let count = 20;
    let e = vec![1.0, 0.0, 0.0, 0.0];
    let u = vec![0.6, 0.1, 0.0, 0.0];
    let v = vec![0.8, 0.0, 0.1, 0.0];
    let w = [0.7, 0.05, 0.0, 0.1];
    let mut rows_i = vec![u.clone(); count];
    rows_i[count - 1] = u.iter().zip(&e).map(|(a, b)| a + b).collect();
    let mut rows_j = vec![v.clone(); count];
    rows_j[count - 1] = w.iter().map(|a| -a).collect();
    (
        GradientSample { vectors: Matrix::from_rows(rows_i).unwrap(), source_domain: 0 },
        GradientSample { vectors: Matrix::from_rows(rows_j).unwrap(), source_domain: 1 },
        e,
    )
}

// ---------------------------------------------------------------------------
// Full check suite (shared by the CLI subcommand and the acceptance tests)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TheorySuiteConfig {
    pub base_seed: u64,
    pub mi_samples: usize,
    pub taylor_dim: usize,
    pub taylor_features: usize,
    pub taylor_samples: usize,
    pub taylor_trials: usize,
    pub trend: TrendExperiment,
    pub trend_grid: Vec<f64>,
    pub removal_trials: usize,
    pub removal_dim: usize,
    pub removal_count: usize,
    pub sign_trials: usize,
    pub sign_features: usize,
    pub negative_dataset: usize,
}

impl TheorySuiteConfig {
    pub fn desk_scale(base_seed: u64, summary: CovSummary, seeds: u64) -> Self {
        TheorySuiteConfig {
            base_seed,
            mi_samples: 100_000,
            taylor_dim: 4,
            taylor_features: 8,
            taylor_samples: 1_000_000,
            taylor_trials: 3,
            trend: TrendExperiment {
                features: 8,
                n_per_domain: 2000,
                seeds,
                epochs: 1,
                learning_rate: 0.05,
                summary,
                base_seed,
            },
            trend_grid: (1..=9).map(|k| k as f64 / 10.0).collect(),
            removal_trials: 1000,
            removal_dim: 8,
            removal_count: 20,
            sign_trials: 100,
            sign_features: 8,
            negative_dataset: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RemovalRow {
    pub trial: usize,
    pub before: f64,
    pub after: f64,
    pub holds: bool,
}

#[derive(Debug, Clone)]
pub struct SignRow {
    pub mode: &'static str,
    pub trial: usize,
    pub fraction: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct TheorySuiteResult {
    pub mi_rows: Vec<MiAgreementRow>,
    pub mi_max_error: f64,
    pub taylor_rows: Vec<TaylorRow>,
    pub taylor_max_rel_error: f64,
    pub trend: TrendOutcome,
    pub removal_rows: Vec<RemovalRow>,
    pub removal_holds_rate: f64,
    pub removal_constructed_holds: bool,
    pub sign_rows: Vec<SignRow>,
    pub supervised_min_fraction: f64,
    pub ssl_positive_min_fraction: f64,
    pub ssl_negative_fraction: f64,
}

/// Run every check at the configured sizes.
pub fn run_theory_suite(cfg: &TheorySuiteConfig) -> Result<TheorySuiteResult> {
    let mi_rows = mi_agreement_rows(cfg.mi_samples, cfg.base_seed)?;
    let mi_max_error = mi_rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);

    let mut taylor_rows = Vec::with_capacity(cfg.taylor_trials);
    for trial in 0..cfg.taylor_trials {
        let err = taylor_mc_agreement(
            cfg.taylor_dim,
            cfg.taylor_features,
            cfg.taylor_samples,
            RngStream::new(cfg.base_seed, 0).derive(0x7a1 + trial as u64),
        )?;
        taylor_rows.push(TaylorRow {
            trial,
            dim: cfg.taylor_dim,
            features: cfg.taylor_features,
            max_rel_error: err,
        });
    }
    let taylor_max_rel_error =
        taylor_rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);

    let trend = run_trend_experiment(&cfg.trend, &cfg.trend_grid)?;

    let removal_checks = exec::map_range(cfg.removal_trials, |trial| {
        let (g_i, g_j, g_est) = sample_removal_instance(
            cfg.removal_dim,
            cfg.removal_count,
            RngStream::new(cfg.base_seed, 0).derive(0x3e30 + trial as u64),
        );
        removal_raises_covariance(&g_i, &g_j, &g_est).map(|c| (trial, c))
    });
    let mut removal_rows = Vec::with_capacity(cfg.removal_trials);
    let mut holds = 0usize;
    for r in removal_checks {
        let (trial, check) = r?;
        if check.holds {
            holds += 1;
        }
        removal_rows.push(RemovalRow {
            trial,
            before: check.before,
            after: check.after,
            holds: check.holds,
        });
    }
    let removal_holds_rate = holds as f64 / cfg.removal_trials.max(1) as f64;
    let (ci, cj, ce) = constructed_removal_example();
    let removal_constructed_holds = removal_raises_covariance(&ci, &cj, &ce)?.holds;

    let mut sign_rows = Vec::new();
    let mut supervised_min_fraction = 1.0f64;
    let mut ssl_positive_min_fraction = 1.0f64;
    for trial in 0..cfg.sign_trials {
        let sup = derivative_sign_check(
            SignCheckMode::SupervisedLogistic,
            cfg.sign_features,
            0,
            RngStream::new(cfg.base_seed, 0).derive(0x516 + trial as u64),
        )?;
        supervised_min_fraction = supervised_min_fraction.min(sup.fraction);
        sign_rows.push(SignRow {
            mode: "supervised_logistic",
            trial,
            fraction: sup.fraction,
            degenerate: sup.degenerate,
        });
        let pos = derivative_sign_check(
            SignCheckMode::SslPositive,
            cfg.sign_features,
            0,
            RngStream::new(cfg.base_seed, 0).derive(0x905 + trial as u64),
        )?;
        ssl_positive_min_fraction = ssl_positive_min_fraction.min(pos.fraction);
        sign_rows.push(SignRow {
            mode: "ssl_positive",
            trial,
            fraction: pos.fraction,
            degenerate: pos.degenerate,
        });
    }
    let neg = derivative_sign_check(
        SignCheckMode::SslNegative,
        cfg.sign_features,
        cfg.negative_dataset,
        RngStream::new(cfg.base_seed, 0).derive(0x4e6),
    )?;
    sign_rows.push(SignRow {
        mode: "ssl_negative",
        trial: 0,
        fraction: neg.fraction,
        degenerate: neg.degenerate,
    });

    Ok(TheorySuiteResult {
        mi_rows,
        mi_max_error,
        taylor_rows,
        taylor_max_rel_error,
        trend,
        removal_rows,
        removal_holds_rate,
        removal_constructed_holds,
        sign_rows,
        supervised_min_fraction,
        ssl_positive_min_fraction,
        ssl_negative_fraction: neg.fraction,
    })
}
