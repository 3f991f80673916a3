//! Construction and evaluation of a single kernel affine hull machine.
//!
//! A machine is built from a block of samples alone: a PCA encoder onto a
//! low-dimensional subspace, a Mahalanobis-Gaussian kernel over the encoded
//! points, and a regularized kernel smoother whose regularization constant is
//! the fixed point of a data-dependent residual map. The fitted machine maps
//! any point of the feature space onto the affine hull of the samples, and
//! the Euclidean distance to that image acts as a distance-from-data measure.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use ndarray_linalg::Cholesky;
use ndarray_linalg::UPLO;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;

/// Upper cap on the automatically selected subspace dimension.
pub const MAX_SUBSPACE_DIM: usize = 20;

/// Minimum spread a projected coordinate must have to be kept.
pub const RANGE_TOLERANCE: f64 = 1e-3;

const FIXED_POINT_CAP: usize = 200;
const FIXED_POINT_TOL: f64 = 1e-9;
const FIXED_POINT_ACCEPT: f64 = 1e-6;
const DENOMINATOR_FLOOR: f64 = 1e-300;

/// Number of probe evaluations that fell back to the nearest training sample
/// because the smoother denominator underflowed. Monotone process-wide counter.
static FALLBACK_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn fallback_count() -> u64 {
    FALLBACK_COUNT.load(Ordering::Relaxed)
}

pub fn reset_fallback_count() {
    FALLBACK_COUNT.store(0, Ordering::Relaxed);
}

/// A finite block of samples, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    rows: Array2<f64>,
}

impl SampleBlock {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::DomainError(
                "sample block needs at least one row and one column".into(),
            ));
        }
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::DomainError("sample block contains non-finite entries".into()));
        }
        Ok(Self { rows })
    }

    pub fn n_samples(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }
}

/// Orthonormal projection onto the leading principal subspace.
///
/// Row `i` is the unit eigenvector of the sample covariance belonging to the
/// `i`-th largest eigenvalue, sign-fixed so the largest-magnitude entry is
/// positive (lowest index wins ties).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    projection: Array2<f64>,
}

impl Encoder {
    pub(crate) fn from_projection(projection: Array2<f64>) -> Self {
        Self { projection }
    }

    pub fn projection(&self) -> ArrayView2<'_, f64> {
        self.projection.view()
    }

    pub fn subspace_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn encode(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        self.projection.dot(&y)
    }

    pub fn encode_rows(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        rows.dot(&self.projection.t())
    }
}

/// Gaussian kernel parameters: the encoded-sample covariance and a
/// factorization handle for applying its (jittered) inverse.
#[derive(Debug, Clone)]
pub struct KernelParams {
    covariance: Array2<f64>,
    jitter: f64,
    /// Inverse of the lower Cholesky factor of (covariance + jitter * I).
    inv_factor: Array2<f64>,
}

impl KernelParams {
    /// Sample covariance of encoded rows plus the standard jitter.
    pub fn from_encoded(encoded: ArrayView2<'_, f64>) -> Result<Self> {
        let cov = linalg::sample_covariance(encoded);
        let n = cov.nrows() as f64;
        let trace: f64 = cov.diag().sum();
        let jitter = (1e-10 * trace / n).max(1e-12);
        Self::with_jitter(cov, jitter)
    }

    pub fn with_jitter(covariance: Array2<f64>, jitter: f64) -> Result<Self> {
        let n = covariance.nrows();
        let mut shifted = covariance.clone();
        for i in 0..n {
            shifted[[i, i]] += jitter;
        }
        let factor = shifted
            .cholesky(UPLO::Lower)
            .map_err(|e| Error::NumericalFailure(format!("kernel covariance factorization: {e}")))?;
        let inv_factor = invert_lower_triangular(&factor);
        Ok(Self { covariance, jitter, inv_factor })
    }

    pub fn covariance(&self) -> ArrayView2<'_, f64> {
        self.covariance.view()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Map rows into whitened coordinates where the kernel metric is Euclidean.
    pub fn whiten_rows(&self, rows: ArrayView2<'_, f64>) -> Array2<f64> {
        rows.dot(&self.inv_factor.t())
    }

    fn whiten_vec(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.inv_factor.dot(&v)
    }
}

fn invert_lower_triangular(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        inv[[j, j]] = 1.0 / l[[j, j]];
        for i in (j + 1)..n {
            let mut acc = 0.0;
            for k in j..i {
                acc += l[[i, k]] * inv[[k, j]];
            }
            inv[[i, j]] = -acc / l[[i, i]];
        }
    }
    inv
}

/// Split between the one-sample hull (a single point) and the fitted machine.
#[derive(Debug, Clone)]
enum ModelKind {
    Degenerate,
    Fitted(Box<Fitted>),
}

#[derive(Debug, Clone)]
struct Fitted {
    encoder: Encoder,
    kernel: KernelParams,
    lambda_star: f64,
    e_hat: f64,
    /// (K + lambda_star * I)^-1.
    coef: Array2<f64>,
    /// Encoded sample rows P y^i.
    encoded: Array2<f64>,
    /// Whitened encoded rows (cache, rebuilt on load).
    whitened: Array2<f64>,
    /// Squared norms of the whitened rows (cache).
    whitened_sq: Array1<f64>,
}

/// A fitted kernel affine hull machine.
#[derive(Debug, Clone)]
pub struct KahmModel {
    samples: SampleBlock,
    spectral: f64,
    frobenius: f64,
    kind: ModelKind,
}

impl KahmModel {
    pub fn samples(&self) -> &SampleBlock {
        &self.samples
    }

    pub fn n_samples(&self) -> usize {
        self.samples.n_samples()
    }

    pub fn dim(&self) -> usize {
        self.samples.dim()
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(self.kind, ModelKind::Degenerate)
    }

    /// Subspace dimension; 0 for the one-sample model.
    pub fn subspace_dim(&self) -> usize {
        match &self.kind {
            ModelKind::Degenerate => 0,
            ModelKind::Fitted(f) => f.encoder.subspace_dim(),
        }
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(&f.encoder),
        }
    }

    pub fn kernel(&self) -> Option<&KernelParams> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(&f.kernel),
        }
    }

    pub fn lambda_star(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(f.lambda_star),
        }
    }

    pub fn e_hat(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(f.e_hat),
        }
    }

    pub fn coef(&self) -> Option<ArrayView2<'_, f64>> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(f.coef.view()),
        }
    }

    pub fn encoded(&self) -> Option<ArrayView2<'_, f64>> {
        match &self.kind {
            ModelKind::Degenerate => None,
            ModelKind::Fitted(f) => Some(f.encoded.view()),
        }
    }

    pub fn spectral_norm(&self) -> f64 {
        self.spectral
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius
    }

    /// Reassemble a model from stored pieces (archive loader path). Caches
    /// are rebuilt from the stored covariance and jitter.
    pub(crate) fn from_parts(
        samples: SampleBlock,
        spectral: f64,
        frobenius: f64,
        fitted: Option<(Encoder, Array2<f64>, f64, f64, f64, Array2<f64>, Array2<f64>)>,
    ) -> Result<Self> {
        let kind = match fitted {
            None => ModelKind::Degenerate,
            Some((encoder, covariance, jitter, lambda_star, e_hat, coef, encoded)) => {
                let kernel = KernelParams::with_jitter(covariance, jitter)?;
                let whitened = kernel.whiten_rows(encoded.view());
                let whitened_sq = whitened.map_axis(Axis(1), |r| r.dot(&r));
                ModelKind::Fitted(Box::new(Fitted {
                    encoder,
                    kernel,
                    lambda_star,
                    e_hat,
                    coef,
                    encoded,
                    whitened,
                    whitened_sq,
                }))
            }
        };
        Ok(Self { samples, spectral, frobenius, kind })
    }
}

/// Shared eigen work: leading directions of the sample covariance with the
/// sign convention applied, plus per-coordinate projected ranges.
fn leading_basis(samples: &SampleBlock, k: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let (_, mut directions) = linalg::principal_directions(samples.rows(), k)?;
    fix_signs(&mut directions);
    let projected = samples.rows().dot(&directions.t());
    let ranges = (0..k)
        .map(|j| {
            let col = projected.column(j);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in col {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        })
        .collect();
    Ok((directions, ranges))
}

fn fix_signs(directions: &mut Array2<f64>) {
    for mut row in directions.rows_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &v) in row.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if row[best] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

/// Pick the subspace dimension: start at `min(20, p, N-1)` and shrink while
/// any kept coordinate has projected spread below [`RANGE_TOLERANCE`].
pub fn select_subspace_dim(samples: &SampleBlock) -> Result<usize> {
    if samples.n_samples() < 2 {
        return Err(Error::DomainError(
            "subspace selection needs at least two samples".into(),
        ));
    }
    let start = MAX_SUBSPACE_DIM
        .min(samples.dim())
        .min(samples.n_samples() - 1);
    let (_, ranges) = leading_basis(samples, start)?;
    let mut n = start;
    while n >= 1 && ranges[..n].iter().cloned().fold(f64::INFINITY, f64::min) < RANGE_TOLERANCE {
        n -= 1;
    }
    if n == 0 {
        return Err(Error::DegenerateData);
    }
    Ok(n)
}

/// Top-`n` principal-direction encoder for the sample block.
pub fn compute_encoder(samples: &SampleBlock, n: usize) -> Result<Encoder> {
    let max = samples.dim().min(samples.n_samples().saturating_sub(1));
    if n < 1 || n > max {
        return Err(Error::DomainError(format!(
            "subspace dimension {n} outside 1..={max}"
        )));
    }
    let (directions, _) = leading_basis(samples, n)?;
    Ok(Encoder::from_projection(directions))
}

/// Gaussian kernel value exp(-(xi-xj)' theta^-1 (xi-xj) / (2n)).
pub fn gaussian_kernel(xi: ArrayView1<'_, f64>, xj: ArrayView1<'_, f64>, kernel: &KernelParams) -> f64 {
    let n = xi.len() as f64;
    let diff = &xi - &xj;
    let z = kernel.whiten_vec(diff.view());
    (-z.dot(&z) / (2.0 * n)).exp()
}

/// Pairwise kernel matrix over encoded rows. Symmetric with unit diagonal by
/// construction.
pub fn kernel_matrix(encoded: ArrayView2<'_, f64>, kernel: &KernelParams) -> Array2<f64> {
    let n_rows = encoded.nrows();
    let dim = encoded.ncols() as f64;
    let w = kernel.whiten_rows(encoded);
    let mut k = Array2::<f64>::zeros((n_rows, n_rows));
    for i in 0..n_rows {
        k[[i, i]] = 1.0;
        for j in (i + 1)..n_rows {
            let diff = &w.row(i) - &w.row(j);
            let v = (-diff.dot(&diff) / (2.0 * dim)).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Residual map whose fixed point sets the regularization constant, evaluated
/// through the eigendecomposition of the kernel matrix.
struct ResidualMap {
    /// Eigenvalues of K, clamped to be non-negative.
    eigvals: Array1<f64>,
    /// Per-eigendirection squared loads of the sample matrix, sum_j (U' Y)_ij^2.
    loads: Array1<f64>,
    /// 1 / (p N).
    inv_pn: f64,
}

impl ResidualMap {
    fn new(kmat: &Array2<f64>, samples: &SampleBlock) -> Result<(Self, Array1<f64>, Array2<f64>)> {
        let (vals, vecs) = linalg::eigh_sym(kmat)?;
        let eigvals = vals.mapv(|v| v.max(0.0));
        let b = vecs.t().dot(&samples.rows());
        let loads = b.map_axis(Axis(1), |row| row.dot(&row));
        let inv_pn = 1.0 / (samples.dim() as f64 * samples.n_samples() as f64);
        let copy = eigvals.clone();
        Ok((Self { eigvals, loads, inv_pn }, copy, vecs))
    }

    /// R(e, tau) = (1/pN) sum_i (lambda / (d_i + lambda))^2 * loads_i with
    /// lambda = e + tau.
    fn eval(&self, e: f64, tau: f64) -> f64 {
        let lambda = e + tau;
        let mut acc = 0.0;
        for (d, r) in self.eigvals.iter().zip(self.loads.iter()) {
            let f = lambda / (d + lambda);
            acc += f * f * r;
        }
        self.inv_pn * acc
    }
}

fn iterate_fixed_point(map: &ResidualMap, tau: f64, start: f64) -> Result<f64> {
    let mut e = start;
    let mut step = f64::INFINITY;
    for _ in 0..FIXED_POINT_CAP {
        let next = map.eval(e, tau);
        step = (next - e).abs();
        if step <= FIXED_POINT_TOL * e.max(1.0) {
            return Ok(next);
        }
        e = next;
    }
    if step <= FIXED_POINT_ACCEPT * e.max(1.0) {
        Ok(e)
    } else {
        Err(Error::NoConvergence {
            cap: FIXED_POINT_CAP,
            step: step / e.max(1.0),
        })
    }
}

/// Solve for the regularization constant: returns `(lambda_star, e_hat)` where
/// `e_hat` is the fixed point of the residual map and
/// `lambda_star = e_hat + 2 ||Y||_F^2 / (p N)`.
pub fn fit_lambda(kmat: &Array2<f64>, samples: &SampleBlock) -> Result<(f64, f64)> {
    if kmat.nrows() != samples.n_samples() || kmat.ncols() != samples.n_samples() {
        return Err(Error::DimensionMismatch(format!(
            "kernel matrix is {}x{} but the block has {} samples",
            kmat.nrows(),
            kmat.ncols(),
            samples.n_samples()
        )));
    }
    let frob2 = {
        let f = linalg::fro_norm(samples.rows());
        f * f
    };
    if frob2 == 0.0 {
        return Err(Error::ZeroData);
    }
    let pn = samples.dim() as f64 * samples.n_samples() as f64;
    let tau = 2.0 * frob2 / pn;
    let (map, _, _) = ResidualMap::new(kmat, samples)?;
    let e_hat = iterate_fixed_point(&map, tau, 0.5 * frob2 / pn)?;
    Ok((e_hat + tau, e_hat))
}

/// Build a machine from a sample block. One-sample blocks yield the
/// degenerate point-hull model; everything else runs subspace selection,
/// kernel construction, and the fixed-point regularization solve.
pub fn build_kahm(samples: SampleBlock) -> Result<KahmModel> {
    let spectral = linalg::spectral_norm(samples.rows());
    let frobenius = linalg::fro_norm(samples.rows());

    if samples.n_samples() == 1 {
        return Ok(KahmModel {
            samples,
            spectral,
            frobenius,
            kind: ModelKind::Degenerate,
        });
    }
    if frobenius == 0.0 {
        return Err(Error::ZeroData);
    }

    let start = MAX_SUBSPACE_DIM
        .min(samples.dim())
        .min(samples.n_samples() - 1);
    let (directions, ranges) = leading_basis(&samples, start)?;
    let mut n = start;
    while n >= 1 && ranges[..n].iter().cloned().fold(f64::INFINITY, f64::min) < RANGE_TOLERANCE {
        n -= 1;
    }
    if n == 0 {
        return Err(Error::DegenerateData);
    }
    let encoder = Encoder::from_projection(directions.slice(s![..n, ..]).to_owned());

    let encoded = encoder.encode_rows(samples.rows());
    let kernel = KernelParams::from_encoded(encoded.view())?;
    let kmat = kernel_matrix(encoded.view(), &kernel);

    let pn = samples.dim() as f64 * samples.n_samples() as f64;
    let frob2 = frobenius * frobenius;
    let tau = 2.0 * frob2 / pn;
    let (map, eigvals, eigvecs) = ResidualMap::new(&kmat, &samples)?;
    let e_hat = iterate_fixed_point(&map, tau, 0.5 * frob2 / pn)?;
    let lambda_star = e_hat + tau;

    // coef = U diag(1/(d_i + lambda)) U'
    let scaled = {
        let inv = eigvals.mapv(|d| 1.0 / (d + lambda_star));
        let mut m = eigvecs.clone();
        for (mut col, w) in m.columns_mut().into_iter().zip(inv.iter()) {
            col.mapv_inplace(|v| v * w);
        }
        m
    };
    let mut coef = scaled.dot(&eigvecs.t());
    linalg::symmetrize(&mut coef);

    let whitened = kernel.whiten_rows(encoded.view());
    let whitened_sq = whitened.map_axis(Axis(1), |r| r.dot(&r));

    Ok(KahmModel {
        samples,
        spectral,
        frobenius,
        kind: ModelKind::Fitted(Box::new(Fitted {
            encoder,
            kernel,
            lambda_star,
            e_hat,
            coef,
            encoded,
            whitened,
            whitened_sq,
        })),
    })
}

/// Affine-combination weights the machine assigns to its samples at `y`.
/// They sum to one; the hull image is `Y' w`.
pub fn hull_weights(model: &KahmModel, y: ArrayView1<'_, f64>) -> Array1<f64> {
    match &model.kind {
        ModelKind::Degenerate => Array1::ones(1),
        ModelKind::Fitted(_) => {
            let probes = y.insert_axis(Axis(0));
            weights_batch(model, probes)
                .row(0)
                .to_owned()
        }
    }
}

fn weights_batch(model: &KahmModel, probes: ArrayView2<'_, f64>) -> Array2<f64> {
    let f = match &model.kind {
        ModelKind::Fitted(f) => f,
        ModelKind::Degenerate => unreachable!("weights_batch is only called on fitted models"),
    };
    let n_dim = f.encoder.subspace_dim() as f64;
    let x = f.encoder.encode_rows(probes);
    let u = f.kernel.whiten_rows(x.view());
    let u_sq = u.map_axis(Axis(1), |r| r.dot(&r));

    // Squared whitened distances via the inner-product identity.
    let mut d2 = u.dot(&f.whitened.t());
    for (i, mut row) in d2.rows_mut().into_iter().enumerate() {
        let ui = u_sq[i];
        for (j, v) in row.iter_mut().enumerate() {
            *v = (ui + f.whitened_sq[j] - 2.0 * *v).max(0.0);
        }
    }
    let kx = d2.mapv(|v| (-v / (2.0 * n_dim)).exp());
    let mut h = kx.dot(&f.coef.t());

    let mut fallbacks = 0u64;
    for (i, mut row) in h.rows_mut().into_iter().enumerate() {
        let s: f64 = row.sum();
        if s.abs() < DENOMINATOR_FLOOR {
            // Smoother denominator underflowed: weight the nearest sample.
            fallbacks += 1;
            let probe = probes.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, sample) in model.samples.rows().rows().into_iter().enumerate() {
                let diff = &probe - &sample;
                let d = diff.dot(&diff);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            row.fill(0.0);
            row[best] = 1.0;
        } else {
            row.mapv_inplace(|v| v / s);
        }
    }
    if fallbacks > 0 {
        FALLBACK_COUNT.fetch_add(fallbacks, Ordering::Relaxed);
        log::warn!("smoother denominator underflow on {fallbacks} probe(s); used nearest-sample fallback");
    }
    h
}

/// Map a probe onto the affine hull of the samples.
pub fn kahm_map(model: &KahmModel, y: ArrayView1<'_, f64>) -> Array1<f64> {
    kahm_map_batch(model, y.insert_axis(Axis(0))).row(0).to_owned()
}

/// Batch form of [`kahm_map`], one probe per row.
pub fn kahm_map_batch(model: &KahmModel, probes: ArrayView2<'_, f64>) -> Array2<f64> {
    match &model.kind {
        ModelKind::Degenerate => {
            let rows = model.samples.rows();
            let sample = rows.row(0);
            let mut out = Array2::zeros((probes.nrows(), model.dim()));
            for mut row in out.rows_mut() {
                row.assign(&sample);
            }
            out
        }
        ModelKind::Fitted(_) => {
            const CHUNK: usize = 1024;
            let m = probes.nrows();
            if m <= CHUNK {
                return weights_batch(model, probes).dot(&model.samples.rows());
            }
            let chunks: Vec<Array2<f64>> = (0..m)
                .step_by(CHUNK)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let end = (start + CHUNK).min(m);
                    weights_batch(model, probes.slice(s![start..end, ..]))
                        .dot(&model.samples.rows())
                })
                .collect();
            let mut out = Array2::zeros((m, model.dim()));
            let mut offset = 0;
            for chunk in chunks {
                let rows = chunk.nrows();
                out.slice_mut(s![offset..offset + rows, ..]).assign(&chunk);
                offset += rows;
            }
            out
        }
    }
}

/// Euclidean distance from a probe to its hull image.
pub fn kahm_distance(model: &KahmModel, y: ArrayView1<'_, f64>) -> f64 {
    kahm_distance_batch(model, y.insert_axis(Axis(0)))[0]
}

/// Batch form of [`kahm_distance`].
pub fn kahm_distance_batch(model: &KahmModel, probes: ArrayView2<'_, f64>) -> Array1<f64> {
    let images = kahm_map_batch(model, probes);
    let mut out = Array1::zeros(probes.nrows());
    for (i, (probe, image)) in probes.rows().into_iter().zip(images.rows()).enumerate() {
        let diff = &probe - &image;
        out[i] = diff.dot(&diff).sqrt();
    }
    out
}

/// The uniform bound on the norm of the hull image:
/// `||Y||_2 (1 + p N^2 / (2 ||Y||_F^2))`. Infinite for an all-zero block.
pub fn norm_bound(model: &KahmModel) -> f64 {
    let p = model.dim() as f64;
    let n = model.n_samples() as f64;
    let frob2 = model.frobenius * model.frobenius;
    if frob2 == 0.0 {
        return f64::INFINITY;
    }
    model.spectral * (1.0 + p * n * n / (2.0 * frob2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn block(rows: Array2<f64>) -> SampleBlock {
        SampleBlock::new(rows).unwrap()
    }

    fn random_cloud(n: usize, p: usize, seed: u64) -> SampleBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_fn((n, p), |_| rng.gen_range(-2.0..2.0));
        block(rows)
    }

    // ---- subspace selection ----

    #[test]
    fn full_rank_cloud_keeps_all_dims() {
        let samples = random_cloud(10, 3, 7);
        assert_eq!(select_subspace_dim(&samples).unwrap(), 3);
    }

    #[test]
    fn two_points_give_dim_one() {
        let samples = block(array![[0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0, 5.0]]);
        assert_eq!(select_subspace_dim(&samples).unwrap(), 1);
    }

    #[test]
    fn planar_cloud_drops_the_flat_direction() {
        // 10 points exactly in the z = 0 plane with spread >= 1 in x and y:
        // the third projected range is 0, so the loop lands on 2.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = Array2::from_shape_fn((10, 3), |(_, j)| {
            if j < 2 {
                rng.gen_range(-2.0..2.0)
            } else {
                0.0
            }
        });
        assert_eq!(select_subspace_dim(&block(rows)).unwrap(), 2);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let rows = Array2::from_elem((5, 3), 1.25);
        match select_subspace_dim(&block(rows)) {
            Err(Error::DegenerateData) => {}
            other => panic!("expected DegenerateData, got {other:?}"),
        }
    }

    // ---- encoder ----

    #[test]
    fn axis_aligned_encoder_sign_fixed() {
        let samples = block(array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [-1.0, 0.0]]);
        let enc = compute_encoder(&samples, 1).unwrap();
        assert_abs_diff_eq!(enc.projection()[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(enc.projection()[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn full_basis_is_orthonormal() {
        let samples = random_cloud(30, 4, 11);
        let enc = compute_encoder(&samples, 4).unwrap();
        let p = enc.projection();
        let gram = p.dot(&p.t());
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - expect).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn isotropic_cloud_rows_are_unit_and_orthogonal() {
        let samples = random_cloud(200, 2, 5);
        let enc = compute_encoder(&samples, 2).unwrap();
        let p = enc.projection();
        assert_abs_diff_eq!(p.row(0).dot(&p.row(0)), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p.row(1).dot(&p.row(1)), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(p.row(0).dot(&p.row(1)), 0.0, epsilon = 1e-8);
    }

    // ---- kernel ----

    #[test]
    fn kernel_is_one_at_zero_displacement() {
        let kernel = KernelParams::with_jitter(array![[2.0, 0.3], [0.3, 1.0]], 1e-12).unwrap();
        let x = array![0.7, -0.2];
        assert_eq!(gaussian_kernel(x.view(), x.view(), &kernel), 1.0);
    }

    #[test]
    fn kernel_matches_analytic_value_for_identity_theta() {
        // theta = I (1x1), displacement sqrt(2): exp(-(1/2)*2) = exp(-1).
        let kernel = KernelParams::with_jitter(array![[1.0]], 0.0).unwrap();
        let xi = array![2.0_f64.sqrt()];
        let xj = array![0.0];
        assert_abs_diff_eq!(
            gaussian_kernel(xi.view(), xj.view(), &kernel),
            (-1.0_f64).exp(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kernel_is_exactly_symmetric() {
        let kernel = KernelParams::with_jitter(array![[1.5, -0.2], [-0.2, 0.8]], 1e-12).unwrap();
        let xi = array![0.3, 1.7];
        let xj = array![-1.1, 0.4];
        assert_eq!(
            gaussian_kernel(xi.view(), xj.view(), &kernel),
            gaussian_kernel(xj.view(), xi.view(), &kernel)
        );
    }

    #[test]
    fn kernel_matrix_trivial_cases() {
        let kernel = KernelParams::with_jitter(array![[1.0]], 1e-12).unwrap();
        let one = array![[0.5]];
        let k1 = kernel_matrix(one.view(), &kernel);
        assert_eq!(k1, array![[1.0]]);

        let dup = array![[0.5], [0.5]];
        let k2 = kernel_matrix(dup.view(), &kernel);
        for v in k2.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn kernel_matrix_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let encoded = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let kernel = KernelParams::from_encoded(encoded.view()).unwrap();
        let k = kernel_matrix(encoded.view(), &kernel);
        for i in 0..5 {
            for j in 0..5 {
                let direct = gaussian_kernel(encoded.row(i), encoded.row(j), &kernel);
                assert_abs_diff_eq!(k[[i, j]], direct, epsilon = 1e-12);
            }
        }
    }

    // ---- fixed point ----

    /// Direct evaluation of the residual map by dense Cholesky solves,
    /// independent of the eigendecomposition route used by the solver.
    fn residual_direct(kmat: &Array2<f64>, samples: &SampleBlock, e: f64, tau: f64) -> f64 {
        let n = kmat.nrows();
        let lambda = e + tau;
        let mut a = kmat.clone();
        for i in 0..n {
            a[[i, i]] += lambda;
        }
        // Hand-rolled Cholesky so the oracle shares nothing with the solver.
        let mut l = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                if i == j {
                    l[[i, j]] = s.sqrt();
                } else {
                    l[[i, j]] = s / l[[j, j]];
                }
            }
        }
        let solve = |b: ArrayView1<'_, f64>| -> Array1<f64> {
            let mut y = Array1::<f64>::zeros(n);
            for i in 0..n {
                let mut s = b[i];
                for k in 0..i {
                    s -= l[[i, k]] * y[k];
                }
                y[i] = s / l[[i, i]];
            }
            let mut x = Array1::<f64>::zeros(n);
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in (i + 1)..n {
                    s -= l[[k, i]] * x[k];
                }
                x[i] = s / l[[i, i]];
            }
            x
        };
        let p = samples.dim();
        let mut acc = 0.0;
        for j in 0..p {
            let col = samples.rows().column(j).to_owned();
            let x = solve(col.view());
            let recon = kmat.dot(&x);
            let resid = &col - &recon;
            acc += resid.dot(&resid);
        }
        acc / (p as f64 * n as f64)
    }

    #[test]
    fn identity_kernel_matches_scalar_bisection_oracle() {
        // With K = I the residual map collapses to the scalar equation
        // x = m ((x + 2m) / (1 + x + 2m))^2 with m = ||Y||_F^2 / (p N).
        for (rows, cols, scale) in [(2usize, 2usize, 1.0f64), (3, 4, 0.7)] {
            let y = Array2::from_elem((rows, cols), scale);
            let samples = block(y);
            let m = (linalg::fro_norm(samples.rows()).powi(2))
                / (samples.dim() as f64 * samples.n_samples() as f64);
            let kmat = Array2::<f64>::eye(rows);
            let (lambda, e_hat) = fit_lambda(&kmat, &samples).unwrap();

            let g = |x: f64| x - m * ((x + 2.0 * m) / (1.0 + x + 2.0 * m)).powi(2);
            let mut lo = 0.0;
            let mut hi = m.max(1.0);
            while g(hi) < 0.0 {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let root = 0.5 * (lo + hi);
            assert!(
                (e_hat - root).abs() <= 1e-8,
                "e_hat {e_hat} vs bisection root {root}"
            );
            assert_abs_diff_eq!(lambda, e_hat + 2.0 * m, epsilon = 1e-12);
        }
    }

    #[test]
    fn lambda_exceeds_tau_and_residual_is_small() {
        let samples = random_cloud(40, 3, 23);
        let enc = compute_encoder(&samples, 3).unwrap();
        let encoded = enc.encode_rows(samples.rows());
        let kernel = KernelParams::from_encoded(encoded.view()).unwrap();
        let kmat = kernel_matrix(encoded.view(), &kernel);
        let (lambda, e_hat) = fit_lambda(&kmat, &samples).unwrap();

        let frob2 = linalg::fro_norm(samples.rows()).powi(2);
        let tau = 2.0 * frob2 / (samples.dim() as f64 * samples.n_samples() as f64);
        assert!(lambda >= tau);
        assert!(e_hat >= 0.0);

        // Fixed-point defining property, checked against the independent
        // dense-solve route.
        let r = residual_direct(&kmat, &samples, e_hat, tau);
        assert!(
            (e_hat - r).abs() <= 1e-6 * e_hat.max(1.0),
            "residual too large: e_hat={e_hat}, R={r}"
        );
    }

    #[test]
    fn zero_block_is_rejected() {
        let samples = block(Array2::zeros((3, 2)));
        let kmat = Array2::<f64>::eye(3);
        match fit_lambda(&kmat, &samples) {
            Err(Error::ZeroData) => {}
            other => panic!("expected ZeroData, got {other:?}"),
        }
    }

    // ---- whole model ----

    #[test]
    fn one_sample_model_is_the_point() {
        let samples = block(array![[3.0, -1.0, 2.0]]);
        let model = build_kahm(samples).unwrap();
        assert!(model.is_degenerate());
        let probe = array![100.0, 5.0, -7.0];
        let image = kahm_map(&model, probe.view());
        assert_eq!(image, array![3.0, -1.0, 2.0]);
        let expect = (&probe - &image).dot(&(&probe - &image)).sqrt();
        assert_eq!(kahm_distance(&model, probe.view()), expect);
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let samples = random_cloud(25, 4, 99);
        let a = build_kahm(samples.clone()).unwrap();
        let b = build_kahm(samples).unwrap();
        assert_eq!(a.lambda_star(), b.lambda_star());
        assert_eq!(a.coef().unwrap(), b.coef().unwrap());
        assert_eq!(a.encoded().unwrap(), b.encoded().unwrap());
    }

    #[test]
    fn fitted_model_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows = Array2::from_shape_fn((100, 2), |_| rng.gen_range(-1.0..1.0));
        let samples = block(rows);
        let model = build_kahm(samples).unwrap();

        let lambda = model.lambda_star().unwrap();
        let e_hat = model.e_hat().unwrap();
        let frob2 = model.frobenius_norm().powi(2);
        let tau = 2.0 * frob2 / (model.dim() as f64 * model.n_samples() as f64);
        assert!((lambda - (e_hat + tau)).abs() <= 1e-9 * lambda.max(1.0));

        // coef (K + lambda I) = I within 1e-6 max-abs.
        let enc = model.encoded().unwrap();
        let kernel = model.kernel().unwrap();
        let kmat = kernel_matrix(enc, kernel);
        let mut shifted = kmat;
        for i in 0..model.n_samples() {
            shifted[[i, i]] += lambda;
        }
        let prod = model.coef().unwrap().dot(&shifted);
        for i in 0..model.n_samples() {
            for j in 0..model.n_samples() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (prod[[i, j]] - expect).abs() <= 1e-6,
                    "coef inverse residual at ({i},{j}): {}",
                    prod[[i, j]]
                );
            }
        }
    }

    #[test]
    fn bisector_probe_maps_to_midpoint() {
        let a = array![1.0, 0.0];
        let b = array![-1.0, 0.0];
        let samples = block(ndarray::stack![Axis(0), a, b]);
        let model = build_kahm(samples).unwrap();
        let probe = array![0.0, 0.7];
        let image = kahm_map(&model, probe.view());
        assert_abs_diff_eq!(image[0], 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(image[1], 0.0, epsilon = 1e-8);
    }

    #[test]
    fn weights_sum_to_one_and_reproduce_image() {
        let samples = random_cloud(30, 3, 8);
        let model = build_kahm(samples.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..50 {
            let probe = Array1::from_shape_fn(3, |_| rng.gen_range(-5.0..5.0));
            let w = hull_weights(&model, probe.view());
            assert_abs_diff_eq!(w.sum(), 1.0, epsilon = 1e-9);
            let image = kahm_map(&model, probe.view());
            let recon = samples.rows().t().dot(&w);
            for (a, b) in image.iter().zip(recon.iter()) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn map_respects_norm_bound() {
        let samples = random_cloud(50, 2, 13);
        let model = build_kahm(samples).unwrap();
        let bound = norm_bound(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let probe = Array1::from_shape_fn(2, |_| rng.gen_range(-50.0..50.0));
            let image = kahm_map(&model, probe.view());
            let norm = image.dot(&image).sqrt();
            assert!(norm < bound, "norm {norm} vs bound {bound}");
        }
    }

    #[test]
    fn distance_ratio_respects_theorem_bound() {
        let samples = random_cloud(20, 3, 31);
        let model = build_kahm(samples.clone()).unwrap();
        let p = model.dim() as f64;
        let n = model.n_samples() as f64;
        let frob2 = model.frobenius_norm().powi(2);
        let factor = 1.0 + p * n * n / (2.0 * frob2);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let probe = Array1::from_shape_fn(3, |_| rng.gen_range(-10.0..10.0));
            let gamma = kahm_distance(&model, probe.view());
            // Spectral norm of the p x N matrix of differences y - y^i.
            let mut diffs = Array2::<f64>::zeros((3, 20));
            for (i, row) in samples.rows().rows().into_iter().enumerate() {
                let d = &probe - &row;
                diffs.column_mut(i).assign(&d);
            }
            let denom = linalg::spectral_norm(diffs.view());
            assert!(gamma <= factor * denom + 1e-12);
        }
    }

    #[test]
    fn norm_bound_trivia() {
        // Single unit-norm row in 2-D: both norms are 1, bound = 2.
        let samples = block(array![[0.6, 0.8]]);
        let model = build_kahm(samples).unwrap();
        assert_abs_diff_eq!(norm_bound(&model), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn norm_bound_matches_svd_oracle() {
        use ndarray_linalg::SVD;
        let samples = random_cloud(10, 3, 55);
        let model = build_kahm(samples.clone()).unwrap();
        let (_, sv, _) = samples.rows().to_owned().svd(false, false).unwrap();
        let spectral = sv[0];
        let frob2 = samples.rows().iter().map(|v| v * v).sum::<f64>();
        let direct = spectral * (1.0 + 3.0 * 100.0 / (2.0 * frob2));
        assert_abs_diff_eq!(norm_bound(&model), direct, epsilon = 1e-9);
    }

    #[test]
    fn far_probe_takes_nearest_sample_fallback() {
        let samples = random_cloud(10, 2, 61);
        let model = build_kahm(samples.clone()).unwrap();
        reset_fallback_count();
        let probe = array![1e9, 1e9];
        let image = kahm_map(&model, probe.view());
        assert_eq!(fallback_count(), 1);
        // The fallback image must be one of the training rows.
        let is_sample = samples
            .rows()
            .rows()
            .into_iter()
            .any(|r| r.iter().zip(image.iter()).all(|(a, b)| a == b));
        assert!(is_sample);
        reset_fallback_count();
    }
}
