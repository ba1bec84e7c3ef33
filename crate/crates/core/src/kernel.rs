//! Squared-exponential GP covariance and per-segment marginal likelihood.
//!
//! A segment with inputs X and values y is scored under kernel θ = (a², l²)
//! and noise β by ln N(y | 0, K) with
//!
//!   K_ij = a²·exp(−(x_i−x_j)²/(2l²)) + (β + jitter)·1[i=j],
//!
//! evaluated via Cholesky factorization. Gradients for the parameter update
//! are taken in (ln a², ln l², ln β) space using
//! ∂ln N/∂θ = ½ tr((ααᵀ − K⁻¹)·∂K/∂θ) with α = K⁻¹y.

use dashmap::DashMap;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::KernelParams;

/// Relative diagonal jitter (times a²) applied before the first Cholesky
/// attempt.
pub const JITTER_INITIAL_REL: f64 = 1e-9;
/// Jitter escalation cap (times a²); failure here is a hard error.
pub const JITTER_MAX_REL: f64 = 1e-3;

/// Borrowed view of one segment's points.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
}

impl<'a> SegmentView<'a> {
    pub fn new(xs: &'a [f64], ys: &'a [f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::invalid("segment must contain at least one point"));
        }
        if xs.len() != ys.len() {
            return Err(Error::shape(format!(
                "segment has {} timestamps but {} values",
                xs.len(),
                ys.len()
            )));
        }
        debug_assert!(xs.windows(2).all(|w| w[1] > w[0]));
        Ok(SegmentView { xs, ys })
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

fn check_params(params: &KernelParams, beta: f64) -> Result<()> {
    if !(params.amp2 > 0.0 && params.amp2.is_finite())
        || !(params.ls2 > 0.0 && params.ls2.is_finite())
    {
        return Err(Error::invalid(format!(
            "kernel parameters must be positive and finite, got amp2={}, ls2={}",
            params.amp2, params.ls2
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive and finite, got {beta}")));
    }
    Ok(())
}

fn build_se(xs: &[f64], params: &KernelParams, beta: f64, jitter: f64) -> DMatrix<f64> {
    let n = xs.len();
    let inv_2ls2 = 0.5 / params.ls2;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.amp2 + beta + jitter;
        for j in 0..i {
            let d = xs[i] - xs[j];
            let v = params.amp2 * (-d * d * inv_2ls2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// SE covariance over the grid `xs`, with the initial diagonal jitter
/// already applied.
pub fn se_covariance(xs: &[f64], params: &KernelParams, beta: f64) -> Result<DMatrix<f64>> {
    check_params(params, beta)?;
    if xs.is_empty() {
        return Err(Error::invalid("covariance needs at least one point"));
    }
    Ok(build_se(xs, params, beta, JITTER_INITIAL_REL * params.amp2))
}

/// Factorizes the segment covariance, escalating jitter tenfold on failure
/// up to the cap. Returns the factorization, the matrix it factorized, and
/// the jitter used.
fn cholesky_with_escalation(
    xs: &[f64],
    params: &KernelParams,
    beta: f64,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    let mut rel = JITTER_INITIAL_REL;
    loop {
        let jitter = rel * params.amp2;
        let k = build_se(xs, params, beta, jitter);
        if let Some(chol) = Cholesky::new(k.clone()) {
            return Ok((chol, k, jitter));
        }
        rel *= 10.0;
        if rel > JITTER_MAX_REL * (1.0 + 1e-12) {
            return Err(Error::numerical(format!(
                "covariance not positive definite after jitter escalation \
                 (n={}, amp2={}, ls2={}, beta={})",
                xs.len(),
                params.amp2,
                params.ls2,
                beta
            )));
        }
    }
}

fn ln_marginal_from_cholesky(chol: &Cholesky<f64, Dyn>, ys: &[f64]) -> (f64, DVector<f64>) {
    let y = DVector::from_column_slice(ys);
    let alpha = chol.solve(&y);
    let quad = y.dot(&alpha);
    let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let n = ys.len() as f64;
    let value = -0.5 * quad - 0.5 * logdet - 0.5 * n * std::f64::consts::TAU.ln();
    (value, alpha)
}

/// ln N(y | 0, K) for one segment.
pub fn segment_log_marginal(seg: &SegmentView, params: &KernelParams, beta: f64) -> Result<f64> {
    check_params(params, beta)?;
    let (chol, _, _) = cholesky_with_escalation(seg.xs, params, beta)?;
    Ok(ln_marginal_from_cholesky(&chol, seg.ys).0)
}

/// Marginal log-likelihood of one segment together with its gradient in
/// (ln a², ln l², ln β).
#[derive(Debug, Clone, Copy)]
pub struct MarginalWithGrad {
    pub value: f64,
    /// d/d(ln a²), d/d(ln l²), d/d(ln β).
    pub grad: [f64; 3],
}

/// Value and analytic gradient of `segment_log_marginal` in log-parameter
/// space.
///
/// With the jitter proportional to a², ∂K/∂ln a² = K − βI; the off-diagonal
/// SE terms give ∂K/∂ln l² = K_ij·d²_ij/(2l²); and ∂K/∂ln β = βI.
pub fn segment_log_marginal_grad(
    seg: &SegmentView,
    params: &KernelParams,
    beta: f64,
) -> Result<MarginalWithGrad> {
    check_params(params, beta)?;
    let (chol, k, _) = cholesky_with_escalation(seg.xs, params, beta)?;
    let (value, alpha) = ln_marginal_from_cholesky(&chol, seg.ys);
    let kinv = chol.inverse();
    let n = seg.len();

    // B = ααᵀ − K⁻¹; every gradient is ½ tr(B · ∂K/∂θ), and both B and the
    // ∂K matrices are symmetric, so the traces reduce to elementwise sums.
    let mut trace_b = 0.0;
    let mut sum_bk = 0.0;
    let mut sum_b_dls = 0.0;
    let inv_2ls2 = 0.5 / params.ls2;
    for i in 0..n {
        let b_ii = alpha[i] * alpha[i] - kinv[(i, i)];
        trace_b += b_ii;
        sum_bk += b_ii * k[(i, i)];
        for j in 0..i {
            let b_ij = alpha[i] * alpha[j] - kinv[(i, j)];
            let d = seg.xs[i] - seg.xs[j];
            sum_bk += 2.0 * b_ij * k[(i, j)];
            sum_b_dls += 2.0 * b_ij * k[(i, j)] * d * d * inv_2ls2;
        }
    }
    let g_amp = 0.5 * (sum_bk - beta * trace_b);
    let g_ls = 0.5 * sum_b_dls;
    let g_beta = 0.5 * beta * trace_b;
    Ok(MarginalWithGrad { value, grad: [g_amp, g_ls, g_beta] })
}

/// Log-density of LogNormal(mu, sigma) at `value`, and the derivative of its
/// normal kernel w.r.t. ln value, −(ln value − mu)/σ². The returned density
/// includes the −ln value change-of-variables term; the gradient
/// deliberately excludes that term's constant −1 so callers optimizing in
/// log space can account for it once.
pub fn lognormal_log_prior(value: f64, mu: f64, sigma: f64) -> Result<(f64, f64)> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(Error::invalid(format!("log-normal value must be positive, got {value}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("log-normal sigma must be positive, got {sigma}")));
    }
    let lv = value.ln();
    let z = (lv - mu) / sigma;
    let log_density =
        -lv - sigma.ln() - 0.5 * std::f64::consts::TAU.ln() - 0.5 * z * z;
    Ok((log_density, -(lv - mu) / (sigma * sigma)))
}

/// One zero-mean draw from N(0, K) over the grid `xs`, mapping the provided
/// standard-normal vector through the Cholesky factor.
pub fn gp_sample(xs: &[f64], params: &KernelParams, beta: f64, eps: &[f64]) -> Result<Vec<f64>> {
    check_params(params, beta)?;
    if eps.len() != xs.len() {
        return Err(Error::shape(format!(
            "{} grid points but {} normal draws",
            xs.len(),
            eps.len()
        )));
    }
    let (chol, _, _) = cholesky_with_escalation(xs, params, beta)?;
    let y = chol.l_dirty().lower_triangle() * DVector::from_column_slice(eps);
    Ok(y.as_slice().to_vec())
}

/// Power-of-two quantum (2⁻³⁶ ≈ 1.46e-11) used to group segment grids into
/// shared-factorization classes. Grids whose offsets from their first point
/// agree to within half a quantum fall into one class; the class is scored
/// on the exact-multiple grid derived from its integer key, so every member
/// sees bit-identical values regardless of insertion order or thread count.
const SHAPE_QUANTUM: f64 = f64::from_bits(0x3DB0_0000_0000_0000);

/// Offsets at or beyond this saturate the integer shape key, so such
/// segments are scored on their own grid instead of through a class.
const SHAPE_SPAN_LIMIT: f64 = 1e8;

/// Shift-invariant integer signature of a segment grid: each offset from
/// the first point in units of [`SHAPE_QUANTUM`]. On a nominally uniform
/// grid this collapses the last-ulp drift between numerically equal
/// spacings, so equal-length segments share one key wherever they start.
pub fn shape_key(xs: &[f64]) -> Vec<i64> {
    let x0 = xs[0];
    xs.iter().map(|&x| ((x - x0) / SHAPE_QUANTUM).round() as i64).collect()
}

/// The grid a shape class is scored on: exact multiples of the quantum.
pub fn canonical_grid(key: &[i64]) -> Vec<f64> {
    key.iter().map(|&k| k as f64 * SHAPE_QUANTUM).collect()
}

/// Whether a segment grid may be scored through a shared shape class.
pub(crate) fn shareable(xs: &[f64]) -> bool {
    let span = xs[xs.len() - 1] - xs[0];
    span.is_finite() && span < SHAPE_SPAN_LIMIT
}

/// Covariance factorization shared by every segment of one grid-shape class
/// under one kernel. Built once per (class, kernel); scoring a member is
/// then an O(n²) triangular solve.
#[derive(Debug)]
pub struct SegmentFactors {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl SegmentFactors {
    pub fn build(xs: &[f64], params: &KernelParams, beta: f64) -> Result<Self> {
        check_params(params, beta)?;
        if xs.is_empty() {
            return Err(Error::invalid("factorization needs at least one point"));
        }
        let (chol, _, _) = cholesky_with_escalation(xs, params, beta)?;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(SegmentFactors { chol, logdet })
    }

    pub fn n(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// ln N(y | 0, K) for one member; identical to `segment_log_marginal`
    /// on the factorized grid.
    pub fn log_marginal(&self, ys: &[f64]) -> Result<f64> {
        let n = self.n();
        if ys.len() != n {
            return Err(Error::shape(format!(
                "factorization over {n} points scored on {} values",
                ys.len()
            )));
        }
        let y = DVector::from_column_slice(ys);
        let alpha = self.chol.solve(&y);
        let quad = y.dot(&alpha);
        Ok(-0.5 * quad - 0.5 * self.logdet - 0.5 * n as f64 * std::f64::consts::TAU.ln())
    }
}

/// Gradient-path companion to [`SegmentFactors`]: also carries the traces
/// shared by every member's gradient. With α = K⁻¹y and quad = yᵀα, the
/// per-member reductions are tr(B·K) = quad − n, tr(B·H) = αᵀHα − tr(K⁻¹H)
/// and tr(B) = ‖α‖² − tr(K⁻¹), where B = ααᵀ − K⁻¹.
#[derive(Debug)]
pub struct GradFactors {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    beta: f64,
    tr_kinv: f64,
    /// ∂K/∂ln l²: H_ij = K_ij·d²_ij/(2l²), zero diagonal.
    h: DMatrix<f64>,
    tr_kinv_h: f64,
}

impl GradFactors {
    pub fn build(xs: &[f64], params: &KernelParams, beta: f64) -> Result<Self> {
        check_params(params, beta)?;
        if xs.is_empty() {
            return Err(Error::invalid("factorization needs at least one point"));
        }
        let (chol, k, _) = cholesky_with_escalation(xs, params, beta)?;
        let logdet: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let kinv = chol.inverse();
        let n = xs.len();
        let inv_2ls2 = 0.5 / params.ls2;
        let mut tr_kinv = 0.0;
        let mut tr_kinv_h = 0.0;
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            tr_kinv += kinv[(i, i)];
            for j in 0..i {
                let d = xs[i] - xs[j];
                let hij = k[(i, j)] * d * d * inv_2ls2;
                h[(i, j)] = hij;
                h[(j, i)] = hij;
                tr_kinv_h += 2.0 * kinv[(i, j)] * hij;
            }
        }
        Ok(GradFactors { chol, logdet, beta, tr_kinv, h, tr_kinv_h })
    }

    pub fn n(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Marginal value and (ln a², ln l², ln β) gradient for one member,
    /// matching `segment_log_marginal_grad` on the factorized grid.
    pub fn value_grad(&self, ys: &[f64]) -> Result<MarginalWithGrad> {
        let n = self.n();
        if ys.len() != n {
            return Err(Error::shape(format!(
                "factorization over {n} points scored on {} values",
                ys.len()
            )));
        }
        let y = DVector::from_column_slice(ys);
        let alpha = self.chol.solve(&y);
        let quad = y.dot(&alpha);
        let value = -0.5 * quad - 0.5 * self.logdet - 0.5 * n as f64 * std::f64::consts::TAU.ln();
        let trace_b = alpha.dot(&alpha) - self.tr_kinv;
        let hq = (&self.h * &alpha).dot(&alpha);
        let g_amp = 0.5 * ((quad - n as f64) - self.beta * trace_b);
        let g_ls = 0.5 * (hq - self.tr_kinv_h);
        let g_beta = 0.5 * self.beta * trace_b;
        Ok(MarginalWithGrad { value, grad: [g_amp, g_ls, g_beta] })
    }
}

/// Memoized per-segment marginal log-likelihoods for one fixed parameter
/// set, keyed by (sequence ordinal, start, end, kernel index). Misses are
/// scored through a per-(kernel, grid-shape) factorization shared across
/// segments, so on a uniform grid each segment length costs one Cholesky.
///
/// The owner must create a fresh cache whenever kernels or beta change.
/// Concurrent lookups of the same key are safe: the computation is
/// deterministic, so racing writers insert identical values.
#[derive(Debug, Default)]
pub struct MarginalCache {
    map: DashMap<(u32, u32, u32, u16), f64>,
    factors: DashMap<(u16, Vec<i64>), std::sync::Arc<SegmentFactors>>,
}

impl MarginalCache {
    pub fn new() -> Self {
        MarginalCache { map: DashMap::new(), factors: DashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Cached `segment_log_marginal` for the segment `[start, end)` of the
    /// sequence with the given ordinal.
    pub fn ln_marginal(
        &self,
        seq_ord: usize,
        start: usize,
        end: usize,
        seg: &SegmentView,
        kernel_index: usize,
        params: &KernelParams,
        beta: f64,
    ) -> Result<f64> {
        let key = (seq_ord as u32, start as u32, end as u32, kernel_index as u16);
        if let Some(v) = self.map.get(&key) {
            return Ok(*v);
        }
        let v = self.compute(seg, kernel_index, params, beta).map_err(|e| {
            Error::numerical(format!("sequence #{seq_ord}, segment [{start}, {end}): {e}"))
        })?;
        self.map.insert(key, v);
        Ok(v)
    }

    fn compute(
        &self,
        seg: &SegmentView,
        kernel_index: usize,
        params: &KernelParams,
        beta: f64,
    ) -> Result<f64> {
        if !shareable(seg.xs) {
            return segment_log_marginal(seg, params, beta);
        }
        let key = (kernel_index as u16, shape_key(seg.xs));
        let factors = match self.factors.get(&key) {
            Some(f) => std::sync::Arc::clone(&f),
            None => {
                let built =
                    std::sync::Arc::new(SegmentFactors::build(&canonical_grid(&key.1), params, beta)?);
                // A racing builder would arrive at bit-identical factors, so
                // whichever insert wins is interchangeable.
                std::sync::Arc::clone(&self.factors.entry(key).or_insert(built))
            }
        };
        factors.log_marginal(seg.ys)
    }
}
