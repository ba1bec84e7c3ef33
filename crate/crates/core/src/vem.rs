//! Variational updates for q(Z) and q(π), the evidence lower bound, and the
//! MAP update of kernel parameters and noise.
//!
//! Given retained segmentation samples {C_i}, the E step sets
//!
//!   r ∝ exp{ ψ(α_m) − ψ(Σα) + ln p(Y_s | θ_m, β) },
//!   α_m = α₀ + (1/L)·Σ_i Σ_d Σ_s r,
//!
//! and the M step climbs the Monte-Carlo MAP objective
//!
//!   F(θ, β) = (1/L)·Σ_i Σ_{d,s,m} r·ln p(Y_s | θ_m, β) + ln p(θ) + ln p(β)
//!
//! by backtracking gradient ascent in (ln a², ln l², ln β) space. Terms of
//! the bound that do not depend on (θ, β, r, α) are dropped.

use std::collections::BTreeMap;

use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::kernel::{
    canonical_grid, lognormal_log_prior, shape_key, shareable, GradFactors, MarginalCache,
    SegmentFactors, SegmentView,
};
use crate::math::logsumexp;
use crate::model::{Dataset, Hyperparams, KernelParams, ModelState, Segmentation};

/// Armijo sufficient-increase constant for the M-step line search.
const ARMIJO_C: f64 = 1e-4;
/// Line-search shrink factor.
const BACKTRACK: f64 = 0.5;
/// Step size below which the line search gives up.
const MIN_STEP: f64 = 1e-12;
/// Segment terms with less responsibility mass than this are skipped.
const WEIGHT_FLOOR: f64 = 1e-12;
/// Log-parameter bounds keeping exp() comfortably inside f64 range.
const LOG_PARAM_BOUND: f64 = 40.0;

/// Per-sample, per-sequence, per-segment probability vectors over kernels,
/// indexed `r[sample][sequence][segment][kernel]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Responsibilities {
    pub m: usize,
    pub r: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Responsibilities {
    pub fn num_samples(&self) -> usize {
        self.r.len()
    }

    /// Σ_i Σ_d Σ_s r[i][d][s][·], the unnormalized kernel occupancy mass.
    pub fn kernel_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.m];
        for sample in &self.r {
            for seq in sample {
                for seg in seq {
                    for (m, v) in seg.iter().enumerate() {
                        mass[m] += v;
                    }
                }
            }
        }
        mass
    }

    /// Total number of segments across all samples.
    pub fn segment_count(&self) -> usize {
        self.r.iter().flatten().map(|seq| seq.len()).sum()
    }
}

/// E[ln π_m] under Dir(alpha): ψ(α_m) − ψ(Σα).
pub fn expected_log_pi(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::invalid("alpha must be nonempty"));
    }
    if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
        return Err(Error::invalid("alpha entries must be positive and finite"));
    }
    let psi_total = digamma(alpha.iter().sum());
    Ok(alpha.iter().map(|&a| digamma(a) - psi_total).collect())
}

fn check_alignment(data: &Dataset, samples: &[Vec<Segmentation>]) -> Result<()> {
    for sample in samples {
        if sample.len() != data.len() {
            return Err(Error::shape(format!(
                "sample covers {} sequences, dataset has {}",
                sample.len(),
                data.len()
            )));
        }
        for (seg, seq) in sample.iter().zip(&data.sequences) {
            if seg.c.len() != seq.len() {
                return Err(Error::shape(format!(
                    "segmentation of '{}' has {} sites, sequence has {}",
                    seg.seq_id,
                    seg.c.len(),
                    seq.len()
                )));
            }
        }
    }
    Ok(())
}

fn update_responsibilities_cached(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    state: &ModelState,
    cache: &MarginalCache,
) -> Result<Responsibilities> {
    check_alignment(data, samples)?;
    let elnpi = expected_log_pi(&state.alpha)?;
    let m = state.m();

    let r: Vec<Result<Vec<Vec<Vec<f64>>>>> = samples
        .par_iter()
        .map(|sample| {
            let mut per_seq = Vec::with_capacity(sample.len());
            for (d, (seg, seq)) in sample.iter().zip(&data.sequences).enumerate() {
                let ranges = seg.segments();
                let mut per_segment = Vec::with_capacity(ranges.len());
                for (start, end) in ranges {
                    let view = SegmentView::new(&seq.x[start..end], &seq.y[start..end])?;
                    let mut terms = Vec::with_capacity(m);
                    for (k, params) in state.kernels.iter().enumerate() {
                        let ll =
                            cache.ln_marginal(d, start, end, &view, k, params, state.beta)?;
                        terms.push(elnpi[k] + ll);
                    }
                    let lse = logsumexp(&terms);
                    per_segment.push(terms.iter().map(|t| (t - lse).exp()).collect());
                }
                per_seq.push(per_segment);
            }
            Ok(per_seq)
        })
        .collect();

    let mut out = Vec::with_capacity(samples.len());
    for sample in r {
        out.push(sample?);
    }
    Ok(Responsibilities { m, r: out })
}

/// Softmax E step for q(Z) over every (sample, sequence, segment).
pub fn update_responsibilities(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    state: &ModelState,
) -> Result<Responsibilities> {
    let cache = MarginalCache::new();
    update_responsibilities_cached(data, samples, state, &cache)
}

/// Dirichlet E step for q(π): α_m = α₀ + (1/L)·Σ_i Σ_d Σ_s r.
pub fn update_pi(resp: &Responsibilities, alpha0: f64) -> Vec<f64> {
    let l = resp.num_samples().max(1) as f64;
    resp.kernel_mass().iter().map(|mass| alpha0 + mass / l).collect()
}

fn kl_dirichlet_symmetric(alpha: &[f64], alpha0: f64) -> f64 {
    let m = alpha.len() as f64;
    let total: f64 = alpha.iter().sum();
    let psi_total = digamma(total);
    let mut kl = ln_gamma(total) - ln_gamma(m * alpha0) + m * ln_gamma(alpha0);
    for &a in alpha {
        kl += -ln_gamma(a) + (a - alpha0) * (digamma(a) - psi_total);
    }
    kl
}

/// One segment term collapsed across samples: the grid range and the
/// per-kernel responsibility mass it accumulated.
struct CollapsedTerm {
    seq: usize,
    start: usize,
    end: usize,
    weights: Vec<f64>,
}

/// Sums responsibilities of identical (sequence, start, end) segments across
/// samples. The M-step objective only sees segments through their data and
/// weights, so this collapse is exact and shrinks the optimization work by
/// roughly the sample count.
fn collapse_terms(
    samples: &[Vec<Segmentation>],
    resp: &Responsibilities,
) -> Result<Vec<CollapsedTerm>> {
    if samples.len() != resp.r.len() {
        return Err(Error::shape(format!(
            "{} samples but responsibilities for {}",
            samples.len(),
            resp.r.len()
        )));
    }
    let mut map: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for (sample, r_sample) in samples.iter().zip(&resp.r) {
        if sample.len() != r_sample.len() {
            return Err(Error::shape("sample/responsibility sequence counts differ"));
        }
        for (d, (seg, r_seq)) in sample.iter().zip(r_sample).enumerate() {
            let ranges = seg.segments();
            if ranges.len() != r_seq.len() {
                return Err(Error::shape(format!(
                    "segmentation of '{}' has {} segments, responsibilities {}",
                    seg.seq_id,
                    ranges.len(),
                    r_seq.len()
                )));
            }
            for ((start, end), r_seg) in ranges.into_iter().zip(r_seq) {
                let w = map.entry((d, start, end)).or_insert_with(|| vec![0.0; resp.m]);
                for (m, v) in r_seg.iter().enumerate() {
                    w[m] += v;
                }
            }
        }
    }
    Ok(map
        .into_iter()
        .map(|((seq, start, end), weights)| CollapsedTerm { seq, start, end, weights })
        .collect())
}

fn prior_terms(
    kernels: &[KernelParams],
    beta: f64,
    hp: &Hyperparams,
) -> Result<(f64, Vec<f64>)> {
    // Value of ln p(θ) + ln p(β) and its gradient in packed log-parameter
    // order [ln a²_m, ln l²_m, ..., ln β]. The log-normal density's own
    // −ln v term contributes −1 to each log-space derivative.
    let mut value = 0.0;
    let mut grad = vec![0.0; 2 * kernels.len() + 1];
    for (m, k) in kernels.iter().enumerate() {
        let (va, ga) = lognormal_log_prior(k.amp2, hp.lognormal_amp.mu, hp.lognormal_amp.sigma)?;
        let (vl, gl) = lognormal_log_prior(k.ls2, hp.lognormal_ls.mu, hp.lognormal_ls.sigma)?;
        value += va + vl;
        grad[2 * m] = ga - 1.0;
        grad[2 * m + 1] = gl - 1.0;
    }
    let (vb, gb) = lognormal_log_prior(beta, hp.lognormal_noise.mu, hp.lognormal_noise.sigma)?;
    value += vb;
    grad[2 * kernels.len()] = gb - 1.0;
    Ok((value, grad))
}

/// Terms that share one covariance factorization per kernel: all members
/// have grids in the same shape class and are scored on `grid`.
struct TermGroup {
    grid: Vec<f64>,
    members: Vec<usize>,
    /// Kernels with at least one member above the weight floor.
    active: Vec<bool>,
}

/// Groups collapsed terms by grid shape so each (group, kernel) pair pays
/// for one factorization per objective evaluation instead of one per
/// segment. The grouping depends only on the grids and weights, so it is
/// computed once per M step and reused across line-search evaluations.
fn group_terms(data: &Dataset, terms: &[CollapsedTerm], m: usize) -> Vec<TermGroup> {
    #[derive(PartialEq, Eq, PartialOrd, Ord)]
    enum Key {
        Shape(Vec<i64>),
        Own(usize),
    }
    let mut map: BTreeMap<Key, Vec<usize>> = BTreeMap::new();
    for (ti, t) in terms.iter().enumerate() {
        let xs = &data.sequences[t.seq].x[t.start..t.end];
        let key = if shareable(xs) { Key::Shape(shape_key(xs)) } else { Key::Own(ti) };
        map.entry(key).or_default().push(ti);
    }
    map.into_iter()
        .map(|(key, members)| {
            let grid = match key {
                Key::Shape(k) => canonical_grid(&k),
                Key::Own(ti) => {
                    let t = &terms[ti];
                    data.sequences[t.seq].x[t.start..t.end].to_vec()
                }
            };
            let mut active = vec![false; m];
            for &ti in &members {
                for (k, &w) in terms[ti].weights.iter().enumerate() {
                    if w > WEIGHT_FLOOR {
                        active[k] = true;
                    }
                }
            }
            TermGroup { grid, members, active }
        })
        .collect()
}

fn data_term_value(
    data: &Dataset,
    terms: &[CollapsedTerm],
    groups: &[TermGroup],
    kernels: &[KernelParams],
    beta: f64,
    inv_l: f64,
) -> Result<f64> {
    let per_group: Vec<Result<f64>> = groups
        .par_iter()
        .map(|g| {
            let mut acc = 0.0;
            for (m, k) in kernels.iter().enumerate() {
                if !g.active[m] {
                    continue;
                }
                let factors = SegmentFactors::build(&g.grid, k, beta)?;
                for &ti in &g.members {
                    let t = &terms[ti];
                    let w = t.weights[m];
                    if w > WEIGHT_FLOOR {
                        let ys = &data.sequences[t.seq].y[t.start..t.end];
                        acc += w * factors.log_marginal(ys)?;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for v in per_group {
        total += v?;
    }
    Ok(total * inv_l)
}

fn data_term_grad(
    data: &Dataset,
    terms: &[CollapsedTerm],
    groups: &[TermGroup],
    kernels: &[KernelParams],
    beta: f64,
    inv_l: f64,
) -> Result<(f64, Vec<f64>)> {
    let dim = 2 * kernels.len() + 1;
    let per_group: Vec<Result<(f64, Vec<f64>)>> = groups
        .par_iter()
        .map(|g| {
            let mut value = 0.0;
            let mut grad = vec![0.0; dim];
            for (m, k) in kernels.iter().enumerate() {
                if !g.active[m] {
                    continue;
                }
                let factors = GradFactors::build(&g.grid, k, beta)?;
                for &ti in &g.members {
                    let t = &terms[ti];
                    let w = t.weights[m];
                    if w > WEIGHT_FLOOR {
                        let ys = &data.sequences[t.seq].y[t.start..t.end];
                        let out = factors.value_grad(ys)?;
                        value += w * out.value;
                        grad[2 * m] += w * out.grad[0];
                        grad[2 * m + 1] += w * out.grad[1];
                        grad[dim - 1] += w * out.grad[2];
                    }
                }
            }
            Ok((value, grad))
        })
        .collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; dim];
    for item in per_group {
        let (v, g) = item?;
        value += v;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    value *= inv_l;
    for g in &mut grad {
        *g *= inv_l;
    }
    Ok((value, grad))
}

fn pack(kernels: &[KernelParams], beta: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(2 * kernels.len() + 1);
    for k in kernels {
        x.push(k.amp2.ln());
        x.push(k.ls2.ln());
    }
    x.push(beta.ln());
    x
}

fn unpack(x: &[f64]) -> (Vec<KernelParams>, f64) {
    let m = (x.len() - 1) / 2;
    let kernels = (0..m)
        .map(|i| KernelParams { amp2: x[2 * i].exp(), ls2: x[2 * i + 1].exp() })
        .collect();
    (kernels, x[x.len() - 1].exp())
}

/// The M-step objective F(θ, β) at the given parameters: the
/// responsibility-weighted mean segment log-likelihood plus log-priors.
pub fn map_objective(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    resp: &Responsibilities,
    kernels: &[KernelParams],
    beta: f64,
    hp: &Hyperparams,
) -> Result<f64> {
    check_alignment(data, samples)?;
    let terms = collapse_terms(samples, resp)?;
    let groups = group_terms(data, &terms, kernels.len());
    let inv_l = 1.0 / samples.len().max(1) as f64;
    let (prior, _) = prior_terms(kernels, beta, hp)?;
    Ok(data_term_value(data, &terms, &groups, kernels, beta, inv_l)? + prior)
}

/// Result of one M step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub kernels: Vec<KernelParams>,
    pub beta: f64,
    /// Objective after the last accepted step.
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Set when the line search could not find an ascent step; the returned
    /// parameters are still the best iterate seen.
    pub line_search_failed: bool,
}

/// Backtracking gradient ascent on the MAP objective. Kernels flagged in
/// `frozen` keep their parameters (their likelihood terms still contribute
/// to the shared β).
pub fn mstep(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    resp: &Responsibilities,
    state: &ModelState,
    hp: &Hyperparams,
    frozen: &[bool],
) -> Result<MStepOutcome> {
    check_alignment(data, samples)?;
    if frozen.len() != state.m() {
        return Err(Error::shape(format!(
            "frozen mask has {} entries for {} kernels",
            frozen.len(),
            state.m()
        )));
    }
    let terms = collapse_terms(samples, resp)?;
    let groups = group_terms(data, &terms, state.m());
    let inv_l = 1.0 / samples.len().max(1) as f64;

    let eval_value = |x: &[f64]| -> Result<f64> {
        let (kernels, beta) = unpack(x);
        let (prior, _) = prior_terms(&kernels, beta, hp)?;
        Ok(data_term_value(data, &terms, &groups, &kernels, beta, inv_l)? + prior)
    };
    let eval_grad = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (kernels, beta) = unpack(x);
        let (pv, pg) = prior_terms(&kernels, beta, hp)?;
        let (dv, dg) = data_term_grad(data, &terms, &groups, &kernels, beta, inv_l)?;
        let mut grad: Vec<f64> = dg.iter().zip(&pg).map(|(a, b)| a + b).collect();
        for (m, &is_frozen) in frozen.iter().enumerate() {
            if is_frozen {
                grad[2 * m] = 0.0;
                grad[2 * m + 1] = 0.0;
            }
        }
        Ok((dv + pv, grad))
    };

    let mut x = pack(&state.kernels, state.beta);
    let (mut f, mut g) = eval_grad(&x)?;
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut t_init = hp.mstep.step_size;

    for _ in 0..hp.mstep.max_iters {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < hp.mstep.grad_tol {
            break;
        }
        let mut t = t_init;
        let mut accepted = false;
        while t >= MIN_STEP {
            let xt: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| (xi + t * gi).clamp(-LOG_PARAM_BOUND, LOG_PARAM_BOUND))
                .collect();
            // A step into numerically hopeless territory counts as a failed
            // trial, not a hard error.
            if let Ok(ft) = eval_value(&xt) {
                if ft >= f + ARMIJO_C * t * gnorm2 {
                    x = xt;
                    let (fnew, gnew) = eval_grad(&x)?;
                    f = fnew;
                    g = gnew;
                    trace.push(f);
                    accepted = true;
                    // Let the next trial step grow again so an occasional
                    // hard backtrack does not slow the whole ascent.
                    t_init = (t * 2.0).min(4.0);
                    break;
                }
            }
            t *= BACKTRACK;
        }
        iterations += 1;
        if !accepted {
            line_search_failed = true;
            break;
        }
    }

    let (kernels, beta) = unpack(&x);
    Ok(MStepOutcome { kernels, beta, objective: f, trace, iterations, line_search_failed })
}

/// Converged state of one EM pass on fixed samples.
#[derive(Debug, Clone)]
pub struct VemOutcome {
    pub resp: Responsibilities,
    pub alpha: Vec<f64>,
    pub kernels: Vec<KernelParams>,
    pub beta: f64,
    /// Final M-step objective.
    pub objective: f64,
    pub cycles: usize,
    pub line_search_failed: bool,
}

/// Alternates E steps (q(Z), then q(π), repeated `estep_inner_repeats`
/// times) with one M step, for at most `vem_max_cycles` cycles or until the
/// M-step objective's relative change falls below `elbo_rel_tol`.
pub fn run_vem(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    state: &ModelState,
    hp: &Hyperparams,
    frozen: &[bool],
) -> Result<VemOutcome> {
    let mut cur = ModelState {
        kernels: state.kernels.clone(),
        beta: state.beta,
        alpha: state.alpha.clone(),
        responsibilities: None,
        samples: Vec::new(),
    };
    let mut resp = Responsibilities { m: cur.m(), r: Vec::new() };
    let mut last_objective: Option<f64> = None;
    let mut cycles = 0;
    let mut line_search_failed = false;

    for _ in 0..hp.vem_max_cycles {
        cycles += 1;
        let cache = MarginalCache::new();
        for _ in 0..hp.estep_inner_repeats {
            resp = update_responsibilities_cached(data, samples, &cur, &cache)?;
            cur.alpha = update_pi(&resp, hp.alpha0);
        }
        let out = mstep(data, samples, &resp, &cur, hp, frozen)?;
        cur.kernels = out.kernels;
        cur.beta = out.beta;
        line_search_failed |= out.line_search_failed;

        if let Some(prev) = last_objective {
            let rel = (out.objective - prev).abs() / prev.abs().max(1.0);
            last_objective = Some(out.objective);
            if rel < hp.outer.elbo_rel_tol {
                break;
            }
        } else {
            last_objective = Some(out.objective);
        }
    }

    Ok(VemOutcome {
        resp,
        alpha: cur.alpha,
        kernels: cur.kernels,
        beta: cur.beta,
        objective: last_objective.unwrap_or(f64::NEG_INFINITY),
        cycles,
        line_search_failed,
    })
}

/// Monte-Carlo evidence lower bound on fixed samples, up to the q(C) terms
/// that are constant in (θ, β, r, α).
pub fn elbo(
    data: &Dataset,
    samples: &[Vec<Segmentation>],
    resp: &Responsibilities,
    alpha: &[f64],
    state: &ModelState,
    hp: &Hyperparams,
) -> Result<f64> {
    if alpha.len() != state.m() || resp.m != state.m() {
        return Err(Error::shape(format!(
            "alpha has {} entries, responsibilities {}, kernels {}",
            alpha.len(),
            resp.m,
            state.m()
        )));
    }
    let l = samples.len().max(1) as f64;
    let data_and_priors =
        map_objective(data, samples, resp, &state.kernels, state.beta, hp)?;

    let elnpi = expected_log_pi(alpha)?;
    let mass = resp.kernel_mass();
    let assign: f64 = elnpi.iter().zip(&mass).map(|(e, w)| e * w / l).sum();

    let mut entropy = 0.0;
    for sample in &resp.r {
        for seq in sample {
            for seg in seq {
                for &v in seg {
                    if v > 0.0 {
                        entropy -= v * v.ln();
                    }
                }
            }
        }
    }
    entropy /= l;

    Ok(data_and_priors + assign + entropy - kl_dirichlet_symmetric(alpha, hp.alpha0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gp_sample;
    use crate::model::Sequence;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn state(kernels: Vec<(f64, f64)>, beta: f64, alpha: Vec<f64>) -> ModelState {
        ModelState::new(
            kernels.into_iter().map(|(a, l)| KernelParams { amp2: a, ls2: l }).collect(),
            beta,
            alpha,
        )
        .unwrap()
    }

    fn gp_sequence(
        id: &str,
        n: usize,
        dt: f64,
        params: (f64, f64),
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Sequence {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * dt).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let k = KernelParams { amp2: params.0, ls2: params.1 };
        // The covariance already carries β·I, so this one draw includes the
        // observation noise.
        let y = gp_sample(&x, &k, beta, &eps).unwrap();
        Sequence { id: id.into(), x, y }
    }

    fn whole_sequence_samples(data: &Dataset, copies: usize) -> Vec<Vec<Segmentation>> {
        let one: Vec<Segmentation> = data
            .sequences
            .iter()
            .map(|s| Segmentation::from_starts(s, &[]).unwrap())
            .collect();
        vec![one; copies]
    }

    #[test]
    fn expected_log_pi_digamma_values() {
        let got = expected_log_pi(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(got[0], -1.0, max_relative = 1e-12);
        assert_relative_eq!(got[1], -1.0, max_relative = 1e-12);

        let sym = expected_log_pi(&[0.3, 0.3, 0.3]).unwrap();
        assert_relative_eq!(sym[0], sym[1], max_relative = 1e-12);
        assert_relative_eq!(sym[1], sym[2], max_relative = 1e-12);

        let skew = expected_log_pi(&[1e4, 1.0]).unwrap();
        assert!((skew[0] - (1e4f64 / 10001.0).ln()).abs() < 1e-4);

        assert!(expected_log_pi(&[]).is_err());
        assert!(expected_log_pi(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn responsibilities_collapse_for_single_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 20, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let s = state(vec![(0.05, 0.05)], 0.001, vec![0.4]);
        let samples = whole_sequence_samples(&data, 2);
        let resp = update_responsibilities(&data, &samples, &s).unwrap();
        assert_eq!(resp.r[0][0][0], vec![1.0]);
        assert_eq!(resp.num_samples(), 2);
    }

    #[test]
    fn identical_kernels_share_responsibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 15, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let s = state(vec![(0.05, 0.05), (0.05, 0.05)], 0.001, vec![0.7, 0.7]);
        let samples = whole_sequence_samples(&data, 1);
        let resp = update_responsibilities(&data, &samples, &s).unwrap();
        assert_relative_eq!(resp.r[0][0][0][0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(resp.r[0][0][0][1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn short_length_scale_segment_gets_matched_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 40, 0.1, (0.05, 0.005), 0.001, &mut rng)],
        };
        let s = state(
            vec![(0.01, 0.1), (0.05, 0.05), (0.05, 0.005)],
            0.001,
            vec![1.0, 1.0, 1.0],
        );
        let samples = whole_sequence_samples(&data, 1);
        let resp = update_responsibilities(&data, &samples, &s).unwrap();
        assert!(resp.r[0][0][0][2] > 0.9, "matched responsibility {:?}", resp.r[0][0][0]);
    }

    #[test]
    fn responsibilities_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Dataset {
            sequences: vec![
                gp_sequence("a", 25, 0.1, (0.05, 0.05), 0.001, &mut rng),
                gp_sequence("b", 18, 0.1, (0.01, 0.1), 0.001, &mut rng),
            ],
        };
        let s = state(vec![(0.01, 0.1), (0.05, 0.05), (0.05, 0.005)], 0.001, vec![0.1, 2.0, 0.3]);
        let samples: Vec<Vec<Segmentation>> = vec![
            vec![
                Segmentation::from_starts(&data.sequences[0], &[7, 13]).unwrap(),
                Segmentation::from_starts(&data.sequences[1], &[9]).unwrap(),
            ],
            vec![
                Segmentation::from_starts(&data.sequences[0], &[11]).unwrap(),
                Segmentation::from_starts(&data.sequences[1], &[]).unwrap(),
            ],
        ];
        let resp = update_responsibilities(&data, &samples, &s).unwrap();
        for sample in &resp.r {
            for seq in sample {
                for seg in seq {
                    let total: f64 = seg.iter().sum();
                    assert!((total - 1.0).abs() < 1e-9);
                    assert!(seg.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn update_pi_mass_identity() {
        let empty = Responsibilities { m: 3, r: vec![vec![], vec![]] };
        assert_eq!(update_pi(&empty, 0.1), vec![0.1, 0.1, 0.1]);

        let single = Responsibilities { m: 3, r: vec![vec![vec![vec![1.0, 0.0, 0.0]]]] };
        let alpha = update_pi(&single, 0.1);
        assert_relative_eq!(alpha[0], 1.1, max_relative = 1e-12);
        assert_relative_eq!(alpha[1], 0.1, max_relative = 1e-12);

        // Σα == M·α₀ + mean segment count, to machine precision.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = 4;
        let l = 3;
        let mut r = Vec::new();
        for _ in 0..l {
            let mut sample = Vec::new();
            for _ in 0..2 {
                let segs = rng.random_range(1..5);
                let mut seq = Vec::new();
                for _ in 0..segs {
                    let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
                    let total: f64 = raw.iter().sum();
                    seq.push(raw.into_iter().map(|v| v / total).collect());
                }
                sample.push(seq);
            }
            r.push(sample);
        }
        let resp = Responsibilities { m, r };
        let mean_segments = resp.segment_count() as f64 / l as f64;
        let alpha = update_pi(&resp, 0.1);
        let total: f64 = alpha.iter().sum();
        assert_relative_eq!(total, m as f64 * 0.1 + mean_segments, epsilon = 1e-12);
    }

    #[test]
    fn elbo_differences_reduce_to_objective_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 12, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let samples = whole_sequence_samples(&data, 1);
        let hp = Hyperparams { m: 1, ..Hyperparams::default() };
        let resp = Responsibilities { m: 1, r: vec![vec![vec![vec![1.0]]]] };
        let alpha = vec![1.1];

        let s1 = state(vec![(0.05, 0.05)], 0.001, alpha.clone());
        let s2 = state(vec![(0.02, 0.2)], 0.002, alpha.clone());
        let elbo_diff = elbo(&data, &samples, &resp, &alpha, &s1, &hp).unwrap()
            - elbo(&data, &samples, &resp, &alpha, &s2, &hp).unwrap();
        let obj_diff = map_objective(&data, &samples, &resp, &s1.kernels, s1.beta, &hp).unwrap()
            - map_objective(&data, &samples, &resp, &s2.kernels, s2.beta, &hp).unwrap();
        assert_relative_eq!(elbo_diff, obj_diff, max_relative = 1e-10);
    }

    #[test]
    fn elbo_invariant_under_duplicated_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 14, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let hp = Hyperparams { m: 2, ..Hyperparams::default() };
        let s = state(vec![(0.05, 0.05), (0.01, 0.1)], 0.001, vec![0.5, 0.7]);

        let once = whole_sequence_samples(&data, 1);
        let resp_once = update_responsibilities(&data, &once, &s).unwrap();
        let twice = whole_sequence_samples(&data, 2);
        let resp_twice = update_responsibilities(&data, &twice, &s).unwrap();

        let e1 = elbo(&data, &once, &resp_once, &s.alpha, &s, &hp).unwrap();
        let e2 = elbo(&data, &twice, &resp_twice, &s.alpha, &s, &hp).unwrap();
        assert_relative_eq!(e1, e2, max_relative = 1e-12);
    }

    #[test]
    fn estep_does_not_decrease_elbo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = Dataset {
            sequences: vec![
                gp_sequence("a", 20, 0.1, (0.05, 0.05), 0.001, &mut rng),
                gp_sequence("b", 16, 0.1, (0.05, 0.005), 0.001, &mut rng),
            ],
        };
        let hp = Hyperparams { m: 2, alpha0: 0.1, ..Hyperparams::default() };
        let s = state(vec![(0.05, 0.05), (0.05, 0.005)], 0.001, vec![0.4, 0.9]);
        let samples: Vec<Vec<Segmentation>> = vec![vec![
            Segmentation::from_starts(&data.sequences[0], &[10]).unwrap(),
            Segmentation::from_starts(&data.sequences[1], &[5, 11]).unwrap(),
        ]];

        // Arbitrary valid starting point for (r, α).
        let resp0 = Responsibilities {
            m: 2,
            r: vec![vec![
                vec![vec![0.9, 0.1], vec![0.2, 0.8]],
                vec![vec![0.5, 0.5], vec![0.3, 0.7], vec![0.6, 0.4]],
            ]],
        };
        let alpha0 = vec![0.6, 1.3];
        let before = elbo(&data, &samples, &resp0, &alpha0, &s, &hp).unwrap();

        let resp1 = update_responsibilities(
            &data,
            &samples,
            &ModelState { alpha: alpha0.clone(), ..s.clone() },
        )
        .unwrap();
        let mid = elbo(&data, &samples, &resp1, &alpha0, &s, &hp).unwrap();
        assert!(mid >= before - 1e-9, "q(Z) step decreased the bound: {before} -> {mid}");

        let alpha1 = update_pi(&resp1, hp.alpha0);
        let after = elbo(&data, &samples, &resp1, &alpha1, &s, &hp).unwrap();
        assert!(after >= mid - 1e-9, "q(π) step decreased the bound: {mid} -> {after}");
    }

    #[test]
    fn mstep_recovers_single_kernel_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = (0.05, 0.05);
        let beta_true = 0.001;
        let data = Dataset {
            sequences: vec![gp_sequence("a", 300, 0.1, truth, beta_true, &mut rng)],
        };
        let samples = whole_sequence_samples(&data, 1);
        let resp = Responsibilities { m: 1, r: vec![vec![vec![vec![1.0]]]] };

        let mut hp = Hyperparams { m: 1, ..Hyperparams::default() };
        hp.lognormal_amp.sigma = 10.0;
        hp.lognormal_ls.sigma = 10.0;
        hp.lognormal_noise.sigma = 10.0;

        let start = state(vec![(0.02, 0.15)], 0.005, vec![1.0]);
        let out = mstep(&data, &samples, &resp, &start, &hp, &[false]).unwrap();
        assert!(!out.line_search_failed);
        let k = out.kernels[0];
        assert!((k.amp2 / truth.0 - 1.0).abs() < 0.25, "amp2 {}", k.amp2);
        assert!((k.ls2 / truth.1 - 1.0).abs() < 0.25, "ls2 {}", k.ls2);
        assert!((out.beta / beta_true - 1.0).abs() < 0.25, "beta {}", out.beta);

        for w in out.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "objective decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn mstep_at_optimum_stays_put() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 30, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let samples = whole_sequence_samples(&data, 1);
        let resp = Responsibilities { m: 1, r: vec![vec![vec![vec![1.0]]]] };
        let hp = Hyperparams { m: 1, ..Hyperparams::default() };

        let start = state(vec![(0.05, 0.05)], 0.001, vec![1.0]);
        let first = mstep(&data, &samples, &resp, &start, &hp, &[false]).unwrap();
        let converged = state(
            first.kernels.iter().map(|k| (k.amp2, k.ls2)).collect(),
            first.beta,
            vec![1.0],
        );
        let second = mstep(&data, &samples, &resp, &converged, &hp, &[false]).unwrap();
        assert_eq!(second.iterations, 0);
        assert_relative_eq!(second.kernels[0].amp2, first.kernels[0].amp2, max_relative = 1e-12);
        assert_relative_eq!(second.beta, first.beta, max_relative = 1e-12);
    }

    #[test]
    fn frozen_kernels_keep_their_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 40, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let samples = whole_sequence_samples(&data, 1);
        let resp = Responsibilities { m: 2, r: vec![vec![vec![vec![1.0, 0.0]]]] };
        let hp = Hyperparams { m: 2, ..Hyperparams::default() };
        let start = state(vec![(0.02, 0.15), (0.3, 0.7)], 0.003, vec![1.0, 1.0]);
        let out = mstep(&data, &samples, &resp, &start, &hp, &[false, true]).unwrap();
        assert_eq!(out.kernels[1].amp2, 0.3);
        assert_eq!(out.kernels[1].ls2, 0.7);
        assert_ne!(out.kernels[0].amp2, 0.02);
    }

    #[test]
    fn permuting_kernels_permutes_everything_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 25, 0.1, (0.05, 0.02), 0.001, &mut rng)],
        };
        let samples: Vec<Vec<Segmentation>> =
            vec![vec![Segmentation::from_starts(&data.sequences[0], &[8, 17]).unwrap()]];
        let hp = Hyperparams { m: 3, ..Hyperparams::default() };

        let s = state(vec![(0.01, 0.1), (0.05, 0.05), (0.05, 0.005)], 0.001, vec![0.3, 1.2, 0.8]);
        let perm = [2usize, 0, 1];
        let s_perm = state(
            perm.iter().map(|&p| (s.kernels[p].amp2, s.kernels[p].ls2)).collect(),
            0.001,
            perm.iter().map(|&p| s.alpha[p]).collect(),
        );

        let resp = update_responsibilities(&data, &samples, &s).unwrap();
        let resp_perm = update_responsibilities(&data, &samples, &s_perm).unwrap();
        for (seg, seg_perm) in resp.r[0][0].iter().zip(&resp_perm.r[0][0]) {
            for (new_idx, &old_idx) in perm.iter().enumerate() {
                assert_relative_eq!(seg_perm[new_idx], seg[old_idx], max_relative = 1e-10);
            }
        }

        let alpha = update_pi(&resp, hp.alpha0);
        let alpha_perm = update_pi(&resp_perm, hp.alpha0);
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert_relative_eq!(alpha_perm[new_idx], alpha[old_idx], max_relative = 1e-10);
        }

        let obj = map_objective(&data, &samples, &resp, &s.kernels, s.beta, &hp).unwrap();
        let obj_perm =
            map_objective(&data, &samples, &resp_perm, &s_perm.kernels, s_perm.beta, &hp).unwrap();
        assert_relative_eq!(obj, obj_perm, max_relative = 1e-10);
    }

    #[test]
    fn run_vem_converges_and_is_stable_when_converged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = Dataset {
            sequences: vec![gp_sequence("a", 60, 0.1, (0.05, 0.05), 0.001, &mut rng)],
        };
        let samples = whole_sequence_samples(&data, 3);
        let hp = Hyperparams { m: 2, vem_max_cycles: 6, ..Hyperparams::default() };
        let start = state(vec![(0.03, 0.08), (0.08, 0.02)], 0.002, vec![0.1, 0.1]);

        let first = run_vem(&data, &samples, &start, &hp, &[false, false]).unwrap();
        assert!(first.objective.is_finite());

        let converged = ModelState::new(first.kernels.clone(), first.beta, first.alpha.clone())
            .unwrap();
        let second = run_vem(&data, &samples, &converged, &hp, &[false, false]).unwrap();
        assert_eq!(second.cycles, 2);
        for (a, b) in first.kernels.iter().zip(&second.kernels) {
            assert_relative_eq!(a.amp2, b.amp2, max_relative = 1e-3);
            assert_relative_eq!(a.ls2, b.ls2, max_relative = 1e-3);
        }
    }
}

