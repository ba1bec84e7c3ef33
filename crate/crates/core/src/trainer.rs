//! Outer training loop: alternate segmentation sampling with EM updates
//! until the objective settles, then reuse the frozen model to segment data.

use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::SegmentSampler;
use crate::model::{
    validate_dataset, Dataset, Hyperparams, KernelParams, ModelState, Segmentation,
};
use crate::vem::{run_vem, update_responsibilities};

/// E[π_m] below this for `COLLAPSE_ROUNDS` consecutive rounds freezes the
/// kernel so gradient ascent stops chasing an empty component.
const COLLAPSE_EPS: f64 = 1e-6;
const COLLAPSE_ROUNDS: usize = 3;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub objective: f64,
    pub alpha: Vec<f64>,
    pub active_kernels: usize,
    pub mean_segments: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: ModelState,
    pub diagnostics: Vec<RoundDiagnostics>,
    /// Relative objective change dropped below `outer.elbo_rel_tol`.
    pub converged: bool,
    /// Set when a round after the first failed; `state` is then the last
    /// round that completed.
    pub round_error: Option<String>,
}

/// Draws the initial model: kernels from their log-normal priors, β at its
/// prior median, α = α₀·1.
pub fn init_state(hp: &Hyperparams) -> Result<ModelState> {
    hp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let amp = LogNormal::new(hp.lognormal_amp.mu, hp.lognormal_amp.sigma)
        .map_err(|e| Error::invalid(format!("lognormal_amp: {e}")))?;
    let ls = LogNormal::new(hp.lognormal_ls.mu, hp.lognormal_ls.sigma)
        .map_err(|e| Error::invalid(format!("lognormal_ls: {e}")))?;
    let kernels: Vec<KernelParams> = (0..hp.m)
        .map(|_| KernelParams { amp2: rng.sample(amp), ls2: rng.sample(ls) })
        .collect();
    ModelState::new(kernels, hp.lognormal_noise.mu.exp(), vec![hp.alpha0; hp.m])
}

fn mean_segments(samples: &[Vec<Segmentation>]) -> f64 {
    let count: usize =
        samples.iter().flat_map(|per_seq| per_seq.iter().map(|s| s.num_segments())).sum();
    let total: usize = samples.iter().map(|per_seq| per_seq.len()).sum();
    count as f64 / total.max(1) as f64
}

/// Runs the full training loop on `data`.
pub fn fit(data: &Dataset, hp: &Hyperparams) -> Result<FitOutcome> {
    hp.validate()?;
    let report = validate_dataset(data);
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    let working = if hp.standardize { data.standardized() } else { data.clone() };

    let mut state = init_state(hp)?;
    let mut sampler = SegmentSampler::init(&working, hp)?;
    let mut frozen = vec![false; hp.m];
    let mut collapse_streak = vec![0usize; hp.m];
    let mut diagnostics = Vec::new();
    let mut prev_objective: Option<f64> = None;
    let mut converged = false;
    let mut round_error = None;

    for round in 1..=hp.outer.max_rounds {
        let t0 = Instant::now();
        let round_outcome = sampler
            .sample(&working, &state, hp)
            .and_then(|samples| run_vem(&working, &samples, &state, hp, &frozen).map(|v| (samples, v)));
        let (samples, vem) = match round_outcome {
            Ok(ok) => ok,
            Err(e) if round > 1 => {
                round_error = Some(format!("round {round}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };

        state.kernels = vem.kernels;
        state.beta = vem.beta;
        state.alpha = vem.alpha;
        state.responsibilities = Some(vem.resp);
        state.samples = samples;

        let epi = state.expected_pi();
        for m in 0..hp.m {
            if frozen[m] {
                continue;
            }
            if epi[m] < COLLAPSE_EPS {
                collapse_streak[m] += 1;
                if collapse_streak[m] >= COLLAPSE_ROUNDS {
                    frozen[m] = true;
                }
            } else {
                collapse_streak[m] = 0;
            }
        }

        diagnostics.push(RoundDiagnostics {
            round,
            objective: vem.objective,
            alpha: state.alpha.clone(),
            active_kernels: state.active_kernels(hp.active_threshold).len(),
            mean_segments: mean_segments(&state.samples),
            wallclock_ms: t0.elapsed().as_millis() as u64,
        });

        if let Some(prev) = prev_objective {
            let rel = (vem.objective - prev).abs() / prev.abs().max(1.0);
            if rel < hp.outer.elbo_rel_tol {
                converged = true;
                break;
            }
        }
        prev_objective = Some(vem.objective);
    }

    Ok(FitOutcome { state, diagnostics, converged, round_error })
}

/// Segmentation of one sequence under a frozen model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub seq_id: String,
    /// Posterior split probability per index; index 0 is always 1.
    pub marginal_split_prob: Vec<f64>,
    /// Retained Gibbs samples for this sequence.
    pub samples: Vec<Segmentation>,
    /// `labels[i][s]`: argmax-responsibility kernel of sample i's segment s.
    pub labels: Vec<Vec<usize>>,
}

/// Samples segmentations under a frozen (θ, β, α) model and labels every
/// segment with its most responsible kernel.
pub fn segment(data: &Dataset, state: &ModelState, hp: &Hyperparams) -> Result<Vec<SegmentOutput>> {
    hp.validate()?;
    if state.m() != hp.m {
        return Err(Error::shape(format!(
            "state has {} kernels but hyperparams say m = {}",
            state.m(),
            hp.m
        )));
    }
    let report = validate_dataset(data);
    if !report.is_ok() {
        return Err(Error::Validation(report));
    }
    let working = if hp.standardize { data.standardized() } else { data.clone() };

    let mut sampler = SegmentSampler::init(&working, hp)?;
    let samples = sampler.sample(&working, state, hp)?;
    let resp = update_responsibilities(&working, &samples, state)?;
    let l = samples.len();

    let mut outputs = Vec::with_capacity(working.len());
    for (d, seq) in working.sequences.iter().enumerate() {
        let mut marginal = vec![0.0; seq.len()];
        for sample in &samples {
            for (i, &split) in sample[d].c.iter().enumerate() {
                if split {
                    marginal[i] += 1.0;
                }
            }
        }
        for p in &mut marginal {
            *p /= l as f64;
        }
        let samples_d: Vec<Segmentation> = samples.iter().map(|s| s[d].clone()).collect();
        let labels: Vec<Vec<usize>> = (0..l)
            .map(|i| {
                resp.r[i][d]
                    .iter()
                    .map(|probs| {
                        probs
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map(|(m, _)| m)
                            .expect("nonempty kernel pool")
                    })
                    .collect()
            })
            .collect();
        outputs.push(SegmentOutput {
            seq_id: seq.id.clone(),
            marginal_split_prob: marginal,
            samples: samples_d,
            labels,
        });
    }
    Ok(outputs)
}

/// Symmetric relative distance between two kernels in log-parameter space.
pub fn kernel_distance(a: &KernelParams, b: &KernelParams) -> f64 {
    (a.amp2 / b.amp2).ln().abs() + (a.ls2 / b.ls2).ln().abs()
}

/// Greedy assignment of learned kernels to reference kernels, closest pair
/// first. Returns, per reference kernel, the matched learned index and the
/// distance (None once one side runs out).
pub fn match_kernels(
    learned: &[KernelParams],
    reference: &[KernelParams],
) -> Vec<Option<(usize, f64)>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, k) in learned.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            pairs.push((kernel_distance(k, r), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used_learned = vec![false; learned.len()];
    let mut out: Vec<Option<(usize, f64)>> = vec![None; reference.len()];
    for (d, i, j) in pairs {
        if !used_learned[i] && out[j].is_none() {
            used_learned[i] = true;
            out[j] = Some((i, d));
        }
    }
    out
}
