//! Gibbs sampling over split indicators.
//!
//! The split vector of a sequence is resampled one site at a time. Flipping
//! site i only changes the two segments adjacent to i, so the conditional
//! compares two unnormalized log-masses:
//!
//!   merged: ln p̃(Y_{a∪b}) + ln p(l_a + l_b)
//!   split:  ln p̃(Y_a) + ln p̃(Y_b) + ln p(l_a) + ln p(l_b)
//!
//! where p̃ is the kernel-marginalized segment likelihood
//! p̃(Y_s) = Σ_m p(Y_s | θ_m, β) · E_{q(π)}[π_m], with E[π_m] = α_m / Σα.
//! Within one sampling round q(π) is frozen, which keeps the per-sequence
//! chains independent and lets them run in parallel.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{segment_log_marginal, MarginalCache, SegmentView};
use crate::math::{logsumexp, sigmoid};
use crate::model::{
    length_log_prior, segment_length, Dataset, Hyperparams, ModelState, Segmentation, Sequence,
};

/// ln p̃(Y_s) for one segment: the log of the q(π)-weighted mixture of
/// per-kernel marginal likelihoods.
pub fn approx_segment_marginal(seg: &SegmentView, state: &ModelState) -> Result<f64> {
    let ln_epi = ln_expected_pi(state);
    let mut terms = Vec::with_capacity(state.m());
    for (m, params) in state.kernels.iter().enumerate() {
        terms.push(segment_log_marginal(seg, params, state.beta)? + ln_epi[m]);
    }
    Ok(logsumexp(&terms))
}

fn ln_expected_pi(state: &ModelState) -> Vec<f64> {
    state.expected_pi().iter().map(|p| p.ln()).collect()
}

/// Probability of the split case given the two unnormalized log-masses.
pub fn split_probability(log_mass_merged: f64, log_mass_split: f64) -> f64 {
    sigmoid(log_mass_split - log_mass_merged)
}

/// Per-sequence sweep machinery sharing one marginal cache.
struct SweepEngine<'a> {
    seq: &'a Sequence,
    seq_ord: usize,
    state: &'a ModelState,
    ln_epi: Vec<f64>,
    lambda: f64,
    median_dx: f64,
    cache: &'a MarginalCache,
}

impl<'a> SweepEngine<'a> {
    fn new(
        seq: &'a Sequence,
        seq_ord: usize,
        state: &'a ModelState,
        lambda: f64,
        cache: &'a MarginalCache,
    ) -> Self {
        SweepEngine {
            seq,
            seq_ord,
            state,
            ln_epi: ln_expected_pi(state),
            lambda,
            median_dx: seq.median_dx(),
            cache,
        }
    }

    /// ln p̃ + length log-prior of the segment `[start, end)`.
    fn segment_mass(&self, start: usize, end: usize) -> Result<f64> {
        let seg = SegmentView::new(&self.seq.x[start..end], &self.seq.y[start..end])?;
        let mut terms = Vec::with_capacity(self.state.m());
        for (m, params) in self.state.kernels.iter().enumerate() {
            let ll =
                self.cache.ln_marginal(self.seq_ord, start, end, &seg, m, params, self.state.beta)?;
            terms.push(ll + self.ln_epi[m]);
        }
        let l = segment_length(&self.seq.x, self.median_dx, start, end);
        Ok(logsumexp(&terms) + length_log_prior(l, self.lambda)?)
    }

    /// The two unnormalized log-masses at site i: (merged, split). Segment
    /// boundaries come from the splits around i; the value of c[i] itself
    /// does not enter.
    fn log_masses(&self, c: &[bool], i: usize) -> Result<(f64, f64)> {
        let prev = (0..i).rev().find(|&j| c[j]).expect("c[0] is always a split");
        let next = (i + 1..c.len()).find(|&j| c[j]).unwrap_or(c.len());
        let merged = self.segment_mass(prev, next)?;
        let split = self.segment_mass(prev, i)? + self.segment_mass(i, next)?;
        Ok((merged, split))
    }

    fn conditional(&self, c: &[bool], i: usize) -> Result<f64> {
        let (merged, split) = self.log_masses(c, i)?;
        Ok(split_probability(merged, split))
    }

    /// One full sweep: every site in 1..N once, in a fresh random order.
    fn sweep(&self, c: &mut [bool], rng: &mut ChaCha8Rng) -> Result<()> {
        let n = c.len();
        if n < 2 {
            return Ok(());
        }
        let mut order: Vec<usize> = (1..n).collect();
        order.shuffle(rng);
        for i in order {
            let p = self.conditional(c, i)?;
            c[i] = rng.random::<f64>() < p;
        }
        Ok(())
    }
}

fn check_split_vector(seq: &Sequence, c: &[bool]) -> Result<()> {
    if c.len() != seq.len() {
        return Err(Error::shape(format!(
            "split vector length {} != sequence '{}' length {}",
            c.len(),
            seq.id,
            seq.len()
        )));
    }
    if !c.first().copied().unwrap_or(false) {
        return Err(Error::invalid("c[0] must be a split"));
    }
    Ok(())
}

/// Conditional probability that site i is a split, given the rest of `c`.
pub fn split_conditional(
    seq: &Sequence,
    c: &[bool],
    i: usize,
    state: &ModelState,
    lambda: f64,
) -> Result<f64> {
    check_split_vector(seq, c)?;
    if i == 0 || i >= c.len() {
        return Err(Error::invalid(format!(
            "site index {i} out of range 1..{} for sequence '{}'",
            c.len(),
            seq.id
        )));
    }
    let cache = MarginalCache::new();
    SweepEngine::new(seq, 0, state, lambda, &cache).conditional(c, i)
}

/// One Gibbs sweep over the split vector; returns the updated vector.
/// Deterministic given the rng state.
pub fn gibbs_sweep(
    seq: &Sequence,
    mut c: Vec<bool>,
    state: &ModelState,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    check_split_vector(seq, &c)?;
    let cache = MarginalCache::new();
    SweepEngine::new(seq, 0, state, lambda, &cache).sweep(&mut c, rng)?;
    Ok(c)
}

/// Draws an initial split vector by sampling segment lengths from the
/// Exp(lambda) prior and rounding the boundaries onto the grid.
pub fn draw_prior_splits(seq: &Sequence, lambda: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = seq.len();
    let mut c = vec![false; n];
    if n == 0 {
        return c;
    }
    c[0] = true;
    let exp = rand_distr::Exp::new(lambda).expect("validated lambda");
    let mut next_boundary = seq.x[0] + rng.sample(exp);
    for i in 1..n {
        if seq.x[i] >= next_boundary {
            c[i] = true;
            next_boundary = seq.x[i] + rng.sample(exp);
        }
    }
    c
}

/// Persistent per-sequence Gibbs chains.
///
/// The first call to `sample` discards `burn_in` sweeps; later calls warm-
/// start from the previous round's final state and discard
/// `sweeps_per_round` sweeps before collecting. Each chain owns an rng
/// stream seeded `seed + sequence ordinal`, so results do not depend on how
/// chains are scheduled across threads.
pub struct SegmentSampler {
    chains: Vec<Vec<bool>>,
    rngs: Vec<ChaCha8Rng>,
    rounds_run: usize,
}

impl SegmentSampler {
    pub fn init(data: &Dataset, hp: &Hyperparams) -> Result<Self> {
        if !(hp.lambda > 0.0 && hp.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", hp.lambda)));
        }
        let mut chains = Vec::with_capacity(data.len());
        let mut rngs = Vec::with_capacity(data.len());
        for (d, seq) in data.sequences.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(hp.seed.wrapping_add(d as u64));
            chains.push(draw_prior_splits(seq, hp.lambda, &mut rng));
            rngs.push(rng);
        }
        Ok(SegmentSampler { chains, rngs, rounds_run: 0 })
    }

    /// Runs all chains and returns L retained samples indexed
    /// `[sample][sequence]`.
    pub fn sample(
        &mut self,
        data: &Dataset,
        state: &ModelState,
        hp: &Hyperparams,
    ) -> Result<Vec<Vec<Segmentation>>> {
        let discard =
            if self.rounds_run == 0 { hp.gibbs.burn_in } else { hp.gibbs.sweeps_per_round };
        let l = hp.gibbs.num_samples;
        let cache = MarginalCache::new();

        let per_seq: Vec<Result<Vec<Segmentation>>> = data
            .sequences
            .par_iter()
            .zip(self.chains.par_iter_mut())
            .zip(self.rngs.par_iter_mut())
            .enumerate()
            .map(|(d, ((seq, c), rng))| {
                let engine = SweepEngine::new(seq, d, state, hp.lambda, &cache);
                for _ in 0..discard {
                    engine.sweep(c, rng)?;
                }
                let mut retained = Vec::with_capacity(l);
                for _ in 0..l {
                    for _ in 0..hp.gibbs.thinning {
                        engine.sweep(c, rng)?;
                    }
                    retained.push(Segmentation::new(seq, c.clone())?);
                }
                Ok(retained)
            })
            .collect();

        self.rounds_run += 1;

        let mut out: Vec<Vec<Segmentation>> = (0..l).map(|_| Vec::with_capacity(data.len())).collect();
        for per_sample in per_seq {
            for (i, seg) in per_sample?.into_iter().enumerate() {
                out[i].push(seg);
            }
        }
        Ok(out)
    }

    pub fn rounds_run(&self) -> usize {
        self.rounds_run
    }
}

/// Exact split posterior of one short sequence, by enumeration of all
/// 2^(N−1) split vectors.
#[derive(Debug, Clone)]
pub struct ExactPosterior {
    /// P(c_i = 1) for i in 1..N.
    pub marginal_split_prob: Vec<f64>,
    /// ln Σ_C exp(score(C)) over all split vectors.
    pub log_partition: f64,
}

pub fn enumerate_exact_posterior(
    seq: &Sequence,
    state: &ModelState,
    lambda: f64,
) -> Result<ExactPosterior> {
    let n = seq.len();
    if n == 0 {
        return Err(Error::invalid("cannot enumerate an empty sequence"));
    }
    if n > 12 {
        return Err(Error::invalid(format!(
            "enumeration over 2^{} split vectors refused (N={n} > 12)",
            n - 1
        )));
    }
    let cache = MarginalCache::new();
    let engine = SweepEngine::new(seq, 0, state, lambda, &cache);

    // Score every segment once; each split vector is then a sum of O(N)
    // precomputed terms.
    let mut mass = vec![vec![0.0f64; n + 1]; n];
    for start in 0..n {
        for end in start + 1..=n {
            mass[start][end] = engine.segment_mass(start, end)?;
        }
    }

    let count = 1usize << (n - 1);
    let mut scores = Vec::with_capacity(count);
    for bits in 0..count {
        let mut score = 0.0;
        let mut start = 0;
        for i in 1..n {
            if bits >> (i - 1) & 1 == 1 {
                score += mass[start][i];
                start = i;
            }
        }
        score += mass[start][n];
        scores.push(score);
    }
    let log_partition = logsumexp(&scores);

    let mut marginal = vec![0.0f64; n - 1];
    for (bits, score) in scores.iter().enumerate() {
        let w = (score - log_partition).exp();
        for (i, p) in marginal.iter_mut().enumerate() {
            if bits >> i & 1 == 1 {
                *p += w;
            }
        }
    }
    Ok(ExactPosterior { marginal_split_prob: marginal, log_partition })
}
