//! Domain types for the segmentation model.
//!
//! A dataset is a set of 1-D sequences observed on strictly increasing time
//! grids. A segmentation of a sequence is a binary split vector `c` where
//! `c[i] = true` marks the first point of a new segment; `c[0]` is always a
//! split. Segment lengths are measured in x-units and carry an exponential
//! prior with rate `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationReport};
use crate::math::median_step;
use crate::vem::Responsibilities;

/// One observed sequence: a strictly increasing time grid `x` and values `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Median grid step, used as the trailing length of the final segment.
    /// Defined as 1.0 for single-point sequences.
    pub fn median_dx(&self) -> f64 {
        median_step(&self.x)
    }
}

/// A collection of sequences sharing one kernel pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Z-scores all values against the pooled mean and standard deviation of
    /// the whole dataset, leaving time grids untouched. A degenerate dataset
    /// (fewer than two points, or zero variance) is returned unchanged.
    pub fn standardized(&self) -> Dataset {
        let n: usize = self.sequences.iter().map(|s| s.y.len()).sum();
        if n < 2 {
            return self.clone();
        }
        let mean = self.sequences.iter().flat_map(|s| &s.y).sum::<f64>() / n as f64;
        let var = self
            .sequences
            .iter()
            .flat_map(|s| &s.y)
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        if var <= 0.0 {
            return self.clone();
        }
        let sd = var.sqrt();
        Dataset {
            sequences: self
                .sequences
                .iter()
                .map(|s| Sequence {
                    id: s.id.clone(),
                    x: s.x.clone(),
                    y: s.y.iter().map(|v| (v - mean) / sd).collect(),
                })
                .collect(),
        }
    }
}

/// Length in x-units of the segment covering grid indices `[start, end)`.
///
/// Interior segments reach to the next segment's first point:
/// `x[end] - x[start]`. The final segment has no successor, so its length is
/// `x[n-1] - x[start]` plus the sequence's median grid step. Under this
/// convention merging two adjacent segments adds their lengths.
pub fn segment_length(x: &[f64], median_dx: f64, start: usize, end: usize) -> f64 {
    if end < x.len() {
        x[end] - x[start]
    } else {
        x[x.len() - 1] - x[start] + median_dx
    }
}

/// Binary split vector for one sequence, with derived segment ranges and
/// lengths fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub seq_id: String,
    pub c: Vec<bool>,
    lengths: Vec<f64>,
}

impl Segmentation {
    /// Builds a segmentation from a split vector, checking it against the
    /// sequence it describes.
    pub fn new(seq: &Sequence, c: Vec<bool>) -> Result<Self> {
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
        let median_dx = seq.median_dx();
        let lengths = split_ranges(&c)
            .into_iter()
            .map(|(s, e)| segment_length(&seq.x, median_dx, s, e))
            .collect();
        Ok(Segmentation { seq_id: seq.id.clone(), c, lengths })
    }

    /// Builds a segmentation whose segments start at the given sorted grid
    /// indices (index 0 is implied and may be omitted).
    pub fn from_starts(seq: &Sequence, starts: &[usize]) -> Result<Self> {
        let mut c = vec![false; seq.len()];
        if !c.is_empty() {
            c[0] = true;
        }
        for &s in starts {
            if s >= seq.len() {
                return Err(Error::invalid(format!(
                    "segment start {} out of range for sequence '{}' of length {}",
                    s,
                    seq.id,
                    seq.len()
                )));
            }
            c[s] = true;
        }
        Segmentation::new(seq, c)
    }

    /// Half-open index ranges `[start, end)` of the segments, in order.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        split_ranges(&self.c)
    }

    /// Segment lengths in x-units, in segment order.
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn num_segments(&self) -> usize {
        self.c.iter().filter(|&&b| b).count()
    }

    /// Grid indices where segments start (always begins with 0).
    pub fn start_indices(&self) -> Vec<usize> {
        self.c
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Half-open `[start, end)` ranges delimited by the true entries of a split
/// vector.
pub fn split_ranges(c: &[bool]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::new();
    let mut start = 0usize;
    for i in 1..c.len() {
        if c[i] {
            ranges.push((start, i));
            start = i;
        }
    }
    if !c.is_empty() {
        ranges.push((start, c.len()));
    }
    ranges
}

/// Squared-exponential kernel parameters: signal variance `amp2` (a²) and
/// squared length-scale `ls2` (l²), both in the data's units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub amp2: f64,
    pub ls2: f64,
}

impl KernelParams {
    pub fn new(amp2: f64, ls2: f64) -> Result<Self> {
        if !(amp2 > 0.0 && amp2.is_finite()) || !(ls2 > 0.0 && ls2.is_finite()) {
            return Err(Error::invalid(format!(
                "kernel parameters must be positive and finite, got amp2={amp2}, ls2={ls2}"
            )));
        }
        Ok(KernelParams { amp2, ls2 })
    }
}

/// Log-normal prior on a positive scalar: `ln v ~ N(mu, sigma²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    pub mu: f64,
    pub sigma: f64,
}

/// Controls for the split sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    /// Number of retained segmentation samples (L).
    pub num_samples: usize,
    /// Discarded sweeps before the first retained sample of the first round.
    pub burn_in: usize,
    /// Sweeps between retained samples.
    pub thinning: usize,
    /// Re-equilibration sweeps at the start of every round after the first,
    /// where chains continue from their previous state.
    pub sweeps_per_round: usize,
}

/// Controls for the gradient-ascent parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub max_iters: usize,
    /// Initial step size for backtracking line search.
    pub step_size: f64,
    /// Stop when the log-parameter gradient norm falls below this.
    pub grad_tol: f64,
}

/// Controls for the outer sampling / EM loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub max_rounds: usize,
    /// Stop when the objective's relative change over a round falls below this.
    pub elbo_rel_tol: f64,
}

fn default_active_threshold() -> f64 {
    0.05
}

fn default_estep_inner_repeats() -> usize {
    3
}

fn default_vem_max_cycles() -> usize {
    3
}

/// All fixed hyperparameters of the model and its inference controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Rate of the exponential prior on segment lengths.
    pub lambda: f64,
    /// Symmetric Dirichlet concentration of the prior on mixing weights.
    pub alpha0: f64,
    /// Kernel pool size (M).
    pub m: usize,
    pub lognormal_amp: LogNormalPrior,
    pub lognormal_ls: LogNormalPrior,
    pub lognormal_noise: LogNormalPrior,
    pub gibbs: GibbsConfig,
    pub mstep: MStepConfig,
    pub outer: OuterConfig,
    pub seed: u64,
    /// Expected mixing weight above which a kernel counts as active.
    #[serde(default = "default_active_threshold")]
    pub active_threshold: f64,
    /// Passes of (q(Z), q(π)) updates per EM cycle.
    #[serde(default = "default_estep_inner_repeats")]
    pub estep_inner_repeats: usize,
    /// EM cycles (E steps + M step) per outer round.
    #[serde(default = "default_vem_max_cycles")]
    pub vem_max_cycles: usize,
    /// Z-score all values against pooled dataset statistics before fitting.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lambda: 0.25,
            alpha0: 0.1,
            m: 5,
            lognormal_amp: LogNormalPrior { mu: (0.05f64).ln(), sigma: 1.0 },
            lognormal_ls: LogNormalPrior { mu: (0.05f64).ln(), sigma: 1.0 },
            lognormal_noise: LogNormalPrior { mu: (0.01f64).ln(), sigma: 1.0 },
            gibbs: GibbsConfig { num_samples: 100, burn_in: 50, thinning: 2, sweeps_per_round: 50 },
            mstep: MStepConfig { max_iters: 200, step_size: 0.1, grad_tol: 1e-5 },
            outer: OuterConfig { max_rounds: 30, elbo_rel_tol: 1e-4 },
            seed: 0,
            active_threshold: default_active_threshold(),
            estep_inner_repeats: default_estep_inner_repeats(),
            vem_max_cycles: default_vem_max_cycles(),
            standardize: false,
        }
    }
}

impl Hyperparams {
    /// Checks every positivity and sanity constraint, naming the first field
    /// that fails.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("alpha0", self.alpha0),
            ("lognormal_amp.sigma", self.lognormal_amp.sigma),
            ("lognormal_ls.sigma", self.lognormal_ls.sigma),
            ("lognormal_noise.sigma", self.lognormal_noise.sigma),
            ("mstep.step_size", self.mstep.step_size),
            ("mstep.grad_tol", self.mstep.grad_tol),
            ("outer.elbo_rel_tol", self.outer.elbo_rel_tol),
            ("active_threshold", self.active_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lognormal_amp.mu", self.lognormal_amp.mu),
            ("lognormal_ls.mu", self.lognormal_ls.mu),
            ("lognormal_noise.mu", self.lognormal_noise.mu),
        ] {
            if !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite, got {v}")));
            }
        }
        if self.m < 1 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.gibbs.num_samples < 1 {
            return Err(Error::invalid("gibbs.num_samples must be at least 1"));
        }
        if self.gibbs.thinning < 1 {
            return Err(Error::invalid("gibbs.thinning must be at least 1"));
        }
        if self.mstep.max_iters < 1 {
            return Err(Error::invalid("mstep.max_iters must be at least 1"));
        }
        if self.outer.max_rounds < 1 {
            return Err(Error::invalid("outer.max_rounds must be at least 1"));
        }
        if self.vem_max_cycles < 1 {
            return Err(Error::invalid("vem_max_cycles must be at least 1"));
        }
        if self.estep_inner_repeats < 1 {
            return Err(Error::invalid("estep_inner_repeats must be at least 1"));
        }
        Ok(())
    }
}

/// Kernel pool, shared noise, the Dirichlet posterior over mixing weights,
/// and the retained posterior samples from the most recent round.
#[derive(Debug, Clone, Default)]
pub struct ModelState {
    pub kernels: Vec<KernelParams>,
    pub beta: f64,
    /// Dirichlet parameters of q(π).
    pub alpha: Vec<f64>,
    /// Per retained sample, per sequence, per segment: a length-M probability
    /// vector over kernels. Populated by the EM pass.
    pub responsibilities: Option<Responsibilities>,
    /// Retained segmentation samples, indexed `[sample][sequence]`.
    pub samples: Vec<Vec<Segmentation>>,
}

impl ModelState {
    pub fn new(kernels: Vec<KernelParams>, beta: f64, alpha: Vec<f64>) -> Result<Self> {
        if kernels.len() != alpha.len() {
            return Err(Error::shape(format!(
                "{} kernels but {} Dirichlet parameters",
                kernels.len(),
                alpha.len()
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        if alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("alpha entries must be positive"));
        }
        Ok(ModelState { kernels, beta, alpha, responsibilities: None, samples: Vec::new() })
    }

    pub fn m(&self) -> usize {
        self.kernels.len()
    }

    /// E[π] under q(π): normalized Dirichlet parameters.
    pub fn expected_pi(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        self.alpha.iter().map(|a| a / total).collect()
    }

    /// Indices of kernels whose expected mixing weight exceeds `threshold`.
    pub fn active_kernels(&self, threshold: f64) -> Vec<usize> {
        self.expected_pi()
            .iter()
            .enumerate()
            .filter_map(|(m, &p)| (p > threshold).then_some(m))
            .collect()
    }
}

/// Log-density of Exp(lambda) at length `l`: `ln λ − λ·l`.
pub fn length_log_prior(l: f64, lambda: f64) -> Result<f64> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::invalid(format!("segment length must be positive, got {l}")));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    Ok(lambda.ln() - lambda * l)
}

/// Log prior of a whole segmentation: the sum of `length_log_prior` over its
/// segments.
pub fn segmentation_log_prior(seg: &Segmentation, lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for &l in seg.lengths() {
        total += length_log_prior(l, lambda)?;
    }
    Ok(total)
}

/// Checks every sequence against its invariants and reports all violations
/// found rather than stopping at the first.
pub fn validate_dataset(data: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if data.sequences.is_empty() {
        report.push("", None, "dataset has no sequences");
        return report;
    }
    let mut seen = std::collections::HashSet::new();
    for seq in &data.sequences {
        if !seen.insert(seq.id.as_str()) {
            report.push(&seq.id, None, "duplicate sequence id");
        }
        if seq.x.is_empty() {
            report.push(&seq.id, None, "sequence has no points");
            continue;
        }
        if seq.x.len() != seq.y.len() {
            report.push(
                &seq.id,
                None,
                format!("x has {} points but y has {}", seq.x.len(), seq.y.len()),
            );
        }
        for (i, &v) in seq.x.iter().enumerate() {
            if !v.is_finite() {
                report.push(&seq.id, Some(i), format!("non-finite timestamp {v}"));
            }
        }
        for (i, w) in seq.x.windows(2).enumerate() {
            if w[1] <= w[0] {
                let what = if w[1] == w[0] { "duplicate timestamp" } else { "decreasing timestamp" };
                report.push(&seq.id, Some(i + 1), what);
            }
        }
        for (i, &v) in seq.y.iter().enumerate() {
            if !v.is_finite() {
                report.push(&seq.id, Some(i), format!("non-finite value {v}"));
            }
        }
    }
    report
}
