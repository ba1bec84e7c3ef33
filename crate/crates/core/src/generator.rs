//! Synthetic datasets drawn from the generative model.
//!
//! Each sequence lives on a uniform grid of step `dt`. A segmentation is
//! either sampled (lengths i.i.d. Exp(λ) until the horizon is covered, the
//! last segment truncated) or fixed explicitly; every segment gets a kernel
//! label and an independent draw from N(0, K_θ + βI) over its grid points.
//! Sequences are generated in parallel, each from its own rng stream seeded
//! `seed + 1 + ordinal`, so output does not depend on thread count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::gp_sample;
use crate::model::{Dataset, KernelParams, Sequence};

fn default_dt() -> f64 {
    0.1
}

/// One explicitly placed segment: its length in x-units and its kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedSegment {
    pub length: f64,
    pub label: usize,
}

/// Per-sequence request: either a horizon to fill with sampled segments, or
/// an explicit segment list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub id: String,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub segments: Option<Vec<FixedSegment>>,
}

/// Full generator configuration; serializable so experiment setups can be
/// committed as JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Uniform grid step in x-units.
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub beta: f64,
    /// Rate of the Exp prior on sampled segment lengths.
    pub lambda: f64,
    pub kernels: Vec<KernelParams>,
    /// Explicit mixing weights; mutually exclusive with `alpha0`.
    #[serde(default)]
    pub pi: Option<Vec<f64>>,
    /// Draw π once from a symmetric Dirichlet; mutually exclusive with `pi`.
    #[serde(default)]
    pub alpha0: Option<f64>,
    pub seed: u64,
    pub sequences: Vec<SequenceSpec>,
}

impl GeneratorSpec {
    /// Checks every constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.kernels.is_empty() {
            return Err(Error::invalid("kernels must be nonempty"));
        }
        for (m, k) in self.kernels.iter().enumerate() {
            if !(k.amp2 > 0.0 && k.amp2.is_finite()) {
                return Err(Error::invalid(format!("kernels[{m}].amp2 must be positive")));
            }
            if !(k.ls2 > 0.0 && k.ls2.is_finite()) {
                return Err(Error::invalid(format!("kernels[{m}].ls2 must be positive")));
            }
        }
        match (&self.pi, self.alpha0) {
            (Some(pi), None) => {
                if pi.len() != self.kernels.len() {
                    return Err(Error::invalid(format!(
                        "pi has {} entries for {} kernels",
                        pi.len(),
                        self.kernels.len()
                    )));
                }
                if pi.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                    return Err(Error::invalid("pi entries must be nonnegative"));
                }
                let total: f64 = pi.iter().sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(Error::invalid(format!("pi must sum to 1, got {total}")));
                }
            }
            (None, Some(a0)) => {
                if !(a0 > 0.0 && a0.is_finite()) {
                    return Err(Error::invalid(format!("alpha0 must be positive, got {a0}")));
                }
            }
            (Some(_), Some(_)) => {
                return Err(Error::invalid("pi and alpha0 are mutually exclusive"));
            }
            (None, None) => {
                return Err(Error::invalid("one of pi or alpha0 is required"));
            }
        }
        if self.sequences.is_empty() {
            return Err(Error::invalid("sequences must be nonempty"));
        }
        for (d, sq) in self.sequences.iter().enumerate() {
            match (&sq.horizon, &sq.segments) {
                (Some(h), None) => {
                    if !(h > &0.0 && h.is_finite()) || *h < self.dt {
                        return Err(Error::invalid(format!(
                            "sequences[{d}].horizon must be at least dt, got {h}"
                        )));
                    }
                }
                (None, Some(segments)) => {
                    if segments.is_empty() {
                        return Err(Error::invalid(format!(
                            "sequences[{d}].segments must be nonempty"
                        )));
                    }
                    for (s, seg) in segments.iter().enumerate() {
                        if !(seg.length > 0.0 && seg.length.is_finite()) {
                            return Err(Error::invalid(format!(
                                "sequences[{d}].segments[{s}].length must be positive"
                            )));
                        }
                        if seg.label >= self.kernels.len() {
                            return Err(Error::invalid(format!(
                                "sequences[{d}].segments[{s}].label {} out of range for {} kernels",
                                seg.label,
                                self.kernels.len()
                            )));
                        }
                    }
                }
                _ => {
                    return Err(Error::invalid(format!(
                        "sequences[{d}] needs exactly one of horizon or segments"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// What actually generated one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seq_id: String,
    /// Segment start indices, beginning with 0.
    pub boundaries: Vec<usize>,
    /// Kernel label per segment.
    pub labels: Vec<usize>,
    pub kernels: Vec<KernelParams>,
    pub beta: f64,
}

fn grid(horizon: f64, dt: f64) -> Vec<f64> {
    let n = ((horizon / dt).round() as usize).max(1);
    (0..n).map(|i| i as f64 * dt).collect()
}

/// Segment start indices from i.i.d. Exp(lambda) lengths rounded onto the
/// grid; boundaries that collide after rounding are merged.
pub(crate) fn sample_boundaries(
    horizon: f64,
    dt: f64,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = ((horizon / dt).round() as usize).max(1);
    let exp = Exp::new(lambda).expect("validated lambda");
    let mut starts = vec![0usize];
    let mut cum: f64 = rng.sample(exp);
    while cum < horizon {
        let idx = (cum / dt).ceil() as usize;
        if idx >= n {
            break;
        }
        if *starts.last().expect("nonempty") != idx {
            starts.push(idx);
        }
        cum += rng.sample(exp);
    }
    starts
}

fn fixed_boundaries(segments: &[FixedSegment], dt: f64, seq_name: &str) -> Result<Vec<usize>> {
    let total: f64 = segments.iter().map(|s| s.length).sum();
    let n = ((total / dt).round() as usize).max(1);
    let mut starts = vec![0usize];
    let mut cum = 0.0;
    for (s, seg) in segments.iter().enumerate().take(segments.len() - 1) {
        cum += seg.length;
        let idx = (cum / dt).ceil() as usize;
        if idx >= n || idx == *starts.last().expect("nonempty") {
            return Err(Error::invalid(format!(
                "{seq_name}: segment {s} of length {} collapses to zero grid points at dt {dt}",
                seg.length
            )));
        }
        starts.push(idx);
    }
    Ok(starts)
}

fn draw_label(pi: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (m, &p) in pi.iter().enumerate() {
        cum += p;
        if u < cum {
            return m;
        }
    }
    pi.len() - 1
}

fn generate_sequence(
    sq: &SequenceSpec,
    spec: &GeneratorSpec,
    pi: &[f64],
    seed: u64,
) -> Result<(Sequence, GroundTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, boundaries, labels) = match (sq.horizon, &sq.segments) {
        (Some(horizon), None) => {
            let x = grid(horizon, spec.dt);
            let boundaries = sample_boundaries(horizon, spec.dt, spec.lambda, &mut rng);
            let labels: Vec<usize> =
                (0..boundaries.len()).map(|_| draw_label(pi, &mut rng)).collect();
            (x, boundaries, labels)
        }
        (None, Some(segments)) => {
            let total: f64 = segments.iter().map(|s| s.length).sum();
            let x = grid(total, spec.dt);
            let boundaries = fixed_boundaries(segments, spec.dt, &sq.id)?;
            let labels = segments.iter().map(|s| s.label).collect();
            (x, boundaries, labels)
        }
        _ => return Err(Error::invalid(format!("sequence '{}' is underspecified", sq.id))),
    };

    let n = x.len();
    let mut y = Vec::with_capacity(n);
    for (s, &start) in boundaries.iter().enumerate() {
        let end = boundaries.get(s + 1).copied().unwrap_or(n);
        let eps: Vec<f64> = (0..end - start).map(|_| rng.sample(StandardNormal)).collect();
        y.extend(gp_sample(&x[start..end], &spec.kernels[labels[s]], spec.beta, &eps)?);
    }

    Ok((
        Sequence { id: sq.id.clone(), x, y },
        GroundTruth {
            seq_id: sq.id.clone(),
            boundaries,
            labels,
            kernels: spec.kernels.clone(),
            beta: spec.beta,
        },
    ))
}

fn resolve_pi(spec: &GeneratorSpec) -> Vec<f64> {
    match (&spec.pi, spec.alpha0) {
        (Some(pi), _) => {
            let total: f64 = pi.iter().sum();
            pi.iter().map(|p| p / total).collect()
        }
        (None, Some(a0)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let gamma = Gamma::new(a0, 1.0).expect("validated alpha0");
            let draws: Vec<f64> = (0..spec.kernels.len()).map(|_| rng.sample(gamma)).collect();
            let total: f64 = draws.iter().sum();
            if total <= 0.0 {
                // All gammas underflowed (tiny alpha0); fall back to uniform.
                return vec![1.0 / spec.kernels.len() as f64; spec.kernels.len()];
            }
            draws.into_iter().map(|g| g / total).collect()
        }
        (None, None) => unreachable!("validated spec"),
    }
}

/// Draws a dataset and its ground truth from the generative model.
pub fn sample_dataset(spec: &GeneratorSpec) -> Result<(Dataset, Vec<GroundTruth>)> {
    spec.validate()?;
    let pi = resolve_pi(spec);

    let results: Vec<Result<(Sequence, GroundTruth)>> = spec
        .sequences
        .par_iter()
        .enumerate()
        .map(|(d, sq)| generate_sequence(sq, spec, &pi, spec.seed.wrapping_add(1 + d as u64)))
        .collect();

    let mut sequences = Vec::with_capacity(results.len());
    let mut truths = Vec::with_capacity(results.len());
    for r in results {
        let (seq, truth) = r?;
        sequences.push(seq);
        truths.push(truth);
    }
    Ok((Dataset { sequences }, truths))
}

/// Generates sequences with explicitly given segment boundaries and labels
/// (the deterministic-segmentation counterpart of `sample_dataset`).
pub fn fixed_segmentation_dataset(
    sequences: Vec<(String, Vec<FixedSegment>)>,
    dt: f64,
    kernels: Vec<KernelParams>,
    beta: f64,
    seed: u64,
) -> Result<(Dataset, Vec<GroundTruth>)> {
    let m = kernels.len().max(1);
    let spec = GeneratorSpec {
        dt,
        beta,
        lambda: 1.0,
        kernels,
        pi: Some(vec![1.0 / m as f64; m]),
        alpha0: None,
        seed,
        sequences: sequences
            .into_iter()
            .map(|(id, segments)| SequenceSpec { id, horizon: None, segments: Some(segments) })
            .collect(),
    };
    sample_dataset(&spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            dt: 0.1,
            beta: 0.001,
            lambda: 0.25,
            kernels: vec![
                KernelParams { amp2: 0.01, ls2: 0.1 },
                KernelParams { amp2: 0.05, ls2: 0.05 },
                KernelParams { amp2: 0.05, ls2: 0.005 },
            ],
            pi: Some(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            alpha0: None,
            seed,
            sequences: vec![
                SequenceSpec { id: "seq-1".into(), horizon: Some(30.0), segments: None },
                SequenceSpec { id: "seq-2".into(), horizon: Some(16.0), segments: None },
                SequenceSpec { id: "seq-3".into(), horizon: Some(20.0), segments: None },
            ],
        }
    }

    #[test]
    fn three_sequence_regime_has_expected_shape() {
        let spec = table1_spec(42);
        let (data, truths) = sample_dataset(&spec).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!(data.sequences[0].len(), 300);
        assert_eq!(data.sequences[1].len(), 160);
        assert_eq!(data.sequences[2].len(), 200);
        for (seq, truth) in data.sequences.iter().zip(&truths) {
            assert_eq!(seq.id, truth.seq_id);
            assert_eq!(truth.boundaries[0], 0);
            assert!(truth.boundaries.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(truth.boundaries.len(), truth.labels.len());
            assert!(truth.labels.iter().all(|&l| l < 3));
            assert!(seq.y.iter().all(|v| v.is_finite()));
        }
        assert!(crate::model::validate_dataset(&data).is_ok());
    }

    #[test]
    fn generation_is_deterministic_across_thread_counts() {
        let spec = table1_spec(7);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| sample_dataset(&spec).unwrap())
        };
        let (d1, t1) = run(1);
        let (d2, t2) = run(4);
        assert_eq!(d1, d2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn tiny_lambda_yields_single_segment() {
        let mut spec = table1_spec(3);
        spec.lambda = 1e-9;
        let (_, truths) = sample_dataset(&spec).unwrap();
        for t in truths {
            assert_eq!(t.boundaries, vec![0]);
            assert_eq!(t.labels.len(), 1);
        }
    }

    #[test]
    fn sampled_segment_lengths_have_prior_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let lambda = 0.25;
        let dt = 0.05;
        let horizon = 2000.0;
        let mut lengths = Vec::new();
        for _ in 0..20 {
            let starts = sample_boundaries(horizon, dt, lambda, &mut rng);
            // Interior lengths only; the final segment is truncated by the
            // horizon.
            for w in starts.windows(2) {
                lengths.push((w[1] - w[0]) as f64 * dt);
            }
        }
        assert!(lengths.len() > 8000, "only {} segments drawn", lengths.len());
        let mean: f64 = lengths.iter().sum::<f64>() / lengths.len() as f64;
        let var: f64 =
            lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (lengths.len() - 1) as f64;
        let se = (var / lengths.len() as f64).sqrt();
        let target = 1.0 / lambda;
        assert!(
            (mean - target).abs() < 3.0 * se + dt,
            "mean {mean} vs {target} (se {se})"
        );
    }

    #[test]
    fn fixed_segments_place_boundaries_exactly() {
        let segments: Vec<FixedSegment> =
            (0..15).map(|_| FixedSegment { length: 2.0, label: 0 }).collect();
        let (data, truths) = fixed_segmentation_dataset(
            vec![("edge".into(), segments)],
            0.1,
            vec![KernelParams { amp2: 0.1, ls2: 0.4 }],
            0.001,
            11,
        )
        .unwrap();
        assert_eq!(data.sequences[0].len(), 300);
        let expected: Vec<usize> = (0..15).map(|k| 20 * k).collect();
        assert_eq!(truths[0].boundaries, expected);
        assert_eq!(truths[0].labels, vec![0; 15]);

        let (data1, truths1) = fixed_segmentation_dataset(
            vec![("edge1".into(), vec![FixedSegment { length: 30.0, label: 0 }])],
            0.1,
            vec![KernelParams { amp2: 0.1, ls2: 0.4 }],
            0.001,
            11,
        )
        .unwrap();
        assert_eq!(data1.sequences[0].len(), 300);
        assert_eq!(truths1[0].boundaries, vec![0]);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut spec = table1_spec(1);
        spec.lambda = -0.25;
        assert!(sample_dataset(&spec).unwrap_err().to_string().contains("lambda"));

        let mut spec = table1_spec(1);
        spec.pi = Some(vec![0.5, 0.5]);
        assert!(sample_dataset(&spec).unwrap_err().to_string().contains("pi"));

        let mut spec = table1_spec(1);
        spec.pi = None;
        assert!(sample_dataset(&spec).unwrap_err().to_string().contains("pi"));

        let mut spec = table1_spec(1);
        spec.sequences[0].segments = Some(vec![FixedSegment { length: 2.0, label: 0 }]);
        let err = sample_dataset(&spec).unwrap_err().to_string();
        assert!(err.contains("sequences[0]"), "{err}");

        let zero_len = fixed_segmentation_dataset(
            vec![(
                "z".into(),
                vec![
                    FixedSegment { length: 2.0, label: 0 },
                    FixedSegment { length: 0.0, label: 0 },
                ],
            )],
            0.1,
            vec![KernelParams { amp2: 0.1, ls2: 0.4 }],
            0.001,
            0,
        );
        assert!(zero_len.is_err());

        let bad_label = fixed_segmentation_dataset(
            vec![("b".into(), vec![FixedSegment { length: 2.0, label: 3 }])],
            0.1,
            vec![KernelParams { amp2: 0.1, ls2: 0.4 }],
            0.001,
            0,
        );
        assert!(bad_label.unwrap_err().to_string().contains("label"));
    }

    #[test]
    fn dirichlet_mixing_weights_are_reproducible() {
        let mut spec = table1_spec(5);
        spec.pi = None;
        spec.alpha0 = Some(0.5);
        let (d1, _) = sample_dataset(&spec).unwrap();
        let (d2, _) = sample_dataset(&spec).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn one_point_marginal_variance_matches_model() {
        // y[0] across replicate sequences is i.i.d. N(0, a² + β).
        let k = KernelParams { amp2: 0.05, ls2: 0.005 };
        let beta = 0.001;
        let reps = 500;
        let sequences: Vec<(String, Vec<FixedSegment>)> = (0..reps)
            .map(|i| (format!("r{i}"), vec![FixedSegment { length: 1.0, label: 0 }]))
            .collect();
        let (data, _) =
            fixed_segmentation_dataset(sequences, 0.1, vec![k], beta, 123).unwrap();
        let first: Vec<f64> = data.sequences.iter().map(|s| s.y[0]).collect();
        let mean: f64 = first.iter().sum::<f64>() / reps as f64;
        let var: f64 =
            first.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let target = k.amp2 + beta;
        let se = target * (2.0 / (reps - 1) as f64).sqrt();
        assert!((var - target).abs() < 4.0 * se, "variance {var} vs {target} (se {se})");
    }
}
