//! Sequence representations built from segmentation output: per-timestep
//! kernel labels, windowed label strings, and kernel-frequency vectors.

use crate::error::{Error, Result};
use crate::model::Segmentation;

/// Symbols for label strings; limits the kernel pool to 36 for string export.
const ALPHABET: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (m, &c) in counts.iter().enumerate() {
        // Strict comparison keeps the lowest index on ties.
        if c > counts[best] {
            best = m;
        }
    }
    best
}

/// Majority kernel label per timestep, across segmentation samples.
/// `labels[i][s]` is the kernel of sample i's segment s.
pub fn per_timestep_labels(
    samples: &[Segmentation],
    labels: &[Vec<usize>],
    m: usize,
) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::shape("no segmentation samples"));
    }
    let n = samples[0].c.len();
    if samples.iter().any(|s| s.c.len() != n) {
        return Err(Error::shape("segmentation samples cover different lengths"));
    }
    let starts: Vec<Vec<usize>> = samples.iter().map(|s| s.start_indices()).collect();
    per_timestep_labels_from_starts(n, &starts, labels, m)
}

/// Same majority vote, with segments given as start-index lists over a
/// length-`n` grid (the segmentation-report form).
pub fn per_timestep_labels_from_starts(
    n: usize,
    samples: &[Vec<usize>],
    labels: &[Vec<usize>],
    m: usize,
) -> Result<Vec<usize>> {
    if samples.is_empty() || samples.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} segmentation samples with {} label rows",
            samples.len(),
            labels.len()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("kernel pool must be nonempty"));
    }
    if n == 0 {
        return Err(Error::invalid("no timesteps to label"));
    }
    let mut counts = vec![vec![0usize; m]; n];
    for (starts, row) in samples.iter().zip(labels) {
        if starts.len() != row.len() {
            return Err(Error::shape(format!(
                "{} segments but {} labels",
                starts.len(),
                row.len()
            )));
        }
        if starts.first() != Some(&0) || starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("segment starts must begin at 0 and increase"));
        }
        if let Some(&last) = starts.last().filter(|&&last| last >= n) {
            return Err(Error::shape(format!("segment start {last} beyond n = {n}")));
        }
        for (s, &start) in starts.iter().enumerate() {
            let end = starts.get(s + 1).copied().unwrap_or(n);
            let label = row[s];
            if label >= m {
                return Err(Error::invalid(format!("label {label} out of range for m = {m}")));
            }
            for t in start..end {
                counts[t][label] += 1;
            }
        }
    }
    Ok(counts.iter().map(|c| majority(c)).collect())
}

/// One label per non-overlapping window of `window` timesteps, by majority
/// vote with ties broken toward the lowest kernel index. Output length is
/// ceil(N / window).
pub fn window_labels(per_timestep: &[usize], m: usize, window: usize) -> Result<Vec<usize>> {
    if per_timestep.is_empty() {
        return Err(Error::invalid("no timestep labels to window"));
    }
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    if let Some(&bad) = per_timestep.iter().find(|&&l| l >= m) {
        return Err(Error::invalid(format!("label {bad} out of range for m = {m}")));
    }
    Ok(per_timestep
        .chunks(window)
        .map(|chunk| {
            let mut counts = vec![0usize; m];
            for &l in chunk {
                counts[l] += 1;
            }
            majority(&counts)
        })
        .collect())
}

/// Renders window labels as a string over `0-9a-z`.
pub fn labels_to_string(labels: &[usize]) -> Result<String> {
    labels
        .iter()
        .map(|&l| {
            ALPHABET
                .get(l)
                .map(|&b| b as char)
                .ok_or_else(|| Error::invalid(format!("label {l} exceeds the string alphabet")))
        })
        .collect()
}

/// Parses a string produced by `labels_to_string`.
pub fn string_to_labels(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .map(|ch| {
            ALPHABET
                .iter()
                .position(|&b| b as char == ch)
                .ok_or_else(|| Error::invalid(format!("unexpected symbol '{ch}' in label string")))
        })
        .collect()
}

/// Full pipeline: per-timestep majority, then windowing, then rendering.
pub fn cluster_string(
    samples: &[Segmentation],
    labels: &[Vec<usize>],
    m: usize,
    window: usize,
) -> Result<String> {
    let per_t = per_timestep_labels(samples, labels, m)?;
    labels_to_string(&window_labels(&per_t, m, window)?)
}

/// Normalized symbol histogram; a point on the M-simplex.
pub fn frequency_vector(labels: &[usize], m: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::invalid("no labels to summarize"));
    }
    let mut counts = vec![0usize; m];
    for &l in labels {
        if l >= m {
            return Err(Error::invalid(format!("label {l} out of range for m = {m}")));
        }
        counts[l] += 1;
    }
    let total = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}
