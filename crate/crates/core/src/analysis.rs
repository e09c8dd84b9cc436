//! Diagnostics over learned cluster probabilities. Every result renders to
//! CSV with a one-line header; plotting happens elsewhere.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;
use crate::train::{Snapshot, TrainingLog};

/// Power-iteration convergence tolerance and iteration cap.
pub const PCA_TOLERANCE: f64 = 1e-10;
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Ordered `(iteration, layer, P)` triples with constant shape per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySnapshotSeries {
    snapshots: Vec<Snapshot>,
}

impl ProbabilitySnapshotSeries {
    pub fn new(snapshots: Vec<Snapshot>) -> Result<Self> {
        let mut shapes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for s in &snapshots {
            let shape = s.probabilities.shape();
            if let Some(prev) = shapes.insert(s.layer, shape) {
                if prev != shape {
                    return Err(Error::InvalidArgument(format!(
                        "layer {} changes shape from {prev:?} to {shape:?}",
                        s.layer
                    )));
                }
            }
        }
        Ok(Self { snapshots })
    }

    pub fn from_log(log: &TrainingLog) -> Result<Self> {
        Self::new(log.snapshots.clone())
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut layers: Vec<usize> = self.snapshots.iter().map(|s| s.layer).collect();
        layers.sort_unstable();
        layers.dedup();
        layers
    }

    /// Last snapshot of `layer`.
    pub fn latest(&self, layer: usize) -> Option<&Snapshot> {
        self.snapshots.iter().rev().find(|s| s.layer == layer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub iteration: u64,
    pub layer: usize,
    /// Counts over `bins` equal-width bins of `[0, 1]`; the last bin is
    /// closed on the right.
    pub counts: Vec<usize>,
    pub median: f64,
}

pub fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of a non-empty slice.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn probability_histogram(
    series: &ProbabilitySnapshotSeries,
    bins: usize,
) -> Result<Vec<HistogramRow>> {
    if bins < 2 {
        return Err(Error::InvalidArgument(
            "histogram needs at least 2 bins".into(),
        ));
    }
    if series.is_empty() {
        return Err(Error::InvalidArgument("empty snapshot series".into()));
    }
    Ok(series
        .snapshots()
        .iter()
        .map(|s| {
            let mut counts = vec![0; bins];
            for &p in s.probabilities.as_slice() {
                counts[bin_index(p, bins)] += 1;
            }
            HistogramRow {
                iteration: s.iteration,
                layer: s.layer,
                counts,
                median: median(s.probabilities.as_slice()),
            }
        })
        .collect())
}

pub fn histogram_csv(rows: &[HistogramRow]) -> String {
    let mut out = String::from("iteration,layer,bin,bin_low,bin_high,count,median\n");
    for row in rows {
        let bins = row.counts.len();
        for (b, c) in row.counts.iter().enumerate() {
            let lo = b as f64 / bins as f64;
            let hi = (b + 1) as f64 / bins as f64;
            writeln!(
                out,
                "{},{},{b},{lo},{hi},{c},{}",
                row.iteration, row.layer, row.median
            )
            .expect("write to string");
        }
    }
    out
}

/// Fraction of entries of `p` outside `[lo, hi]`.
pub fn fraction_outside(p: &DenseMatrix, lo: f64, hi: f64) -> f64 {
    let n = p.len().max(1) as f64;
    p.as_slice().iter().filter(|&&v| v < lo || v > hi).count() as f64 / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// `d x 2` coordinates of the centered rows.
    pub coords: DenseMatrix,
    /// `k x 2` unit principal directions (columns).
    pub components: DenseMatrix,
    pub eigenvalues: [f64; 2],
    /// Per-row argmax of `P`, ties to the lowest cluster.
    pub dominant: Vec<usize>,
}

/// Projects the rows of `p` (`d x k`) onto the top two principal directions
/// of their `k x k` covariance, found by power iteration with deflation.
pub fn pca_project(p: &DenseMatrix) -> Result<PcaProjection> {
    let (d, k) = p.shape();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "projection needs k >= 2, got {k}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("no rows to project".into()));
    }
    let means: Vec<f64> = p.col_sums().iter().map(|s| s / d as f64).collect();
    let centered = DenseMatrix::from_fn(d, k, |r, c| p[(r, c)] - means[c]);
    let denom = (d.max(2) - 1) as f64;
    let cov = centered.transpose().matmul(&centered)?.scale(1.0 / denom);

    let scale = cov.max_abs();
    let mut components = DenseMatrix::zeros(k, 2);
    let mut eigenvalues = [0.0; 2];
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut deflated = cov.clone();
    for slot in 0..2 {
        let (value, vector) = if scale == 0.0 {
            (0.0, vec![0.0; k])
        } else {
            dominant_eigenpair(&deflated, &found, scale)
        };
        for (i, v) in vector.iter().enumerate() {
            components[(i, slot)] = *v;
        }
        eigenvalues[slot] = value;
        for i in 0..k {
            for j in 0..k {
                deflated[(i, j)] -= value * vector[i] * vector[j];
            }
        }
        found.push(vector);
    }
    let coords = centered.matmul(&components)?;
    Ok(PcaProjection {
        coords,
        components,
        eigenvalues,
        dominant: p.argmax_per_row(),
    })
}

fn orthonormalize(v: &mut [f64], basis: &[Vec<f64>]) -> f64 {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= dot * y;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Largest eigenpair of the symmetric PSD matrix `a`, restricted to the
/// orthogonal complement of `basis`. Returns a zero vector when the
/// remaining spectrum is numerically zero.
fn dominant_eigenpair(a: &DenseMatrix, basis: &[Vec<f64>], scale: f64) -> (f64, Vec<f64>) {
    let k = a.rows();
    let matvec = |v: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
            .collect()
    };
    // Start from the standard basis vector whose image is largest once
    // projected off `basis`; falls back to the next candidates if needed.
    let mut start: Option<Vec<f64>> = None;
    let mut best = 0.0;
    for j in 0..k {
        let mut e = vec![0.0; k];
        e[j] = 1.0;
        let mut v = matvec(&e);
        let n = orthonormalize(&mut v, basis);
        if n > best {
            best = n;
            start = Some(v);
        }
    }
    let Some(mut v) = start.filter(|_| best > 1e-14 * scale) else {
        let mut v = vec![0.0; k];
        // Any unit vector orthogonal to the basis has (near) zero variance.
        for j in 0..k {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            if orthonormalize(&mut e, basis) > 1e-6 {
                v = e;
                break;
            }
        }
        return (0.0, sign_normalized(v));
    };
    for _ in 0..PCA_MAX_ITERATIONS {
        let mut next = matvec(&v);
        if orthonormalize(&mut next, basis) == 0.0 {
            break;
        }
        let dot: f64 = next.iter().zip(&v).map(|(x, y)| x * y).sum();
        if dot < 0.0 {
            next.iter_mut().for_each(|x| *x = -*x);
        }
        let diff = next
            .iter()
            .zip(&v)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff < PCA_TOLERANCE {
            break;
        }
    }
    let av = matvec(&v);
    let value: f64 = av.iter().zip(&v).map(|(x, y)| x * y).sum();
    (value.max(0.0), sign_normalized(v))
}

/// Flips `v` so its first non-negligible entry is positive.
fn sign_normalized(mut v: Vec<f64>) -> Vec<f64> {
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    v
}

pub fn pca_csv(proj: &PcaProjection) -> String {
    let mut out = String::from("node,pc1,pc2,dominant_cluster\n");
    for (i, &c) in proj.dominant.iter().enumerate() {
        writeln!(
            out,
            "{i},{},{},{c}",
            proj.coords[(i, 0)],
            proj.coords[(i, 1)]
        )
        .expect("write to string");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedClusters {
    /// Row sums of the output-layer `P`: one value per category.
    pub per_category: Vec<f64>,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
}

pub fn expected_clusters_per_category(p_output: &DenseMatrix) -> Result<ExpectedClusters> {
    if p_output.rows() == 0 {
        return Err(Error::InvalidArgument("no categories".into()));
    }
    let per_category = p_output.row_sums();
    Ok(ExpectedClusters {
        p25: percentile(&per_category, 25.0),
        p50: percentile(&per_category, 50.0),
        p75: percentile(&per_category, 75.0),
        per_category,
    })
}

pub fn clusters_csv(e: &ExpectedClusters) -> String {
    let mut out = String::from("category,expected_clusters,p25,p50,p75\n");
    for (i, v) in e.per_category.iter().enumerate() {
        writeln!(out, "{i},{v},{},{},{}", e.p25, e.p50, e.p75).expect("write to string");
    }
    out
}

/// `iteration,train_loss,train_accuracy,eval_accuracy`, one row per logged
/// iteration; `eval_accuracy` is empty where no evaluation ran.
pub fn convergence_table(log: &TrainingLog) -> String {
    let evals: BTreeMap<u64, f64> = log
        .evals
        .iter()
        .map(|e| (e.iteration, e.accuracy))
        .collect();
    let mut out = String::from("iteration,train_loss,train_accuracy,eval_accuracy\n");
    for rec in &log.iterations {
        let eval = evals
            .get(&rec.iteration)
            .map(|a| a.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{eval}",
            rec.iteration, rec.loss, rec.train_accuracy
        )
        .expect("write to string");
    }
    out
}
