//! Batch construction and pair labelling.
//!
//! Intra-sweep training draws two overlapping batches from one sweep; a pair
//! is positive when the probe positions are closer than a threshold, and
//! only the nearest candidate counts. Rows without any candidate are
//! assigned to the dustbin.

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

use crate::data::{probe_distance, ProbePose, Sweep};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("sweep `{id}` has {len} frames; at least {required} are needed")]
    SweepTooShort { id: String, len: usize, required: usize },
    #[error("dataset has {available} frames, batch needs {required}")]
    NotEnoughFrames { available: usize, required: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Two batches of frame indices from one sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    pub sweep_id: String,
    pub batch1_indices: Vec<usize>,
    pub batch2_indices: Vec<usize>,
    pub shared_count: usize,
}

pub fn shared_count(b: usize, overlap_frac: f64) -> usize {
    ((overlap_frac * b as f64) + 1e-9).floor() as usize
}

/// Draws `b` distinct frames for the first batch, carries
/// `floor(overlap_frac * b)` of them into the second batch, and fills the
/// rest of the second batch with frames absent from the first.
pub fn sample_dual_batches<R: Rng + ?Sized>(
    sweep: &Sweep,
    b: usize,
    overlap_frac: f64,
    rng: &mut R,
) -> Result<DualBatch, SamplerError> {
    if b == 0 || !(0.0..=1.0).contains(&overlap_frac) {
        return Err(SamplerError::InvalidArgument(format!(
            "batch size {b} / overlap {overlap_frac} out of range"
        )));
    }
    let shared = shared_count(b, overlap_frac).min(b);
    let fresh = b - shared;
    let required = b + fresh;
    if sweep.len() < required {
        return Err(SamplerError::SweepTooShort {
            id: sweep.id.clone(),
            len: sweep.len(),
            required,
        });
    }
    let batch1: Vec<usize> = index::sample(rng, sweep.len(), b).into_vec();
    let mut batch2: Vec<usize> = index::sample(rng, b, shared)
        .into_iter()
        .map(|k| batch1[k])
        .collect();
    let mut in_batch1 = vec![false; sweep.len()];
    batch1.iter().for_each(|&i| in_batch1[i] = true);
    let rest: Vec<usize> = (0..sweep.len()).filter(|&i| !in_batch1[i]).collect();
    batch2.extend(index::sample(rng, rest.len(), fresh).into_iter().map(|k| rest[k]));
    Ok(DualBatch {
        sweep_id: sweep.id.clone(),
        batch1_indices: batch1,
        batch2_indices: batch2,
        shared_count: shared,
    })
}

/// Positive targets in both directions plus the pairwise distances they were
/// derived from. A target equal to the opposite batch size is the dustbin.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabels {
    pub gt_1to2: Vec<usize>,
    pub gt_2to1: Vec<usize>,
    /// Row-major `b1 x b2`.
    pub distance_matrix_mm: Vec<f64>,
}

impl PairLabels {
    pub fn b1(&self) -> usize {
        self.gt_1to2.len()
    }

    pub fn b2(&self) -> usize {
        self.gt_2to1.len()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distance_matrix_mm[i * self.b2() + j]
    }

    /// Labels with the diagonal as the only positives (`b1 == b2`).
    pub fn identity(b: usize) -> Self {
        Self {
            gt_1to2: (0..b).collect(),
            gt_2to1: (0..b).collect(),
            distance_matrix_mm: (0..b * b)
                .map(|k| if k / b == k % b { 0.0 } else { f64::INFINITY })
                .collect(),
        }
    }
}

fn nearest_below(values: impl Iterator<Item = f64>, threshold: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, d) in values.enumerate() {
        if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

/// Labels from a row-major `rows x cols` distance matrix: for each row (and
/// independently each column) the nearest entry strictly below `threshold`
/// is positive, ties going to the lower index.
pub fn labels_from_distances(distances: Vec<f64>, rows: usize, cols: usize, threshold: f64) -> PairLabels {
    assert_eq!(distances.len(), rows * cols);
    let gt_1to2 = (0..rows)
        .map(|i| nearest_below((0..cols).map(|j| distances[i * cols + j]), threshold).unwrap_or(cols))
        .collect();
    let gt_2to1 = (0..cols)
        .map(|j| nearest_below((0..rows).map(|i| distances[i * cols + j]), threshold).unwrap_or(rows))
        .collect();
    PairLabels {
        gt_1to2,
        gt_2to1,
        distance_matrix_mm: distances,
    }
}

pub fn distance_matrix(poses1: &[ProbePose], poses2: &[ProbePose]) -> Vec<f64> {
    poses1
        .iter()
        .flat_map(|a| poses2.iter().map(move |b| probe_distance(a, b)))
        .collect()
}

/// Probe-distance labels: positive when closer than `threshold_mm`.
pub fn label_pairs(poses1: &[ProbePose], poses2: &[ProbePose], threshold_mm: f64) -> PairLabels {
    labels_from_distances(distance_matrix(poses1, poses2), poses1.len(), poses2.len(), threshold_mm)
}

/// Labels from frame-index gaps (positive when `|t1 - t2| < max_gap`); the
/// distance matrix holds the probe distances for the triplet term.
pub fn label_by_frame_gap(
    idx1: &[usize],
    idx2: &[usize],
    max_gap: f64,
    probe_distances: Vec<f64>,
) -> PairLabels {
    let gaps: Vec<f64> = idx1
        .iter()
        .flat_map(|&a| idx2.iter().map(move |&b| (a as f64 - b as f64).abs()))
        .collect();
    let mut labels = labels_from_distances(gaps, idx1.len(), idx2.len(), max_gap);
    labels.distance_matrix_mm = probe_distances;
    labels
}

/// Only the same source frame is positive.
pub fn same_frame_labels(idx1: &[usize], idx2: &[usize], probe_distances: Vec<f64>) -> PairLabels {
    label_by_frame_gap(idx1, idx2, 0.5, probe_distances)
}

/// IVPP temporal weight `(delta_t - |t2 - t1|) / (delta_t + 1)`.
pub fn ivpp_weight(t1: usize, t2: usize, delta_t: usize) -> f64 {
    (delta_t as f64 - t1.abs_diff(t2) as f64) / (delta_t as f64 + 1.0)
}

/// Probe-distance variant `(delta - ||p2 - p1||) / (delta + 1)`.
pub fn distance_ivpp_weight(p1: &ProbePose, p2: &ProbePose, delta_probe_mm: f64) -> f64 {
    (delta_probe_mm - probe_distance(p1, p2)) / (delta_probe_mm + 1.0)
}

pub fn ivpp_weight_matrix(idx1: &[usize], idx2: &[usize], delta_t: usize) -> Vec<f64> {
    idx1.iter()
        .flat_map(|&a| idx2.iter().map(move |&b| ivpp_weight(a, b, delta_t)))
        .collect()
}

pub fn distance_ivpp_weight_matrix(poses1: &[ProbePose], poses2: &[ProbePose], delta_probe_mm: f64) -> Vec<f64> {
    poses1
        .iter()
        .flat_map(|a| poses2.iter().map(move |b| distance_ivpp_weight(a, b, delta_probe_mm)))
        .collect()
}

/// A frame in a pooled multi-sweep dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameRef {
    pub sweep: usize,
    pub frame: usize,
}

/// `b` distinct frames drawn uniformly from all sweeps pooled together.
pub fn sample_inter_sweep_batch<R: Rng + ?Sized>(
    dataset: &[Sweep],
    b: usize,
    rng: &mut R,
) -> Result<Vec<FrameRef>, SamplerError> {
    let total: usize = dataset.iter().map(Sweep::len).sum();
    if b > total || b == 0 {
        return Err(SamplerError::NotEnoughFrames {
            available: total,
            required: b,
        });
    }
    let offsets: Vec<usize> = dataset
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.len();
            Some(start)
        })
        .collect();
    Ok(index::sample(rng, total, b)
        .into_iter()
        .map(|flat| {
            let sweep = offsets.partition_point(|&o| o <= flat) - 1;
            FrameRef {
                sweep,
                frame: flat - offsets[sweep],
            }
        })
        .collect())
}
