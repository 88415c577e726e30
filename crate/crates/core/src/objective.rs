//! Score matrix with a learnable dustbin, symmetric cross-entropy, the
//! distance-weighted triplet term, and IVPP-style weighted variants.

use serde::{Deserialize, Serialize};

use crate::sampler::PairLabels;
use crate::tensor::{Graph, NodeId, Result, Scalar, Tensor, TensorError};

/// Scaling applied to the score matrix before the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogitScaleMode {
    /// Multiply by `exp(tau)`.
    AsWritten,
    /// Multiply by `1 / tau`.
    InverseTau,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossNormalization {
    /// Cross-entropy averaged over rows and columns, triplet averaged over pairs.
    BatchMean,
    /// Half the summed cross-entropy, summed triplet.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub triplet_weight: f64,
    pub triplet_distance_norm_mm: f64,
    pub logit_scale_mode: LogitScaleMode,
    pub normalization: LossNormalization,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            triplet_weight: 0.1,
            triplet_distance_norm_mm: 20.0,
            logit_scale_mode: LogitScaleMode::AsWritten,
            normalization: LossNormalization::BatchMean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.triplet_distance_norm_mm > 0.0) {
            return Err(format!(
                "triplet_distance_norm_mm must be positive, got {}",
                self.triplet_distance_norm_mm
            ));
        }
        if !(self.triplet_weight >= 0.0) {
            return Err(format!("triplet_weight must be non-negative, got {}", self.triplet_weight));
        }
        Ok(())
    }

    pub fn logit_scale(&self) -> f64 {
        match self.logit_scale_mode {
            LogitScaleMode::AsWritten => self.tau.exp(),
            LogitScaleMode::InverseTau => 1.0 / self.tau,
        }
    }
}

/// Component ablation: which of probe-distance labels (P1) and the triplet
/// term (P2) are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Sce,
    P1,
    P2,
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [AblationMode::Sce, AblationMode::P1, AblationMode::P2, AblationMode::Full];

    pub fn probe_labels(self) -> bool {
        matches!(self, AblationMode::P1 | AblationMode::Full)
    }

    pub fn triplet(self) -> bool {
        matches!(self, AblationMode::P2 | AblationMode::Full)
    }

    pub fn table_name(self) -> &'static str {
        match self {
            AblationMode::Sce => "SCE",
            AblationMode::P1 => "+P1",
            AblationMode::P2 => "+P2",
            AblationMode::Full => "+P1+P2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sce" => Some(AblationMode::Sce),
            "p1" => Some(AblationMode::P1),
            "p2" => Some(AblationMode::P2),
            "full" => Some(AblationMode::Full),
            _ => None,
        }
    }
}

/// Nodes of a score matrix: the `b1 x b2` dot-product block and the
/// `(b1+1) x (b2+1)` matrix bordered with the dustbin value.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMatrix {
    pub inner: NodeId,
    pub full: NodeId,
    pub b1: usize,
    pub b2: usize,
}

pub fn score_matrix<T: Scalar>(g: &mut Graph<T>, z1: NodeId, z2: NodeId, alpha: NodeId) -> Result<ScoreMatrix> {
    let inner = g.matmul_nt(z1, z2)?;
    let full = g.append_border(inner, alpha)?;
    let s = g.shape(inner);
    Ok(ScoreMatrix {
        inner,
        full,
        b1: s[0],
        b2: s[1],
    })
}

fn check_labels(m: &ScoreMatrix, labels: &PairLabels) -> Result<()> {
    if labels.b1() != m.b1 || labels.b2() != m.b2 {
        return Err(TensorError::InvalidArgument(format!(
            "labels cover {}x{} pairs, score matrix has {}x{}",
            labels.b1(),
            labels.b2(),
            m.b1,
            m.b2
        )));
    }
    Ok(())
}

fn ce_terms<T: Scalar>(
    g: &mut Graph<T>,
    m: &ScoreMatrix,
    labels: &PairLabels,
    row_weights: &[T],
    col_weights: &[T],
    cfg: &LossConfig,
) -> Result<NodeId> {
    check_labels(m, labels)?;
    let scaled = g.scale(m.full, cfg.logit_scale())?;
    let rows = g.slice_rows(scaled, m.b1)?;
    let rows_ce = g.softmax_cross_entropy(rows, &labels.gt_1to2, row_weights)?;
    let t = g.transpose(scaled)?;
    let cols = g.slice_rows(t, m.b2)?;
    let cols_ce = g.softmax_cross_entropy(cols, &labels.gt_2to1, col_weights)?;
    let both = g.add(rows_ce, cols_ce)?;
    let denom = match cfg.normalization {
        LossNormalization::BatchMean => (m.b1 + m.b2) as f64,
        LossNormalization::Literal => 2.0,
    };
    g.scale(both, 1.0 / denom)
}

/// Cross-entropy over every row (batch1 against batch2 plus dustbin) and
/// every column, the dustbin row and column contributing no terms of their own.
pub fn symmetric_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    m: &ScoreMatrix,
    labels: &PairLabels,
    cfg: &LossConfig,
) -> Result<NodeId> {
    ce_terms(g, m, labels, &vec![T::one(); m.b1], &vec![T::one(); m.b2], cfg)
}

/// Per-row weights of a weighted loss: the weight of the labelled pair
/// clamped to `[0, 1]`, or 1 for dustbin rows.
pub fn labelled_pair_weights(labels: &PairLabels, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (b1, b2) = (labels.b1(), labels.b2());
    let rows = labels
        .gt_1to2
        .iter()
        .enumerate()
        .map(|(i, &j)| if j == b2 { 1.0 } else { weights[i * b2 + j].clamp(0.0, 1.0) })
        .collect();
    let cols = labels
        .gt_2to1
        .iter()
        .enumerate()
        .map(|(j, &i)| if i == b1 { 1.0 } else { weights[i * b2 + j].clamp(0.0, 1.0) })
        .collect();
    (rows, cols)
}

/// Symmetric cross-entropy with each row/column scaled by the weight of
/// its labelled pair; `weights` is row-major `b1 x b2`.
pub fn weighted_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    m: &ScoreMatrix,
    labels: &PairLabels,
    weights: &[f64],
    cfg: &LossConfig,
) -> Result<NodeId> {
    check_labels(m, labels)?;
    if weights.len() != m.b1 * m.b2 {
        return Err(TensorError::InvalidArgument(format!(
            "{} weights for a {}x{} score matrix",
            weights.len(),
            m.b1,
            m.b2
        )));
    }
    let (rw, cw) = labelled_pair_weights(labels, weights);
    let rw: Vec<T> = rw.into_iter().map(T::from_f64_lossy).collect();
    let cw: Vec<T> = cw.into_iter().map(T::from_f64_lossy).collect();
    ce_terms(g, m, labels, &rw, &cw, cfg)
}

/// `sum_ij d_ij * M_ij - (1 - d_ij) * M_ji` with
/// `d_ij = clamp(distance_ij / d_max, 0, 1)` over a square block.
pub fn triplet_loss<T: Scalar>(
    g: &mut Graph<T>,
    inner: NodeId,
    distance_matrix_mm: &[f64],
    d_max_mm: f64,
) -> Result<NodeId> {
    let s = g.shape(inner).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(TensorError::InvalidArgument(format!(
            "triplet loss needs a square score block, got {s:?}"
        )));
    }
    if distance_matrix_mm.len() != s[0] * s[1] {
        return Err(TensorError::InvalidArgument(format!(
            "{} distances for a {}x{} block",
            distance_matrix_mm.len(),
            s[0],
            s[1]
        )));
    }
    let d: Vec<f64> = distance_matrix_mm
        .iter()
        .map(|&x| (x / d_max_mm).clamp(0.0, 1.0))
        .collect();
    let one_minus: Vec<f64> = d.iter().map(|v| 1.0 - v).collect();
    let d = g.constant(Tensor::from_f64(&s, &d)?);
    let one_minus = g.constant(Tensor::from_f64(&s, &one_minus)?);
    let push = g.mul(inner, d)?;
    let push = g.sum(push)?;
    let t = g.transpose(inner)?;
    let pull = g.mul(t, one_minus)?;
    let pull = g.sum(pull)?;
    g.sub(push, pull)
}

/// Loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub sce: NodeId,
    pub triplet: Option<NodeId>,
}

/// `L_SCE + lambda * L_triplet`. The triplet term is skipped entirely when
/// disabled or when `lambda == 0`, so the total is then the cross-entropy node
/// itself. `weights`, when given, selects the weighted cross-entropy.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    m: &ScoreMatrix,
    labels: &PairLabels,
    weights: Option<&[f64]>,
    triplet: bool,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let sce = match weights {
        Some(w) => weighted_ce_loss(g, m, labels, w, cfg)?,
        None => symmetric_ce_loss(g, m, labels, cfg)?,
    };
    if !triplet || cfg.triplet_weight == 0.0 {
        return Ok(LossNodes {
            total: sce,
            sce,
            triplet: None,
        });
    }
    let tri = triplet_loss(g, m.inner, &labels.distance_matrix_mm, cfg.triplet_distance_norm_mm)?;
    let factor = match cfg.normalization {
        LossNormalization::BatchMean => cfg.triplet_weight / (m.b1 * m.b2) as f64,
        LossNormalization::Literal => cfg.triplet_weight,
    };
    let weighted = g.scale(tri, factor)?;
    let total = g.add(sce, weighted)?;
    Ok(LossNodes {
        total,
        sce,
        triplet: Some(tri),
    })
}
