//! Normalized cross-correlation retrieval and the training recipes of the
//! comparison methods.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{GrayImage, Sweep};
use crate::objective::AblationMode;
use crate::retrieval::{RetrievalResult, RetrievalStatus};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("image size mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },
    #[error("database sweep has no frames")]
    EmptyDatabase,
}

/// Zero-mean normalized cross-correlation of two equally sized images.
/// Returns 0 when either image is constant.
pub fn ncc(a: &GrayImage, b: &GrayImage) -> Result<f64, BaselineError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(BaselineError::DimensionMismatch {
            a: (a.width(), a.height()),
            b: (b.width(), b.height()),
        });
    }
    let constant = |im: &GrayImage| im.data().iter().all(|&v| v == im.data()[0]);
    if constant(a) || constant(b) {
        return Ok(0.0);
    }
    let n = a.data().len() as f64;
    let ma = a.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Returns the database frame with the highest NCC. Never rejects; the query
/// is resized to the database frame size first.
pub fn ncc_retrieve(database: &Sweep, query: &GrayImage) -> Result<RetrievalResult, BaselineError> {
    let (h, w) = database.image_size().ok_or(BaselineError::EmptyDatabase)?;
    let q = if (query.width(), query.height()) == (w, h) {
        query.clone()
    } else {
        query.resize_bilinear(w, h)
    };
    let scores = database
        .frames
        .par_iter()
        .map(|f| ncc(&f.image, &q))
        .collect::<Result<Vec<_>, _>>()?;
    let (best, runner_up) = crate::retrieval::top_two(&scores);
    let frame = &database.frames[best];
    Ok(RetrievalResult {
        status: RetrievalStatus::Matched,
        frame_index: Some(frame.frame_index),
        pose: Some(frame.pose),
        score: scores[best],
        runner_up_score: runner_up.map(|k| scores[k]),
    })
}

/// Rows of the method comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Ncc,
    #[serde(rename = "inter-sweep")]
    InterSweepCl,
    Ivpp,
    DistanceIvpp,
    Ours,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::Ncc,
        BaselineKind::InterSweepCl,
        BaselineKind::Ivpp,
        BaselineKind::DistanceIvpp,
        BaselineKind::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Ncc => "ncc",
            BaselineKind::InterSweepCl => "inter-sweep",
            BaselineKind::Ivpp => "ivpp",
            BaselineKind::DistanceIvpp => "distance-ivpp",
            BaselineKind::Ours => "ours",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Probe-distance threshold for positive pairs.
pub const POSITIVE_THRESHOLD_MM: f64 = 10.0;
/// Temporal window of the IVPP weighting, in frames.
pub const IVPP_DELTA_T: usize = 8;
/// Spatial window of the distance-weighted IVPP variant.
pub const DELTA_PROBE_MM: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Two overlapping batches from one sweep.
    IntraSweep,
    /// One batch pooled over all sweeps, seen through two augmentations.
    InterSweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Only views of the same source frame are positive.
    SameFrame,
    /// Nearest frame closer than the threshold in probe space.
    ProbeDistance { threshold_mm: f64 },
    /// Nearest frame within `max_gap` frames in time.
    FrameGap { max_gap: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    Uniform,
    Ivpp { delta_t: usize },
    DistanceIvpp { delta_probe_mm: f64 },
}

/// How a method samples batches, labels pairs and weights the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMode {
    pub sampler: SamplerMode,
    pub labels: LabelMode,
    pub weights: WeightMode,
    pub triplet: bool,
}

impl TrainingMode {
    pub fn from_ablation(mode: AblationMode) -> Self {
        let labels = if mode.probe_labels() {
            LabelMode::ProbeDistance {
                threshold_mm: POSITIVE_THRESHOLD_MM,
            }
        } else {
            LabelMode::SameFrame
        };
        Self {
            sampler: SamplerMode::IntraSweep,
            labels,
            weights: WeightMode::Uniform,
            triplet: mode.triplet(),
        }
    }
}

/// `None` for NCC, which has nothing to train.
pub fn make_training_mode(kind: BaselineKind) -> Option<TrainingMode> {
    match kind {
        BaselineKind::Ncc => None,
        BaselineKind::InterSweepCl => Some(TrainingMode {
            sampler: SamplerMode::InterSweep,
            labels: LabelMode::SameFrame,
            weights: WeightMode::Uniform,
            triplet: false,
        }),
        BaselineKind::Ivpp => Some(TrainingMode {
            sampler: SamplerMode::IntraSweep,
            labels: LabelMode::FrameGap { max_gap: IVPP_DELTA_T },
            weights: WeightMode::Ivpp { delta_t: IVPP_DELTA_T },
            triplet: false,
        }),
        BaselineKind::DistanceIvpp => Some(TrainingMode {
            sampler: SamplerMode::IntraSweep,
            labels: LabelMode::ProbeDistance {
                threshold_mm: DELTA_PROBE_MM,
            },
            weights: WeightMode::DistanceIvpp {
                delta_probe_mm: DELTA_PROBE_MM,
            },
            triplet: false,
        }),
        BaselineKind::Ours => Some(TrainingMode::from_ablation(AblationMode::Full)),
    }
}
