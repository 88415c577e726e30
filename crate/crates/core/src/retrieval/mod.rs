//! Embedding index over a reference sweep and maximum dot-product retrieval
//! with dustbin rejection.

mod file;

pub use file::{load_index, save_index, IndexFileError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{GrayImage, ProbePose, Sweep};
use crate::encoder::{embed, load_checkpoint, CheckpointError, EncoderError, EncoderParams};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("index is empty")]
    EmptyIndex,
    #[error("embedding has {found} values, index expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("index entries are not strictly ordered by frame index")]
    Unordered,
    #[error("non-finite embedding for frame {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub frame_index: usize,
    pub embedding: Vec<f32>,
    pub pose: ProbePose,
}

/// Embeddings of every frame of one sweep plus the rejection threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub sweep_id: String,
    pub embedding_dim: usize,
    pub alpha: f32,
    pub entries: Vec<IndexEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalStatus {
    Matched,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub status: RetrievalStatus,
    pub frame_index: Option<usize>,
    pub pose: Option<ProbePose>,
    /// Best similarity over the database.
    pub score: f64,
    pub runner_up_score: Option<f64>,
}

impl RetrievalResult {
    pub fn is_rejected(&self) -> bool {
        self.status == RetrievalStatus::Rejected
    }
}

/// Index of the largest value (first one on ties) and of the second largest.
pub fn top_two(scores: &[f64]) -> (usize, Option<usize>) {
    let mut best = 0;
    let mut second: Option<usize> = None;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            second = Some(best);
            best = k;
        } else if second.is_none_or(|j| s > scores[j]) {
            second = Some(k);
        }
    }
    (best, second)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn fit(image: &GrayImage, [h, w]: [usize; 2]) -> GrayImage {
    if (image.height(), image.width()) == (h, w) {
        image.clone()
    } else {
        image.resize_bilinear(w, h)
    }
}

/// Poses are stored at 32-bit precision in the index file; rounding here
/// keeps an in-memory index identical to its reloaded copy.
fn f32_pose(p: ProbePose) -> ProbePose {
    ProbePose {
        position: p.position.map(|v| v as f32 as f64),
    }
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        for e in &self.entries {
            if e.embedding.len() != self.embedding_dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: self.embedding_dim,
                    found: e.embedding.len(),
                });
            }
            if !e.embedding.iter().all(|v| v.is_finite()) {
                return Err(RetrievalError::NonFinite(e.frame_index));
            }
        }
        if self.entries.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
            return Err(RetrievalError::Unordered);
        }
        Ok(())
    }

    /// Similarity of `embedding` to every entry, in entry order.
    pub fn scores(&self, embedding: &[f32]) -> Result<Vec<f64>, RetrievalError> {
        if embedding.len() != self.embedding_dim {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.embedding_dim,
                found: embedding.len(),
            });
        }
        Ok(self.entries.iter().map(|e| dot(&e.embedding, embedding)).collect())
    }

    /// Retrieval for an already computed query embedding. `alpha` overrides
    /// the stored threshold when given.
    pub fn query_embedding(&self, embedding: &[f32], alpha: Option<f64>) -> Result<RetrievalResult, RetrievalError> {
        if self.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let scores = self.scores(embedding)?;
        let (best, second) = top_two(&scores);
        let threshold = alpha.unwrap_or(self.alpha as f64);
        let score = scores[best];
        let runner_up_score = second.map(|k| scores[k]);
        if score < threshold {
            return Ok(RetrievalResult {
                status: RetrievalStatus::Rejected,
                frame_index: None,
                pose: None,
                score,
                runner_up_score,
            });
        }
        let e = &self.entries[best];
        Ok(RetrievalResult {
            status: RetrievalStatus::Matched,
            frame_index: Some(e.frame_index),
            pose: Some(e.pose),
            score,
            runner_up_score,
        })
    }
}

/// Embeds every frame of `sweep` in infer mode. Frames are resized to the
/// encoder input when needed.
pub fn build_index(sweep: &Sweep, params: &EncoderParams<f32>) -> Result<EmbeddingIndex, RetrievalError> {
    if sweep.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    let size = params.config.input_size;
    let images: Vec<GrayImage> = sweep.frames.iter().map(|f| fit(&f.image, size)).collect();
    let refs: Vec<&GrayImage> = images.iter().collect();
    let embeddings = embed(params, &refs)?;
    let entries = sweep
        .frames
        .iter()
        .zip(embeddings)
        .map(|(f, embedding)| IndexEntry {
            frame_index: f.frame_index,
            embedding,
            pose: f32_pose(f.pose),
        })
        .collect();
    let index = EmbeddingIndex {
        sweep_id: sweep.id.clone(),
        embedding_dim: params.config.embedding_dim,
        alpha: params.alpha() as f32,
        entries,
    };
    index.validate()?;
    Ok(index)
}

pub fn build_index_from_checkpoint(sweep: &Sweep, checkpoint: &std::path::Path) -> Result<EmbeddingIndex, RetrievalError> {
    build_index(sweep, &load_checkpoint(checkpoint)?.params)
}

pub fn query(
    index: &EmbeddingIndex,
    image: &GrayImage,
    params: &EncoderParams<f32>,
) -> Result<RetrievalResult, RetrievalError> {
    Ok(batch_query(index, std::slice::from_ref(image), params)?.remove(0))
}

/// Results aligned with `images`.
pub fn batch_query(
    index: &EmbeddingIndex,
    images: &[GrayImage],
    params: &EncoderParams<f32>,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    batch_query_with_alpha(index, images, params, None)
}

pub fn batch_query_with_alpha(
    index: &EmbeddingIndex,
    images: &[GrayImage],
    params: &EncoderParams<f32>,
    alpha: Option<f64>,
) -> Result<Vec<RetrievalResult>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let size = params.config.input_size;
    let fitted: Vec<GrayImage> = images.iter().map(|im| fit(im, size)).collect();
    let refs: Vec<&GrayImage> = fitted.iter().collect();
    embed(params, &refs)?
        .iter()
        .map(|e| index.query_embedding(e, alpha))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_index() -> EmbeddingIndex {
        let entries = (0..4)
            .map(|i| IndexEntry {
                frame_index: i,
                embedding: (0..3).map(|k| if k == i % 3 { 1.0 } else { 0.0 }).collect(),
                pose: ProbePose::new(i as f64, 0.5, -1.25),
            })
            .collect();
        EmbeddingIndex {
            sweep_id: "toy".into(),
            embedding_dim: 3,
            alpha: 0.25,
            entries,
        }
    }

    #[test]
    fn top_two_prefers_lower_index() {
        assert_eq!(top_two(&[1.0, 3.0, 3.0, 2.0]), (1, Some(2)));
        assert_eq!(top_two(&[5.0]), (0, None));
        assert_eq!(top_two(&[1.0, 1.0]), (0, Some(1)));
        assert_eq!(top_two(&[0.0, 2.0, 1.0]), (1, Some(2)));
    }

    #[test]
    fn duplicates_resolve_to_lower_frame() {
        let idx = toy_index();
        // frames 0 and 3 share an embedding
        let r = idx.query_embedding(&[1.0, 0.0, 0.0], None).unwrap();
        assert_eq!(r.frame_index, Some(0));
        assert_eq!(r.runner_up_score, Some(1.0));
    }

    #[test]
    fn threshold_controls_rejection() {
        let idx = toy_index();
        let q = [0.0, 0.2, 0.0];
        assert!(idx.query_embedding(&q, None).unwrap().is_rejected());
        assert!(!idx.query_embedding(&q, Some(0.2)).unwrap().is_rejected());
        assert!(idx.query_embedding(&q, Some(f64::INFINITY)).unwrap().is_rejected());
        assert!(!idx.query_embedding(&[-5.0, -5.0, -5.0], Some(f64::NEG_INFINITY)).unwrap().is_rejected());
    }

    #[test]
    fn scaling_keeps_argmax() {
        let idx = toy_index();
        let mut scaled = idx.clone();
        scaled.entries.iter_mut().for_each(|e| e.embedding.iter_mut().for_each(|v| *v *= 3.0));
        let q = [0.1, 0.7, 0.3];
        let q3: Vec<f32> = q.iter().map(|v| v * 3.0).collect();
        let a = idx.query_embedding(&q, Some(f64::NEG_INFINITY)).unwrap();
        let b = scaled.query_embedding(&q3, Some(f64::NEG_INFINITY)).unwrap();
        assert_eq!(a.frame_index, b.frame_index);
    }

    #[test]
    fn empty_index_and_bad_dimension() {
        let mut idx = toy_index();
        assert!(matches!(
            idx.query_embedding(&[1.0], None),
            Err(RetrievalError::DimensionMismatch { .. })
        ));
        idx.entries.clear();
        assert!(matches!(idx.query_embedding(&[1.0, 0.0, 0.0], None), Err(RetrievalError::EmptyIndex)));
    }

    #[test]
    fn validation_catches_disorder() {
        let mut idx = toy_index();
        idx.validate().unwrap();
        idx.entries.swap(0, 1);
        assert!(matches!(idx.validate(), Err(RetrievalError::Unordered)));
    }
}
