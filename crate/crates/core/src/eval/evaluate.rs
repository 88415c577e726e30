use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::augment::{affine_3d_query, build_mini_volume, Affine3d, Affine3dRanges};
use crate::baselines::ncc_retrieve;
use crate::data::{probe_distance, GrayImage, ProbePose, Sweep};
use crate::encoder::EncoderParams;
use crate::retrieval::{batch_query_with_alpha, EmbeddingIndex, RetrievalResult, RetrievalStatus};

/// An out-of-plane view synthesized around one sweep frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedQuery {
    pub image: GrayImage,
    pub gt_pose: ProbePose,
    pub source_frame: usize,
    pub transform: Affine3d,
}

/// Samples `n` frames (without replacement when the sweep is long enough),
/// stacks a mini-volume around each and reslices it with a random 3D
/// transform drawn from `ranges`.
pub fn simulate_queries(
    sweep: &Sweep,
    n: usize,
    half_width: usize,
    ranges: &Affine3dRanges,
    seed: u64,
) -> Result<Vec<SimulatedQuery>, EvalError> {
    if sweep.is_empty() {
        return Err(EvalError::Config(format!("sweep `{}` has no frames", sweep.id)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<usize> = if sweep.len() >= n {
        index::sample(&mut rng, sweep.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..sweep.len())).collect()
    };
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    frames
        .par_iter()
        .zip(seeds)
        .map(|(&f, s)| {
            let transform = ranges.sample(&mut ChaCha8Rng::seed_from_u64(s));
            let volume = build_mini_volume(sweep, f, half_width)?;
            let mut image = affine_3d_query(&volume, &transform);
            image.quantize_8bit();
            Ok(SimulatedQuery {
                image,
                gt_pose: sweep.frames[f].pose,
                source_frame: f,
                transform,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub source_frame: usize,
    pub gt_pose: ProbePose,
    pub status: RetrievalStatus,
    pub retrieved_frame: Option<usize>,
    pub retrieved_pose: Option<ProbePose>,
    pub distance_mm: Option<f64>,
    pub similarity: f64,
    pub success: bool,
}

/// Retrieval metrics over a query set. Success counts every query (a
/// rejection is a failure); distance statistics only cover matched queries
/// and are absent when every query was rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub successes: usize,
    pub rejections: usize,
    pub success_rate: f64,
    pub rejection_rate: f64,
    pub mean_probe_distance_mm: Option<f64>,
    pub std_probe_distance_mm: Option<f64>,
    pub success_threshold_mm: f64,
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<QueryRecord>, success_threshold_mm: f64) -> Self {
        let n = records.len();
        let successes = records.iter().filter(|r| r.success).count();
        let rejections = records
            .iter()
            .filter(|r| r.status == RetrievalStatus::Rejected)
            .count();
        let d: Vec<f64> = records.iter().filter_map(|r| r.distance_mm).collect();
        let (mean, std) = if d.is_empty() {
            (None, None)
        } else {
            let m = d.iter().sum::<f64>() / d.len() as f64;
            let var = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / d.len() as f64;
            (Some(m), Some(var.sqrt()))
        };
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            n_queries: n,
            successes,
            rejections,
            success_rate: rate(successes),
            rejection_rate: rate(rejections),
            mean_probe_distance_mm: mean,
            std_probe_distance_mm: std,
            success_threshold_mm,
            records,
        }
    }

    /// Pools several reports (e.g. one per test sweep).
    pub fn merge(reports: Vec<EvalReport>, success_threshold_mm: f64) -> Self {
        Self::from_records(reports.into_iter().flat_map(|r| r.records).collect(), success_threshold_mm)
    }
}

/// Scores retrieval results against their ground-truth poses; success is a
/// match strictly closer than `success_threshold_mm`.
pub fn evaluate(
    gt: &[(usize, ProbePose)],
    results: &[RetrievalResult],
    success_threshold_mm: f64,
) -> Result<EvalReport, EvalError> {
    if gt.is_empty() || gt.len() != results.len() {
        return Err(EvalError::Config(format!(
            "{} ground-truth poses for {} results",
            gt.len(),
            results.len()
        )));
    }
    let records = gt
        .iter()
        .zip(results)
        .map(|(&(source_frame, gt_pose), r)| {
            let distance_mm = match (r.status, r.pose) {
                (RetrievalStatus::Matched, Some(p)) => Some(probe_distance(&p, &gt_pose)),
                _ => None,
            };
            QueryRecord {
                source_frame,
                gt_pose,
                status: r.status,
                retrieved_frame: r.frame_index,
                retrieved_pose: r.pose,
                distance_mm,
                similarity: r.score,
                success: distance_mm.is_some_and(|d| d < success_threshold_mm),
            }
        })
        .collect();
    Ok(EvalReport::from_records(records, success_threshold_mm))
}

fn ground_truth(queries: &[SimulatedQuery]) -> Vec<(usize, ProbePose)> {
    queries.iter().map(|q| (q.source_frame, q.gt_pose)).collect()
}

/// Runs the model on every query against `index`.
pub fn evaluate_model(
    index: &EmbeddingIndex,
    params: &EncoderParams<f32>,
    queries: &[SimulatedQuery],
    success_threshold_mm: f64,
    alpha: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let images: Vec<GrayImage> = queries.iter().map(|q| q.image.clone()).collect();
    let results = batch_query_with_alpha(index, &images, params, alpha)?;
    evaluate(&ground_truth(queries), &results, success_threshold_mm)
}

/// NCC retrieval against `database`, with frames and queries at `size`.
pub fn evaluate_ncc(
    database: &Sweep,
    queries: &[SimulatedQuery],
    size: [usize; 2],
    success_threshold_mm: f64,
) -> Result<EvalReport, EvalError> {
    let [h, w] = size;
    let mut db = database.clone();
    for f in &mut db.frames {
        if (f.image.height(), f.image.width()) != (h, w) {
            f.image = f.image.resize_bilinear(w, h);
        }
    }
    let results = queries
        .iter()
        .map(|q| ncc_retrieve(&db, &q.image))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate(&ground_truth(queries), &results, success_threshold_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SweepFrame;

    fn matched(pose: ProbePose) -> RetrievalResult {
        RetrievalResult {
            status: RetrievalStatus::Matched,
            frame_index: Some(0),
            pose: Some(pose),
            score: 1.0,
            runner_up_score: None,
        }
    }

    fn rejected() -> RetrievalResult {
        RetrievalResult {
            status: RetrievalStatus::Rejected,
            frame_index: None,
            pose: None,
            score: -1.0,
            runner_up_score: None,
        }
    }

    #[test]
    fn hand_built_four_queries() {
        let o = ProbePose::new(0.0, 0.0, 0.0);
        let gt = vec![(0, o); 4];
        let results = vec![
            matched(ProbePose::new(3.0, 0.0, 0.0)),
            matched(ProbePose::new(0.0, 14.9, 0.0)),
            matched(ProbePose::new(0.0, 0.0, 15.0)),
            rejected(),
        ];
        let r = evaluate(&gt, &results, 15.0).unwrap();
        assert_eq!(r.success_rate, 0.5);
        assert_eq!(r.rejection_rate, 0.25);
        let mean = r.mean_probe_distance_mm.unwrap();
        assert!((mean - (3.0 + 14.9 + 15.0) / 3.0).abs() < 1e-12);
        assert!(r.successes <= r.n_queries - r.rejections);
        assert_eq!(evaluate(&gt, &results, 15.0).unwrap(), r);
    }

    #[test]
    fn boundary_is_strict() {
        let o = ProbePose::new(0.0, 0.0, 0.0);
        let r = evaluate(
            &[(0, o), (1, o)],
            &[matched(ProbePose::new(14.999, 0.0, 0.0)), matched(ProbePose::new(15.0, 0.0, 0.0))],
            15.0,
        )
        .unwrap();
        assert!(r.records[0].success);
        assert!(!r.records[1].success);
    }

    #[test]
    fn all_rejected_has_no_distance_stats() {
        let o = ProbePose::new(0.0, 0.0, 0.0);
        let r = evaluate(&[(0, o), (1, o)], &[rejected(), rejected()], 15.0).unwrap();
        assert_eq!((r.success_rate, r.rejection_rate), (0.0, 1.0));
        assert_eq!(r.mean_probe_distance_mm, None);
        assert_eq!(r.std_probe_distance_mm, None);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["mean_probe_distance_mm"].is_null());
    }

    fn ramp(n: usize) -> Sweep {
        Sweep {
            id: "r".into(),
            frames: (0..n)
                .map(|i| {
                    let mut image = GrayImage::from_fn(12, 10, |x, y| ((x * 3 + y * 7 + i * 13) % 50) as f32 / 49.0);
                    image.quantize_8bit();
                    SweepFrame {
                        image,
                        time_s: i as f64,
                        pose: ProbePose::new(0.0, 0.0, i as f64),
                        frame_index: i,
                    }
                })
                .collect(),
            pixel_spacing_mm: 1.0,
        }
    }

    #[test]
    fn identity_queries_reproduce_frames() {
        let s = ramp(40);
        let q = simulate_queries(&s, 10, 30, &Affine3dRanges::identity(), 5).unwrap();
        assert_eq!(q.len(), 10);
        let mut frames: Vec<_> = q.iter().map(|x| x.source_frame).collect();
        frames.sort();
        frames.dedup();
        assert_eq!(frames.len(), 10);
        for x in &q {
            assert_eq!(x.image, s.frames[x.source_frame].image);
            assert_eq!(x.gt_pose, s.frames[x.source_frame].pose);
        }
        let r = evaluate_ncc(&s, &q, [10, 12], 15.0).unwrap();
        assert_eq!(r.success_rate, 1.0);
        assert_eq!(r.mean_probe_distance_mm, Some(0.0));
    }

    #[test]
    fn seeded_and_short_sweeps() {
        let s = ramp(6);
        let ranges = Affine3dRanges::default();
        let a = simulate_queries(&s, 50, 30, &ranges, 9).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, simulate_queries(&s, 50, 30, &ranges, 9).unwrap());
        assert_ne!(a, simulate_queries(&s, 50, 30, &ranges, 10).unwrap());
    }
}
