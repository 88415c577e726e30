use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, TrainConfig};
use crate::augment::augment_2d;
use crate::baselines::{LabelMode, SamplerMode, TrainingMode, WeightMode};
use crate::data::{GrayImage, ProbePose, Sweep};
use crate::encoder::{
    forward, images_to_tensor, init_params, save_checkpoint, update_running_stats, Checkpoint, EncoderParams,
    DUSTBIN,
};
use crate::objective::{score_matrix, total_loss};
use crate::sampler::{
    distance_ivpp_weight_matrix, distance_matrix, ivpp_weight_matrix, label_by_frame_gap, label_pairs,
    sample_dual_batches, sample_inter_sweep_batch, same_frame_labels, PairLabels,
};
use crate::tensor::{Adam, BatchNormMode, Graph, Scalar, StepLr, Tensor};

/// Losses after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub alpha: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    /// Parameters of the best epoch.
    pub params: EncoderParams<f32>,
}

/// One contrastive step's worth of frames: two image batches with their
/// sources, labels and optional pair weights.
struct StepBatch {
    images1: Vec<GrayImage>,
    images2: Vec<GrayImage>,
    labels: PairLabels,
    weights: Option<Vec<f64>>,
}

fn resize_all(sweeps: &[Sweep], [h, w]: [usize; 2]) -> Vec<Sweep> {
    sweeps
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for f in &mut s.frames {
                if (f.image.height(), f.image.width()) != (h, w) {
                    f.image = f.image.resize_bilinear(w, h);
                }
            }
            s
        })
        .collect()
}

fn intra_sweep_batch<R: Rng>(
    sweep: &Sweep,
    cfg: &TrainConfig,
    mode: &TrainingMode,
    rng: &mut R,
) -> Result<StepBatch, EvalError> {
    let d = sample_dual_batches(sweep, cfg.training.batch_size, cfg.training.overlap_frac, rng)?;
    let poses = |idx: &[usize]| -> Vec<ProbePose> { idx.iter().map(|&i| sweep.frames[i].pose).collect() };
    let (p1, p2) = (poses(&d.batch1_indices), poses(&d.batch2_indices));
    let labels = match mode.labels {
        LabelMode::ProbeDistance { threshold_mm } => label_pairs(&p1, &p2, threshold_mm),
        LabelMode::SameFrame => same_frame_labels(&d.batch1_indices, &d.batch2_indices, distance_matrix(&p1, &p2)),
        LabelMode::FrameGap { max_gap } => label_by_frame_gap(
            &d.batch1_indices,
            &d.batch2_indices,
            max_gap as f64,
            distance_matrix(&p1, &p2),
        ),
    };
    let weights = match mode.weights {
        WeightMode::Uniform => None,
        WeightMode::Ivpp { delta_t } => Some(ivpp_weight_matrix(&d.batch1_indices, &d.batch2_indices, delta_t)),
        WeightMode::DistanceIvpp { delta_probe_mm } => Some(distance_ivpp_weight_matrix(&p1, &p2, delta_probe_mm)),
    };
    let images1 = d
        .batch1_indices
        .iter()
        .map(|&i| augment_2d(&sweep.frames[i].image, &cfg.augment, rng))
        .collect();
    let images2 = d
        .batch2_indices
        .iter()
        .map(|&i| augment_2d(&sweep.frames[i].image, &cfg.augment, rng))
        .collect();
    Ok(StepBatch {
        images1,
        images2,
        labels,
        weights,
    })
}

fn inter_sweep_batch<R: Rng>(sweeps: &[Sweep], cfg: &TrainConfig, rng: &mut R) -> Result<StepBatch, EvalError> {
    let refs = sample_inter_sweep_batch(sweeps, cfg.training.batch_size, rng)?;
    let frame = |r: &crate::sampler::FrameRef| &sweeps[r.sweep].frames[r.frame];
    let images1 = refs.iter().map(|r| augment_2d(&frame(r).image, &cfg.augment, rng)).collect();
    let images2 = refs.iter().map(|r| augment_2d(&frame(r).image, &cfg.augment, rng)).collect();
    let b = refs.len();
    let mut labels = PairLabels::identity(b);
    // probe distances only mean something within one sweep
    for (i, a) in refs.iter().enumerate() {
        for (j, c) in refs.iter().enumerate() {
            labels.distance_matrix_mm[i * b + j] = if a.sweep == c.sweep {
                crate::data::probe_distance(&frame(a).pose, &frame(c).pose)
            } else {
                f64::INFINITY
            };
        }
    }
    Ok(StepBatch {
        images1,
        images2,
        labels,
        weights: None,
    })
}

/// Sweep visited by each step of an epoch: every sweep gets
/// `ceil(len / b)` steps, interleaved round-robin.
pub fn epoch_schedule(sweeps: &[Sweep], b: usize) -> Vec<usize> {
    let mut remaining: Vec<usize> = sweeps.iter().map(|s| s.len().div_ceil(b)).collect();
    let mut order = Vec::with_capacity(remaining.iter().sum());
    while remaining.iter().any(|&r| r > 0) {
        for (k, r) in remaining.iter_mut().enumerate() {
            if *r > 0 {
                order.push(k);
                *r -= 1;
            }
        }
    }
    order
}

/// Forward pass and loss for one batch; returns the loss value and, in
/// train mode, the gradient of every trainable tensor.
fn run_step(
    params: &mut EncoderParams<f32>,
    batch: &StepBatch,
    cfg: &TrainConfig,
    triplet: bool,
    mode: BatchNormMode,
) -> Result<(f64, Option<BTreeMap<String, Tensor<f32>>>), EvalError> {
    let train = mode == BatchNormMode::Train;
    let mut g = Graph::<f32>::new();
    let nodes = params.register(&mut g, train);
    let size = params.config.input_size;
    let r1: Vec<&GrayImage> = batch.images1.iter().collect();
    let r2: Vec<&GrayImage> = batch.images2.iter().collect();
    let x1 = g.constant(images_to_tensor(&r1, size)?);
    let x2 = g.constant(images_to_tensor(&r2, size)?);
    let f1 = forward(&mut g, params, &nodes, x1, mode)?;
    let f2 = forward(&mut g, params, &nodes, x2, mode)?;
    let m = score_matrix(&mut g, f1.embeddings, f2.embeddings, nodes[DUSTBIN])?;
    let loss = total_loss(&mut g, &m, &batch.labels, batch.weights.as_deref(), triplet, &cfg.loss)?;
    let value = g.value(loss.total).item()?.as_f64();
    if !train || !value.is_finite() {
        return Ok((value, None));
    }
    let mut grads = g.backward(loss.total)?;
    let grad_map = nodes
        .iter()
        .filter_map(|(k, &id)| grads.take(id).map(|t| (k.clone(), t)))
        .collect();
    update_running_stats(params, &g, &f1);
    update_running_stats(params, &g, &f2);
    Ok((value, Some(grad_map)))
}

fn validation_loss(
    params: &mut EncoderParams<f32>,
    val: &[Sweep],
    cfg: &TrainConfig,
    mode: &TrainingMode,
) -> Result<f64, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.validation_seed);
    let b = cfg.training.batch_size;
    let mut total = 0.0;
    let mut steps = 0;
    match mode.sampler {
        SamplerMode::IntraSweep => {
            for k in epoch_schedule(val, b) {
                let batch = intra_sweep_batch(&val[k], cfg, mode, &mut rng)?;
                total += run_step(params, &batch, cfg, mode.triplet, BatchNormMode::Infer)?.0;
                steps += 1;
            }
        }
        SamplerMode::InterSweep => {
            let n: usize = val.iter().map(Sweep::len).sum();
            for _ in 0..n.div_ceil(b) {
                let batch = inter_sweep_batch(val, cfg, &mut rng)?;
                total += run_step(params, &batch, cfg, mode.triplet, BatchNormMode::Infer)?.0;
                steps += 1;
            }
        }
    }
    Ok(total / steps.max(1) as f64)
}

/// Trains the encoder and keeps the parameters with the lowest validation
/// loss, saved to `out_dir/best.swmc`. `on_epoch` sees every epoch record.
pub fn train(
    cfg: &TrainConfig,
    train_sweeps: &[Sweep],
    val_sweeps: &[Sweep],
    epochs: usize,
    out_dir: &Path,
    config_echo: Option<&str>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, EvalError> {
    cfg.validate()?;
    let mode = cfg
        .training_mode()
        .ok_or_else(|| EvalError::NothingToTrain(cfg.training.baseline.name().into()))?;
    if epochs == 0 {
        return Err(EvalError::Config("at least one epoch is required".into()));
    }
    if train_sweeps.is_empty() || val_sweeps.is_empty() {
        return Err(EvalError::Config("training needs at least one train and one val sweep".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| EvalError::Io(format!("{}: {e}", out_dir.display())))?;
    let size = cfg.encoder.input_size;
    let train_sweeps = resize_all(train_sweeps, size);
    let val_sweeps = resize_all(val_sweeps, size);

    let mut params = init_params(&cfg.encoder, cfg.training.seed)?;
    let mut adam = Adam::new(cfg.optimizer.adam());
    let mut sched = StepLr::new(cfg.optimizer.learning_rate, cfg.optimizer.step_size, cfg.optimizer.gamma);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let b = cfg.training.batch_size;
    let best_path = out_dir.join("best.swmc");
    let mut best: Option<(usize, f64, EncoderParams<f32>)> = None;
    let mut history = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        let steps: Vec<Option<usize>> = match mode.sampler {
            SamplerMode::IntraSweep => epoch_schedule(&train_sweeps, b).into_iter().map(Some).collect(),
            SamplerMode::InterSweep => {
                let n: usize = train_sweeps.iter().map(Sweep::len).sum();
                vec![None; n.div_ceil(b)]
            }
        };
        let lr = adam.state.learning_rate;
        let mut sum = 0.0;
        for (step, target) in steps.iter().enumerate() {
            let batch = match target {
                Some(k) => intra_sweep_batch(&train_sweeps[*k], cfg, &mode, &mut rng)?,
                None => inter_sweep_batch(&train_sweeps, cfg, &mut rng)?,
            };
            let (loss, grads) = run_step(&mut params, &batch, cfg, mode.triplet, BatchNormMode::Train)?;
            let grads = match grads {
                Some(g) if loss.is_finite() => g,
                _ => return Err(EvalError::NonFiniteLoss { epoch, step }),
            };
            adam.step(&mut params.params, &grads).map_err(|e| EvalError::Optimizer {
                epoch,
                step,
                source: e,
            })?;
            sum += loss;
        }
        let train_loss = sum / steps.len() as f64;
        let val_loss = validation_loss(&mut params, &val_sweeps, cfg, &mode)?;
        if !val_loss.is_finite() {
            return Err(EvalError::NonFiniteLoss {
                epoch,
                step: steps.len(),
            });
        }
        let improved = best.as_ref().is_none_or(|(_, l, _)| val_loss < *l);
        if improved {
            save_checkpoint(
                &best_path,
                &Checkpoint {
                    params: params.clone(),
                    optimizer: Some(adam.state.clone()),
                    epoch: epoch as u64,
                    config_echo: config_echo.map(str::to_string),
                },
            )?;
            best = Some((epoch, val_loss, params.clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
            alpha: params.alpha(),
            improved,
        };
        info!(
            "epoch {epoch}: train {train_loss:.5} val {val_loss:.5} alpha {:.4}{}",
            record.alpha,
            if improved { " *" } else { "" }
        );
        on_epoch(&record);
        history.push(record);
        sched.step(&mut adam.state);
    }
    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_checkpoint: best_path,
        best_epoch,
        best_val_loss,
        history,
        params,
    })
}
