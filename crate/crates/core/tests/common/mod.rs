//! Independent oracles shared by the integration tests and the acceptance
//! harness: central finite differences in f64 and a brute-force pair labeler.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sweepmatch::baselines::{LabelMode, TrainingMode};
use sweepmatch::data::{GrayImage, ProbePose};
use sweepmatch::encoder::{forward, images_to_tensor, init_params, ConvStage, EncoderConfig};
use sweepmatch::objective::{score_matrix, total_loss, AblationMode, LossConfig, LossNormalization};
use sweepmatch::sampler::{distance_matrix, ivpp_weight_matrix, label_pairs, same_frame_labels};
use sweepmatch::tensor::{BatchNormMode, Graph, NodeId, Tensor};

pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId + 'a;

const EPS: f64 = 1e-6;

/// Gradients whose true value is zero (e.g. a bias feeding batch norm) come
/// back from central differences as rounding noise near 1e-10; the floor keeps
/// that noise from reading as a relative error.
pub const GRAD_FLOOR: f64 = 1e-5;

fn loss_at(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut g, &ids);
    g.value(out).item().unwrap()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)` over the
/// checked elements. `max_per_input` caps how many elements of each input
/// are perturbed (chosen at random with a fixed seed); `None` checks all.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Build, max_per_input: Option<usize>) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for (k, id) in ids.iter().enumerate() {
        let n = inputs[k].numel();
        let analytic: Vec<f64> = match grads.get(*id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let elems: Vec<usize> = match max_per_input {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for e in elems {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= EPS;
            let numeric = (loss_at(&plus, build) - loss_at(&minus, build)) / (2.0 * EPS);
            let a = analytic[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
pub fn randn_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v) + *v;
        }
    }
    t
}

/// Contracts an output with a fixed random tensor so every element gets a
/// distinct upstream gradient.
fn contract(g: &mut Graph<f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(g.shape(x), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

/// Per-operation gradient checks; each entry is `(op, max relative error)`.
pub fn op_gradient_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: Vec<Tensor<f64>>, build: &Build| {
        out.push((name.to_string(), max_relative_error(&inputs, build, None)));
    };

    let x = randn(&[2, 3, 6, 5], &mut rng);
    let w = randn(&[4, 3, 3, 3], &mut rng);
    let b = randn(&[4], &mut rng);
    check("conv2d stride 1 pad 1 + bias", vec![x.clone(), w.clone(), b], &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
        contract(g, y, 1)
    });
    check("conv2d stride 2 pad 0", vec![x.clone(), w], &|g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, 0).unwrap();
        contract(g, y, 2)
    });
    let w1 = randn(&[2, 3, 1, 1], &mut rng);
    check("conv2d 1x1 stride 2", vec![x.clone(), w1], &|g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, 0).unwrap();
        contract(g, y, 3)
    });

    let a = randn(&[5, 4], &mut rng);
    let lw = randn(&[3, 4], &mut rng);
    let lb = randn(&[3], &mut rng);
    check("linear + bias", vec![a.clone(), lw.clone(), lb], &|g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        contract(g, y, 4)
    });
    check("linear", vec![a.clone(), lw], &|g, v| {
        let y = g.linear(v[0], v[1], None).unwrap();
        contract(g, y, 5)
    });
    let m = randn(&[6, 4], &mut rng);
    check("matmul_nt", vec![a.clone(), m], &|g, v| {
        let y = g.matmul_nt(v[0], v[1]).unwrap();
        contract(g, y, 6)
    });
    check("relu", vec![randn_off_zero(&[4, 5], &mut rng)], &|g, v| {
        let y = g.relu(v[0]).unwrap();
        contract(g, y, 7)
    });

    let gamma = randn(&[3], &mut rng);
    let beta = randn(&[3], &mut rng);
    check("batch_norm train 4d", vec![x.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, None, 1e-5).unwrap();
        contract(g, y, 8)
    });
    let f = randn(&[6, 3], &mut rng);
    check("batch_norm train 2d", vec![f.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train, None, 1e-5).unwrap();
        contract(g, y, 9)
    });
    let (rm, rv) = (vec![0.3, -0.2, 0.1], vec![1.5, 0.7, 2.0]);
    check("batch_norm infer", vec![f.clone(), gamma, beta], &|g, v| {
        let y = g
            .batch_norm(v[0], v[1], v[2], BatchNormMode::Infer, Some((&rm, &rv)), 1e-5)
            .unwrap();
        contract(g, y, 10)
    });

    let p = randn(&[3, 4], &mut rng);
    let q = randn(&[3, 4], &mut rng);
    check("add", vec![p.clone(), q.clone()], &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        contract(g, y, 11)
    });
    check("sub", vec![p.clone(), q.clone()], &|g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        contract(g, y, 12)
    });
    check("mul", vec![p.clone(), q.clone()], &|g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        contract(g, y, 13)
    });
    check("scale", vec![p.clone()], &|g, v| {
        let y = g.scale(v[0], -1.7).unwrap();
        contract(g, y, 14)
    });
    check("transpose", vec![p.clone()], &|g, v| {
        let y = g.transpose(v[0]).unwrap();
        contract(g, y, 15)
    });
    check("reshape", vec![p.clone()], &|g, v| {
        let y = g.reshape(v[0], &[2, 6]).unwrap();
        contract(g, y, 16)
    });
    check("sum", vec![p.clone()], &|g, v| {
        let y = g.sum(v[0]).unwrap();
        g.scale(y, 0.5).unwrap()
    });
    check("mean", vec![p.clone()], &|g, v| {
        let y = g.mean(v[0]).unwrap();
        let z = g.mul(y, y).unwrap();
        g.add(z, y).unwrap()
    });
    let border = randn(&[1], &mut rng);
    check("append_border", vec![p.clone(), border], &|g, v| {
        let y = g.append_border(v[0], v[1]).unwrap();
        contract(g, y, 17)
    });
    check("slice_rows", vec![p.clone()], &|g, v| {
        let y = g.slice_rows(v[0], 2).unwrap();
        contract(g, y, 18)
    });
    let targets = vec![1, 3, 0];
    let weights = vec![1.0, 0.25, 0.6];
    check("softmax_cross_entropy", vec![q], &|g, v| {
        g.softmax_cross_entropy(v[0], &targets, &weights).unwrap()
    });
    out
}

/// A reduced encoder small enough for exhaustive f64 checks.
pub fn reduced_encoder_config() -> EncoderConfig {
    EncoderConfig {
        input_size: [16, 16],
        stem_channels: 4,
        stem_kernel: 3,
        stem_stride: 1,
        conv_stages: vec![
            ConvStage {
                channels: 4,
                blocks: 1,
                stride: 1,
            },
            ConvStage {
                channels: 8,
                blocks: 1,
                stride: 2,
            },
        ],
        embedding_dim: 8,
        mlp_layers: 2,
        mlp_width: 16,
        ..EncoderConfig::default()
    }
}

fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<GrayImage> {
    (0..n)
        .map(|_| GrayImage::from_fn(size, size, |_, _| rng.random::<f32>()))
        .collect()
}

/// Gradient of the full training objective with respect to every encoder
/// parameter tensor (a random subset of elements per tensor) and the dustbin.
pub fn encoder_gradient_error(per_tensor: usize) -> f64 {
    let cfg = reduced_encoder_config();
    let params = init_params(&cfg, 3).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let imgs1 = random_images(6, 16, &mut rng);
    let imgs2 = random_images(6, 16, &mut rng);
    let r1: Vec<&GrayImage> = imgs1.iter().collect();
    let r2: Vec<&GrayImage> = imgs2.iter().collect();
    let x1: Tensor<f64> = images_to_tensor(&r1, cfg.input_size).unwrap();
    let x2: Tensor<f64> = images_to_tensor(&r2, cfg.input_size).unwrap();
    let poses1: Vec<ProbePose> = (0..6).map(|i| ProbePose::new(0.0, 0.0, 4.0 * i as f64)).collect();
    let poses2: Vec<ProbePose> = (0..6).map(|i| ProbePose::new(0.0, 0.0, 4.0 * i as f64 + 5.5)).collect();
    let labels = label_pairs(&poses1, &poses2, 10.0);
    let names: Vec<String> = params.params.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|k| params.params[k].clone()).collect();
    let loss_cfg = LossConfig::default();
    let build = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let nodes = names.iter().cloned().zip(ids.iter().copied()).collect();
        let a = g.constant(x1.clone());
        let b = g.constant(x2.clone());
        let f1 = forward(g, &params, &nodes, a, BatchNormMode::Train).unwrap();
        let f2 = forward(g, &params, &nodes, b, BatchNormMode::Train).unwrap();
        let m = score_matrix(g, f1.embeddings, f2.embeddings, nodes[sweepmatch::encoder::DUSTBIN]).unwrap();
        total_loss(g, &m, &labels, None, true, &loss_cfg).unwrap().total
    };
    max_relative_error(&inputs, &build, Some(per_tensor))
}

/// `total_loss` gradients for each ablation mode and both normalizations,
/// plus the IVPP-weighted variant, with embeddings and dustbin as inputs.
pub fn loss_mode_gradient_errors() -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let b = 7;
    let idx1: Vec<usize> = vec![0, 3, 5, 9, 12, 20, 31];
    let idx2: Vec<usize> = vec![0, 3, 5, 9, 14, 22, 40];
    let pose = |i: usize| ProbePose::new(0.1 * i as f64, 0.0, 1.3 * i as f64);
    let p1: Vec<ProbePose> = idx1.iter().map(|&i| pose(i)).collect();
    let p2: Vec<ProbePose> = idx2.iter().map(|&i| pose(i)).collect();
    let z1 = randn(&[b, 5], &mut rng);
    let z2 = randn(&[b, 5], &mut rng);
    let alpha = randn(&[1], &mut rng);
    let mut out = Vec::new();
    let modes = [AblationMode::Sce, AblationMode::P1, AblationMode::P2, AblationMode::Full];
    for norm in [LossNormalization::BatchMean, LossNormalization::Literal] {
        for mode in modes {
            let tm = TrainingMode::from_ablation(mode);
            let labels = match tm.labels {
                LabelMode::ProbeDistance { threshold_mm } => label_pairs(&p1, &p2, threshold_mm),
                _ => same_frame_labels(&idx1, &idx2, distance_matrix(&p1, &p2)),
            };
            let cfg = LossConfig {
                normalization: norm,
                ..LossConfig::default()
            };
            let build = |g: &mut Graph<f64>, v: &[NodeId]| {
                let m = score_matrix(g, v[0], v[1], v[2]).unwrap();
                total_loss(g, &m, &labels, None, tm.triplet, &cfg).unwrap().total
            };
            let err = max_relative_error(&[z1.clone(), z2.clone(), alpha.clone()], &build, None);
            out.push((format!("{} ({norm:?})", mode.table_name()), err));
        }
    }
    let labels = same_frame_labels(&idx1, &idx2, distance_matrix(&p1, &p2));
    let w = ivpp_weight_matrix(&idx1, &idx2, 8);
    let cfg = LossConfig::default();
    let build = |g: &mut Graph<f64>, v: &[NodeId]| {
        let m = score_matrix(g, v[0], v[1], v[2]).unwrap();
        total_loss(g, &m, &labels, Some(&w), false, &cfg).unwrap().total
    };
    out.push((
        "weighted CE".to_string(),
        max_relative_error(&[z1, z2, alpha], &build, None),
    ));
    out
}

/// Brute-force labels: enumerate every pair, keep those strictly under the
/// threshold, take the nearest with the lower index winning ties; the
/// dustbin is the opposite batch size.
pub fn brute_force_labels(p1: &[ProbePose], p2: &[ProbePose], threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let dist = |a: &ProbePose, b: &ProbePose| {
        let [dx, dy, dz] = [0, 1, 2].map(|k| a.position[k] - b.position[k]);
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let nearest = |from: &ProbePose, pool: &[ProbePose]| -> usize {
        let mut best: Option<(f64, usize)> = None;
        for (j, q) in pool.iter().enumerate() {
            let d = dist(from, q);
            if d < threshold && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best.map_or(pool.len(), |(_, j)| j)
    };
    (
        p1.iter().map(|a| nearest(a, p2)).collect(),
        p2.iter().map(|b| nearest(b, p1)).collect(),
    )
}

/// Random pose batches with duplicated and equidistant poses mixed in so
/// ties and dustbin rows both occur. Returns `(agreeing batches, batches)`.
pub fn label_oracle_agreement(trials: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0;
    for _ in 0..trials {
        let b1 = rng.random_range(1..=40);
        let b2 = rng.random_range(1..=40);
        let spread = rng.random_range(5.0..200.0);
        let gridded = rng.random_bool(0.3);
        let pose = |rng: &mut ChaCha8Rng| {
            if gridded {
                ProbePose::new(0.0, 0.0, 5.0 * rng.random_range(0..10) as f64)
            } else {
                ProbePose::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..spread),
                )
            }
        };
        let p1: Vec<ProbePose> = (0..b1).map(|_| pose(&mut rng)).collect();
        let mut p2: Vec<ProbePose> = (0..b2).map(|_| pose(&mut rng)).collect();
        for k in 0..b2.min(b1) / 2 {
            p2[k] = p1[b1 - 1 - k];
        }
        let labels = label_pairs(&p1, &p2, 10.0);
        let (r, c) = brute_force_labels(&p1, &p2, 10.0);
        if labels.gt_1to2 == r && labels.gt_2to1 == c {
            agree += 1;
        }
    }
    (agree, trials)
}
