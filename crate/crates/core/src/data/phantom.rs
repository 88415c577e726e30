//! Procedural phantom volumes and freehand sweeps through them.
//!
//! Each sweep gets its own phantom: a layered background with undulating
//! fascia lines, ellipsoidal hypo/hyper-echoic inclusions, dark tubular
//! vessels with bright walls, and multiplicative lattice speckle. The
//! volume is evaluated procedurally at sample points, so nothing larger
//! than one frame is ever materialized.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, GrayImage, ProbePose, Sweep, SweepFrame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Lateral, depth and elevation extent in voxels.
    pub volume_dims_voxels: [usize; 3],
    /// Voxel edge length; also the pixel spacing of the rendered frames.
    pub voxel_mm: f64,
    /// Frame size as `[height, width]`.
    pub image_size: [usize; 2],
    pub inclusion_count: usize,
    pub vessel_count: usize,
    pub speckle_noise_sigma: f64,
    pub sweep_length_frames: usize,
    pub inter_frame_spacing_mm: f64,
    /// Heading change per millimetre of travel (1/mm).
    pub trajectory_curvature: f64,
    pub pose_jitter_mm: f64,
    pub frame_interval_s: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            volume_dims_voxels: [220, 128, 480],
            voxel_mm: 0.35,
            image_size: [128, 128],
            inclusion_count: 40,
            vessel_count: 3,
            speckle_noise_sigma: 0.35,
            sweep_length_frames: 150,
            inter_frame_spacing_mm: 1.0,
            trajectory_curvature: 0.001,
            pose_jitter_mm: 0.2,
            frame_interval_s: 1.0 / 5.76,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    fn extent_mm(&self) -> [f64; 3] {
        self.volume_dims_voxels.map(|d| d as f64 * self.voxel_mm)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Invalid(m));
        if self.volume_dims_voxels.iter().any(|&d| d == 0) || self.image_size.iter().any(|&d| d == 0) {
            return bad("volume and image dimensions must be positive".into());
        }
        if !(self.voxel_mm > 0.0) {
            return bad(format!("voxel_mm {} must be positive", self.voxel_mm));
        }
        if !(self.inter_frame_spacing_mm > 0.0) {
            return bad(format!(
                "inter_frame_spacing_mm {} must be positive",
                self.inter_frame_spacing_mm
            ));
        }
        if !(self.pose_jitter_mm >= 0.0) || !(self.speckle_noise_sigma >= 0.0) {
            return bad("pose jitter and speckle sigma must be non-negative".into());
        }
        if !(self.frame_interval_s > 0.0) {
            return bad("frame_interval_s must be positive".into());
        }
        if self.sweep_length_frames == 0 {
            return bad("sweep_length_frames must be at least 1".into());
        }
        let [h, w] = self.image_size;
        if w > self.volume_dims_voxels[0] || h > self.volume_dims_voxels[1] {
            return bad(format!(
                "{w}x{h} frames do not fit a {}x{} voxel cross-section",
                self.volume_dims_voxels[0], self.volume_dims_voxels[1]
            ));
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn sweep_seed(seed: u64, index: usize) -> u64 {
    splitmix(seed ^ splitmix(index as u64 + 1))
}

struct Layer {
    depth: f64,
    amp_x: f64,
    freq_x: f64,
    phase_x: f64,
    amp_z: f64,
    freq_z: f64,
    phase_z: f64,
    echo_below: f64,
}

impl Layer {
    fn boundary(&self, x: f64, z: f64) -> f64 {
        self.depth
            + self.amp_x * (self.freq_x * x + self.phase_x).sin()
            + self.amp_z * (self.freq_z * z + self.phase_z).sin()
    }
}

struct Inclusion {
    center: [f64; 3],
    radii: [f64; 3],
    echo: f64,
}

struct Vessel {
    point: [f64; 3],
    dir: [f64; 3],
    radius: f64,
}

struct Phantom {
    extent: [f64; 3],
    surface_echo: f64,
    layers: Vec<Layer>,
    inclusions: Vec<Inclusion>,
    vessels: Vec<Vessel>,
    noise_seed: u64,
    speckle_sigma: f64,
    lattice_mm: f64,
}

impl Phantom {
    fn random(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Self {
        let extent = cfg.extent_mm();
        let depth = extent[1];
        let layer_count = 3;
        let mut layers: Vec<Layer> = (0..layer_count)
            .map(|k| {
                let frac = (k as f64 + 1.0) / (layer_count as f64 + 1.5);
                Layer {
                    depth: depth * (frac + rng.random_range(-0.06..0.06)),
                    amp_x: depth * rng.random_range(0.01..0.05),
                    freq_x: rng.random_range(0.05..0.2),
                    phase_x: rng.random_range(0.0..std::f64::consts::TAU),
                    amp_z: depth * rng.random_range(0.02..0.08),
                    freq_z: rng.random_range(0.02..0.08),
                    phase_z: rng.random_range(0.0..std::f64::consts::TAU),
                    echo_below: rng.random_range(0.3..0.6),
                }
            })
            .collect();
        layers.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let inclusions = (0..cfg.inclusion_count)
            .map(|_| {
                let r = rng.random_range(2.5..9.0);
                let center = [
                    rng.random_range(0.0..extent[0]),
                    rng.random_range(0.15 * depth..0.95 * depth),
                    rng.random_range(0.0..extent[2]),
                ];
                let radii = [
                    r * rng.random_range(0.7..1.4),
                    r * rng.random_range(0.5..1.0),
                    r * rng.random_range(0.7..1.4),
                ];
                let echo = if rng.random_bool(0.5) {
                    rng.random_range(0.05..0.22)
                } else {
                    rng.random_range(0.75..0.95)
                };
                Inclusion {
                    center,
                    radii,
                    echo,
                }
            })
            .collect();
        let vessels = (0..cfg.vessel_count)
            .map(|_| {
                let point = [
                    rng.random_range(0.2 * extent[0]..0.8 * extent[0]),
                    rng.random_range(0.3 * depth..0.8 * depth),
                    rng.random_range(0.0..extent[2]),
                ];
                let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let tilt: f64 = rng.random_range(-0.3..0.3);
                let dir = [az.cos() * tilt.cos(), tilt.sin(), az.sin() * tilt.cos()];
                Vessel {
                    point,
                    dir,
                    radius: rng.random_range(1.5..4.0),
                }
            })
            .collect();
        Self {
            extent,
            surface_echo: rng.random_range(0.7..0.9),
            layers,
            inclusions,
            vessels,
            noise_seed: rng.random(),
            speckle_sigma: cfg.speckle_noise_sigma,
            lattice_mm: cfg.voxel_mm,
        }
    }

    fn lattice(&self, i: i64, j: i64, k: i64) -> f64 {
        let h = splitmix(
            self.noise_seed
                ^ (i as u64).wrapping_mul(0x9E37_79B1)
                ^ (j as u64).wrapping_mul(0x85EB_CA77_C2B2_AE63)
                ^ (k as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F),
        );
        // uniform on [-sqrt(3), sqrt(3)]: unit variance at lattice points
        ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * 3f64.sqrt()
    }

    fn speckle(&self, p: [f64; 3]) -> f64 {
        let q = p.map(|v| v / self.lattice_mm);
        let b = q.map(|v| v.floor());
        let f = [q[0] - b[0], q[1] - b[1], q[2] - b[2]];
        let (i, j, k) = (b[0] as i64, b[1] as i64, b[2] as i64);
        let mut acc = 0.0;
        for (di, wx) in [(0, 1.0 - f[0]), (1, f[0])] {
            for (dj, wy) in [(0, 1.0 - f[1]), (1, f[1])] {
                for (dk, wz) in [(0, 1.0 - f[2]), (1, f[2])] {
                    acc += wx * wy * wz * self.lattice(i + di, j + dj, k + dk);
                }
            }
        }
        acc
    }

    /// Echogenicity in `[0, 1]` before quantization.
    fn intensity(&self, p: [f64; 3], inclusions: &[&Inclusion]) -> f64 {
        let [x, y, z] = p;
        let mut echo = self.surface_echo;
        if y > 1.5 {
            echo = 0.35;
        }
        let mut line = 0.0;
        for layer in &self.layers {
            let b = layer.boundary(x, z);
            if y > b {
                echo = layer.echo_below;
            }
            let d = (y - b) / 0.5;
            line += 0.35 * (-0.5 * d * d).exp();
        }
        echo += line;
        for inc in inclusions {
            let r = (0..3)
                .map(|a| ((p[a] - inc.center[a]) / inc.radii[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            let m = 1.0 / (1.0 + ((r - 1.0) / 0.08).exp());
            echo = inc.echo * m + echo * (1.0 - m);
        }
        for v in &self.vessels {
            let d0 = [p[0] - v.point[0], p[1] - v.point[1], p[2] - v.point[2]];
            let along = d0[0] * v.dir[0] + d0[1] * v.dir[1] + d0[2] * v.dir[2];
            let perp2 = d0.iter().map(|c| c * c).sum::<f64>() - along * along;
            let d = perp2.max(0.0).sqrt();
            let inside = 1.0 / (1.0 + ((d - v.radius) / 0.15).exp());
            let wall = (-0.5 * ((d - v.radius) / 0.4).powi(2)).exp();
            echo = 0.04 * inside + echo * (1.0 - inside) + 0.45 * wall;
        }
        let attenuation = 1.0 - 0.3 * y / self.extent[1];
        let speckle = (1.0 + self.speckle_sigma * self.speckle(p)).max(0.0);
        (echo * attenuation * speckle).clamp(0.0, 1.0)
    }

    fn render(&self, center_x: f64, z: f64, cfg: &PhantomConfig) -> GrayImage {
        let [h, w] = cfg.image_size;
        let s = cfg.voxel_mm;
        let active: Vec<&Inclusion> = self
            .inclusions
            .iter()
            .filter(|inc| (z - inc.center[2]).abs() < inc.radii[2] * 1.6)
            .collect();
        let mut img = GrayImage::from_fn(w, h, |u, v| {
            let x = center_x + (u as f64 + 0.5 - w as f64 / 2.0) * s;
            let y = (v as f64 + 0.5) * s;
            self.intensity([x, y, z], &active) as f32
        });
        img.quantize_8bit();
        img
    }
}

/// Slice centres along a constant-curvature path in the lateral/elevation
/// plane. Consecutive centres are exactly `spacing` apart.
fn trajectory(len: usize, spacing: f64, heading0: f64, curvature: f64) -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(len);
    let mut p = [0.0f64, 0.0f64];
    for i in 0..len {
        pts.push(p);
        let heading = heading0 + curvature * spacing * i as f64;
        p = [p[0] + spacing * heading.sin(), p[1] + spacing * heading.cos()];
    }
    pts
}

fn generate_sweep(cfg: &PhantomConfig, index: usize) -> Result<Sweep, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(sweep_seed(cfg.seed, index));
    let extent = cfg.extent_mm();
    let [h, w] = cfg.image_size;
    let half_w = w as f64 * cfg.voxel_mm / 2.0;
    let heading0 = if cfg.trajectory_curvature == 0.0 {
        0.0
    } else {
        rng.random_range(-0.05..0.05)
    };
    let curvature = if rng.random_bool(0.5) {
        cfg.trajectory_curvature
    } else {
        -cfg.trajectory_curvature
    };
    let rel = trajectory(cfg.sweep_length_frames, cfg.inter_frame_spacing_mm, heading0, curvature);
    let (min_x, max_x) = rel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[0]), b.max(p[0])));
    let (min_z, max_z) = rel
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[1]), b.max(p[1])));
    let lo_x = half_w - min_x;
    let hi_x = extent[0] - half_w - max_x;
    let lo_z = -min_z;
    let hi_z = extent[2] - max_z;
    if lo_x > hi_x || lo_z > hi_z {
        return Err(DataError::TrajectoryOutOfBounds { sweep_index: index });
    }
    let start_x = if hi_x > lo_x { rng.random_range(lo_x..hi_x) } else { lo_x };
    let start_z = if hi_z > lo_z { rng.random_range(lo_z..hi_z) } else { lo_z };
    let phantom = Phantom::random(cfg, &mut rng);
    let jitter = Normal::new(0.0, cfg.pose_jitter_mm).expect("validated sigma");
    let center_y = h as f64 * cfg.voxel_mm / 2.0;

    let frames = rel
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cx = start_x + r[0];
            let cz = start_z + r[1];
            let image = phantom.render(cx, cz, cfg);
            let mut pos = [cx, center_y, cz];
            if cfg.pose_jitter_mm > 0.0 {
                for c in &mut pos {
                    *c += jitter.sample(&mut rng);
                }
            }
            SweepFrame {
                image,
                time_s: i as f64 * cfg.frame_interval_s,
                pose: ProbePose { position: pos },
                frame_index: i,
            }
        })
        .collect();
    Ok(Sweep {
        id: format!("phantom-{}-{index:03}", cfg.seed),
        frames,
        pixel_spacing_mm: cfg.voxel_mm,
    })
}

/// Generates `n_sweeps` independent phantom sweeps. Deterministic in
/// `(config, n_sweeps)`; each sweep derives its own seed from its index.
pub fn generate_phantom_dataset(config: &PhantomConfig, n_sweeps: usize) -> Result<Vec<Sweep>, DataError> {
    config.validate()?;
    (0..n_sweeps)
        .into_par_iter()
        .map(|i| generate_sweep(config, i))
        .collect()
}
