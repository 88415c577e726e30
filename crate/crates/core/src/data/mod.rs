//! Tracked sweeps: frames, probe poses, on-disk layout and a synthetic
//! phantom generator.

mod image;
mod io;
mod phantom;

pub use image::GrayImage;
pub use io::{load_sweep, read_pgm, save_sweep, write_pgm, FrameEntry, Manifest};
pub use phantom::{generate_phantom_dataset, PhantomConfig};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest and frame files disagree: {0}")]
    ManifestMismatch(String),
    #[error("{path}: corrupt PGM: {reason}")]
    CorruptPgm { path: PathBuf, reason: String },
    #[error("frame {index}: timestamp {time_s} is not after the previous frame")]
    NonMonotonicTime { index: usize, time_s: f64 },
    #[error("sweep {sweep_index}: trajectory leaves the phantom volume")]
    TrajectoryOutOfBounds { sweep_index: usize },
    #[error("invalid sweep: {0}")]
    Invalid(String),
}

/// Probe translation in tracker coordinates, millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePose {
    pub position: [f64; 3],
}

impl ProbePose {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            position: [x, y, z],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
    }
}

/// Euclidean distance between two probe positions in millimetres.
pub fn probe_distance(a: &ProbePose, b: &ProbePose) -> f64 {
    a.position
        .iter()
        .zip(&b.position)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFrame {
    pub image: GrayImage,
    pub time_s: f64,
    pub pose: ProbePose,
    pub frame_index: usize,
}

/// An ordered, tracked sequence of frames from one continuous scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub id: String,
    pub frames: Vec<SweepFrame>,
    pub pixel_spacing_mm: f64,
}

impl Sweep {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.frames
            .first()
            .map(|f| (f.image.height(), f.image.width()))
    }

    pub fn poses(&self) -> Vec<ProbePose> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    /// Checks every structural invariant of a sweep.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.frames.is_empty() {
            return Err(DataError::Invalid(format!("sweep `{}` has no frames", self.id)));
        }
        if !(self.pixel_spacing_mm > 0.0 && self.pixel_spacing_mm.is_finite()) {
            return Err(DataError::Invalid(format!(
                "pixel spacing {} must be positive",
                self.pixel_spacing_mm
            )));
        }
        let (h, w) = self.image_size().expect("non-empty");
        let mut prev_time = f64::NEG_INFINITY;
        for (i, f) in self.frames.iter().enumerate() {
            if f.frame_index != i {
                return Err(DataError::Invalid(format!(
                    "frame at position {i} has index {}",
                    f.frame_index
                )));
            }
            if f.image.height() != h || f.image.width() != w {
                return Err(DataError::Invalid(format!(
                    "frame {i} is {}x{}, expected {w}x{h}",
                    f.image.width(),
                    f.image.height()
                )));
            }
            if f.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DataError::Invalid(format!("frame {i} has intensities outside [0, 1]")));
            }
            if !f.pose.is_finite() {
                return Err(DataError::Invalid(format!("frame {i} has a non-finite pose")));
            }
            if !(f.time_s >= 0.0) || f.time_s <= prev_time {
                return Err(DataError::NonMonotonicTime {
                    index: i,
                    time_s: f.time_s,
                });
            }
            prev_time = f.time_s;
        }
        Ok(())
    }
}
