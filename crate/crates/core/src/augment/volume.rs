use rand::Rng;
use serde::{Deserialize, Serialize};

use super::uniform;
use crate::data::{DataError, GrayImage, ProbePose, Sweep};

/// Frames stacked around a source frame: `2 * half_width + 1` slices with
/// the source frame in the middle.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniVolume {
    pub slices: Vec<GrayImage>,
    /// Index of the source frame within its sweep.
    pub center_index: usize,
    pub source_pose: ProbePose,
}

impl MiniVolume {
    pub fn half_width(&self) -> usize {
        self.slices.len() / 2
    }

    pub fn center_slice(&self) -> &GrayImage {
        &self.slices[self.half_width()]
    }

    fn voxel(&self, s: i64, y: i64, x: i64) -> f64 {
        let img = &self.slices[0];
        if s < 0
            || y < 0
            || x < 0
            || s >= self.slices.len() as i64
            || y >= img.height() as i64
            || x >= img.width() as i64
        {
            return 0.0;
        }
        self.slices[s as usize].get(x as usize, y as usize) as f64
    }

    /// Trilinear sample in `(slice, row, column)` voxel coordinates, zero
    /// outside the stack.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let b = p.map(f64::floor);
        let f = [p[0] - b[0], p[1] - b[1], p[2] - b[2]];
        let (s, y, x) = (b[0] as i64, b[1] as i64, b[2] as i64);
        let mut acc = 0.0;
        for (ds, ws) in [(0, 1.0 - f[0]), (1, f[0])] {
            for (dy, wy) in [(0, 1.0 - f[1]), (1, f[1])] {
                for (dx, wx) in [(0, 1.0 - f[2]), (1, f[2])] {
                    let w = ws * wy * wx;
                    if w != 0.0 {
                        acc += w * self.voxel(s + ds, y + dy, x + dx);
                    }
                }
            }
        }
        acc
    }
}

/// Stacks `half_width` frames on either side of `index`, replicating the
/// first/last frame past the sweep ends.
pub fn build_mini_volume(sweep: &Sweep, index: usize, half_width: usize) -> Result<MiniVolume, DataError> {
    if index >= sweep.len() {
        return Err(DataError::Invalid(format!(
            "frame {index} out of range for sweep of {} frames",
            sweep.len()
        )));
    }
    let last = sweep.len() as i64 - 1;
    let slices = (-(half_width as i64)..=half_width as i64)
        .map(|o| {
            let i = (index as i64 + o).clamp(0, last) as usize;
            sweep.frames[i].image.clone()
        })
        .collect();
    Ok(MiniVolume {
        slices,
        center_index: index,
        source_pose: sweep.frames[index].pose,
    })
}

/// A 3D similarity transform about the volume centre.
///
/// Axes are `(slice, row, column)`. `rotation_deg[0]` turns about the slice
/// normal (in-plane), `[1]` about the row axis and `[2]` about the column
/// axis (both out-of-plane). Translations are fractions of the extent along
/// each axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine3d {
    pub rotation_deg: [f64; 3],
    pub translation_frac: [f64; 3],
    pub scale: f64,
}

impl Affine3d {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation_frac: [0.0; 3],
            scale: 1.0,
        }
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let [a, b, g] = self.rotation_deg.map(f64::to_radians);
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        let about_slice = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
        let about_row = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
        let about_col = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
        matmul3(&matmul3(&about_slice, &about_row), &about_col)
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Sampling ranges for the query transform; symmetric ranges are half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Affine3dRanges {
    pub rotation_deg: [f64; 3],
    pub translation_frac: [f64; 3],
    pub scale: [f64; 2],
}

impl Default for Affine3dRanges {
    fn default() -> Self {
        Self {
            rotation_deg: [10.0; 3],
            translation_frac: [0.05; 3],
            scale: [0.95, 1.05],
        }
    }
}

impl Affine3dRanges {
    pub fn identity() -> Self {
        Self {
            rotation_deg: [0.0; 3],
            translation_frac: [0.0; 3],
            scale: [1.0, 1.0],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Affine3d {
        Affine3d {
            rotation_deg: self.rotation_deg.map(|r| uniform(rng, -r, r)),
            translation_frac: self.translation_frac.map(|t| uniform(rng, -t, t)),
            scale: uniform(rng, self.scale[0], self.scale[1]),
        }
    }
}

/// Transforms the mini-volume about its centre with trilinear resampling and
/// returns the resulting central slice.
pub fn affine_3d_query(volume: &MiniVolume, transform: &Affine3d) -> GrayImage {
    let first = &volume.slices[0];
    let (w, h) = (first.width(), first.height());
    let dims = [volume.slices.len() as f64, h as f64, w as f64];
    let c = dims.map(|d| (d - 1.0) / 2.0);
    let t = [
        transform.translation_frac[0] * dims[0],
        transform.translation_frac[1] * dims[1],
        transform.translation_frac[2] * dims[2],
    ];
    let r = transform.rotation();
    let out_s = volume.half_width() as f64;
    GrayImage::from_fn(w, h, |x, y| {
        let d = [
            (out_s - c[0] - t[0]) / transform.scale,
            (y as f64 - c[1] - t[1]) / transform.scale,
            (x as f64 - c[2] - t[2]) / transform.scale,
        ];
        // inverse rotation is the transpose
        let src = [
            c[0] + r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            c[1] + r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            c[2] + r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ];
        volume.sample(src).clamp(0.0, 1.0) as f32
    })
}
