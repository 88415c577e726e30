//! Training-time 2D augmentation and the 3D mini-volume transform used to
//! synthesize out-of-plane query views.

mod volume;

pub use volume::{affine_3d_query, build_mini_volume, Affine3d, Affine3dRanges, MiniVolume};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;

/// Sampling ranges for [`augment_2d`]. Symmetric ranges are given by their
/// half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment2DParams {
    pub rotation_deg_range: f64,
    pub translate_frac_range: f64,
    pub scale_range: [f64; 2],
    pub crop_scale_range: [f64; 2],
    pub brightness_delta_range: f64,
    pub contrast_factor_range: [f64; 2],
}

impl Default for Augment2DParams {
    fn default() -> Self {
        Self {
            rotation_deg_range: 10.0,
            translate_frac_range: 0.1,
            scale_range: [0.9, 1.1],
            crop_scale_range: [0.7, 1.0],
            brightness_delta_range: 0.2,
            contrast_factor_range: [0.8, 1.2],
        }
    }
}

impl Augment2DParams {
    /// Every range collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            rotation_deg_range: 0.0,
            translate_frac_range: 0.0,
            scale_range: [1.0, 1.0],
            crop_scale_range: [1.0, 1.0],
            brightness_delta_range: 0.0,
            contrast_factor_range: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let sym = [
            ("rotation_deg_range", self.rotation_deg_range),
            ("translate_frac_range", self.translate_frac_range),
            ("brightness_delta_range", self.brightness_delta_range),
        ];
        for (name, v) in sym {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        let ranges = [
            ("scale_range", self.scale_range),
            ("crop_scale_range", self.crop_scale_range),
            ("contrast_factor_range", self.contrast_factor_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || !(lo > 0.0) {
                return Err(format!("{name} must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
            }
        }
        if self.crop_scale_range[1] > 1.0 {
            return Err("crop_scale_range cannot exceed 1".into());
        }
        Ok(())
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Augment2DSample {
    pub rotation_deg: f64,
    /// Translation as a fraction of width / height.
    pub translate_frac: [f64; 2],
    pub scale: f64,
    /// Fraction of the image area kept by the crop.
    pub crop_scale: f64,
    /// Crop origin as a fraction of the free margin, each in `[0, 1]`.
    pub crop_origin: [f64; 2],
    pub brightness_delta: f64,
    pub contrast_factor: f64,
}

impl Augment2DSample {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translate_frac: [0.0, 0.0],
            scale: 1.0,
            crop_scale: 1.0,
            crop_origin: [0.0, 0.0],
            brightness_delta: 0.0,
            contrast_factor: 1.0,
        }
    }
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_2d<R: Rng + ?Sized>(params: &Augment2DParams, rng: &mut R) -> Augment2DSample {
    let r = params.rotation_deg_range;
    let t = params.translate_frac_range;
    let b = params.brightness_delta_range;
    Augment2DSample {
        rotation_deg: uniform(rng, -r, r),
        translate_frac: [uniform(rng, -t, t), uniform(rng, -t, t)],
        scale: uniform(rng, params.scale_range[0], params.scale_range[1]),
        crop_scale: uniform(rng, params.crop_scale_range[0], params.crop_scale_range[1]),
        crop_origin: [uniform(rng, 0.0, 1.0), uniform(rng, 0.0, 1.0)],
        brightness_delta: uniform(rng, -b, b),
        contrast_factor: uniform(rng, params.contrast_factor_range[0], params.contrast_factor_range[1]),
    }
}

/// Applies a resized crop of a rotated/scaled/translated copy of `frame`,
/// then brightness and contrast jitter. Pixels mapped from outside the
/// source are black; the result is clamped to `[0, 1]`.
pub fn apply_2d(frame: &GrayImage, s: &Augment2DSample) -> GrayImage {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let k = s.crop_scale.sqrt();
    let origin = [s.crop_origin[0] * (1.0 - k) * w, s.crop_origin[1] * (1.0 - k) * h];
    let c = [(w - 1.0) / 2.0, (h - 1.0) / 2.0];
    let t = [s.translate_frac[0] * w, s.translate_frac[1] * h];
    let (sin, cos) = s.rotation_deg.to_radians().sin_cos();

    let mut geo = GrayImage::from_fn(frame.width(), frame.height(), |x, y| {
        let qx = origin[0] + (x as f64 + 0.5) * k - 0.5;
        let qy = origin[1] + (y as f64 + 0.5) * k - 0.5;
        let dx = (qx - c[0] - t[0]) / s.scale;
        let dy = (qy - c[1] - t[1]) / s.scale;
        // inverse rotation
        let sx = c[0] + cos * dx + sin * dy;
        let sy = c[1] - sin * dx + cos * dy;
        frame.sample_zero(sx, sy) as f32
    });

    let bright: Vec<f64> = geo
        .data()
        .iter()
        .map(|&v| v as f64 + s.brightness_delta)
        .collect();
    let mean = bright.iter().sum::<f64>() / bright.len() as f64;
    let cf = s.contrast_factor;
    for (out, v) in geo.data_mut().iter_mut().zip(bright) {
        *out = (cf * v + (1.0 - cf) * mean).clamp(0.0, 1.0) as f32;
    }
    geo
}

/// Random affine + resized crop + colour jitter, drawn from `params`.
pub fn augment_2d<R: Rng + ?Sized>(frame: &GrayImage, params: &Augment2DParams, rng: &mut R) -> GrayImage {
    apply_2d(frame, &sample_2d(params, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(w: usize, h: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| ((x * 37 + y * 91) % 255) as f32 / 255.0)
    }

    #[test]
    fn identity_ranges_are_exact() {
        let img = pattern(17, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            assert_eq!(augment_2d(&img, &Augment2DParams::identity(), &mut rng), img);
        }
    }

    #[test]
    fn brightness_shift_on_constant() {
        let img = GrayImage::filled(8, 8, 0.5);
        let s = Augment2DSample {
            brightness_delta: 0.1,
            ..Augment2DSample::identity()
        };
        let out = apply_2d(&img, &s);
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
    }

    #[test]
    fn seeded_draws_repeat() {
        let img = pattern(16, 16);
        let p = Augment2DParams::default();
        let a = augment_2d(&img, &p, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_2d(&img, &p, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        let c = augment_2d(&img, &p, &mut ChaCha8Rng::seed_from_u64(10));
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_inverted_ranges() {
        let p = Augment2DParams {
            scale_range: [1.2, 0.8],
            ..Augment2DParams::default()
        };
        assert!(p.validate().is_err());
        assert!(Augment2DParams::default().validate().is_ok());
    }

    proptest! {
        #[test]
        fn shape_and_range_preserved(seed in any::<u64>(), w in 4usize..24, h in 4usize..24) {
            let img = pattern(w, h);
            let out = augment_2d(&img, &Augment2DParams::default(), &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!((out.width(), out.height()), (w, h));
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
