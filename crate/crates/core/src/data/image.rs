use serde::{Deserialize, Serialize};

/// Single-channel image with intensities in `[0, 1]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    /// Returns `None` when `data.len() != width * height` or a side is zero.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Option<Self> {
        (width > 0 && height > 0 && data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel coordinates; neighbours outside the
    /// image contribute zero.
    pub fn sample_zero(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.data[yi as usize * self.width + xi as usize] as f64
            }
        };
        let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
        let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize using pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let clamp = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
        GrayImage::from_fn(width, height, |x, y| {
            let fx = clamp((x as f64 + 0.5) * sx - 0.5, self.width);
            let fy = clamp((y as f64 + 0.5) * sy - 0.5, self.height);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let g = |xi: usize, yi: usize| self.get(xi, yi) as f64;
            let top = g(x0, y0) * (1.0 - tx) + g(x1, y0) * tx;
            let bottom = g(x0, y1) * (1.0 - tx) + g(x1, y1) * tx;
            (top * (1.0 - ty) + bottom * ty) as f32
        })
    }

    /// Rounds every intensity to the nearest multiple of 1/255.
    pub fn quantize_8bit(&mut self) {
        for v in &mut self.data {
            *v = byte_to_unit(unit_to_byte(*v));
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

pub(crate) fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub(crate) fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}
