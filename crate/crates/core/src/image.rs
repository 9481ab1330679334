//! Slice preprocessing: bilinear resize and normalization into 3-channel
//! network inputs.

use serde::{Deserialize, Serialize};

use crate::nn::{Scalar, Tensor};
use crate::select::Slice2D;

/// Channel-major, then row-major image data.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v).unwrap()).collect(),
        )
        .expect("image tensor shape is consistent")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    #[default]
    UnitRange,
    /// Unit-range scaling followed by per-channel `(v - mean) / std`.
    MeanStd { mean: [f64; 3], std: [f64; 3] },
}

impl Normalization {
    pub fn validate(&self) -> Result<(), String> {
        if let Normalization::MeanStd { std, mean } = self {
            if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(format!("MeanStd std must be positive and finite, got {std:?}"));
            }
            if mean.iter().any(|m| !m.is_finite()) {
                return Err(format!("MeanStd mean must be finite, got {mean:?}"));
            }
        }
        Ok(())
    }
}

/// Bilinear resize with half-pixel centers and border clamping.
pub fn resize_bilinear(slice: &Slice2D, out_w: usize, out_h: usize) -> Slice2D {
    assert!(out_w >= 1 && out_h >= 1, "output size must be positive");
    let (w_in, h_in) = (slice.width, slice.height);
    // per-axis (lower index, upper index, fraction)
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        let max = (n_in - 1) as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = taps(out_w, w_in);
    let ys = taps(out_h, h_in);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = slice.at(y0, x0) * (1.0 - fx) + slice.at(y0, x1) * fx;
            let bottom = slice.at(y1, x0) * (1.0 - fx) + slice.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Slice2D::new(out_w, out_h, out, slice.slice_index)
}

/// Resize to `size × size`, scale to unit range, replicate to 3 channels and
/// apply the normalization.
pub fn to_model_input(slice: &Slice2D, size: usize, norm: &Normalization) -> ImageTensor {
    let (lo, hi) = slice.min_max();
    let resized = resize_bilinear(slice, size, size);
    let unit: Vec<f64> = if hi > lo {
        let inv = 1.0 / (hi - lo);
        resized.pixels.iter().map(|&p| ((p - lo) * inv).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5; size * size]
    };
    let mut data = Vec::with_capacity(3 * unit.len());
    for c in 0..3 {
        match norm {
            Normalization::UnitRange => data.extend_from_slice(&unit),
            Normalization::MeanStd { mean, std } => {
                data.extend(unit.iter().map(|&v| (v - mean[c]) / std[c]));
            }
        }
    }
    ImageTensor::new(3, size, size, data)
}
