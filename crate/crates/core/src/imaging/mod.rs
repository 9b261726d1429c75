//! Optical/thermal degradation pipeline, procedural scenes, NetPBM files
//! and the dataset manifest.

mod degrade;
mod manifest;
mod netpbm;
mod toy;

pub use degrade::{
    apply_haze_mask, bayer_demosaic, bayer_mosaic, crf, degrade_optical, degrade_thermal,
    gaussian_blur_plane, gaussian_poisson_noise, poisson_stage, sample_haze, sample_low_light,
    sample_noise, simulate_low_light, synthesize_haze, value_noise_mask, CrfDirection,
    DegradationMode, HazeParams, LowLightParams, NoiseParams, BD_BLUR_SIGMA, BD_BLUR_SIZE,
    CRF_GAMMA,
};
pub use manifest::{Attribute, DatasetManifest, ManifestRecord};
pub use netpbm::{
    decode_pgm16, decode_ppm8, encode_pgm16, encode_ppm8, read_pgm16, read_ppm8, write_pgm16,
    write_ppm8,
};
pub use toy::{edge_overlap_fraction, generate_toy_pair};

use crate::error::{ensure, Result};
use crate::numcore::{Scalar, Tensor};

/// Single-channel image, values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Three-channel image, values in [0, 1], stored `H x W x 3` interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width && height > 0 && width > 0,
            "ImagePlane::new",
            "{height}x{width} plane needs {} values, got {}",
            height * width,
            data.len()
        );
        Ok(ImagePlane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImagePlane {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Rectangular crop starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width,
            "ImagePlane::crop",
            "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(ImagePlane {
            height: h,
            width: w,
            data,
        })
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, 1, self.height, self.width], &self.data).expect("consistent dims")
    }

    /// Plane from a tensor whose trailing dims are `H x W` and which holds a
    /// single plane. Values are clamped to [0, 1].
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let r = t.rank();
        ensure!(r >= 2, "ImagePlane::from_tensor", "rank {r} < 2");
        let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
        ensure!(
            t.numel() == h * w,
            "ImagePlane::from_tensor",
            "tensor {:?} holds more than one plane",
            t.shape()
        );
        Ok(ImagePlane::new(h, w, t.to_f64_vec())?.clamp01())
    }
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width * 3 && height > 0 && width > 0,
            "ImageRGB::new",
            "{height}x{width}x3 image needs {} values, got {}",
            height * width * 3,
            data.len()
        );
        Ok(ImageRGB {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImageRGB {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel(&self, c: usize) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn from_channels(r: &ImagePlane, g: &ImagePlane, b: &ImagePlane) -> Self {
        let mut data = Vec::with_capacity(r.data.len() * 3);
        for i in 0..r.data.len() {
            data.extend_from_slice(&[r.data[i], g.data[i], b.data[i]]);
        }
        ImageRGB {
            height: r.height,
            width: r.width,
            data,
        }
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> ImagePlane {
        ImagePlane {
            height: self.height,
            width: self.width,
            data: self
                .data
                .chunks(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width,
            "ImageRGB::crop",
            "crop {h}x{w}+{y0}+{x0} exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(ImageRGB {
            height: h,
            width: w,
            data,
        })
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut planar = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                planar[c * hw + i] = px[c];
            }
        }
        Tensor::from_f64(&[1, 3, self.height, self.width], &planar).expect("consistent dims")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let [n, c, h, w] = t.dims4("ImageRGB::from_tensor")?;
        ensure!(n == 1 && c == 3, "ImageRGB::from_tensor", "expected 1x3xHxW, got {:?}", t.shape());
        let hw = h * w;
        let src = t.to_f64_vec();
        let mut data = vec![0.0; 3 * hw];
        for i in 0..hw {
            for ch in 0..3 {
                data[i * 3 + ch] = src[ch * hw + i];
            }
        }
        Ok(ImageRGB::new(h, w, data)?.clamp01())
    }
}

/// Stack planes into an `N x 1 x H x W` batch.
pub fn planes_to_batch<T: Scalar>(planes: &[ImagePlane]) -> Result<Tensor<T>> {
    ensure!(!planes.is_empty(), "planes_to_batch", "empty batch");
    let (h, w) = (planes[0].height, planes[0].width);
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        ensure!(p.height == h && p.width == w, "planes_to_batch", "ragged batch");
        data.extend_from_slice(&p.data);
    }
    Tensor::from_f64(&[planes.len(), 1, h, w], &data)
}

/// Stack RGB images into an `N x 3 x H x W` batch.
pub fn rgb_to_batch<T: Scalar>(images: &[ImageRGB]) -> Result<Tensor<T>> {
    ensure!(!images.is_empty(), "rgb_to_batch", "empty batch");
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        ensure!(img.height == h && img.width == w, "rgb_to_batch", "ragged batch");
        data.extend_from_slice(img.to_tensor::<f64>().data());
    }
    Tensor::from_f64(&[images.len(), 3, h, w], &data)
}
