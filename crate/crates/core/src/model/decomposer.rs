//! Pluggable illumination/reflectance decomposition for the low-light
//! branch.

use std::fmt::Debug;

use crate::error::{ensure, Result};
use crate::imaging::{gaussian_blur_plane, ImagePlane, ImageRGB};
use crate::numcore::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Decomposition {
    pub reflectance: ImageRGB,
    pub illumination: ImagePlane,
    pub enhanced: ImageRGB,
}

pub trait Decomposer: Debug + Send + Sync {
    fn decompose(&self, img: &ImageRGB) -> Result<Decomposition>;
}

/// Single-scale Retinex: smoothed channel max as illumination, gamma lift
/// of the illumination for enhancement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetinexDecomposer {
    pub sigma: f64,
    pub gamma: f64,
}

impl Default for RetinexDecomposer {
    fn default() -> Self {
        RetinexDecomposer { sigma: 5.0, gamma: 0.4 }
    }
}

const RETINEX_EPS: f64 = 1e-4;

impl Decomposer for RetinexDecomposer {
    fn decompose(&self, img: &ImageRGB) -> Result<Decomposition> {
        let (h, w) = (img.height, img.width);
        let max_c: Vec<f64> = img
            .data
            .chunks(3)
            .map(|px| px[0].max(px[1]).max(px[2]))
            .collect();
        let size = 2 * (3.0 * self.sigma).ceil() as usize + 1;
        let illumination = gaussian_blur_plane(&ImagePlane::new(h, w, max_c)?, size, self.sigma);
        let mut refl = Vec::with_capacity(img.data.len());
        let mut enh = Vec::with_capacity(img.data.len());
        for (i, px) in img.data.chunks(3).enumerate() {
            let l = illumination.data[i].max(0.0);
            let lift = l.powf(self.gamma);
            for &v in px {
                let r = v / (l + RETINEX_EPS);
                refl.push(r);
                enh.push((r * lift).clamp(0.0, 1.0));
            }
        }
        Ok(Decomposition {
            reflectance: ImageRGB::new(h, w, refl)?,
            illumination,
            enhanced: ImageRGB::new(h, w, enh)?,
        })
    }
}

/// Passes the image through unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityDecomposer;

impl Decomposer for IdentityDecomposer {
    fn decompose(&self, img: &ImageRGB) -> Result<Decomposition> {
        Ok(Decomposition {
            reflectance: img.clone(),
            illumination: ImagePlane::filled(img.height, img.width, 1.0),
            enhanced: img.clone(),
        })
    }
}

pub fn retinex_decompose_default(img: &ImageRGB) -> Result<Decomposition> {
    RetinexDecomposer::default().decompose(img)
}

/// Enhance every image of an `N x 3 x H x W` batch. The result is a
/// constant (no gradient flows through the decomposer).
pub fn enhance_batch<T: Scalar>(dec: &dyn Decomposer, y: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = y.dims4("enhance_batch")?;
    ensure!(c == 3, "enhance_batch", "expected 3 channels, got {c}");
    let per = 3 * h * w;
    let src = y.to_f64_vec();
    let mut out = Vec::with_capacity(n * per);
    for b in 0..n {
        let one = Tensor::<f64>::from_vec(&[1, 3, h, w], src[b * per..(b + 1) * per].to_vec())?;
        let enhanced = dec.decompose(&ImageRGB::from_tensor(&one)?)?.enhanced;
        ensure!(
            enhanced.height == h && enhanced.width == w,
            "decomposer",
            "enhanced image is {}x{}, expected {h}x{w}",
            enhanced.height,
            enhanced.width
        );
        ensure!(
            enhanced.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)),
            "decomposer",
            "enhanced image has non-finite or out-of-range values"
        );
        out.extend_from_slice(enhanced.to_tensor::<f64>().data());
    }
    Tensor::from_f64(&[n, 3, h, w], &out)
}
