use serde::{Deserialize, Serialize};

use super::manifest::Attribute;
use super::{ImagePlane, ImageRGB};
use crate::error::{ensure, Error, Result};
use crate::numcore::kernels::{reflect_index, resize_planes};
use crate::numcore::SeededRng;

pub const CRF_GAMMA: f64 = 2.2;
pub const BD_BLUR_SIZE: usize = 7;
pub const BD_BLUR_SIGMA: f64 = 1.6;

/// Per-channel power-law darkening parameters, `eta * (zeta * x)^theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowLightParams {
    pub zeta: [f64; 3],
    pub eta: [f64; 3],
    pub theta: [f64; 3],
}

/// Sensor noise: Poisson shot noise at `photon_scale` photons per unit
/// intensity, then additive Gaussian read noise with std `sigma_g`.
///
/// `photon_scale = f64::INFINITY` disables the Poisson stage and
/// `sigma_g = 0` the Gaussian stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseParams {
    pub sigma_g: f64,
    pub photon_scale: f64,
}

/// Atmospheric scattering haze around a center given in normalized
/// `(x, y)` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HazeParams {
    pub beta: f64,
    pub a: f64,
    pub center: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DegradationMode {
    /// Bicubic downsampling.
    BI,
    /// Gaussian blur, then bicubic downsampling.
    BD,
}

impl std::str::FromStr for DegradationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "BI" | "bi" => Ok(DegradationMode::BI),
            "BD" | "bd" => Ok(DegradationMode::BD),
            other => Err(Error::Config(format!("unknown degradation mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrfDirection {
    /// Linear sensor signal to stored intensity, `x^(1/2.2)`.
    Forward,
    /// Stored intensity to linear signal, `x^2.2`.
    Inverse,
}

pub fn sample_low_light(rng: &mut SeededRng) -> LowLightParams {
    let mut p = LowLightParams {
        zeta: [0.0; 3],
        eta: [0.0; 3],
        theta: [0.0; 3],
    };
    for c in 0..3 {
        p.zeta[c] = rng.uniform_in(0.6, 0.9);
        p.eta[c] = rng.uniform_in(0.3, 0.5);
        p.theta[c] = rng.uniform_in(3.0, 5.0);
    }
    p
}

pub fn sample_noise(rng: &mut SeededRng) -> NoiseParams {
    NoiseParams {
        photon_scale: rng.uniform_in(500.0, 5000.0),
        sigma_g: rng.uniform_in(1e-3, 1e-2),
    }
}

/// Haze with a uniformly placed center and a scattering coefficient chosen
/// so that transmission at the farthest pixel lies in [0.2, 0.7].
pub fn sample_haze(rng: &mut SeededRng, height: usize, width: usize) -> HazeParams {
    let center = (rng.uniform(), rng.uniform());
    let a = rng.uniform_in(0.7, 1.0);
    let far_t = rng.uniform_in(0.2, 0.7);
    let d_max = max_haze_distance(height, width, center);
    let beta = if d_max > 0.0 { -far_t.ln() / d_max } else { 0.0 };
    HazeParams { beta, a, center }
}

pub fn simulate_low_light(img: &ImageRGB, params: &LowLightParams) -> Result<ImageRGB> {
    for c in 0..3 {
        ensure!(
            params.theta[c] > 0.0,
            "simulate_low_light",
            "theta[{c}] = {} must be positive",
            params.theta[c]
        );
    }
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        for c in 0..3 {
            px[c] = params.eta[c] * (params.zeta[c] * px[c]).powf(params.theta[c]);
        }
    }
    Ok(out.clamp01())
}

fn crf_value(x: f64, dir: CrfDirection) -> f64 {
    let x = x.clamp(0.0, 1.0);
    match dir {
        CrfDirection::Forward => x.powf(1.0 / CRF_GAMMA),
        CrfDirection::Inverse => x.powf(CRF_GAMMA),
    }
}

/// Gamma camera response applied to every value of a buffer.
pub fn crf(values: &[f64], dir: CrfDirection) -> Vec<f64> {
    values.iter().map(|&v| crf_value(v, dir)).collect()
}

/// Channel sampled at `(y, x)` in the RGGB layout.
#[inline]
fn cfa_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

pub fn bayer_mosaic(img: &ImageRGB) -> Result<ImagePlane> {
    ensure!(
        img.height.is_multiple_of(2) && img.width.is_multiple_of(2),
        "bayer_mosaic",
        "dims {}x{} must be even",
        img.height,
        img.width
    );
    let mut data = Vec::with_capacity(img.height * img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            data.push(img.at(y, x, cfa_channel(y, x)));
        }
    }
    ImagePlane::new(img.height, img.width, data)
}

/// Bilinear demosaic: each missing channel is the mean of the same-channel
/// samples in the 3x3 neighborhood (mirror borders keep the CFA parity).
pub fn bayer_demosaic(raw: &ImagePlane) -> Result<ImageRGB> {
    let (h, w) = (raw.height, raw.width);
    ensure!(
        h % 2 == 0 && w % 2 == 0,
        "bayer_demosaic",
        "dims {h}x{w} must be even"
    );
    let mirror = |i: isize, n: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= n {
            2 * n - 2 - i as usize
        } else {
            i as usize
        }
    };
    let mut data = vec![0.0; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let own = cfa_channel(y, x);
            let mut sums = [0.0; 3];
            let mut counts = [0u32; 3];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let yy = mirror(y as isize + dy, h);
                    let xx = mirror(x as isize + dx, w);
                    let c = cfa_channel(yy, xx);
                    sums[c] += raw.at(yy, xx);
                    counts[c] += 1;
                }
            }
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = if c == own {
                    raw.at(y, x)
                } else {
                    sums[c] / counts[c] as f64
                };
            }
        }
    }
    ImageRGB::new(h, w, data)
}

/// `Poisson(photon_scale * x) / photon_scale` per value.
pub fn poisson_stage(values: &[f64], photon_scale: f64, rng: &mut SeededRng) -> Vec<f64> {
    if photon_scale.is_infinite() {
        return values.to_vec();
    }
    values
        .iter()
        .map(|&v| rng.poisson(photon_scale * v.max(0.0)) / photon_scale)
        .collect()
}

/// Inverse CRF, RGGB mosaic, Poisson shot noise, Gaussian read noise,
/// bilinear demosaic, forward CRF; clamped after every stage.
pub fn gaussian_poisson_noise(
    img: &ImageRGB,
    params: &NoiseParams,
    rng: &mut SeededRng,
) -> Result<ImageRGB> {
    ensure!(
        params.photon_scale > 0.0 && params.sigma_g >= 0.0,
        "gaussian_poisson_noise",
        "invalid noise parameters {params:?}"
    );
    let linear = ImageRGB::new(img.height, img.width, crf(&img.data, CrfDirection::Inverse))?;
    let mut raw = bayer_mosaic(&linear)?;
    raw.data = poisson_stage(&raw.data, params.photon_scale, rng);
    raw = raw.clamp01();
    if params.sigma_g > 0.0 {
        for v in raw.data.iter_mut() {
            *v += params.sigma_g * rng.normal();
        }
        raw = raw.clamp01();
    }
    let rgb = bayer_demosaic(&raw)?;
    Ok(ImageRGB::new(rgb.height, rgb.width, crf(&rgb.data, CrfDirection::Forward))?.clamp01())
}

fn haze_distance(y: usize, x: usize, height: usize, width: usize, center: (f64, f64)) -> f64 {
    let diag = ((height * height + width * width) as f64).sqrt();
    let dx = x as f64 + 0.5 - center.0 * width as f64;
    let dy = y as f64 + 0.5 - center.1 * height as f64;
    (dx * dx + dy * dy).sqrt() / diag
}

fn max_haze_distance(height: usize, width: usize, center: (f64, f64)) -> f64 {
    [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
        .iter()
        .map(|&(y, x)| haze_distance(y, x, height, width, center))
        .fold(0.0, f64::max)
}

/// `I * e^(-beta d) + A (1 - e^(-beta d))` with `d` the pixel's distance
/// from the haze center normalized by the image diagonal.
pub fn synthesize_haze(img: &ImageRGB, params: &HazeParams) -> Result<ImageRGB> {
    ensure!(
        params.beta >= 0.0 && (0.0..=1.0).contains(&params.a),
        "synthesize_haze",
        "beta {} must be >= 0 and A {} in [0,1]",
        params.beta,
        params.a
    );
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let d = haze_distance(y, x, img.height, img.width, params.center);
            let t = (-params.beta * d).exp();
            for c in 0..3 {
                let v = &mut out.data[(y * img.width + x) * 3 + c];
                *v = *v * t + params.a * (1.0 - t);
            }
        }
    }
    Ok(out.clamp01())
}

/// `img (1 - mask) + A mask`.
pub fn apply_haze_mask(img: &ImageRGB, mask: &ImagePlane, a: f64) -> Result<ImageRGB> {
    ensure!(
        mask.height == img.height && mask.width == img.width,
        "apply_haze_mask",
        "mask {}x{} does not match image {}x{}",
        mask.height,
        mask.width,
        img.height,
        img.width
    );
    let mut out = img.clone();
    for (px, &m) in out.data.chunks_mut(3).zip(&mask.data) {
        for v in px.iter_mut() {
            *v = *v * (1.0 - m) + a * m;
        }
    }
    Ok(out.clamp01())
}

/// Smoothed low-frequency value noise in [0, 1].
pub fn value_noise_mask(height: usize, width: usize, rng: &mut SeededRng) -> ImagePlane {
    let cell = (height.max(width) / 4).max(2) as f64;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.uniform()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..width {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let v00 = lattice[iy * gw + ix];
            let v01 = lattice[iy * gw + ix + 1];
            let v10 = lattice[(iy + 1) * gw + ix];
            let v11 = lattice[(iy + 1) * gw + ix + 1];
            let top = v00 + (v01 - v00) * tx;
            let bottom = v10 + (v11 - v10) * tx;
            data.push(top + (bottom - top) * ty);
        }
    }
    let plane = ImagePlane {
        height,
        width,
        data,
    };
    gaussian_blur_plane(&plane, 9, 2.0).clamp01()
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable normalized Gaussian blur, half-sample symmetric borders.
pub fn gaussian_blur_plane(img: &ImagePlane, size: usize, sigma: f64) -> ImagePlane {
    let taps = gaussian_taps(size, sigma);
    let r = (size / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let xx = reflect_index(x as isize + k as isize - r, w);
                s += t * img.data[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let yy = reflect_index(y as isize + k as isize - r, h);
                s += t * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    ImagePlane {
        height: h,
        width: w,
        data: out,
    }
}

/// HR thermal plane to LR under the BI or BD model.
pub fn degrade_thermal(hr: &ImagePlane, scale: usize, mode: DegradationMode) -> Result<ImagePlane> {
    ensure!(
        scale > 0 && hr.height.is_multiple_of(scale) && hr.width.is_multiple_of(scale),
        "degrade_thermal",
        "HR dims {}x{} not divisible by scale {scale}",
        hr.height,
        hr.width
    );
    let src = match mode {
        DegradationMode::BI => hr.clone(),
        DegradationMode::BD => gaussian_blur_plane(hr, BD_BLUR_SIZE, BD_BLUR_SIGMA),
    };
    let (oh, ow) = (hr.height / scale, hr.width / scale);
    let data = resize_planes(&src.data, 1, hr.height, hr.width, oh, ow);
    Ok(ImagePlane::new(oh, ow, data)?.clamp01())
}

/// Optical degradation for one attribute, fully determined by `rng`.
pub fn degrade_optical(img: &ImageRGB, attr: Attribute, rng: &mut SeededRng) -> Result<ImageRGB> {
    match attr {
        Attribute::Normal => Ok(img.clone()),
        Attribute::LowLight => {
            let ll = sample_low_light(rng);
            let noise = sample_noise(rng);
            let dark = simulate_low_light(img, &ll)?;
            gaussian_poisson_noise(&dark, &noise, rng)
        }
        Attribute::Fog => {
            if rng.uniform() < 0.5 {
                let params = sample_haze(rng, img.height, img.width);
                synthesize_haze(img, &params)
            } else {
                let a = rng.uniform_in(0.7, 1.0);
                let density = rng.uniform_in(0.4, 0.8);
                let mut mask = value_noise_mask(img.height, img.width, rng);
                mask.data.iter_mut().for_each(|m| *m *= density);
                apply_haze_mask(img, &mask, a)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: f64) -> ImageRGB {
        ImageRGB::filled(h, w, v)
    }

    #[test]
    fn low_light_hand_value() {
        let p = LowLightParams {
            zeta: [0.8; 3],
            eta: [0.4; 3],
            theta: [3.0; 3],
        };
        let out = simulate_low_light(&gray(1, 1, 0.5), &p).unwrap();
        for v in out.data {
            assert!((v - 0.0256).abs() < 1e-12);
        }
    }

    #[test]
    fn low_light_zero_and_identity() {
        let p = LowLightParams {
            zeta: [0.7; 3],
            eta: [0.35; 3],
            theta: [4.0; 3],
        };
        assert!(simulate_low_light(&gray(2, 2, 0.0), &p)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let id = LowLightParams {
            zeta: [1.0; 3],
            eta: [1.0; 3],
            theta: [1.0; 3],
        };
        let img = ImageRGB::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(simulate_low_light(&img, &id).unwrap(), img);
        let bad = LowLightParams { theta: [0.0; 3], ..id };
        assert!(simulate_low_light(&img, &bad).is_err());
    }

    #[test]
    fn crf_examples() {
        for dir in [CrfDirection::Forward, CrfDirection::Inverse] {
            assert_eq!(crf(&[0.0, 1.0], dir), vec![0.0, 1.0]);
        }
        let inv = crf(&[0.5], CrfDirection::Inverse)[0];
        assert!((inv - 0.217_637_640_824_031).abs() < 1e-12);
        let rt = crf(&crf(&[0.73], CrfDirection::Inverse), CrfDirection::Forward)[0];
        assert!((rt - 0.73).abs() < 1e-6);
    }

    #[test]
    fn bayer_layout_is_rggb() {
        let mut img = ImageRGB::filled(2, 2, 0.0);
        for (i, px) in img.data.chunks_mut(3).enumerate() {
            px[0] = 0.1 + i as f64;
            px[1] = 0.2 + i as f64;
            px[2] = 0.3 + i as f64;
        }
        let raw = bayer_mosaic(&img).unwrap();
        assert!((raw.at(0, 0) - 0.1).abs() < 1e-12); // R
        assert!((raw.at(0, 1) - 1.2).abs() < 1e-12); // G
        assert!((raw.at(1, 0) - 2.2).abs() < 1e-12); // G
        assert!((raw.at(1, 1) - 3.3).abs() < 1e-12); // B
    }

    #[test]
    fn bayer_constant_round_trip_and_odd_dims() {
        let img = gray(6, 8, 0.42);
        let raw = bayer_mosaic(&img).unwrap();
        assert!(raw.data.iter().all(|&v| v == 0.42));
        assert_eq!(bayer_demosaic(&raw).unwrap(), img);
        assert!(bayer_mosaic(&gray(3, 4, 0.1)).is_err());
        assert!(bayer_demosaic(&ImagePlane::filled(4, 5, 0.1)).is_err());
    }

    #[test]
    fn noiseless_limit_is_crf_bayer_round_trip() {
        let mut rng = SeededRng::new(1);
        let img = ImageRGB::new(2, 2, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap();
        let params = NoiseParams {
            sigma_g: 0.0,
            photon_scale: f64::INFINITY,
        };
        let out = gaussian_poisson_noise(&img, &params, &mut rng).unwrap();
        let lin = ImageRGB::new(2, 2, crf(&img.data, CrfDirection::Inverse)).unwrap();
        let rt = bayer_demosaic(&bayer_mosaic(&lin).unwrap()).unwrap();
        let expect = ImageRGB::new(2, 2, crf(&rt.data, CrfDirection::Forward)).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn haze_examples() {
        let img = ImageRGB::new(1, 2, vec![0.2, 0.3, 0.4, 0.9, 0.1, 0.5]).unwrap();
        let p0 = HazeParams {
            beta: 0.0,
            a: 0.8,
            center: (0.3, 0.6),
        };
        assert_eq!(synthesize_haze(&img, &p0).unwrap(), img);

        // pick beta so that beta * d = ln 2 at pixel (0, 0)
        let center = (1.0, 1.0);
        let d = haze_distance(0, 0, 4, 4, center);
        let p = HazeParams {
            beta: 2f64.ln() / d,
            a: 0.8,
            center,
        };
        let out = synthesize_haze(&gray(4, 4, 0.2), &p).unwrap();
        assert!((out.at(0, 0, 0) - 0.5).abs() < 1e-12);

        let huge = HazeParams {
            beta: 1e6,
            a: 0.9,
            center: (0.5, 0.5),
        };
        let out = synthesize_haze(&gray(4, 4, 0.1), &huge).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.9).abs() < 1e-9));
    }

    #[test]
    fn mask_examples() {
        let img = gray(2, 3, 0.2);
        assert_eq!(apply_haze_mask(&img, &ImagePlane::filled(2, 3, 0.0), 0.9).unwrap(), img);
        let full = apply_haze_mask(&img, &ImagePlane::filled(2, 3, 1.0), 0.9).unwrap();
        assert!(full.data.iter().all(|&v| v == 0.9));
        let half = apply_haze_mask(&img, &ImagePlane::filled(2, 3, 0.5), 1.0).unwrap();
        assert!(half.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));
        assert!(apply_haze_mask(&img, &ImagePlane::filled(3, 3, 0.5), 1.0).is_err());
    }

    #[test]
    fn value_noise_is_in_unit_range() {
        let mut rng = SeededRng::new(5);
        let m = value_noise_mask(32, 48, &mut rng);
        assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let spread = m.data.iter().cloned().fold(0.0, f64::max) - m.data.iter().cloned().fold(1.0, f64::min);
        assert!(spread > 0.1);
    }

    #[test]
    fn sampled_haze_hits_transmission_band() {
        let mut rng = SeededRng::new(11);
        for _ in 0..50 {
            let p = sample_haze(&mut rng, 40, 60);
            let t = (-p.beta * max_haze_distance(40, 60, p.center)).exp();
            assert!((0.2 - 1e-9..=0.7 + 1e-9).contains(&t), "{t}");
            assert!((0.7..=1.0).contains(&p.a));
        }
    }

    #[test]
    fn thermal_degradation_shapes_and_constants() {
        let hr = ImagePlane::filled(192, 192, 0.3);
        for mode in [DegradationMode::BI, DegradationMode::BD] {
            let lr = degrade_thermal(&hr, 4, mode).unwrap();
            assert_eq!((lr.height, lr.width), (48, 48));
            assert!(lr.data.iter().all(|&v| (v - 0.3).abs() < 1e-12));
        }
        assert!(degrade_thermal(&ImagePlane::filled(30, 32, 0.1), 4, DegradationMode::BI).is_err());
    }

    #[test]
    fn bd_preserves_impulse_mass() {
        let mut hr = ImagePlane::filled(64, 64, 0.0);
        hr.data[30 * 64 + 33] = 1.0;
        let spot = gaussian_blur_plane(&hr, BD_BLUR_SIZE, BD_BLUR_SIGMA);
        let mass: f64 = spot.data.iter().sum();
        assert!((mass - 1.0).abs() < 0.02, "{mass}");
        assert!(spot.data.iter().filter(|&&v| v > 1e-3).count() > 9);
        // The resize stage averages scale^2 HR pixels per LR pixel.
        let lr = resize_planes(&spot.data, 1, 64, 64, 16, 16);
        let lr_mass = lr.iter().sum::<f64>() * 16.0;
        assert!((lr_mass - 1.0).abs() < 0.02, "{lr_mass}");
    }
}
