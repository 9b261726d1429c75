//! Pointwise and statistical laws of the optical degradation operators.

use gdnet_core::imaging::{
    degrade_optical, gaussian_poisson_noise, generate_toy_pair, poisson_stage, sample_haze, sample_low_light,
    sample_noise, simulate_low_light, synthesize_haze, Attribute, HazeParams, ImageRGB,
};
use gdnet_core::SeededRng;

pub const PIXELS: usize = 1000;
pub const PARAM_SETS: usize = 25;
pub const POISSON_DRAWS: usize = 10_000;
pub const VARIANCE_TOL: f64 = 0.10;

fn random_image(n: usize, rng: &mut SeededRng) -> ImageRGB {
    ImageRGB::new(1, n, (0..3 * n).map(|_| rng.uniform()).collect()).unwrap()
}

/// Darkening is strict on (0, 1] and monotone in the input.
pub fn low_light() -> Result<String, String> {
    let mut rng = SeededRng::new(100);
    for set in 0..PARAM_SETS {
        let params = sample_low_light(&mut rng);
        let mut img = random_image(PIXELS, &mut rng);
        // sorted per channel, so monotonicity is a neighbour comparison
        for c in 0..3 {
            let mut ch: Vec<f64> = img.data.iter().skip(c).step_by(3).copied().collect();
            ch.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (i, v) in ch.into_iter().enumerate() {
                img.data[i * 3 + c] = v;
            }
        }
        let out = simulate_low_light(&img, &params).map_err(|e| e.to_string())?;
        for i in 0..PIXELS {
            for c in 0..3 {
                let (x, y) = (img.data[i * 3 + c], out.data[i * 3 + c]);
                if x > 0.0 && y >= x {
                    return Err(format!("set {set}: {x} -> {y} is not darker ({params:?})"));
                }
                if i > 0 && y < out.data[(i - 1) * 3 + c] {
                    return Err(format!("set {set}: not monotone at pixel {i} channel {c}"));
                }
            }
        }
    }
    Ok(format!("{PARAM_SETS} sets x {PIXELS} pixels"))
}

/// Outputs stay between the pixel and the airlight; beta = 0 is exact.
pub fn haze() -> Result<String, String> {
    let mut rng = SeededRng::new(200);
    for set in 0..PARAM_SETS {
        let (img, _) = generate_toy_pair(&mut rng, 32, 40).map_err(|e| e.to_string())?;
        let params = sample_haze(&mut rng, img.height, img.width);
        let out = synthesize_haze(&img, &params).map_err(|e| e.to_string())?;
        for (&x, &y) in img.data.iter().zip(&out.data) {
            let (lo, hi) = (x.min(params.a), x.max(params.a));
            if y < lo || y > hi {
                return Err(format!("set {set}: {y} outside [{lo}, {hi}]"));
            }
        }
        let clear = synthesize_haze(&img, &HazeParams { beta: 0.0, ..params }).map_err(|e| e.to_string())?;
        if clear != img {
            return Err(format!("set {set}: beta = 0 changed the image"));
        }
    }
    Ok(format!("{PARAM_SETS} sets"))
}

/// Sample variance of `Poisson(p c) / p` against `c / p`.
pub fn poisson_variance() -> Result<String, String> {
    let mut rng = SeededRng::new(300);
    let mut worst: f64 = 0.0;
    for &(c, p) in &[(0.25, 2000.0), (0.05, 500.0), (0.8, 5000.0), (0.5, 1000.0)] {
        let x = poisson_stage(&vec![c; POISSON_DRAWS], p, &mut rng);
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64;
        let rel = (var / (c / p) - 1.0).abs();
        worst = worst.max(rel);
        if rel > VARIANCE_TOL {
            return Err(format!("c={c} p={p}: variance {var:e} vs {:e}", c / p));
        }
    }
    Ok(format!("worst relative variance error {:.3}", worst))
}

/// Every seeded operator gives identical bits for identical seeds.
pub fn reproducible() -> Result<String, String> {
    let (img, _) = generate_toy_pair(&mut SeededRng::new(400), 32, 32).map_err(|e| e.to_string())?;
    let run = |seed: u64| -> Vec<Vec<u64>> {
        let mut rng = SeededRng::new(seed);
        let noise = sample_noise(&mut rng);
        let mut outs = vec![gaussian_poisson_noise(&img, &noise, &mut rng).unwrap()];
        for attr in Attribute::ALL {
            outs.push(degrade_optical(&img, attr, &mut rng).unwrap());
        }
        outs.push(generate_toy_pair(&mut rng, 16, 16).unwrap().0);
        outs.iter().map(|o| o.data.iter().map(|v| v.to_bits()).collect()).collect()
    };
    for seed in [1, 2, 3] {
        if run(seed) != run(seed) {
            return Err(format!("seed {seed} is not reproducible"));
        }
    }
    if run(1) == run(2) {
        return Err("different seeds gave identical outputs".into());
    }
    Ok("noise, optical degradations and scene generation".into())
}
