//! Randomized round trips through the permutation ops, compared bit for bit.

use gdnet_core::layers::{window_partition, window_reverse};
use gdnet_core::{AutodiffTape, SeededRng, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const CASES: u32 = 100;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = SeededRng::new(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.normal() as f32).collect()).unwrap()
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Partition into (possibly shifted) windows and back, `CASES` shapes.
pub fn window_round_trip() -> Result<(), String> {
    let shapes = (1usize..3, 1usize..5, 1usize..6, 1usize..4, 1usize..4, 0.0f64..1.0, any::<u64>());
    runner()
        .run(&shapes, |(n, c, window, gh, gw, shift_frac, seed)| {
            let shift = (shift_frac * window as f64) as usize % window;
            let x = random_tensor(&[n, c, gh * window, gw * window], seed);
            let tape = AutodiffTape::no_grad();
            let wb = window_partition(&tape, &x, window, shift).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(wb.windows.shape(), &[n * gh * gw, window * window, c][..]);
            let back = window_reverse(&tape, &wb).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(back.shape(), x.shape());
            prop_assert_eq!(bits(&back), bits(&x));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Shuffle then unshuffle, and unshuffle then shuffle, `CASES` shapes.
pub fn pixel_shuffle_round_trip() -> Result<(), String> {
    let shapes = (1usize..3, 1usize..4, 1usize..5, 1usize..7, 1usize..7, any::<u64>());
    runner()
        .run(&shapes, |(n, c, r, h, w, seed)| {
            let tape = AutodiffTape::no_grad();
            let x = random_tensor(&[n, c * r * r, h, w], seed);
            let y = tape.pixel_shuffle(&x, r).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(y.shape(), &[n, c, h * r, w * r][..]);
            let back = tape.pixel_unshuffle(&y, r).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(bits(&back), bits(&x));
            let z = random_tensor(&[n, c, h * r, w * r], seed ^ 1);
            let u = tape.pixel_unshuffle(&z, r).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let zz = tape.pixel_shuffle(&u, r).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert_eq!(bits(&zz), bits(&z));
            Ok(())
        })
        .map_err(|e| e.to_string())
}
