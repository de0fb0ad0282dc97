use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vstpose_core::wavelet::{
    apply_threshold, denoise, dwt_forward, dwt_inverse, ThresholdMode, ThresholdRule, WaveletConfig, WaveletFamily,
};

const FAMILIES: [WaveletFamily; 3] = [WaveletFamily::Haar, WaveletFamily::Db2, WaveletFamily::Db4];

fn cfg(family: WaveletFamily, levels: usize) -> WaveletConfig {
    WaveletConfig { family, levels, ..WaveletConfig::default() }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

fn noisy_sine(n: usize, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let clean: Vec<f64> = (0..n).map(|i| (std::f64::consts::TAU * i as f64 / 32.0).sin()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).unwrap();
    let noisy = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
    (clean, noisy)
}

#[test]
fn reconstruction_is_exact_for_all_dyadic_lengths() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for family in FAMILIES {
        for levels in 1..=4 {
            let c = cfg(family, levels);
            let mut n = c.min_len();
            while n <= 1024 {
                let x: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
                let pyr = dwt_forward(&x, &c).unwrap();
                assert_eq!(pyr.coefficient_count(), n);
                let back = dwt_inverse(&pyr, &c).unwrap();
                let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-10, "{family:?} levels {levels} n {n}: {err}");
                // orthogonal transform without padding keeps the energy
                let energy: f64 = x.iter().map(|v| v * v).sum();
                assert!((pyr.energy() - energy).abs() < 1e-9 * energy);
                n *= 2;
            }
        }
    }
}

#[test]
fn haar_single_level_matches_pairwise_formula() {
    let x = [3.0, 1.0, -2.0, 4.0, 0.5, 0.5, 7.0, -1.0];
    let pyr = dwt_forward(&x, &cfg(WaveletFamily::Haar, 1)).unwrap();
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..4 {
        assert!((pyr.approximation[k] - r * (x[2 * k] + x[2 * k + 1])).abs() < 1e-15);
        assert!((pyr.details[0][k] - r * (x[2 * k] - x[2 * k + 1])).abs() < 1e-15);
    }
}

#[test]
fn denoising_a_noisy_sine_reduces_error() {
    for seed in 0..5 {
        let (clean, noisy) = noisy_sine(1024, 0.5, seed);
        let out = denoise(&noisy, &WaveletConfig::default()).unwrap();
        let before = mse(&noisy, &clean);
        let after = mse(&out, &clean);
        assert!(after <= 0.7 * before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn hard_thresholding_also_helps() {
    let (clean, noisy) = noisy_sine(512, 0.5, 9);
    let c = WaveletConfig { threshold_mode: ThresholdMode::Hard, ..WaveletConfig::default() };
    let out = denoise(&noisy, &c).unwrap();
    assert!(mse(&out, &clean) < mse(&noisy, &clean));
}

#[test]
fn single_precision_round_trip() {
    let x: Vec<f32> = (0..256).map(|i| ((i * 37 % 101) as f32 - 50.0) / 17.0).collect();
    let c = WaveletConfig::default();
    let back = dwt_inverse(&dwt_forward(&x, &c).unwrap(), &c).unwrap();
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn short_signal_is_rejected() {
    let c = cfg(WaveletFamily::Db4, 4);
    let err = dwt_forward(&[1.0f64; 15], &c).unwrap_err();
    assert!(err.to_string().contains("16"), "{err}");
}

proptest! {
    #[test]
    fn arbitrary_lengths_reconstruct(len in 8usize..300, levels in 1usize..4, fam in 0usize..3, seed in any::<u64>()) {
        let c = cfg(FAMILIES[fam], levels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 3.0).unwrap();
        let x: Vec<f64> = (0..len).map(|_| unit.sample(&mut rng)).collect();
        let back = dwt_inverse(&dwt_forward(&x, &c).unwrap(), &c).unwrap();
        prop_assert_eq!(back.len(), len);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn soft_threshold_shrinks_toward_zero(c in -10.0f64..10.0, lambda in 0.0f64..5.0) {
        let s = apply_threshold(c, lambda, ThresholdMode::Soft);
        let oracle = c.signum() * (c.abs() - lambda).max(0.0);
        prop_assert!((s - oracle).abs() < 1e-15);
        prop_assert!(s.abs() <= c.abs());
        let h = apply_threshold(c, lambda, ThresholdMode::Hard);
        prop_assert!(h == 0.0 || h == c);
    }

    #[test]
    fn zero_fixed_threshold_is_identity(len in 8usize..200, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..len).map(|_| unit.sample(&mut rng)).collect();
        let c = WaveletConfig { threshold_rule: ThresholdRule::Fixed(0.0), ..WaveletConfig::default() };
        let out = denoise(&x, &c).unwrap();
        for (a, b) in x.iter().zip(&out) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
