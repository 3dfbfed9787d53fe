#![allow(dead_code)]

use lraccel_core::rank::LayerSpectrum;
use lraccel_oracles::Spectrum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A random 3-layer rank-selection instance with `d_l ≤ 6`: decaying
/// spectra, uneven complexities and a budget between 25% and 85% of the
/// full-rank cost.
pub struct RankInstance {
    pub spectra: Vec<LayerSpectrum>,
    pub budget: f64,
}

impl RankInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spectra: Vec<LayerSpectrum> = (0..3)
            .map(|l| {
                let d = rng.random_range(2..=6);
                let decay = rng.random_range(0.1..1.0);
                let mut eig: Vec<f64> = (0..d)
                    .map(|i| rng.random_range(0.5..1.5) * f64::powi(decay, i as i32))
                    .collect();
                eig.sort_by(|a, b| b.total_cmp(a));
                LayerSpectrum::new(format!("l{l}"), eig, rng.random_range(1.0..10.0)).unwrap()
            })
            .collect();
        let floor: f64 = spectra.iter().map(|s| s.complexity / s.dim() as f64).sum();
        let full: f64 = spectra.iter().map(|s| s.complexity).sum();
        let budget = (rng.random_range(0.25..0.85) * full).max(floor * 1.001);
        RankInstance { spectra, budget }
    }

    pub fn oracle_spectra(&self) -> Vec<Spectrum> {
        self.spectra
            .iter()
            .map(|s| Spectrum { eigenvalues: s.eigenvalues.clone(), complexity: s.complexity })
            .collect()
    }
}
