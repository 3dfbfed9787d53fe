//! Whole-model rank allocation.
//!
//! Every layer contributes the energy `Σ_{a≤d′} σ_a` of its leading response
//! eigenvalues; ranks are chosen to keep the product of these energies large
//! under a total complexity budget `Σ (d′_l / d_l)·C_l ≤ C`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eig;
use crate::sampler::SampleSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpectrum {
    pub layer_id: String,
    /// Eigenvalues of the centered response Gram matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Cost of the layer at full rank; removing one eigenvalue saves
    /// `complexity / d`.
    pub complexity: f64,
}

impl LayerSpectrum {
    pub fn new(layer_id: impl Into<String>, eigenvalues: Vec<f64>, complexity: f64) -> Result<Self> {
        let s = LayerSpectrum {
            layer_id: layer_id.into(),
            eigenvalues,
            complexity,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return Err(Error::Input(format!("{}: empty spectrum", self.layer_id)));
        }
        if self.eigenvalues.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Input(format!("{}: eigenvalues must be finite and non-negative", self.layer_id)));
        }
        if self.eigenvalues.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Input(format!("{}: eigenvalues must be descending", self.layer_id)));
        }
        if !(self.complexity > 0.0 && self.complexity.is_finite()) {
            return Err(Error::Input(format!("{}: complexity must be positive", self.layer_id)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn with_complexity(mut self, complexity: f64) -> Self {
        self.complexity = complexity;
        self
    }

    /// `Σ_{a≤d′} σ_a`.
    pub fn energy(&self, d_prime: usize) -> f64 {
        self.eigenvalues[..d_prime.min(self.dim())].iter().sum()
    }

    /// Fraction of the total energy kept at rank `d_prime`; 1 for an all-zero
    /// spectrum.
    pub fn energy_fraction(&self, d_prime: usize) -> f64 {
        let total = self.energy(self.dim());
        if total == 0.0 {
            1.0
        } else {
            self.energy(d_prime) / total
        }
    }
}

/// Spectrum of the sampled responses. The complexity is set to `d`, i.e. one
/// unit per eigenvalue; callers that know the layer's multiply count should
/// replace it with [`LayerSpectrum::with_complexity`].
pub fn layer_energy(samples: &SampleSet) -> Result<LayerSpectrum> {
    if samples.len() < 2 {
        return Err(Error::Input(format!(
            "{}: need at least 2 samples for a spectrum, got {}",
            samples.layer_id,
            samples.len()
        )));
    }
    let eig = sym_eig(&samples.centered_gram())?;
    let eigenvalues = eig.values.iter().map(|v| v.max(0.0)).collect::<Vec<_>>();
    let d = eigenvalues.len();
    LayerSpectrum::new(samples.layer_id.clone(), eigenvalues, d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub ranks: BTreeMap<String, usize>,
    /// `Σ (d′_l / d_l)·C_l` over the planned layers.
    pub achieved_complexity: f64,
    pub target_complexity: f64,
    /// `log E`; absent when some kept energy is zero.
    pub log_objective: Option<f64>,
}

impl RankPlan {
    pub fn rank(&self, layer_id: &str) -> Option<usize> {
        self.ranks.get(layer_id).copied()
    }
}

/// `log E = Σ_l log Σ_{a≤d′_l} σ_{l,a}`.
pub fn log_objective_energy(ranks: &BTreeMap<String, usize>, spectra: &[LayerSpectrum]) -> Result<f64> {
    spectra
        .iter()
        .map(|s| {
            let d = *ranks
                .get(&s.layer_id)
                .ok_or_else(|| Error::Input(format!("plan has no rank for {}", s.layer_id)))?;
            if d == 0 || d > s.dim() {
                return Err(Error::Range(format!("{}: rank {d} outside 1..={}", s.layer_id, s.dim())));
            }
            Ok(s.energy(d).ln())
        })
        .sum()
}

/// `E = Π_l Σ_{a≤d′_l} σ_{l,a}`, accumulated in log domain. Over- and
/// underflows saturate to infinity and zero.
pub fn objective_energy(plan: &RankPlan, spectra: &[LayerSpectrum]) -> Result<f64> {
    log_objective_energy(&plan.ranks, spectra).map(f64::exp)
}

fn achieved(spectra: &[LayerSpectrum], ranks: &[usize]) -> f64 {
    spectra
        .iter()
        .zip(ranks)
        .map(|(s, &d)| d as f64 / s.dim() as f64 * s.complexity)
        .sum()
}

/// Greedy rank selection.
///
/// Starting from full rank, the eigenvalue with the smallest
/// `(σ_{l,d′} / Σ_{a≤d′} σ_{l,a}) / (C_l / d_l)` is removed until the budget
/// holds; ties go to the lower layer index. Budget left over at that point
/// is handed back one eigenvalue at a time, best log-energy gain per cost
/// first. `frozen` pins ranks of listed layers, which still count toward the
/// budget.
pub fn select_ranks(
    spectra: &[LayerSpectrum],
    target_complexity: f64,
    frozen: &BTreeMap<String, usize>,
) -> Result<RankPlan> {
    if !(target_complexity > 0.0) {
        return Err(Error::Input(format!("target complexity must be positive, got {target_complexity}")));
    }
    let mut seen = HashSet::new();
    for s in spectra {
        s.validate()?;
        if !seen.insert(s.layer_id.as_str()) {
            return Err(Error::Input(format!("duplicate spectrum for {}", s.layer_id)));
        }
    }
    for (id, &d) in frozen {
        let s = spectra
            .iter()
            .find(|s| &s.layer_id == id)
            .ok_or_else(|| Error::Input(format!("frozen layer {id} has no spectrum")))?;
        if d == 0 || d > s.dim() {
            return Err(Error::Input(format!("frozen rank {id}={d} outside 1..={}", s.dim())));
        }
    }

    let is_frozen: Vec<bool> = spectra.iter().map(|s| frozen.contains_key(&s.layer_id)).collect();
    let floors: Vec<usize> = spectra
        .iter()
        .map(|s| frozen.get(&s.layer_id).copied().unwrap_or(1))
        .collect();
    let minimum = achieved(spectra, &floors);
    if minimum > target_complexity {
        return Err(Error::Input(format!(
            "target complexity {target_complexity} is below the minimum {minimum} reachable at rank floors"
        )));
    }

    let mut ranks: Vec<usize> = spectra
        .iter()
        .map(|s| frozen.get(&s.layer_id).copied().unwrap_or(s.dim()))
        .collect();
    let mut kept: Vec<f64> = spectra.iter().zip(&ranks).map(|(s, &d)| s.energy(d)).collect();

    while achieved(spectra, &ranks) > target_complexity {
        let mut best: Option<(usize, f64)> = None;
        for (l, s) in spectra.iter().enumerate() {
            if is_frozen[l] || ranks[l] <= 1 {
                continue;
            }
            let sigma = s.eigenvalues[ranks[l] - 1];
            let ratio = if kept[l] > 0.0 { sigma / kept[l] } else { 0.0 };
            let measure = ratio / (s.complexity / s.dim() as f64);
            if best.is_none_or(|(_, m)| measure < m) {
                best = Some((l, measure));
            }
        }
        let (l, _) = best.expect("feasibility checked above");
        ranks[l] -= 1;
        kept[l] = spectra[l].energy(ranks[l]);
    }
    // removal stops at the first feasible point, which can leave slack
    loop {
        let mut best: Option<(usize, f64)> = None;
        for (l, s) in spectra.iter().enumerate() {
            if is_frozen[l] || ranks[l] >= s.dim() {
                continue;
            }
            ranks[l] += 1;
            let fits = achieved(spectra, &ranks) <= target_complexity;
            ranks[l] -= 1;
            if !fits {
                continue;
            }
            let ratio = s.energy(ranks[l] + 1) / kept[l];
            let gain = if ratio.is_nan() { 0.0 } else { ratio.ln() } / (s.complexity / s.dim() as f64);
            if best.is_none_or(|(_, g)| gain > g) {
                best = Some((l, gain));
            }
        }
        let Some((l, _)) = best else { break };
        ranks[l] += 1;
        kept[l] = spectra[l].energy(ranks[l]);
    }

    let map: BTreeMap<String, usize> = spectra
        .iter()
        .zip(&ranks)
        .map(|(s, &d)| (s.layer_id.clone(), d))
        .collect();
    let log_e = log_objective_energy(&map, spectra)?;
    Ok(RankPlan {
        achieved_complexity: achieved(spectra, &ranks),
        target_complexity,
        log_objective: log_e.is_finite().then_some(log_e),
        ranks: map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn spec(id: &str, eig: &[f64], c: f64) -> LayerSpectrum {
        LayerSpectrum::new(id, eig.to_vec(), c).unwrap()
    }

    #[test]
    fn constant_responses_have_zero_spectrum() {
        let y = DMatrix::from_element(4, 10, 3.0);
        let s = layer_energy(&SampleSet::from_responses("l", y)).unwrap();
        assert!(s.eigenvalues.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn two_orthogonal_deviations_give_two_eigenvalues() {
        let mut y = DMatrix::zeros(5, 4);
        y[(1, 0)] = 1.0;
        y[(1, 1)] = -1.0;
        y[(3, 2)] = 1.0;
        y[(3, 3)] = -1.0;
        let s = layer_energy(&SampleSet::from_responses("l", y)).unwrap();
        let nonzero = s.eigenvalues.iter().filter(|&&v| v > 1e-12).count();
        assert_eq!(nonzero, 2);
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-12 && (s.eigenvalues[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn one_sample_is_rejected() {
        let y = DMatrix::from_element(3, 1, 1.0);
        assert!(layer_energy(&SampleSet::from_responses("l", y)).is_err());
    }

    #[test]
    fn single_layer_halves_rank() {
        let s = spec("a", &[5.0, 4.0, 3.0, 2.0, 1.0, 0.5], 60.0);
        let plan = select_ranks(&[s], 30.0, &BTreeMap::new()).unwrap();
        assert_eq!(plan.rank("a"), Some(3));
        assert_eq!(plan.achieved_complexity, 30.0);
    }

    #[test]
    fn identical_layers_get_equal_ranks() {
        let eig = [9.0, 3.0, 1.0, 0.5, 0.2, 0.1, 0.05];
        let s = vec![spec("a", &eig, 70.0), spec("b", &eig, 70.0)];
        let plan = select_ranks(&s, 70.0, &BTreeMap::new()).unwrap();
        let (a, b) = (plan.rank("a").unwrap(), plan.rank("b").unwrap());
        assert!(a.abs_diff(b) <= 1, "{a} {b}");
        // the odd removal goes to the lower index
        assert!(a <= b);
    }

    #[test]
    fn frozen_layers_keep_their_rank_and_count() {
        let s = vec![spec("conv1", &[4.0, 3.0, 2.0, 1.0], 40.0), spec("conv2", &[4.0, 3.0, 2.0, 1.0], 40.0)];
        let frozen = BTreeMap::from([("conv1".to_string(), 3)]);
        let plan = select_ranks(&s, 50.0, &frozen).unwrap();
        assert_eq!(plan.rank("conv1"), Some(3));
        assert_eq!(plan.rank("conv2"), Some(2));
        assert!(plan.achieved_complexity <= 50.0);
    }

    #[test]
    fn infeasible_target_is_an_input_error() {
        let s = vec![spec("a", &[1.0, 1.0], 10.0), spec("b", &[1.0, 1.0], 10.0)];
        let err = select_ranks(&s, 9.0, &BTreeMap::new()).unwrap_err();
        assert_eq!(err.class(), crate::ErrorClass::Input);
        assert!(select_ranks(&s, 10.0, &BTreeMap::new()).is_ok());
    }

    #[test]
    fn loose_target_keeps_full_rank() {
        let s = vec![spec("a", &[2.0, 1.0], 10.0)];
        let plan = select_ranks(&s, 100.0, &BTreeMap::new()).unwrap();
        assert_eq!(plan.rank("a"), Some(2));
        assert!((plan.log_objective.unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let s = vec![spec("a", &[3.0, 1.0], 1.0), spec("b", &[5.0, 2.0, 1.0], 1.0)];
        let full = BTreeMap::from([("a".into(), 2), ("b".into(), 3)]);
        assert!((log_objective_energy(&full, &s).unwrap().exp() - 32.0).abs() < 1e-12);
        let ones = BTreeMap::from([("a".into(), 1), ("b".into(), 1)]);
        assert!((log_objective_energy(&ones, &s).unwrap().exp() - 15.0).abs() < 1e-12);
        let zero = BTreeMap::from([("a".into(), 0), ("b".into(), 1)]);
        assert!(log_objective_energy(&zero, &s).is_err());
    }

    #[test]
    fn invalid_spectra_are_rejected() {
        assert!(LayerSpectrum::new("a", vec![1.0, 2.0], 1.0).is_err());
        assert!(LayerSpectrum::new("a", vec![1.0, -1.0], 1.0).is_err());
        assert!(LayerSpectrum::new("a", vec![1.0], 0.0).is_err());
    }
}
