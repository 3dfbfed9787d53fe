//! Whole-model acceleration and evaluation.
//!
//! Layers are approximated one at a time from the input side. Each layer's
//! samples pair inputs from the original network with inputs from the network
//! approximated so far, so the asymmetric solvers can absorb the error that
//! earlier approximations introduce.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{conv_multiplies, count_multiplies};
use crate::decompose::{
    build_layers, solve_asymmetric, solve_linear, solve_nonlinear, Decomposition, SolverKind,
    SolverOptions, SolverSchedule,
};
use crate::error::{Error, Result};
use crate::rank::{layer_energy, select_ranks, LayerSpectrum, RankPlan};
use crate::sampler::{sample_layer, Dataset, DEFAULT_POSITIONS_PER_IMAGE};
use crate::spatial::{accelerate_3d_with, choose_dd_reduced, is_separable};
use crate::tensor::{ConvLayer, Layer, LayerKind, NetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// `(k×k, d′)` followed by `(1×1, d)`.
    #[serde(rename = "channel-2d")]
    Channel2d,
    /// `(k×1, d″)`, `(1×k, d′)`, `(1×1, d)`.
    #[serde(rename = "asym-3d")]
    Asym3d,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d" | "channel-2d" => Ok(Mode::Channel2d),
            "3d" | "asym-3d" => Ok(Mode::Asym3d),
            _ => Err(Error::Input(format!("unknown mode {s:?}, expected 2d or 3d"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n_images: usize,
    pub positions_per_image: usize,
    pub seed: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            n_images: 3000,
            positions_per_image: DEFAULT_POSITIONS_PER_IMAGE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    pub target_speedup: f64,
    pub mode: Mode,
    pub solver: SolverKind,
    pub schedule: SolverSchedule,
    pub calibration: Calibration,
    /// Fixed ranks. A layer frozen at its full rank is left untouched and
    /// does not count toward the budget.
    pub frozen: BTreeMap<String, usize>,
    pub ridge: f64,
    /// Speedup taken by the spatial stage in 3d mode; `√r` when absent.
    pub spatial_speedup: Option<f64>,
    /// Use these ranks instead of running rank selection.
    pub plan: Option<RankPlan>,
}

impl AccelConfig {
    pub fn new(target_speedup: f64, mode: Mode, solver: SolverKind) -> Self {
        AccelConfig {
            target_speedup,
            mode,
            solver,
            schedule: SolverSchedule::default(),
            calibration: Calibration::default(),
            frozen: BTreeMap::new(),
            ridge: SolverOptions::default().ridge,
            spatial_speedup: None,
            plan: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_speedup > 1.0 && self.target_speedup.is_finite()) {
            return Err(Error::Input(format!("speedup must exceed 1, got {}", self.target_speedup)));
        }
        if self.calibration.n_images == 0 || self.calibration.positions_per_image == 0 {
            return Err(Error::Input("calibration needs at least one image and one position".into()));
        }
        if let Some(s) = self.spatial_speedup {
            if !(s >= 1.0 && s < self.target_speedup) {
                return Err(Error::Input(format!(
                    "spatial speedup must lie in [1, {}), got {s}",
                    self.target_speedup
                )));
            }
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Input(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        self.schedule.validate()
    }

    fn stage_speedups(&self) -> (f64, f64) {
        match self.mode {
            Mode::Channel2d => (1.0, self.target_speedup),
            Mode::Asym3d => {
                let s = self.spatial_speedup.unwrap_or(self.target_speedup.sqrt());
                (s, self.target_speedup / s)
            }
        }
    }

    fn solver_options(&self, layer: &ConvLayer) -> SolverOptions {
        SolverOptions {
            schedule: self.schedule.clone(),
            ridge: self.ridge,
            activation: layer.activation,
            early_exit: None,
        }
    }
}

/// Extension point for fine-tuning an accelerated network end to end. The
/// pipeline calls it once after all layers are replaced.
pub trait FineTune {
    fn fine_tune(&self, net: NetSpec, data: &Dataset) -> Result<NetSpec>;
}

/// Leaves the network unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoFineTune;

impl FineTune for NoFineTune {
    fn fine_tune(&self, net: NetSpec, _data: &Dataset) -> Result<NetSpec> {
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub layer: String,
    /// `‖a − b‖_F / ‖a‖_F` over all evaluation images.
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    /// Fraction of images whose top-1 output index matches the reference.
    pub agreement: f64,
    /// Mean absolute difference of the final outputs.
    pub mean_abs_deviation: f64,
    pub layers: Vec<LayerError>,
    /// Reference conv multiplies over tested conv multiplies.
    pub theoretical_speedup: f64,
    /// Wall-time ratio, when measured.
    pub measured_speedup: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub d: usize,
    pub d_prime: usize,
    pub d_dprime: Option<usize>,
    pub solver: SolverKind,
    pub objective_trace: Vec<f64>,
    /// Names of the replacement layers; just the original name when the
    /// layer was kept.
    pub replaced_by: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Accelerated {
    pub net: NetSpec,
    pub plan: RankPlan,
    pub report: EvalReport,
    pub layers: Vec<LayerReport>,
}

/// Seed for the samples of the `index`-th target layer.
fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

/// Complexity weight whose `d′/d` share equals the multiply count of the
/// replacement at rank `d′`: `d·(K_eff + d)·H′·W′`, where the spatial stage
/// divides `K_eff = kh·kw·c` by its speedup in 3d mode.
fn complexity_weight(layer: &ConvLayer, positions: usize, spatial: f64) -> f64 {
    let k = layer.patch_len() as f64;
    let k_eff = if spatial > 1.0 && is_separable(layer) { k / spatial } else { k };
    let d = layer.out_channels as f64;
    d * (k_eff + d) * positions as f64
}

struct Target {
    index: usize,
    layer: ConvLayer,
    positions: usize,
}

fn targets(net: &NetSpec, frozen: &BTreeMap<String, usize>) -> Result<Vec<Target>> {
    let shapes = net.shapes();
    for id in frozen.keys() {
        match net.index_of(id).map(|i| &net.layers()[i].kind) {
            Some(LayerKind::Conv(_)) => {}
            _ => return Err(Error::Input(format!("frozen layer {id:?} is not a conv layer of the model"))),
        }
    }
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        if let LayerKind::Conv(c) = &l.kind {
            if frozen.get(&l.name) == Some(&c.out_channels) {
                continue;
            }
            let o = c.output_shape(shapes[i])?;
            out.push(Target {
                index: i,
                layer: c.clone(),
                positions: o.height * o.width,
            });
        }
    }
    Ok(out)
}

/// Response spectra of all target layers of `net`, with complexity weights
/// set for `config`.
pub fn model_spectra(net: &NetSpec, data: &Dataset, config: &AccelConfig) -> Result<Vec<LayerSpectrum>> {
    let (spatial, _) = config.stage_speedups();
    let cal = &config.calibration;
    targets(net, &config.frozen)?
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let id = &net.layers()[target.index].name;
            let samples = sample_layer(net, None, id, data, cal.n_images, cal.positions_per_image, layer_seed(cal.seed, t))?;
            let spec = layer_energy(&samples).map_err(|e| e.in_layer(id))?;
            Ok(spec.with_complexity(complexity_weight(&target.layer, target.positions, spatial)))
        })
        .collect()
}

/// Budget `C`: the original multiply count of the target layers over `r`.
pub fn budget(net: &NetSpec, config: &AccelConfig) -> Result<f64> {
    let original: f64 = targets(net, &config.frozen)?
        .iter()
        .map(|t| (t.layer.out_channels * t.layer.patch_len() * t.positions) as f64)
        .sum();
    Ok(original / config.target_speedup)
}

/// Rank plan for `net` under `config`.
pub fn plan_ranks(net: &NetSpec, data: &Dataset, config: &AccelConfig) -> Result<RankPlan> {
    let spectra = model_spectra(net, data, config)?;
    select_for(net, &spectra, config)
}

/// Rank plan from externally computed spectra (for instance loaded from
/// sample files). Complexity weights are recomputed from `net`; every target
/// layer needs a spectrum of matching dimension, extra spectra are ignored.
pub fn plan_from_spectra(net: &NetSpec, spectra: &[LayerSpectrum], config: &AccelConfig) -> Result<RankPlan> {
    let (spatial, _) = config.stage_speedups();
    let weighted = targets(net, &config.frozen)?
        .iter()
        .map(|t| {
            let id = &net.layers()[t.index].name;
            let s = spectra
                .iter()
                .find(|s| &s.layer_id == id)
                .ok_or_else(|| Error::Input(format!("no spectrum for layer {id:?}")))?;
            if s.dim() != t.layer.out_channels {
                return Err(Error::Shape(format!(
                    "spectrum of {id:?} has {} eigenvalues, layer has {} outputs",
                    s.dim(),
                    t.layer.out_channels
                )));
            }
            Ok(s.clone().with_complexity(complexity_weight(&t.layer, t.positions, spatial)))
        })
        .collect::<Result<Vec<_>>>()?;
    select_for(net, &weighted, config)
}

fn select_for(net: &NetSpec, spectra: &[LayerSpectrum], config: &AccelConfig) -> Result<RankPlan> {
    if spectra.is_empty() {
        // everything is frozen at full rank
        return Ok(RankPlan {
            ranks: BTreeMap::new(),
            achieved_complexity: 0.0,
            target_complexity: 0.0,
            log_objective: Some(0.0),
        });
    }
    let frozen = config
        .frozen
        .iter()
        .filter(|(id, _)| spectra.iter().any(|s| &s.layer_id == *id))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    select_ranks(spectra, budget(net, config)?, &frozen)
}

pub fn accelerate_model(net: &NetSpec, data: &Dataset, config: &AccelConfig) -> Result<Accelerated> {
    accelerate_model_with(net, data, config, &NoFineTune)
}

pub fn accelerate_model_with(
    net: &NetSpec,
    data: &Dataset,
    config: &AccelConfig,
    fine_tune: &dyn FineTune,
) -> Result<Accelerated> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("calibration dataset is empty".into()));
    }
    let targets = targets(net, &config.frozen)?;
    let plan = match &config.plan {
        Some(p) => p.clone(),
        None => plan_ranks(net, data, config)?,
    };
    let (spatial, _) = config.stage_speedups();
    let cal = &config.calibration;

    let mut done: Vec<Layer> = Vec::with_capacity(net.len() * 2);
    let mut reports = Vec::new();
    let mut next_target = targets.iter().enumerate().peekable();
    for (i, layer) in net.layers().iter().enumerate() {
        let target = match next_target.peek() {
            Some((_, t)) if t.index == i => next_target.next(),
            _ => None,
        };
        let Some((t, target)) = target else {
            done.push(layer.clone());
            continue;
        };
        let id = &layer.name;
        let conv = &target.layer;
        let d = conv.out_channels;
        let d_prime = plan
            .rank(id)
            .ok_or_else(|| Error::Input(format!("rank plan has no entry for {id}")))?;
        if d_prime == 0 || d_prime > d {
            return Err(Error::Input(format!("rank plan gives {id} rank {d_prime}, outside 1..={d}")));
        }
        if d_prime == d {
            done.push(layer.clone());
            reports.push(LayerReport {
                layer: id.clone(),
                d,
                d_prime,
                d_dprime: None,
                solver: config.solver,
                objective_trace: Vec::new(),
                replaced_by: vec![id.clone()],
            });
            continue;
        }

        // approximated layers so far, then the original remainder
        let approx = NetSpec::new(
            net.input_shape(),
            done.iter().cloned().chain(net.layers()[i..].iter().cloned()).collect(),
        )?;
        check_prefix(net, &approx, i)?;
        let needs_hat = config.solver == SolverKind::Asymmetric;
        let samples = sample_layer(
            net,
            needs_hat.then_some(&approx),
            id,
            data,
            cal.n_images,
            cal.positions_per_image,
            layer_seed(cal.seed, t),
        )?;
        let opts = config.solver_options(conv);

        let three_d = config.mode == Mode::Asym3d && is_separable(conv);
        let (new_layers, dec, d_dprime): (Vec<(String, ConvLayer)>, Decomposition, Option<usize>) = if three_d {
            let dd = choose_dd_reduced(conv, d_prime, spatial);
            let three = accelerate_3d_with(conv, &samples, dd, d_prime, config.solver, &opts)
                .map_err(|e| e.in_layer(id))?;
            (
                vec![
                    (format!("{id}.v"), three.vertical),
                    (format!("{id}.h"), three.horizontal),
                    (format!("{id}.pw"), three.pointwise),
                ],
                three.decomposition,
                Some(dd),
            )
        } else {
            let dec = match config.solver {
                SolverKind::Linear => solve_linear(&samples, d_prime),
                SolverKind::Nonlinear => solve_nonlinear(&samples, d_prime, &opts),
                SolverKind::Asymmetric => solve_asymmetric(&samples, conv, d_prime, &opts),
            }
            .map_err(|e| e.in_layer(id))?;
            let (a, b) = build_layers(conv, &dec).map_err(|e| e.in_layer(id))?;
            (vec![(format!("{id}.lr0"), a), (format!("{id}.lr1"), b)], dec, None)
        };
        reports.push(LayerReport {
            layer: id.clone(),
            d,
            d_prime,
            d_dprime,
            solver: config.solver,
            objective_trace: dec.objective_trace,
            replaced_by: new_layers.iter().map(|(n, _)| n.clone()).collect(),
        });
        done.extend(new_layers.into_iter().map(|(n, c)| Layer::conv(n, c)));
    }

    let accelerated = NetSpec::new(net.input_shape(), done)?;
    let accelerated = fine_tune.fine_tune(accelerated, data)?;
    let report = evaluate(net, &accelerated, data)?;
    Ok(Accelerated {
        net: accelerated,
        plan,
        report,
        layers: reports,
    })
}

/// The layers of `approx` before original layer `i` must stand in for
/// exactly the layers of `net` before `i`, in order.
fn check_prefix(net: &NetSpec, approx: &NetSpec, i: usize) -> Result<()> {
    let id = &net.layers()[i].name;
    let start = approx
        .group_start(id)
        .ok_or_else(|| Error::Input(format!("approximated network lost layer {id}")))?;
    let prefix = &approx.layers()[..start];
    let mut k = 0;
    for orig in &net.layers()[..i] {
        let n = prefix[k..].iter().take_while(|l| l.derives_from(&orig.name)).count();
        if n == 0 {
            return Err(Error::Input(format!(
                "approximated prefix has no stand-in for {} before {id}",
                orig.name
            )));
        }
        k += n;
    }
    if k != prefix.len() {
        return Err(Error::Input(format!("approximated prefix before {id} has extra layers")));
    }
    Ok(())
}

/// Index of the last layer of `net` standing in for `origin`.
fn group_end(net: &NetSpec, origin: &str) -> Option<usize> {
    net.layers().iter().rposition(|l| l.derives_from(origin))
}

/// Compares `test` against the reference `reference` on every image of
/// `data`.
pub fn evaluate(reference: &NetSpec, test: &NetSpec, data: &Dataset) -> Result<EvalReport> {
    if reference.input_shape() != test.input_shape() || reference.output_shape() != test.output_shape() {
        return Err(Error::Shape(format!(
            "models differ in I/O shape: {} -> {} vs {} -> {}",
            reference.input_shape(),
            reference.output_shape(),
            test.input_shape(),
            test.output_shape()
        )));
    }
    if data.is_empty() {
        return Err(Error::Input("evaluation dataset is empty".into()));
    }
    // (reference layer index, test layer index) for comparable conv outputs
    let pairs: Vec<(usize, usize, &str)> = reference
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv(_)))
        .filter_map(|(i, l)| group_end(test, &l.name).map(|j| (i, j, l.name.as_str())))
        .filter(|&(i, j, _)| reference.shapes()[i + 1] == test.shapes()[j + 1])
        .collect();

    struct PerImage {
        agree: bool,
        abs_dev: f64,
        layer_err: Vec<(f64, f64)>,
    }
    let per_image: Vec<Result<PerImage>> = data
        .images()
        .par_iter()
        .map(|img| {
            let a = reference.forward_trace(img)?;
            let b = test.forward_trace(img)?;
            let (fa, fb) = (
                a.last().unwrap_or(img),
                b.last().unwrap_or(img),
            );
            let abs_dev = fa
                .data()
                .iter()
                .zip(fb.data())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>()
                / fa.data().len().max(1) as f64;
            let layer_err = pairs
                .iter()
                .map(|&(i, j, _)| {
                    let (x, y) = (a[i].data(), b[j].data());
                    let num = x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).powi(2)).sum();
                    let den = x.iter().map(|p| (*p as f64).powi(2)).sum();
                    (num, den)
                })
                .collect();
            Ok(PerImage {
                agree: fa.argmax() == fb.argmax(),
                abs_dev,
                layer_err,
            })
        })
        .collect();

    let n = data.len();
    let mut agree = 0usize;
    let mut dev = 0f64;
    let mut sums = vec![(0f64, 0f64); pairs.len()];
    for r in per_image {
        let r = r?;
        agree += r.agree as usize;
        dev += r.abs_dev;
        for (s, (num, den)) in sums.iter_mut().zip(r.layer_err) {
            s.0 += num;
            s.1 += den;
        }
    }
    let layers = pairs
        .iter()
        .zip(sums)
        .map(|(&(_, _, name), (num, den))| LayerError {
            layer: name.to_string(),
            relative_error: if den > 0.0 { (num / den).sqrt() } else if num > 0.0 { f64::INFINITY } else { 0.0 },
        })
        .collect();
    let ca = conv_multiplies(&count_multiplies(reference, None)?);
    let cb = conv_multiplies(&count_multiplies(test, None)?);
    Ok(EvalReport {
        images: n,
        agreement: agree as f64 / n as f64,
        mean_abs_deviation: dev / n as f64,
        layers,
        theoretical_speedup: if cb > 0 { ca as f64 / cb as f64 } else { 1.0 },
        measured_speedup: None,
    })
}
