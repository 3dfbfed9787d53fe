//! Multiply counts and single-threaded wall-time measurement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{net_forward, FeatureMap, LayerKind, NetSpec, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub multiplies: u64,
    pub is_conv: bool,
}

/// Multiplies per layer for one forward pass on `input` (the network's own
/// input shape when `None`).
pub fn count_multiplies(net: &NetSpec, input: Option<Shape>) -> Result<Vec<LayerCount>> {
    let net = with_input(net, input)?;
    Ok(net
        .layers()
        .iter()
        .zip(net.multiplies())
        .map(|(l, m)| LayerCount {
            layer: l.name.clone(),
            multiplies: m,
            is_conv: matches!(l.kind, LayerKind::Conv(_)),
        })
        .collect())
}

pub fn conv_multiplies(counts: &[LayerCount]) -> u64 {
    counts.iter().filter(|c| c.is_conv).map(|c| c.multiplies).sum()
}

fn with_input(net: &NetSpec, input: Option<Shape>) -> Result<NetSpec> {
    match input {
        Some(s) if s != net.input_shape() => NetSpec::new(s, net.layers().to_vec()),
        _ => Ok(net.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_seconds: f64,
    pub seconds: Vec<f64>,
    pub conv_multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input: Shape,
    pub repetitions: usize,
    pub model: Timing,
    pub layers: Vec<LayerCount>,
    pub reference: Option<Timing>,
    /// Reference conv multiplies over model conv multiplies.
    pub theoretical_speedup: Option<f64>,
    /// Reference median time over model median time.
    pub measured_speedup: Option<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn time_once(net: &NetSpec, input: &FeatureMap) -> Result<f64> {
    let t = Instant::now();
    let out = net_forward(net, input)?;
    let dt = t.elapsed().as_secs_f64();
    std::hint::black_box(out);
    Ok(dt)
}

/// Times `repetitions` forward passes of `model` (and of `reference`, runs
/// interleaved) on one fixed pseudo-random input, on the calling thread.
pub fn benchmark(
    model: &NetSpec,
    input: Option<Shape>,
    repetitions: usize,
    reference: Option<&NetSpec>,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::Input(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let model = with_input(model, input)?;
    let shape = model.input_shape();
    let reference = reference.map(|r| with_input(r, Some(shape))).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let x = FeatureMap::from_fn(shape, |_, _, _| rng.random_range(-1.0f32..1.0));

    // warm-up
    time_once(&model, &x)?;
    if let Some(r) = &reference {
        time_once(r, &x)?;
    }
    let mut tm = Vec::with_capacity(repetitions);
    let mut tr = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        tm.push(time_once(&model, &x)?);
        if let Some(r) = &reference {
            tr.push(time_once(r, &x)?);
        }
    }

    let layers = count_multiplies(&model, None)?;
    let model_t = Timing {
        median_seconds: median(&tm),
        seconds: tm,
        conv_multiplies: conv_multiplies(&layers),
    };
    let ref_t = match &reference {
        Some(r) => Some(Timing {
            median_seconds: median(&tr),
            seconds: tr,
            conv_multiplies: conv_multiplies(&count_multiplies(r, None)?),
        }),
        None => None,
    };
    let theoretical_speedup = ref_t
        .as_ref()
        .filter(|_| model_t.conv_multiplies > 0)
        .map(|r| r.conv_multiplies as f64 / model_t.conv_multiplies as f64);
    let measured_speedup = ref_t
        .as_ref()
        .filter(|_| model_t.median_seconds > 0.0)
        .map(|r| r.median_seconds / model_t.median_seconds);
    Ok(BenchReport {
        input: shape,
        repetitions,
        model: model_t,
        layers,
        reference: ref_t,
        theoretical_speedup,
        measured_speedup,
    })
}
