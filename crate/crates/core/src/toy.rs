//! Small synthetic networks and calibration images for tests, examples and
//! benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::sampler::Dataset;
use crate::tensor::{ConvLayer, DenseLayer, FeatureMap, Layer, NetSpec, Shape};

/// He-initialized 3×3 "same" conv layer. Bias entries are small and may be
/// negative, so a share of responses is truncated by the ReLU.
pub fn random_conv(c: usize, d: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
    let k = 9 * c;
    let normal = Normal::new(0.0, (2.0 / k as f64).sqrt()).expect("valid std");
    let mut w = Vec::with_capacity(d * (k + 1));
    for _ in 0..d {
        w.extend((0..k).map(|_| normal.sample(rng) as f32));
        w.push(rng.random_range(-0.1f32..0.1));
    }
    ConvLayer::square(3, c, d, w).expect("shape").with_padding(1, 1)
}

/// 3×3 "same" conv layer whose filters mix a few smooth spatial patterns
/// (a blur and two derivative kernels) with per-channel coefficients, plus
/// i.i.d. noise of relative size `noise`.
pub fn smooth_conv(c: usize, d: usize, noise: f64, rng: &mut ChaCha8Rng) -> ConvLayer {
    let g = [0.5, 1.0, 0.5];
    let e = [-1.0, 0.0, 1.0];
    let basis: Vec<[f64; 9]> = [(g, g), (g, e), (e, g)]
        .iter()
        .map(|(u, v)| std::array::from_fn(|t| u[t / 3] * v[t % 3]))
        .collect();
    let k = 9 * c;
    let std = (2.0 / k as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut w = Vec::with_capacity(d * (k + 1));
    for _ in 0..d {
        let mut f = vec![0f64; k];
        for ch in 0..c {
            for b in &basis {
                let a = normal.sample(rng);
                for t in 0..9 {
                    f[ch * 9 + t] += a * b[t];
                }
            }
            for t in 0..9 {
                f[ch * 9 + t] += noise * normal.sample(rng);
            }
        }
        let norm = (f.iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
        w.extend(f.iter().map(|v| (v / norm * std) as f32));
        w.push(rng.random_range(-0.1f32..0.1));
    }
    ConvLayer::square(3, c, d, w).expect("shape").with_padding(1, 1)
}

/// How toy conv filters are drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyFilters {
    /// Independent He-scaled Gaussian weights.
    Iid,
    /// [`smooth_conv`] filters with the given relative noise.
    Smooth { noise: f64 },
}

/// Filter prior used by [`toy_net`]: spatially smooth patterns plus noise of
/// equal scale, closer to trained filters than i.i.d. weights.
pub const TOY_FILTERS: ToyFilters = ToyFilters::Smooth { noise: 1.0 };

/// Three 3×3 ReLU conv layers `3 → 8 → 16 → 16` on 16×16 inputs, a 2×2
/// max-pool, and a dense layer with 10 outputs.
pub fn toy_net(seed: u64) -> NetSpec {
    toy_net_with(seed, TOY_FILTERS)
}

pub fn toy_net_with(seed: u64, filters: ToyFilters) -> NetSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let convs = [(3, 8), (8, 16), (16, 16)];
    let mut layers: Vec<Layer> = convs
        .iter()
        .enumerate()
        .map(|(i, &(c, d))| {
            let conv = match filters {
                ToyFilters::Smooth { noise } => smooth_conv(c, d, noise, &mut rng),
                ToyFilters::Iid => random_conv(c, d, &mut rng),
            };
            Layer::conv(format!("conv{}", i + 1), conv)
        })
        .collect();
    layers.push(Layer::pool("pool", 2, 2));
    layers.push(Layer::flatten("flat"));
    let (inp, out) = (16 * 8 * 8, 10);
    let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("valid std");
    let mut w = Vec::with_capacity(out * (inp + 1));
    for _ in 0..out {
        w.extend((0..inp).map(|_| normal.sample(&mut rng) as f32));
        w.push(0.0);
    }
    layers.push(Layer::dense("fc", DenseLayer::new(inp, out, w).expect("shape")));
    NetSpec::new(Shape::new(3, 16, 16), layers).expect("toy net is consistent")
}

/// `depth` 3×3 ReLU conv layers of `channels → channels` on
/// `channels × size × size` inputs.
pub fn conv_stack(channels: usize, depth: usize, size: usize, seed: u64) -> NetSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..depth)
        .map(|i| Layer::conv(format!("conv{}", i + 1), random_conv(channels, channels, &mut rng)))
        .collect();
    NetSpec::new(Shape::new(channels, size, size), layers).expect("stack is consistent")
}

/// Smooth random images: each channel mixes a few shared low-frequency
/// plane waves, plus a little white noise, so neighbouring pixels and
/// channels are correlated the way natural image patches are.
pub fn toy_images(n: usize, shape: Shape, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let images = (0..n)
        .map(|_| {
            let waves: Vec<(f32, f32, f32)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(-0.8f32..0.8),
                        rng.random_range(-0.8f32..0.8),
                        rng.random_range(0.0f32..std::f32::consts::TAU),
                    )
                })
                .collect();
            let mix: Vec<f32> = (0..shape.channels * waves.len())
                .map(|_| rng.random_range(-1.0f32..1.0))
                .collect();
            let offsets: Vec<f32> = (0..shape.channels).map(|_| rng.random_range(-0.3f32..0.3)).collect();
            FeatureMap::from_fn(shape, |c, y, x| {
                let mut v = offsets[c];
                for (m, &(fy, fx, ph)) in waves.iter().enumerate() {
                    v += mix[c * waves.len() + m] * (fy * y as f32 + fx * x as f32 + ph).sin();
                }
                v + noise.sample(&mut rng) as f32
            })
        })
        .collect();
    Dataset::new(images)
}
