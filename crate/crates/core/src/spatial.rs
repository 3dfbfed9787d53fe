//! Separable spatial factorization and the combined spatial + channel
//! ("3d") decomposition.
//!
//! A `kh×kw` filter bank is split into `d″` vertical `kh×1` filters followed
//! by `d` horizontal `1×kw` filters over the `d″` intermediate channels. The
//! factorization minimizes the Frobenius error of the filter weights: the
//! filters are laid out as a `(c·kh) × (kw·d)` matrix, rows indexed by
//! (input channel, vertical offset) and columns by (horizontal offset, output
//! filter), and its SVD is truncated at `d″`.

use nalgebra::DMatrix;

use crate::decompose::{build_layers, solve_linear, solve_regression, Decomposition, SolverKind, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::sampler::{weight_matrix, SampleSet};
use crate::tensor::{Activation, ConvLayer};

#[derive(Debug, Clone)]
pub struct SpatialFactors {
    /// `d″` filters of shape `kh×1×c`, no bias, no nonlinearity.
    pub vertical: ConvLayer,
    /// `d` filters of shape `1×kw×d″` carrying the original bias and
    /// nonlinearity.
    pub horizontal: ConvLayer,
    pub d_dprime: usize,
    /// All singular values of the reshaped filter matrix, descending.
    pub singular_values: Vec<f64>,
}

impl SpatialFactors {
    /// The separable filter bank as an equivalent `kh×kw` layer.
    pub fn composed(&self) -> ConvLayer {
        let v = &self.vertical;
        let h = &self.horizontal;
        let (kh, kw, c, d) = (v.kernel_h, h.kernel_w, v.in_channels, h.out_channels);
        let row = kh * kw * c + 1;
        let mut w = vec![0f32; d * row];
        for o in 0..d {
            for ch in 0..c {
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = 0f64;
                        for t in 0..self.d_dprime {
                            acc += v.weights[t * v.row_len() + ch * kh + i] as f64
                                * h.weights[o * h.row_len() + t * kw + j] as f64;
                        }
                        w[o * row + (ch * kh + i) * kw + j] = acc as f32;
                    }
                }
            }
            w[o * row + row - 1] = h.bias(o);
        }
        ConvLayer::new(kh, kw, c, d, w)
            .expect("shapes agree")
            .with_stride(v.stride_h, h.stride_w)
            .with_padding(v.pad_h, h.pad_w)
            .with_activation(h.activation)
    }
}

fn max_dd(layer: &ConvLayer) -> usize {
    (layer.in_channels * layer.kernel_h).min(layer.out_channels * layer.kernel_w)
}

/// Factorizes `layer` into vertical and horizontal stages with `d_dprime`
/// intermediate channels.
pub fn spatial_decompose(layer: &ConvLayer, d_dprime: usize) -> Result<SpatialFactors> {
    layer.validate()?;
    let (kh, kw, c, d) = (layer.kernel_h, layer.kernel_w, layer.in_channels, layer.out_channels);
    let limit = max_dd(layer);
    if d_dprime == 0 || d_dprime > limit {
        return Err(Error::Input(format!("d'' = {d_dprime} must lie in 1..={limit}")));
    }
    let row = layer.row_len();
    let a = DMatrix::from_fn(c * kh, kw * d, |r, col| {
        let (ch, i) = (r / kh, r % kh);
        let (j, o) = (col / d, col % d);
        layer.weights[o * row + (ch * kh + i) * kw + j] as f64
    });
    let f = svd(&a);

    let mut vw = vec![0f32; d_dprime * (kh * c + 1)];
    for t in 0..d_dprime {
        let scale = f.s[t].sqrt();
        for r in 0..c * kh {
            vw[t * (kh * c + 1) + r] = (f.u[(r, t)] * scale) as f32;
        }
    }
    let vertical = ConvLayer::new(kh, 1, c, d_dprime, vw)?
        .with_stride(layer.stride_h, 1)
        .with_padding(layer.pad_h, 0)
        .with_activation(Activation::Identity);

    let hrow = kw * d_dprime + 1;
    let mut hw = vec![0f32; d * hrow];
    for o in 0..d {
        for t in 0..d_dprime {
            let scale = f.s[t].sqrt();
            for j in 0..kw {
                hw[o * hrow + t * kw + j] = (f.v[(j * d + o, t)] * scale) as f32;
            }
        }
        hw[o * hrow + hrow - 1] = layer.bias(o);
    }
    let horizontal = ConvLayer::new(1, kw, d_dprime, d, hw)?
        .with_stride(1, layer.stride_w)
        .with_padding(0, layer.pad_w)
        .with_activation(layer.activation);

    Ok(SpatialFactors {
        vertical,
        horizontal,
        d_dprime,
        singular_values: f.s.iter().copied().collect(),
    })
}

/// `d″` that makes the separable pair `stage_speedup` times cheaper than
/// `layer`: `d″·(kh·c + kw·d) = d·kh·kw·c / s`, rounded to nearest and clamped
/// to `[1, min(c·kh, d·kw)]`. For square kernels this is
/// `d·k·c / (s·(c + d))`.
pub fn choose_dd(layer: &ConvLayer, stage_speedup: f64) -> usize {
    let (kh, kw) = (layer.kernel_h as f64, layer.kernel_w as f64);
    let (c, d) = (layer.in_channels as f64, layer.out_channels as f64);
    let exact = d * kh * kw * c / (stage_speedup * (kh * c + kw * d));
    (exact.round() as usize).clamp(1, max_dd(layer).max(1))
}

/// Whether the layer has a spatial extent to split.
pub fn is_separable(layer: &ConvLayer) -> bool {
    layer.kernel_h > 1 && layer.kernel_w > 1
}

/// The three layers replacing one `kh×kw` layer.
#[derive(Debug, Clone)]
pub struct ThreeLayers {
    /// `(kh×1, d″)`
    pub vertical: ConvLayer,
    /// `(1×kw, d′)`
    pub horizontal: ConvLayer,
    /// `(1×1, d)`
    pub pointwise: ConvLayer,
    pub d_dprime: usize,
    pub decomposition: Decomposition,
}

/// Spatial then channel decomposition of `layer` at ranks `d″` and `d′`.
///
/// The vertical and horizontal stages come from [`spatial_decompose`]. The
/// horizontal stage is then reduced to `d′` channels:
///
/// * `Asymmetric`: targets are the original layer's responses `W·x`,
///   regressors the separable filters applied to the approximated inputs `x̂`,
///   so the channel stage also compensates the spatial error;
/// * `Nonlinear`: the separable layer's own responses serve as both;
/// * `Linear`: PCA of the separable layer's responses.
pub fn accelerate_3d_with(
    layer: &ConvLayer,
    samples: &SampleSet,
    d_dprime: usize,
    d_prime: usize,
    solver: SolverKind,
    opts: &SolverOptions,
) -> Result<ThreeLayers> {
    let factors = spatial_decompose(layer, d_dprime)?;
    let w_sep = weight_matrix(&factors.composed());
    let opts = SolverOptions {
        activation: layer.activation,
        ..opts.clone()
    };
    let mut decomposition = match solver {
        SolverKind::Asymmetric => {
            let x_hat = samples
                .x_hat
                .as_ref()
                .ok_or_else(|| Error::Input(format!("samples for {} carry no x_hat", samples.layer_id)))?;
            if x_hat.nrows() != w_sep.ncols() {
                return Err(Error::Shape(format!(
                    "x_hat has {} rows, filters expect {}",
                    x_hat.nrows(),
                    w_sep.ncols()
                )));
            }
            let regressors = &w_sep * x_hat;
            solve_regression(&samples.layer_id, &samples.y, Some(&regressors), d_prime, &opts)?
        }
        SolverKind::Nonlinear => {
            let y_sep = &w_sep * &samples.x;
            solve_regression(&samples.layer_id, &y_sep, None, d_prime, &opts)?
        }
        SolverKind::Linear => {
            let y_sep = &w_sep * &samples.x;
            solve_linear(&SampleSet::from_responses(samples.layer_id.clone(), y_sep), d_prime)?
        }
    };
    decomposition.solver = solver;
    let (horizontal, pointwise) = build_layers(&factors.horizontal, &decomposition)?;
    Ok(ThreeLayers {
        vertical: factors.vertical,
        horizontal,
        pointwise,
        d_dprime,
        decomposition,
    })
}

/// Asymmetric 3d decomposition for a total speedup `r`, each stage
/// contributing `√r`: `d″` is chosen for the channel-reduced `(kh×kw, d′)`
/// layer.
pub fn accelerate_3d(
    layer: &ConvLayer,
    samples: &SampleSet,
    r: f64,
    d_prime: usize,
    opts: &SolverOptions,
) -> Result<ThreeLayers> {
    if !(r > 1.0) {
        return Err(Error::Input(format!("speedup must exceed 1, got {r}")));
    }
    let d_dprime = choose_dd_reduced(layer, d_prime, r.sqrt());
    accelerate_3d_with(layer, samples, d_dprime, d_prime, SolverKind::Asymmetric, opts)
}

/// [`choose_dd`] for `layer` with its output channels reduced to `d_prime`.
pub fn choose_dd_reduced(layer: &ConvLayer, d_prime: usize, stage_speedup: f64) -> usize {
    let reduced = ConvLayer {
        out_channels: d_prime,
        weights: Vec::new(),
        ..layer.clone()
    };
    choose_dd(&reduced, stage_speedup).min(max_dd(layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv_forward, FeatureMap, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(k: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        let w = (0..d * (k * k * c + 1)).map(|_| rng.random_range(-0.5..0.5)).collect();
        ConvLayer::square(k, c, d, w).unwrap().with_padding(k / 2, k / 2)
    }

    fn rel(a: &FeatureMap, b: &FeatureMap) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
        (num / den).sqrt()
    }

    fn filter_error(a: &ConvLayer, b: &ConvLayer) -> f64 {
        let (wa, wb) = (weight_matrix(a), weight_matrix(b));
        let k = wa.ncols() - 1;
        (wa.columns(0, k) - wb.columns(0, k)).norm_squared()
    }

    #[test]
    fn full_rank_split_is_forward_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = random_layer(3, 4, 8, &mut rng).with_activation(Activation::Identity);
        let f = spatial_decompose(&layer, 12).unwrap();
        let fm = FeatureMap::from_fn(Shape::new(4, 9, 9), |_, _, _| rng.random_range(-1.0..1.0));
        let want = conv_forward(&fm, &layer).unwrap();
        let got = conv_forward(&conv_forward(&fm, &f.vertical).unwrap(), &f.horizontal).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(rel(&got, &want) < 1e-5, "{}", rel(&got, &want));
    }

    #[test]
    fn stride_and_padding_are_split_across_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layer = random_layer(3, 3, 5, &mut rng).with_stride(2, 2);
        let f = spatial_decompose(&layer, 9).unwrap();
        assert_eq!((f.vertical.stride_h, f.vertical.stride_w, f.vertical.pad_h, f.vertical.pad_w), (2, 1, 1, 0));
        assert_eq!((f.horizontal.stride_h, f.horizontal.stride_w, f.horizontal.pad_h, f.horizontal.pad_w), (1, 2, 0, 1));
        let fm = FeatureMap::from_fn(Shape::new(3, 10, 11), |_, _, _| rng.random_range(-1.0..1.0));
        let want = conv_forward(&fm, &layer).unwrap();
        let got = conv_forward(&conv_forward(&fm, &f.vertical).unwrap(), &f.horizontal).unwrap();
        assert_eq!(got.shape(), want.shape());
        assert!(rel(&got, &want) < 1e-5);
    }

    #[test]
    fn separable_filters_are_recovered_exactly() {
        // rank-2 separable bank built from the factors directly
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (k, c, d, r) = (3, 2, 4, 2);
        let a: Vec<f64> = (0..c * k * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * d * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let row = k * k * c + 1;
        let mut w = vec![0f32; d * row];
        for o in 0..d {
            for ch in 0..c {
                for i in 0..k {
                    for j in 0..k {
                        let v: f64 = (0..r).map(|t| a[(ch * k + i) * r + t] * b[(j * d + o) * r + t]).sum();
                        w[o * row + (ch * k + i) * k + j] = v as f32;
                    }
                }
            }
        }
        let layer = ConvLayer::square(k, c, d, w).unwrap();
        let f = spatial_decompose(&layer, r).unwrap();
        assert!(filter_error(&layer, &f.composed()) < 1e-10);
    }

    #[test]
    fn truncation_error_is_the_singular_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let layer = random_layer(3, 4, 8, &mut rng);
        for dd in [1, 4, 7, 12] {
            let f = spatial_decompose(&layer, dd).unwrap();
            let tail: f64 = f.singular_values[dd..].iter().map(|s| s * s).sum();
            let err = filter_error(&layer, &f.composed());
            assert!((err - tail).abs() <= 1e-5 * (1.0 + tail), "{dd}: {err} vs {tail}");
        }
    }

    #[test]
    fn one_by_one_is_a_truncated_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layer = random_layer(1, 5, 6, &mut rng);
        let f = spatial_decompose(&layer, 2).unwrap();
        assert_eq!((f.vertical.kernel_h, f.vertical.kernel_w, f.horizontal.kernel_h, f.horizontal.kernel_w), (1, 1, 1, 1));
        let w = weight_matrix(&layer);
        let s = svd(&w.columns(0, 5).into_owned());
        let tail: f64 = s.s.iter().skip(2).map(|v| v * v).sum();
        assert!((filter_error(&layer, &f.composed()) - tail).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_dd_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layer = random_layer(3, 2, 8, &mut rng);
        assert!(spatial_decompose(&layer, 0).is_err());
        assert!(spatial_decompose(&layer, 7).is_err());
        assert!(spatial_decompose(&layer, 6).is_ok());
    }

    #[test]
    fn choose_dd_examples() {
        let layer = |c, d| ConvLayer {
            kernel_h: 3,
            kernel_w: 3,
            in_channels: c,
            out_channels: d,
            stride_h: 1,
            stride_w: 1,
            pad_h: 1,
            pad_w: 1,
            activation: Activation::Relu,
            weights: Vec::new(),
        };
        assert_eq!(choose_dd(&layer(256, 512), 2.0), 256);
        // d = c: d·k / (2·s)
        assert_eq!(choose_dd(&layer(64, 64), 2.0), 48);
        // s → 1 with c ≪ d clamps to k·c
        assert_eq!(choose_dd(&layer(2, 100), 1.0001), 6);
    }
}
