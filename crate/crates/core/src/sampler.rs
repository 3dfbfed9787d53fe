//! Paired (input patch, response) samples drawn from calibration images.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{centered, column_mean};
use crate::tensor::{extract_patch_rect, ConvLayer, FeatureMap, NetSpec};

/// Positions drawn from each calibration image unless configured otherwise.
pub const DEFAULT_POSITIONS_PER_IMAGE: usize = 10;

/// Pre-tensorized calibration images.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    images: Vec<FeatureMap>,
}

impl Dataset {
    pub fn new(images: Vec<FeatureMap>) -> Self {
        Dataset { images }
    }

    /// Reads a dataset directory (an `index.txt` listing tensor files).
    pub fn load(dir: &Path) -> Result<Self> {
        crate::io::load_dataset(dir)
    }

    pub fn images(&self) -> &[FeatureMap] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Splits off the last `n` images, e.g. to hold them out for evaluation.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let tail = self.images.split_off(self.images.len().saturating_sub(n));
        (self, Dataset { images: tail })
    }
}

/// Samples for one layer: columns of `x` are input patches (with the trailing
/// bias 1), `y = W·x` the matching pre-activation responses, and `x_hat` the
/// patches at the same image and position taken from the approximated network.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub layer_id: String,
    pub x: DMatrix<f64>,
    pub x_hat: Option<DMatrix<f64>>,
    pub y: DMatrix<f64>,
    pub seed: u64,
}

impl SampleSet {
    /// Builds a sample set from explicit patches.
    pub fn from_patches(
        layer_id: impl Into<String>,
        layer: &ConvLayer,
        x: DMatrix<f64>,
        x_hat: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let w = weight_matrix(layer);
        if x.nrows() != w.ncols() {
            return Err(Error::Shape(format!(
                "patches have {} rows, filters expect {}",
                x.nrows(),
                w.ncols()
            )));
        }
        if let Some(xh) = &x_hat {
            if xh.shape() != x.shape() {
                return Err(Error::Shape("x_hat and x differ in shape".into()));
            }
        }
        let y = &w * &x;
        Ok(SampleSet {
            layer_id: layer_id.into(),
            x,
            x_hat,
            y,
            seed: 0,
        })
    }

    /// Responses only, for solvers that never look at the inputs.
    pub fn from_responses(layer_id: impl Into<String>, y: DMatrix<f64>) -> Self {
        SampleSet {
            layer_id: layer_id.into(),
            x: DMatrix::zeros(0, y.ncols()),
            x_hat: None,
            y,
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.y.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn response_dim(&self) -> usize {
        self.y.nrows()
    }

    /// Responses of `layer` to the approximated inputs, `W·x̂`.
    pub fn approx_responses(&self, layer: &ConvLayer) -> Result<DMatrix<f64>> {
        let xh = self
            .x_hat
            .as_ref()
            .ok_or_else(|| Error::Input(format!("samples for {} carry no x_hat", self.layer_id)))?;
        let w = weight_matrix(layer);
        if w.ncols() != xh.nrows() {
            return Err(Error::Shape(format!(
                "x_hat has {} rows, filters expect {}",
                xh.nrows(),
                w.ncols()
            )));
        }
        Ok(w * xh)
    }

    /// Centered response Gram matrix `Σ (y − ȳ)(y − ȳ)ᵀ`.
    pub fn centered_gram(&self) -> DMatrix<f64> {
        let yc = centered(&self.y, &column_mean(&self.y));
        &yc * yc.transpose()
    }
}

/// The layer's filter bank as a `d × (k²c + 1)` f64 matrix.
pub fn weight_matrix(layer: &ConvLayer) -> DMatrix<f64> {
    DMatrix::from_fn(layer.out_channels, layer.row_len(), |r, c| {
        layer.weights[r * layer.row_len() + c] as f64
    })
}

/// Where a sample column comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Site {
    image: usize,
    row: usize,
    col: usize,
}

/// Draws `n_images × positions_per_image` paired samples for the conv layer
/// `layer_id` of `net`.
///
/// Inputs `x` come from `net`'s own forward pass. When `approx` is given,
/// `x_hat` is read at the same image and position from `approx`'s forward
/// pass up to the first layer that stands in for `layer_id`.
pub fn sample_layer(
    net: &NetSpec,
    approx: Option<&NetSpec>,
    layer_id: &str,
    images: &Dataset,
    n_images: usize,
    positions_per_image: usize,
    seed: u64,
) -> Result<SampleSet> {
    if images.is_empty() {
        return Err(Error::Input("calibration dataset is empty".into()));
    }
    if n_images == 0 || positions_per_image == 0 {
        return Err(Error::Input("need at least one image and one position".into()));
    }
    let idx = net
        .index_of(layer_id)
        .ok_or_else(|| Error::Input(format!("no layer named {layer_id:?}")))?;
    let layer = net.layers()[idx]
        .as_conv()
        .ok_or_else(|| Error::Input(format!("layer {layer_id:?} is not a convolution")))?;
    let in_shape = net.shapes()[idx];
    let out_shape = layer.output_shape(in_shape)?;

    let approx_idx = match approx {
        Some(a) => {
            let i = a.group_start(layer_id).ok_or_else(|| {
                Error::Input(format!("approximated network has no layer for {layer_id:?}"))
            })?;
            if a.shapes()[i] != in_shape {
                return Err(Error::Shape(format!(
                    "approximated input to {layer_id} is {}, original is {in_shape}",
                    a.shapes()[i]
                )));
            }
            Some(i)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if n_images >= images.len() {
        (0..images.len()).collect()
    } else {
        let mut v = index::sample(&mut rng, images.len(), n_images).into_vec();
        v.sort_unstable();
        v
    };
    let grid = out_shape.height * out_shape.width;
    let mut sites = Vec::with_capacity(chosen.len() * positions_per_image);
    for &image in &chosen {
        let picks: Vec<usize> = if positions_per_image <= grid {
            index::sample(&mut rng, grid, positions_per_image).into_vec()
        } else {
            (0..positions_per_image).map(|_| rng.random_range(0..grid)).collect()
        };
        sites.extend(picks.into_iter().map(|p| Site {
            image,
            row: (p / out_shape.width) * layer.stride_h,
            col: (p % out_shape.width) * layer.stride_w,
        }));
    }

    let per_image: Vec<Result<(Vec<Vec<f32>>, Option<Vec<Vec<f32>>>)>> = sites
        .par_chunks(positions_per_image)
        .map(|here| {
            let img = &images.images()[here[0].image];
            let input = net.forward_prefix(img, idx)?.padded(layer.pad_h, layer.pad_w);
            let x = patches(&input, here, layer)?;
            let x_hat = match (approx, approx_idx) {
                (Some(a), Some(i)) => {
                    let input = a.forward_prefix(img, i)?.padded(layer.pad_h, layer.pad_w);
                    Some(patches(&input, here, layer)?)
                }
                _ => None,
            };
            Ok((x, x_hat))
        })
        .collect();

    let rows = layer.row_len();
    let n = sites.len();
    let mut x = DMatrix::zeros(rows, n);
    let mut x_hat = approx.map(|_| DMatrix::zeros(rows, n));
    let mut col = 0;
    for part in per_image {
        let (xs, xhs) = part.map_err(|e| e.in_layer(layer_id))?;
        for (j, patch) in xs.iter().enumerate() {
            for (r, v) in patch.iter().enumerate() {
                x[(r, col + j)] = *v as f64;
            }
            if let (Some(xh), Some(xhs)) = (x_hat.as_mut(), xhs.as_ref()) {
                for (r, v) in xhs[j].iter().enumerate() {
                    xh[(r, col + j)] = *v as f64;
                }
            }
        }
        col += xs.len();
    }

    let mut set = SampleSet::from_patches(layer_id, layer, x, x_hat)?;
    set.seed = seed;
    Ok(set)
}

fn patches(input: &FeatureMap, sites: &[Site], layer: &ConvLayer) -> Result<Vec<Vec<f32>>> {
    sites
        .iter()
        .map(|s| extract_patch_rect(input, s.row, s.col, layer.kernel_h, layer.kernel_w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Layer, Shape};

    fn toy() -> (NetSpec, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = |k: usize, c: usize, d: usize| {
            let w = (0..d * (k * k * c + 1)).map(|_| rng.random_range(-0.5..0.5)).collect();
            ConvLayer::square(k, c, d, w).unwrap().with_padding(k / 2, k / 2)
        };
        let net = NetSpec::new(
            Shape::new(2, 6, 6),
            vec![Layer::conv("c1", conv(3, 2, 4)), Layer::conv("c2", conv(3, 4, 5))],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images = (0..5)
            .map(|_| FeatureMap::from_fn(Shape::new(2, 6, 6), |_, _, _| rng.random_range(-1.0..1.0)))
            .collect();
        (net, Dataset::new(images))
    }

    #[test]
    fn counts_and_pairing() {
        let (net, data) = toy();
        let s = sample_layer(&net, None, "c2", &data, 3, 4, 9).unwrap();
        assert_eq!(s.len(), 12);
        assert_eq!(s.x.nrows(), 9 * 4 + 1);
        assert!(s.x_hat.is_none());
        assert!(s.x.row(s.x.nrows() - 1).iter().all(|&v| v == 1.0));
        let w = weight_matrix(net.layers()[1].as_conv().unwrap());
        for j in 0..s.len() {
            let y = &w * s.x.column(j);
            assert!((y - s.y.column(j)).norm() <= 1e-6 * s.y.column(j).norm().max(1.0));
        }
    }

    #[test]
    fn approx_equal_to_net_gives_identical_patches() {
        let (net, data) = toy();
        let s = sample_layer(&net, Some(&net), "c2", &data, 5, 3, 4).unwrap();
        assert_eq!(s.x_hat.as_ref().unwrap(), &s.x);
    }

    #[test]
    fn sampling_is_deterministic() {
        let (net, data) = toy();
        let a = sample_layer(&net, Some(&net), "c1", &data, 4, 6, 21).unwrap();
        let b = sample_layer(&net, Some(&net), "c1", &data, 4, 6, 21).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        let c = sample_layer(&net, None, "c1", &data, 4, 6, 22).unwrap();
        assert_ne!(a.x, c.x);
    }

    #[test]
    fn errors() {
        let (net, data) = toy();
        assert!(sample_layer(&net, None, "c1", &Dataset::default(), 1, 1, 0).is_err());
        assert!(sample_layer(&net, None, "nope", &data, 1, 1, 0).is_err());
    }
}
