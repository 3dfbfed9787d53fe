//! Minimal deterministic CPU inference.
//!
//! Activations are `f32` volumes stored channel-major (`c`, then `h`, then
//! `w`). Every forward operation runs with a fixed reduction order, so two
//! runs on identical inputs are bitwise equal.

mod conv;
mod net;

pub use conv::{conv_forward, extract_patch, extract_patch_rect, ConvLayer};
pub use net::{net_forward, DenseLayer, Layer, LayerKind, NetSpec, PoolLayer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume dimensions, channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;

    /// Parses `CxHxW`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Input(format!("cannot parse shape {s:?}, expected CxHxW")))?;
        match dims[..] {
            [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(Shape::new(c, h, w)),
            _ => Err(Error::Input(format!(
                "shape {s:?} must have three positive dimensions"
            ))),
        }
    }
}

/// A 3-D activation volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: Shape,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "feature map {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(FeatureMap { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        FeatureMap {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        FeatureMap { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns a copy surrounded by `pad_h` zero rows and `pad_w` zero columns
    /// on each side.
    pub fn padded(&self, pad_h: usize, pad_w: usize) -> FeatureMap {
        if pad_h == 0 && pad_w == 0 {
            return self.clone();
        }
        let s = self.shape;
        let out = Shape::new(s.channels, s.height + 2 * pad_h, s.width + 2 * pad_w);
        let mut data = vec![0.0; out.len()];
        for c in 0..s.channels {
            for y in 0..s.height {
                let src = (c * s.height + y) * s.width;
                let dst = (c * out.height + y + pad_h) * out.width + pad_w;
                data[dst..dst + s.width].copy_from_slice(&self.data[src..src + s.width]);
            }
        }
        FeatureMap { shape: out, data }
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => relu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub(crate) fn apply_f32(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(2.5), 2.5);
    }

    #[test]
    fn feature_map_length_is_checked() {
        assert!(FeatureMap::new(Shape::new(2, 2, 2), vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(Shape::new(2, 2, 2), vec![0.0; 8]).is_ok());
    }

    #[test]
    fn shape_parses() {
        assert_eq!("3x16x16".parse::<Shape>().unwrap(), Shape::new(3, 16, 16));
        assert!("3x16".parse::<Shape>().is_err());
        assert!("0x1x1".parse::<Shape>().is_err());
    }

    #[test]
    fn padding_places_values_in_the_interior() {
        let fm = FeatureMap::new(Shape::new(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = fm.padded(1, 0);
        assert_eq!(p.shape(), Shape::new(1, 4, 2));
        assert_eq!(p.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    }
}
