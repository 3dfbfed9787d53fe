use std::collections::HashSet;

use super::{conv_forward, Activation, ConvLayer, FeatureMap, Shape};
use crate::error::{Error, Result};

/// Non-overlapping or strided max pooling without padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub window: usize,
    pub stride: usize,
}

impl PoolLayer {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Input("pool window and stride must be positive".into()));
        }
        if input.height < self.window || input.width < self.window {
            return Err(Error::Shape(format!(
                "{0}x{0} pool does not fit {input}",
                self.window
            )));
        }
        Ok(Shape::new(
            input.channels,
            (input.height - self.window) / self.stride + 1,
            (input.width - self.window) / self.stride + 1,
        ))
    }

    fn forward(&self, fm: &FeatureMap) -> Result<FeatureMap> {
        let out = self.output_shape(fm.shape())?;
        Ok(FeatureMap::from_fn(out, |c, y, x| {
            let mut best = f32::NEG_INFINITY;
            for dy in 0..self.window {
                for dx in 0..self.window {
                    best = best.max(fm.at(c, y * self.stride + dy, x * self.stride + dx));
                }
            }
            best
        }))
    }
}

/// Fully connected layer over the flattened input; `weights` is
/// `out × (in + 1)` with the bias in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub activation: Activation,
    pub weights: Vec<f32>,
}

impl DenseLayer {
    pub fn new(in_features: usize, out_features: usize, weights: Vec<f32>) -> Result<Self> {
        let layer = DenseLayer {
            in_features,
            out_features,
            activation: Activation::Identity,
            weights,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_features == 0 || self.out_features == 0 {
            return Err(Error::Input("dense layer sizes must be positive".into()));
        }
        if self.weights.len() != self.out_features * (self.in_features + 1) {
            return Err(Error::Shape(format!(
                "dense {}x{} needs {} weights, got {}",
                self.out_features,
                self.in_features + 1,
                self.out_features * (self.in_features + 1),
                self.weights.len()
            )));
        }
        Ok(())
    }

    fn forward(&self, fm: &FeatureMap) -> Result<FeatureMap> {
        if fm.data().len() != self.in_features {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_features,
                fm.data().len()
            )));
        }
        let row = self.in_features + 1;
        let out = (0..self.out_features)
            .map(|o| {
                let w = &self.weights[o * row..(o + 1) * row];
                let mut acc = w[self.in_features];
                for (a, b) in w.iter().zip(fm.data()) {
                    acc += a * b;
                }
                self.activation.apply_f32(acc)
            })
            .collect();
        FeatureMap::new(Shape::new(self.out_features, 1, 1), out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayer),
    Pool(PoolLayer),
    Flatten,
    Dense(DenseLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn conv(name: impl Into<String>, conv: ConvLayer) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Conv(conv),
        }
    }

    pub fn pool(name: impl Into<String>, window: usize, stride: usize) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Pool(PoolLayer { window, stride }),
        }
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Flatten,
        }
    }

    pub fn dense(name: impl Into<String>, dense: DenseLayer) -> Self {
        Layer {
            name: name.into(),
            kind: LayerKind::Dense(dense),
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayer> {
        match &self.kind {
            LayerKind::Conv(c) => Some(c),
            _ => None,
        }
    }

    /// True when this layer was produced by decomposing the original layer
    /// `origin` (named `origin` itself or `origin.<suffix>`).
    pub fn derives_from(&self, origin: &str) -> bool {
        self.name == origin
            || self
                .name
                .strip_prefix(origin)
                .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Name of the original layer this one stands in for.
    pub fn origin(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match &self.kind {
            LayerKind::Conv(c) => c.output_shape(input),
            LayerKind::Pool(p) => p.output_shape(input),
            LayerKind::Flatten => Ok(Shape::new(input.len(), 1, 1)),
            LayerKind::Dense(d) => {
                if input.len() != d.in_features {
                    return Err(Error::Shape(format!(
                        "dense layer expects {} inputs, got {input}",
                        d.in_features
                    )));
                }
                Ok(Shape::new(d.out_features, 1, 1))
            }
        }
    }

    pub fn forward(&self, fm: &FeatureMap) -> Result<FeatureMap> {
        match &self.kind {
            LayerKind::Conv(c) => conv_forward(fm, c),
            LayerKind::Pool(p) => p.forward(fm),
            LayerKind::Flatten => {
                FeatureMap::new(Shape::new(fm.data().len(), 1, 1), fm.data().to_vec())
            }
            LayerKind::Dense(d) => d.forward(fm),
        }
    }

    /// Multiplications for one forward pass on `input`.
    pub fn multiplies(&self, input: Shape) -> Result<u64> {
        match &self.kind {
            LayerKind::Conv(c) => c.multiplies(input),
            LayerKind::Dense(d) => Ok((d.in_features * d.out_features) as u64),
            LayerKind::Pool(_) | LayerKind::Flatten => Ok(0),
        }
    }
}

/// An ordered, shape-checked stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    input: Shape,
    layers: Vec<Layer>,
}

impl NetSpec {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let net = NetSpec { input, layers };
        net.validate()?;
        Ok(net)
    }

    pub fn empty(input: Shape) -> Self {
        NetSpec {
            input,
            layers: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        let mut shape = self.input;
        for layer in &self.layers {
            if layer.name.is_empty() {
                return Err(Error::Input("layer names must be non-empty".into()));
            }
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Input(format!("duplicate layer name {:?}", layer.name)));
            }
            match &layer.kind {
                LayerKind::Conv(c) => c.validate(),
                LayerKind::Dense(d) => d.validate(),
                _ => Ok(()),
            }
            .map_err(|e| e.in_layer(&layer.name))?;
            shape = layer
                .output_shape(shape)
                .map_err(|e| e.in_layer(&layer.name))?;
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Index of the first layer standing in for original layer `origin`.
    pub fn group_start(&self, origin: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.derives_from(origin))
    }

    /// Input shape of every layer, plus the final output shape at the end.
    pub fn shapes(&self) -> Vec<Shape> {
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input;
        out.push(shape);
        for layer in &self.layers {
            shape = layer
                .output_shape(shape)
                .expect("validated at construction");
            out.push(shape);
        }
        out
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes().last().expect("non-empty")
    }

    /// Runs layers `0..end`.
    pub fn forward_prefix(&self, fm: &FeatureMap, end: usize) -> Result<FeatureMap> {
        if fm.shape() != self.input {
            return Err(Error::Shape(format!(
                "network expects input {}, got {}",
                self.input,
                fm.shape()
            )));
        }
        let mut cur = fm.clone();
        for layer in &self.layers[..end] {
            cur = layer.forward(&cur).map_err(|e| e.in_layer(&layer.name))?;
        }
        Ok(cur)
    }

    /// Output of every layer, in order.
    pub fn forward_trace(&self, fm: &FeatureMap) -> Result<Vec<FeatureMap>> {
        self.forward_prefix(fm, 0)?;
        let mut out: Vec<FeatureMap> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer
                .forward(out.last().unwrap_or(fm))
                .map_err(|e| e.in_layer(&layer.name))?;
            out.push(next);
        }
        Ok(out)
    }

    /// Per-layer multiply counts for one forward pass.
    pub fn multiplies(&self) -> Vec<u64> {
        let shapes = self.shapes();
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| l.multiplies(*s).expect("validated at construction"))
            .collect()
    }
}

/// Runs every layer of `net` in order.
pub fn net_forward(net: &NetSpec, fm: &FeatureMap) -> Result<FeatureMap> {
    net.forward_prefix(fm, net.len())
}
