//! Model directories: a `model.json` descriptor plus one `LRTB` blob per
//! weighted layer.
//!
//! ```json
//! {
//!   "format": "lraccel-model",
//!   "version": 1,
//!   "input": [3, 16, 16],
//!   "layers": [
//!     {"name": "conv1", "type": "conv", "kernel": [3, 3], "in_channels": 3,
//!      "out_channels": 8, "stride": [1, 1], "padding": [1, 1],
//!      "activation": "relu", "weights": "blobs/conv1.lrtb"},
//!     {"name": "pool1", "type": "pool", "window": 2, "stride": 2},
//!     {"name": "flat", "type": "flatten"},
//!     {"name": "fc", "type": "dense", "in_features": 1024, "out_features": 10,
//!      "activation": "identity", "weights": "blobs/fc.lrtb"}
//!   ]
//! }
//! ```
//!
//! Conv weights are stored as `[out_channels, kh·kw·in_channels + 1]`, dense
//! weights as `[out_features, in_features + 1]`; the last column is the bias.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::blob::{read_blob, write_blob, TensorBlob};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvLayer, DenseLayer, Layer, LayerKind, NetSpec, Shape};

pub const MODEL_FORMAT: &str = "lraccel-model";
pub const MODEL_VERSION: u32 = 1;
pub const DESCRIPTOR: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    format: String,
    version: u32,
    input: [usize; 3],
    layers: Vec<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum LayerDesc {
    Conv {
        name: String,
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        stride: [usize; 2],
        padding: [usize; 2],
        activation: Activation,
        weights: String,
    },
    Pool {
        name: String,
        window: usize,
        stride: usize,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        activation: Activation,
        weights: String,
    },
}

const KINDS: [&str; 4] = ["conv", "pool", "flatten", "dense"];

/// The descriptor path for a model given either as a directory or as the
/// descriptor file itself.
fn descriptor_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(DESCRIPTOR)
    } else {
        path.to_path_buf()
    }
}

fn blob_name(layer: &str) -> String {
    let safe: String = layer
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("blobs/{safe}.lrtb")
}

/// Writes `net` into directory `dir`, creating it if needed.
pub fn save_model(net: &NetSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("blobs")).map_err(|e| Error::io(dir, e))?;
    let mut layers = Vec::with_capacity(net.len());
    for layer in net.layers() {
        let name = layer.name.clone();
        let desc = match &layer.kind {
            LayerKind::Conv(c) => {
                let weights = blob_name(&name);
                let blob = TensorBlob::new(vec![c.out_channels, c.row_len()], c.weights.clone())?;
                write_blob(&dir.join(&weights), &blob)?;
                LayerDesc::Conv {
                    name,
                    kernel: [c.kernel_h, c.kernel_w],
                    in_channels: c.in_channels,
                    out_channels: c.out_channels,
                    stride: [c.stride_h, c.stride_w],
                    padding: [c.pad_h, c.pad_w],
                    activation: c.activation,
                    weights,
                }
            }
            LayerKind::Pool(p) => LayerDesc::Pool {
                name,
                window: p.window,
                stride: p.stride,
            },
            LayerKind::Flatten => LayerDesc::Flatten { name },
            LayerKind::Dense(d) => {
                let weights = blob_name(&name);
                let blob = TensorBlob::new(vec![d.out_features, d.in_features + 1], d.weights.clone())?;
                write_blob(&dir.join(&weights), &blob)?;
                LayerDesc::Dense {
                    name,
                    in_features: d.in_features,
                    out_features: d.out_features,
                    activation: d.activation,
                    weights,
                }
            }
        };
        layers.push(serde_json::to_value(desc).expect("descriptor serializes"));
    }
    let input = net.input_shape();
    let desc = Descriptor {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        input: [input.channels, input.height, input.width],
        layers,
    };
    let path = dir.join(DESCRIPTOR);
    let text = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Loads a model from its directory (or its `model.json`).
pub fn load_model(path: &Path) -> Result<NetSpec> {
    let desc_path = descriptor_path(path);
    let text = fs::read_to_string(&desc_path).map_err(|e| Error::io(&desc_path, e))?;
    let desc: Descriptor = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: desc_path.clone(),
        source,
    })?;
    let format_err = |reason: String| Error::Format {
        path: desc_path.clone(),
        reason,
    };
    if desc.format != MODEL_FORMAT {
        return Err(format_err(format!("format is {:?}, expected {MODEL_FORMAT:?}", desc.format)));
    }
    if desc.version > MODEL_VERSION {
        return Err(Error::Version {
            path: desc_path.clone(),
            found: desc.version,
            supported: MODEL_VERSION,
        });
    }
    let root = desc_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(desc.layers.len());
    for (i, value) in desc.layers.into_iter().enumerate() {
        let kind = value.get("type").and_then(|t| t.as_str()).unwrap_or("");
        if !KINDS.contains(&kind) {
            return Err(format_err(format!("layer {i}: unknown layer kind {kind:?}")));
        }
        let ld: LayerDesc = serde_json::from_value(value)
            .map_err(|e| format_err(format!("layer {i}: {e}")))?;
        layers.push(build_layer(ld, root)?);
    }
    let [c, h, w] = desc.input;
    NetSpec::new(Shape::new(c, h, w), layers)
}

fn weights(root: &Path, rel: &str, dims: [usize; 2], layer: &str) -> Result<Vec<f32>> {
    let path = root.join(rel);
    let blob = read_blob(&path)?;
    if blob.dims != dims {
        return Err(Error::Shape(format!(
            "{}: blob dims {:?}, layer expects {dims:?}",
            path.display(),
            blob.dims
        ))
        .in_layer(layer));
    }
    Ok(blob.data)
}

fn build_layer(desc: LayerDesc, root: &Path) -> Result<Layer> {
    Ok(match desc {
        LayerDesc::Conv {
            name,
            kernel: [kh, kw],
            in_channels,
            out_channels,
            stride: [sh, sw],
            padding: [ph, pw],
            activation,
            weights: rel,
        } => {
            let w = weights(root, &rel, [out_channels, kh * kw * in_channels + 1], &name)?;
            let conv = ConvLayer::new(kh, kw, in_channels, out_channels, w)
                .map_err(|e| e.in_layer(&name))?
                .with_stride(sh, sw)
                .with_padding(ph, pw)
                .with_activation(activation);
            conv.validate().map_err(|e| e.in_layer(&name))?;
            Layer::conv(name, conv)
        }
        LayerDesc::Pool { name, window, stride } => Layer::pool(name, window, stride),
        LayerDesc::Flatten { name } => Layer::flatten(name),
        LayerDesc::Dense {
            name,
            in_features,
            out_features,
            activation,
            weights: rel,
        } => {
            let w = weights(root, &rel, [out_features, in_features + 1], &name)?;
            let dense = DenseLayer::new(in_features, out_features, w)
                .map_err(|e| e.in_layer(&name))?
                .with_activation(activation);
            Layer::dense(name, dense)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> NetSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = |n: usize| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        NetSpec::new(
            Shape::new(2, 8, 8),
            vec![
                Layer::conv("conv1", ConvLayer::square(3, 2, 4, w(4 * 19)).unwrap().with_padding(1, 1)),
                Layer::conv(
                    "conv2",
                    ConvLayer::new(3, 1, 4, 3, w(3 * 13)).unwrap().with_padding(1, 0).with_stride(1, 2),
                ),
                Layer::pool("pool", 2, 2),
                Layer::flatten("flat"),
                Layer::dense("fc", DenseLayer::new(24, 5, w(5 * 25)).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let net = random_net(7);
        save_model(&net, dir.path()).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(back, net);
        let back = load_model(&dir.path().join(DESCRIPTOR)).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn empty_and_single_dense_nets_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let empty = NetSpec::empty(Shape::new(1, 2, 3));
        save_model(&empty, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), empty);

        let dir = tempfile::tempdir().unwrap();
        let dense = NetSpec::new(
            Shape::new(3, 1, 1),
            vec![Layer::dense("fc", DenseLayer::new(3, 2, vec![0.5; 8]).unwrap())],
        )
        .unwrap();
        save_model(&dense, dir.path()).unwrap();
        assert_eq!(load_model(dir.path()).unwrap(), dense);
    }

    #[test]
    fn absent_blob_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&random_net(1), dir.path()).unwrap();
        let gone = dir.path().join("blobs/conv2.lrtb");
        fs::remove_file(&gone).unwrap();
        match load_model(dir.path()) {
            Err(Error::MissingBlob { path }) => assert_eq!(path, gone),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_is_a_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&random_net(2), dir.path()).unwrap();
        let path = dir.path().join("blobs/conv1.lrtb");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_model(dir.path()) {
            Err(Error::LengthMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (76, 75));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_and_dim_mismatch_are_structured() {
        let dir = tempfile::tempdir().unwrap();
        save_model(&random_net(3), dir.path()).unwrap();
        let path = dir.path().join(DESCRIPTOR);
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replacen("\"type\": \"pool\"", "\"type\": \"lrn\"", 1)).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown layer kind \"lrn\""), "{err}");

        fs::write(&path, text.replacen("\"out_channels\": 4", "\"out_channels\": 5", 1)).unwrap();
        let err = load_model(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Layer { layer, .. } if layer == "conv1"), "{err}");

        fs::write(&path, text.replacen("\"version\": 1", "\"version\": 9", 1)).unwrap();
        assert!(matches!(load_model(dir.path()), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn unwritable_destination_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        assert!(matches!(save_model(&random_net(4), &file), Err(Error::Io { .. })));
    }
}
