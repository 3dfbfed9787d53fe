//! On-disk formats: tensor blobs, model directories, calibration datasets,
//! sample bundles and JSON reports. All binary data is little-endian.

mod blob;
mod model;

pub use blob::{decode_all, read_blob, read_blobs, write_blob, write_blobs, TensorBlob, MAGIC, VERSION};
pub use model::{load_model, save_model, DESCRIPTOR, MODEL_FORMAT, MODEL_VERSION};

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::{Dataset, SampleSet};
use crate::tensor::{FeatureMap, Shape};

pub const DATASET_INDEX: &str = "index.txt";

/// Reads a dataset directory: `index.txt` lists one blob path per line
/// (relative to the directory), each a `[C, H, W]` tensor. Blank lines and
/// lines starting with `#` are skipped.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let index = dir.join(DATASET_INDEX);
    let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
    let mut images = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let path = dir.join(line);
        let blob = read_blob(&path)?;
        let &[c, h, w] = blob.dims.as_slice() else {
            return Err(Error::Format {
                path,
                reason: format!("expected a [C, H, W] tensor, dims are {:?}", blob.dims),
            });
        };
        images.push(FeatureMap::new(Shape::new(c, h, w), blob.data)?);
    }
    Ok(Dataset::new(images))
}

/// Writes `data` as `dir/index.txt` plus `dir/img_<i>.lrtb`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, img) in data.images().iter().enumerate() {
        let name = format!("img_{i:05}.lrtb");
        let s = img.shape();
        write_blob(
            &dir.join(&name),
            &TensorBlob::new(vec![s.channels, s.height, s.width], img.data().to_vec())?,
        )?;
        index.push_str(&name);
        index.push('\n');
    }
    let path = dir.join(DATASET_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

fn matrix_blob(m: &DMatrix<f64>) -> TensorBlob {
    let data = m.transpose().iter().map(|&v| v as f32).collect();
    TensorBlob {
        dims: vec![m.nrows(), m.ncols()],
        data,
    }
}

fn blob_matrix(b: &TensorBlob, path: &Path) -> Result<DMatrix<f64>> {
    let &[r, c] = b.dims.as_slice() else {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected a matrix, dims are {:?}", b.dims),
        });
    };
    Ok(DMatrix::from_row_iterator(r, c, b.data.iter().map(|&v| v as f64)))
}

/// Writes a sample bundle: the blobs `Y [d, n]`, `X [K+1, n]` and, when
/// present, `X̂ [K+1, n]`, back to back in one file. Values are stored as f32.
pub fn save_samples(samples: &SampleSet, path: &Path) -> Result<()> {
    let mut blobs = vec![matrix_blob(&samples.y), matrix_blob(&samples.x)];
    if let Some(xh) = &samples.x_hat {
        blobs.push(matrix_blob(xh));
    }
    write_blobs(path, &blobs)
}

/// Reads a sample bundle; the layer id is taken from the file stem.
pub fn load_samples(path: &Path) -> Result<SampleSet> {
    let blobs = read_blobs(path)?;
    if blobs.len() > 3 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("sample bundle holds {} tensors, expected 1 to 3", blobs.len()),
        });
    }
    let y = blob_matrix(&blobs[0], path)?;
    let n = y.ncols();
    let x = match blobs.get(1) {
        Some(b) => blob_matrix(b, path)?,
        None => DMatrix::zeros(0, n),
    };
    let x_hat = blobs.get(2).map(|b| blob_matrix(b, path)).transpose()?;
    if x.ncols() != n || x_hat.as_ref().is_some_and(|xh| xh.shape() != x.shape()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "sample tensors disagree in sample count".into(),
        });
    }
    let layer_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(SampleSet {
        layer_id,
        x,
        x_hat,
        y,
        seed: 0,
    })
}

/// Writes any serializable report as pretty-printed JSON.
pub fn save_report<T: Serialize + ?Sized>(report: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_report<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = (0..3)
            .map(|i| FeatureMap::from_fn(Shape::new(2, 3, 4), |c, y, x| (i * 100 + c * 12 + y * 4 + x) as f32 * 0.1))
            .collect();
        let data = Dataset::new(imgs);
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.images(), data.images());
    }

    #[test]
    fn dataset_rejects_non_image_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_blob(&dir.path().join("a.lrtb"), &TensorBlob::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        fs::write(dir.path().join(DATASET_INDEX), "# calibration\na.lrtb\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn samples_round_trip_with_layer_id_from_stem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv2.lrtb");
        let x = DMatrix::from_fn(4, 6, |r, c| (r * 6 + c) as f64 * 0.25);
        let s = SampleSet {
            layer_id: "conv2".into(),
            y: DMatrix::from_fn(2, 6, |r, c| r as f64 - c as f64),
            x_hat: Some(&x * 2.0),
            x,
            seed: 3,
        };
        save_samples(&s, &path).unwrap();
        let back = load_samples(&path).unwrap();
        assert_eq!(back.layer_id, "conv2");
        assert_eq!((back.x, back.y, back.x_hat), (s.x, s.y, s.x_hat));
    }

    #[test]
    fn report_round_trip_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        let trace: Vec<f64> = (0..50).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        save_report(&trace, &path).unwrap();
        let back: Vec<f64> = load_report(&path).unwrap();
        assert_eq!(back, trace);
    }
}
