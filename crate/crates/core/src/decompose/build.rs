use super::Decomposition;
use crate::error::{Error, Result};
use crate::sampler::weight_matrix;
use crate::tensor::{Activation, ConvLayer};

/// Turns a decomposition of `layer` into two layers:
///
/// 1. `d′` filters of the original kernel shape, `W′ = Qᵀ·W` (the bias column
///    of `W` is included, so this layer's bias is `Qᵀ·bias`), no nonlinearity;
/// 2. `d` filters of size `1×1×d′` holding `P`, with bias `b` and the
///    original nonlinearity.
///
/// The composition computes `r(P·W′·x + b) = r(M·W·x + b)`.
pub fn build_layers(layer: &ConvLayer, dec: &Decomposition) -> Result<(ConvLayer, ConvLayer)> {
    let d = layer.out_channels;
    let d_prime = dec.d_prime;
    if dec.p.shape() != (d, d_prime) || dec.q.shape() != (d, d_prime) || dec.b.len() != d {
        return Err(Error::Shape(format!(
            "decomposition P {:?}, Q {:?}, b {} does not fit a layer with {d} filters at rank {d_prime}",
            dec.p.shape(),
            dec.q.shape(),
            dec.b.len()
        )));
    }
    let w_prime = dec.q.transpose() * weight_matrix(layer);
    let first = ConvLayer {
        out_channels: d_prime,
        activation: Activation::Identity,
        weights: w_prime.transpose().iter().map(|&v| v as f32).collect(),
        ..layer.clone()
    };
    first.validate()?;

    let mut second_w = Vec::with_capacity(d * (d_prime + 1));
    for o in 0..d {
        second_w.extend(dec.p.row(o).iter().map(|&v| v as f32));
        second_w.push(dec.b[o] as f32);
    }
    let second = ConvLayer::square(1, d_prime, d, second_w)?.with_activation(layer.activation);
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::SolverKind;
    use crate::tensor::{conv_forward, FeatureMap, Shape};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(k: usize, c: usize, d: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
        let w = (0..d * (k * k * c + 1)).map(|_| rng.random_range(-0.5..0.5)).collect();
        ConvLayer::square(k, c, d, w).unwrap().with_padding(k / 2, k / 2)
    }

    fn dec(p: DMatrix<f64>, q: DMatrix<f64>, b: DVector<f64>) -> Decomposition {
        Decomposition {
            layer_id: "l".into(),
            d_prime: p.ncols(),
            p,
            q,
            b,
            solver: SolverKind::Linear,
            objective_trace: vec![],
            iterations: vec![],
        }
    }

    fn rel(a: &FeatureMap, b: &FeatureMap) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
        let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
        (num / den.max(1e-30)).sqrt()
    }

    #[test]
    fn identity_decomposition_reproduces_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = random_layer(3, 4, 6, &mut rng);
        let id = DMatrix::identity(6, 6);
        let (a, b) = build_layers(&layer, &dec(id.clone(), id, DVector::zeros(6))).unwrap();
        let fm = FeatureMap::from_fn(Shape::new(4, 7, 7), |_, _, _| rng.random_range(-1.0..1.0));
        let want = conv_forward(&fm, &layer).unwrap();
        let got = conv_forward(&conv_forward(&fm, &a).unwrap(), &b).unwrap();
        assert!(rel(&got, &want) < 1e-6);
        assert_eq!(a.activation, Activation::Identity);
        assert_eq!((b.kernel_h, b.kernel_w), (1, 1));
    }

    #[test]
    fn composition_matches_direct_low_rank_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = random_layer(3, 3, 16, &mut rng);
        let p = DMatrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0));
        let q = DMatrix::from_fn(16, 8, |_, _| rng.random_range(-1.0..1.0));
        let bias = DVector::from_fn(16, |_, _| rng.random_range(-1.0..1.0));
        let dc = dec(p, q, bias);
        let (a, b) = build_layers(&layer, &dc).unwrap();
        assert_eq!(a.out_channels, 8);
        let fm = FeatureMap::from_fn(Shape::new(3, 6, 6), |_, _, _| rng.random_range(-1.0..1.0));
        let got = conv_forward(&conv_forward(&fm, &a).unwrap(), &b).unwrap();

        // r(M·W·x + b) evaluated per position in f64
        let m = dc.m();
        let w = weight_matrix(&layer);
        let padded = fm.padded(1, 1);
        let mut want = vec![0f32; 16 * 36];
        for y in 0..6 {
            for x in 0..6 {
                let patch = crate::tensor::extract_patch(&padded, y, x, 3).unwrap();
                let xv = DVector::from_iterator(patch.len(), patch.iter().map(|&v| v as f64));
                let r = &m * (&w * xv) + &dc.b;
                for o in 0..16 {
                    want[o * 36 + y * 6 + x] = r[o].max(0.0) as f32;
                }
            }
        }
        let want = FeatureMap::new(Shape::new(16, 6, 6), want).unwrap();
        assert!(rel(&got, &want) < 1e-6);
    }

    #[test]
    fn one_by_one_layers_stay_one_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(1, 5, 4, &mut rng);
        let p = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let (a, b) = build_layers(&layer, &dec(p.clone(), p, DVector::zeros(4))).unwrap();
        assert_eq!((a.kernel_h, a.kernel_w, b.kernel_h, b.kernel_w), (1, 1, 1, 1));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = random_layer(1, 5, 4, &mut rng);
        let p = DMatrix::zeros(3, 2);
        assert!(build_layers(&layer, &dec(p.clone(), p, DVector::zeros(3))).is_err());
    }
}
