use super::{Activation, FeatureMap, Shape};
use crate::error::{Error, Result};

/// One convolutional layer.
///
/// `weights` is the `d × (kh·kw·c + 1)` filter bank, row-major, one filter per
/// row with the bias in the last column. Within a row, taps are laid out
/// channel-major, then kernel row, then kernel column; [`extract_patch`] uses
/// the same order, so `W · patch` is the pre-activation response.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub activation: Activation,
    pub weights: Vec<f32>,
}

impl ConvLayer {
    /// Square `k × k` filters, stride 1, no padding, ReLU.
    pub fn square(k: usize, in_channels: usize, out_channels: usize, weights: Vec<f32>) -> Result<Self> {
        Self::new(k, k, in_channels, out_channels, weights)
    }

    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f32>,
    ) -> Result<Self> {
        let layer = ConvLayer {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            stride_h: 1,
            stride_w: 1,
            pad_h: 0,
            pad_w: 0,
            activation: Activation::Relu,
            weights,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn with_stride(mut self, stride_h: usize, stride_w: usize) -> Self {
        self.stride_h = stride_h;
        self.stride_w = stride_w;
        self
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::Input("kernel size must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Input("channel counts must be positive".into()));
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::Input("stride must be positive".into()));
        }
        let expected = self.out_channels * self.row_len();
        if self.weights.len() != expected {
            return Err(Error::Shape(format!(
                "filter bank {}x{} needs {expected} weights, got {}",
                self.out_channels,
                self.row_len(),
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// Number of filter taps, `kh·kw·c` (excludes the bias slot).
    pub fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    /// Length of one filter row including the bias, `kh·kw·c + 1`.
    pub fn row_len(&self) -> usize {
        self.patch_len() + 1
    }

    pub fn filter(&self, o: usize) -> &[f32] {
        let n = self.row_len();
        &self.weights[o * n..(o + 1) * n]
    }

    pub fn bias(&self, o: usize) -> f32 {
        self.filter(o)[self.patch_len()]
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.channels != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        let ph = input.height + 2 * self.pad_h;
        let pw = input.width + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Shape(format!(
                "{}x{} kernel does not fit a padded {ph}x{pw} input",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok(Shape::new(
            self.out_channels,
            (ph - self.kernel_h) / self.stride_h + 1,
            (pw - self.kernel_w) / self.stride_w + 1,
        ))
    }

    /// Multiplications per forward pass on `input` (bias additions excluded).
    pub fn multiplies(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok((self.out_channels * self.patch_len()) as u64 * (out.height * out.width) as u64)
    }
}

/// Reshapes the `k × k` window whose top-left corner is at `(row, col)` into a
/// vector of length `k²c + 1` with a trailing 1 for the bias.
pub fn extract_patch(fm: &FeatureMap, row: usize, col: usize, k: usize) -> Result<Vec<f32>> {
    extract_patch_rect(fm, row, col, k, k)
}

pub fn extract_patch_rect(
    fm: &FeatureMap,
    row: usize,
    col: usize,
    kh: usize,
    kw: usize,
) -> Result<Vec<f32>> {
    if row + kh > fm.height() || col + kw > fm.width() {
        return Err(Error::Range(format!(
            "{kh}x{kw} window at ({row}, {col}) exceeds {} map",
            fm.shape()
        )));
    }
    let mut out = Vec::with_capacity(kh * kw * fm.channels() + 1);
    for c in 0..fm.channels() {
        for dy in 0..kh {
            for dx in 0..kw {
                out.push(fm.at(c, row + dy, col + dx));
            }
        }
    }
    out.push(1.0);
    Ok(out)
}

/// Output positions per packed panel.
const NR: usize = 8;

/// Applies `layer` to `fm`: `W · x` at every output position, then the
/// layer's nonlinearity.
pub fn conv_forward(fm: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap> {
    let out_shape = layer.output_shape(fm.shape())?;
    let positions = out_shape.height * out_shape.width;
    let k = layer.patch_len();
    let d = layer.out_channels;

    let mut out = vec![0.0f32; d * positions];
    let mut panel = vec![0.0f32; k * NR];
    for jb in (0..positions).step_by(NR) {
        let n = NR.min(positions - jb);
        pack_panel(fm, layer, out_shape, jb, n, &mut panel);
        let mut o = 0;
        while o + 4 <= d {
            kernel::<4>(layer, o, &panel, jb, n, positions, &mut out);
            o += 4;
        }
        match d - o {
            3 => kernel::<3>(layer, o, &panel, jb, n, positions, &mut out),
            2 => kernel::<2>(layer, o, &panel, jb, n, positions, &mut out),
            1 => kernel::<1>(layer, o, &panel, jb, n, positions, &mut out),
            _ => {}
        }
    }

    if layer.activation != Activation::Identity {
        for v in &mut out {
            *v = layer.activation.apply_f32(*v);
        }
    }
    FeatureMap::new(out_shape, out)
}

/// `R` output channels from `o` on one panel of `NR` positions starting at
/// `jb`, of which the first `n` are real. Accumulates bias first, then taps
/// in order.
#[inline(always)]
fn kernel<const R: usize>(
    layer: &ConvLayer,
    o: usize,
    panel: &[f32],
    jb: usize,
    n: usize,
    positions: usize,
    out: &mut [f32],
) {
    let k = layer.patch_len();
    let rows: [&[f32]; R] = std::array::from_fn(|r| &layer.filter(o + r)[..k]);
    let mut acc: [[f32; NR]; R] = std::array::from_fn(|r| [layer.bias(o + r); NR]);
    let panel = &panel[..k * NR];
    for kk in 0..k {
        let x: [f32; NR] = panel[kk * NR..kk * NR + NR].try_into().expect("panel width");
        for r in 0..R {
            let wv = rows[r][kk];
            for j in 0..NR {
                acc[r][j] += wv * x[j];
            }
        }
    }
    for r in 0..R {
        let start = (o + r) * positions + jb;
        out[start..start + n].copy_from_slice(&acc[r][..n]);
    }
}

/// Patch columns of positions `jb..jb + n`, tap-major: `panel[kk·NR + t]`
/// is tap `kk` at position `jb + t`. Taps in padding and positions past `n`
/// are zero.
fn pack_panel(fm: &FeatureMap, layer: &ConvLayer, out: Shape, jb: usize, n: usize, panel: &mut [f32]) {
    let (h, w) = (fm.height(), fm.width());
    let (oy, ox0) = (jb / out.width, jb % out.width);
    // all positions on one output row, every window column inside the input
    let same_row = ox0 + n <= out.width && n == NR && layer.stride_w == 1;
    let mut kk = 0;
    for c in 0..layer.in_channels {
        let plane = &fm.data()[c * h * w..(c + 1) * h * w];
        for dy in 0..layer.kernel_h {
            for dx in 0..layer.kernel_w {
                let dst = &mut panel[kk * NR..(kk + 1) * NR];
                kk += 1;
                if same_row {
                    let iy = (oy * layer.stride_h + dy) as isize - layer.pad_h as isize;
                    let ix = (ox0 + dx) as isize - layer.pad_w as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && ix as usize + NR <= w {
                        let start = iy as usize * w + ix as usize;
                        dst.copy_from_slice(&plane[start..start + NR]);
                        continue;
                    }
                }
                for (t, slot) in dst.iter_mut().enumerate() {
                    *slot = 0.0;
                    if t >= n {
                        continue;
                    }
                    let j = jb + t;
                    let iy = ((j / out.width) * layer.stride_h + dy) as isize - layer.pad_h as isize;
                    let ix = ((j % out.width) * layer.stride_w + dx) as isize - layer.pad_w as isize;
                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                        *slot = plane[iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shape: Shape, data: &[f32]) -> FeatureMap {
        FeatureMap::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn patch_of_single_pixel() {
        let fm = map(Shape::new(1, 1, 1), &[5.0]);
        assert_eq!(extract_patch(&fm, 0, 0, 1).unwrap(), vec![5.0, 1.0]);
    }

    #[test]
    fn patch_of_full_window() {
        let fm = map(Shape::new(1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(extract_patch(&fm, 0, 0, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn patch_length_is_k2c_plus_one() {
        let fm = FeatureMap::from_fn(Shape::new(2, 3, 3), |c, y, x| (c * 9 + y * 3 + x) as f32);
        assert_eq!(extract_patch(&fm, 0, 0, 3).unwrap().len(), 19);
    }

    #[test]
    fn patch_out_of_bounds_is_a_range_error() {
        let fm = FeatureMap::zeros(Shape::new(1, 3, 3));
        assert!(matches!(extract_patch(&fm, 1, 0, 3), Err(Error::Range(_))));
        assert!(matches!(extract_patch(&fm, 0, 3, 1), Err(Error::Range(_))));
    }

    #[test]
    fn identity_one_by_one() {
        let c = 3;
        let mut w = vec![0.0; c * (c + 1)];
        for i in 0..c {
            w[i * (c + 1) + i] = 1.0;
        }
        let layer = ConvLayer::square(1, c, c, w)
            .unwrap()
            .with_activation(Activation::Identity);
        let fm = FeatureMap::from_fn(Shape::new(3, 4, 5), |c, y, x| c as f32 - y as f32 * 0.5 + x as f32);
        assert_eq!(conv_forward(&fm, &layer).unwrap(), fm);
    }

    #[test]
    fn scale_and_bias() {
        let layer = ConvLayer::square(1, 1, 1, vec![2.0, 3.0]).unwrap();
        let out = conv_forward(&map(Shape::new(1, 1, 1), &[4.0]), &layer).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let layer = ConvLayer::square(1, 2, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let fm = FeatureMap::zeros(Shape::new(3, 2, 2));
        assert!(matches!(conv_forward(&fm, &layer), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_matches_explicit_patches_with_padding_and_stride() {
        let c = 2;
        let w: Vec<f32> = (0..3 * (9 * c + 1)).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.1).collect();
        let layer = ConvLayer::square(3, c, 3, w)
            .unwrap()
            .with_stride(2, 1)
            .with_padding(1, 1)
            .with_activation(Activation::Identity);
        let fm = FeatureMap::from_fn(Shape::new(c, 5, 4), |c, y, x| ((c + 2 * y + 3 * x) % 5) as f32 - 2.0);
        let out = conv_forward(&fm, &layer).unwrap();
        let padded = fm.padded(1, 1);
        assert_eq!(out.shape(), Shape::new(3, 3, 4));
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let patch = extract_patch(&padded, oy * 2, ox, 3).unwrap();
                    let expect: f32 = layer.filter(o).iter().zip(&patch).map(|(a, b)| a * b).sum();
                    assert!((out.at(o, oy, ox) - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rectangular_kernel_output_shape() {
        let layer = ConvLayer::new(3, 1, 2, 4, vec![0.0; 4 * 7])
            .unwrap()
            .with_padding(1, 0);
        assert_eq!(layer.output_shape(Shape::new(2, 8, 8)).unwrap(), Shape::new(4, 8, 8));
    }
}
