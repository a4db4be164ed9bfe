//! Forward and backward kernels over raw slices.
//!
//! Every accumulation runs in a fixed order so repeated evaluation is bit
//! reproducible. The convolution lowers each image to a patch matrix and
//! multiplies, which is the same arithmetic as the six-nested-loop
//! definition up to summation order.

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernels: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: input.to_vec(),
            right: kernels.to_vec(),
        };
        let (&[batch, in_channels, height, width], &[out_channels, kc, kernel_h, kernel_w]) =
            (input, kernels)
        else {
            return Err(mismatch());
        };
        if kc != in_channels || kernel_h == 0 || kernel_w == 0 {
            return Err(mismatch());
        }
        if bias != [out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: kernels.to_vec(),
                right: bias.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kernel_h || span_w < kernel_w {
            return Err(mismatch());
        }
        if (span_h - kernel_h) % stride != 0 || (span_w - kernel_w) % stride != 0 {
            return Err(Error::invalid(format!(
                "conv2d: input {input:?} with kernel {kernels:?}, stride {stride}, padding {padding} \
                 does not tile to an integer output extent"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (span_h - kernel_h) / stride + 1,
            out_w: (span_w - kernel_w) / stride + 1,
        })
    }

    /// Rows of the patch matrix: weights per filter.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Lowers one image `[C,H,W]` to its patch matrix `[C·kh·kw, Ho·Wo]`.
fn im2col(img: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let pixels = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back onto one image gradient.
fn col2im(cols: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let pixels = g.out_pixels();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward. When `keep_cols` is given, the per-image patch
/// matrices are stored there back to back for the backward pass.
pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    mut keep_cols: Option<&mut Vec<f64>>,
) -> Vec<f64> {
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let per_out = g.out_channels * pixels;
    let mut out = vec![0.0; g.batch * per_out];
    let mut scratch = Vec::new();
    if let Some(store) = keep_cols.as_deref_mut() {
        store.clear();
        store.resize(g.batch * patch * pixels, 0.0);
    } else {
        scratch.resize(patch * pixels, 0.0);
    }
    for b in 0..g.batch {
        let img = &input[b * g.in_image_len()..(b + 1) * g.in_image_len()];
        let cols: &mut [f64] = match keep_cols.as_deref_mut() {
            Some(store) => &mut store[b * patch * pixels..(b + 1) * patch * pixels],
            None => &mut scratch,
        };
        im2col(img, g, cols);
        let dst = &mut out[b * per_out..(b + 1) * per_out];
        for (f, row) in dst.chunks_exact_mut(pixels).enumerate() {
            row.fill(bias[f]);
        }
        gemm(
            g.out_channels,
            patch,
            pixels,
            kernels,
            false,
            cols,
            false,
            1.0,
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    grad_out: &[f64],
    kernels: &[f64],
    cols: &[f64],
    need_input: bool,
) -> ConvGrads {
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let per_out = g.out_channels * pixels;
    let mut dk = vec![0.0; g.out_channels * patch];
    let mut db = vec![0.0; g.out_channels];
    let mut dx = need_input.then(|| vec![0.0; g.batch * g.in_image_len()]);
    let mut dcols = if need_input {
        vec![0.0; patch * pixels]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let dout = &grad_out[b * per_out..(b + 1) * per_out];
        let bcols = &cols[b * patch * pixels..(b + 1) * patch * pixels];
        gemm(
            g.out_channels,
            pixels,
            patch,
            dout,
            false,
            bcols,
            true,
            1.0,
            &mut dk,
        );
        for (f, row) in dout.chunks_exact(pixels).enumerate() {
            db[f] += row.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                patch,
                g.out_channels,
                pixels,
                kernels,
                true,
                dout,
                false,
                0.0,
                &mut dcols,
            );
            col2im(
                &dcols,
                g,
                &mut dx[b * g.in_image_len()..(b + 1) * g.in_image_len()],
            );
        }
    }
    ConvGrads {
        input: dx,
        kernels: dk,
        bias: db,
    }
}

/// Cross-correlation of `input [N,Cin,H,W]` with `kernels [Cout,Cin,kh,kw]`
/// plus a per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(
        input.shape(),
        kernels.shape(),
        bias.shape(),
        stride,
        padding,
    )?;
    let out = conv2d_forward(&g, input.data(), kernels.data(), bias.data(), None);
    Tensor::new(g.output_shape(), out)
}

pub(crate) fn dense_dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
) -> Result<(usize, usize, usize)> {
    match (input, weights) {
        (&[n, din], &[dout, wdin]) if din == wdin => {
            if bias != [dout] {
                return Err(Error::ShapeMismatch {
                    op: "dense bias",
                    left: weights.to_vec(),
                    right: bias.to_vec(),
                });
            }
            Ok((n, din, dout))
        }
        _ => Err(Error::ShapeMismatch {
            op: "dense",
            left: input.to_vec(),
            right: weights.to_vec(),
        }),
    }
}

pub(crate) fn dense_forward(
    n: usize,
    din: usize,
    dout: usize,
    x: &[f64],
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    gemm(n, din, dout, x, false, w, true, 1.0, &mut out);
    out
}

pub(crate) struct DenseGrads {
    pub input: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn dense_backward(
    n: usize,
    din: usize,
    dout: usize,
    grad_out: &[f64],
    x: &[f64],
    w: &[f64],
    need_input: bool,
) -> DenseGrads {
    let mut dw = vec![0.0; dout * din];
    gemm(dout, n, din, grad_out, true, x, false, 0.0, &mut dw);
    let mut db = vec![0.0; dout];
    for row in grad_out.chunks_exact(dout) {
        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }
    let dx = need_input.then(|| {
        let mut dx = vec![0.0; n * din];
        gemm(n, dout, din, grad_out, false, w, false, 0.0, &mut dx);
        dx
    });
    DenseGrads {
        input: dx,
        weights: dw,
        bias: db,
    }
}

/// Affine map `input [N,Din] · weightsᵀ + bias`, one weight row per output neuron.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din, dout) = dense_dims(input.shape(), weights.shape(), bias.shape())?;
    let out = dense_forward(n, din, dout, input.data(), weights.data(), bias.data());
    Tensor::new([n, dout], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&x| if x > 0.0 { x } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn pool_dims(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok([n, c, h, w]),
        [_, _, h, w] => Err(Error::invalid(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        ))),
        _ => Err(Error::ShapeMismatch {
            op: "maxpool2x2",
            left: shape.to_vec(),
            right: vec![0, 0, 0, 0],
        }),
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled values and, for each
/// output, the flat input index of the winning element (first max wins).
pub(crate) fn maxpool_forward(dims: [usize; 4], x: &[f64]) -> (Vec<f64>, Vec<u32>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    let dims = pool_dims(input.shape())?;
    let (out, _) = maxpool_forward(dims, input.data());
    Tensor::new([dims[0], dims[1], dims[2] / 2, dims[3] / 2], out)
}

pub(crate) fn check_labels(rows: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy labels",
            left: vec![rows, classes],
            right: vec![labels.len()],
        });
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::invalid(format!(
            "label {l} at row {i} is outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-wise softmax, with the
/// row maximum subtracted before exponentiation. Also returns the softmax
/// probabilities.
pub(crate) fn softmax_ce_forward(
    rows: usize,
    classes: usize,
    logits: &[f64],
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; rows * classes];
    let mut total = 0.0;
    for (r, (row, p)) in logits
        .chunks_exact(classes)
        .zip(probs.chunks_exact_mut(classes))
        .enumerate()
    {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (pi, &x) in p.iter_mut().zip(row) {
            *pi = (x - m).exp();
            s += *pi;
        }
        p.iter_mut().for_each(|pi| *pi /= s);
        total += -(row[labels[r]] - m - s.ln());
    }
    (total / rows as f64, probs)
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let &[rows, classes] = logits.shape() else {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    };
    check_labels(rows, classes, labels)?;
    let (loss, _) = softmax_ce_forward(rows, classes, logits.data(), labels);
    Ok(Tensor::scalar(loss))
}
