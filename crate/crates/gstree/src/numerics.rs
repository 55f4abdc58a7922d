//! Dense tensor kernels and their backward passes.
//!
//! Everything here is a pure function over row-major `f64` buffers; the tree
//! modules compose these into node functions and backpropagation. Reductions
//! run in a fixed order, so results are bit-deterministic for a given input.

use crate::error::{Error, Result};

/// Dense row-major tensor with up to four axes (batch, channel/depth,
/// height, width). Training paths are 64-bit throughout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "tensor rank must be 1..=4, got {}",
                shape.len()
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// NaN/Inf detection is an explicit check, never silent.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }
}

/// Row-major 2-D matrix; the workhorse for batches, outputs and leaf weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }
}

/// Pooled-output shape plus, for each pooled cell, the flat index of the
/// winning input cell. Needed to route cotangents back through max-pooling.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    pub pooled_shape: Vec<usize>,
    pub winners: Vec<usize>,
}

/// Dot product with fixed 4-lane accumulation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// y += alpha * x
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable logistic function; branches on sign so neither tail
/// overflows.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid. Rejects non-finite inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.check_finite("sigmoid input")?;
    let data = x.data.iter().map(|&v| sigmoid_scalar(v)).collect();
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// d/dx sigmoid given the forward *output* y: y * (1 - y).
pub fn sigmoid_vjp(output: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    if output.shape != cotangent.shape {
        return Err(Error::Shape(format!(
            "sigmoid_vjp: output shape {:?} vs cotangent shape {:?}",
            output.shape, cotangent.shape
        )));
    }
    let data = output
        .data
        .iter()
        .zip(&cotangent.data)
        .map(|(&y, &c)| c * y * (1.0 - y))
        .collect();
    Ok(Tensor {
        shape: output.shape.clone(),
        data,
    })
}

/// Elementwise max(x, 0).
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape.clone(),
        data,
    }
}

/// Backward of relu; the subgradient at exactly 0 is 0.
pub fn relu_vjp(input: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
    if input.shape != cotangent.shape {
        return Err(Error::Shape(format!(
            "relu_vjp: input shape {:?} vs cotangent shape {:?}",
            input.shape, cotangent.shape
        )));
    }
    let data = input
        .data
        .iter()
        .zip(&cotangent.data)
        .map(|(&x, &c)| if x > 0.0 { c } else { 0.0 })
        .collect();
    Ok(Tensor {
        shape: input.shape.clone(),
        data,
    })
}

/// w'x + b for every row of `x`.
pub fn affine(x: &Matrix, w: &[f64], b: f64) -> Result<Vec<f64>> {
    if x.cols != w.len() {
        return Err(Error::Shape(format!(
            "affine: {} columns vs weight length {}",
            x.cols,
            w.len()
        )));
    }
    Ok((0..x.rows).map(|i| dot(x.row(i), w) + b).collect())
}

/// Backward of [`affine`]: per-row cotangent c gives dW = sum_i c_i * x_i,
/// db = sum_i c_i, dX_i = c_i * w.
pub fn affine_vjp(
    x: &Matrix,
    w: &[f64],
    cotangent: &[f64],
) -> Result<(Matrix, Vec<f64>, f64)> {
    if x.cols != w.len() {
        return Err(Error::Shape(format!(
            "affine_vjp: {} columns vs weight length {}",
            x.cols,
            w.len()
        )));
    }
    if cotangent.len() != x.rows {
        return Err(Error::Shape(format!(
            "affine_vjp: {} rows vs cotangent length {}",
            x.rows,
            cotangent.len()
        )));
    }
    let mut grad_x = Matrix::zeros(x.rows, x.cols);
    let mut grad_w = vec![0.0; w.len()];
    let mut grad_b = 0.0;
    for i in 0..x.rows {
        let c = cotangent[i];
        axpy(c, x.row(i), &mut grad_w);
        axpy(c, w, grad_x.row_mut(i));
        grad_b += c;
    }
    Ok((grad_x, grad_w, grad_b))
}

fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

fn conv_check(image: &Tensor, kernel: &Tensor, bias: &[f64], stride: usize) -> Result<()> {
    if image.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv2d image must be DxHxW, got shape {:?}",
            image.shape
        )));
    }
    if kernel.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv2d kernel must be DxKhxKw, got shape {:?}",
            kernel.shape
        )));
    }
    if image.shape[0] != kernel.shape[0] {
        return Err(Error::Shape(format!(
            "conv2d depth mismatch: image {} vs kernel {}",
            image.shape[0], kernel.shape[0]
        )));
    }
    if kernel.shape[1] % 2 == 0 || kernel.shape[2] % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv2d kernel dims must be odd, got {}x{}",
            kernel.shape[1], kernel.shape[2]
        )));
    }
    if bias.len() != image.shape[0] {
        return Err(Error::Shape(format!(
            "conv2d bias length {} vs depth {}",
            bias.len(),
            image.shape[0]
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be positive".into()));
    }
    Ok(())
}

/// Single-channel 2-D convolution of a DxHxW image with a DxKhxKw kernel,
/// zero padding, plus the summed per-depth bias added to every output cell.
/// Output is (H + 2p - Kh)/s + 1 by (W + 2p - Kw)/s + 1.
///
/// The kernel is applied in convolution orientation: output cell (r, c)
/// gathers padded input at (r*s + Kh-1-i, c*s + Kw-1-j) for kernel entry
/// (i, j), i.e. kernel index and image offset run in opposite directions.
pub fn conv2d(
    image: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv_check(image, kernel, bias, stride)?;
    let (depth, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let (kh, kw) = (kernel.shape[1], kernel.shape[2]);
    let out_h = conv_out_dim(h, kh, stride, padding)?;
    let out_w = conv_out_dim(w, kw, stride, padding)?;
    let bias_sum: f64 = bias.iter().sum();

    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            let mut acc = 0.0;
            for d in 0..depth {
                let img_plane = &image.data[d * h * w..(d + 1) * h * w];
                let ker_plane = &kernel.data[d * kh * kw..(d + 1) * kh * kw];
                for i in 0..kh {
                    // padded row coordinate, shifted back by the padding
                    let pr = r * stride + (kh - 1 - i);
                    let Some(ir) = pr.checked_sub(padding) else {
                        continue;
                    };
                    if ir >= h {
                        continue;
                    }
                    for j in 0..kw {
                        let pc = c * stride + (kw - 1 - j);
                        let Some(ic) = pc.checked_sub(padding) else {
                            continue;
                        };
                        if ic >= w {
                            continue;
                        }
                        acc += ker_plane[i * kw + j] * img_plane[ir * w + ic];
                    }
                }
            }
            out[r * out_w + c] = acc + bias_sum;
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Backward of [`conv2d`]: cotangents for the image, the kernel, and the
/// per-depth biases. Every bias sees the same gradient (the forward adds
/// their sum to each cell).
pub fn conv2d_vjp(
    image: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    cotangent: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let depth = image.shape[0];
    conv_check(image, kernel, &vec![0.0; depth], stride)?;
    let (h, w) = (image.shape[1], image.shape[2]);
    let (kh, kw) = (kernel.shape[1], kernel.shape[2]);
    let out_h = conv_out_dim(h, kh, stride, padding)?;
    let out_w = conv_out_dim(w, kw, stride, padding)?;
    if cotangent.shape != [out_h, out_w] {
        return Err(Error::Shape(format!(
            "conv2d_vjp: cotangent shape {:?} vs expected [{out_h}, {out_w}]",
            cotangent.shape
        )));
    }

    let mut grad_image = Tensor::zeros(image.shape.clone());
    let mut grad_kernel = Tensor::zeros(kernel.shape.clone());
    let mut cot_sum = 0.0;
    for r in 0..out_h {
        for c in 0..out_w {
            let cot = cotangent.data[r * out_w + c];
            cot_sum += cot;
            if cot == 0.0 {
                continue;
            }
            for d in 0..depth {
                let img_plane = &image.data[d * h * w..(d + 1) * h * w];
                let gimg_plane = &mut grad_image.data[d * h * w..(d + 1) * h * w];
                let ker_plane = &kernel.data[d * kh * kw..(d + 1) * kh * kw];
                let gker_plane = &mut grad_kernel.data[d * kh * kw..(d + 1) * kh * kw];
                for i in 0..kh {
                    let pr = r * stride + (kh - 1 - i);
                    let Some(ir) = pr.checked_sub(padding) else {
                        continue;
                    };
                    if ir >= h {
                        continue;
                    }
                    for j in 0..kw {
                        let pc = c * stride + (kw - 1 - j);
                        let Some(ic) = pc.checked_sub(padding) else {
                            continue;
                        };
                        if ic >= w {
                            continue;
                        }
                        gker_plane[i * kw + j] += cot * img_plane[ir * w + ic];
                        gimg_plane[ir * w + ic] += cot * ker_plane[i * kw + j];
                    }
                }
            }
        }
    }
    let grad_bias = vec![cot_sum; depth];
    Ok((grad_image, grad_kernel, grad_bias))
}

/// 2x2 max pooling with stride 2 over the last two axes; halves both spatial
/// dims. Odd spatial dims are a caller error. Ties go to the first cell in
/// row-major window order.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, PoolIndices)> {
    if x.shape.len() < 2 {
        return Err(Error::Shape(format!(
            "maxpool2x2 needs at least 2 axes, got shape {:?}",
            x.shape
        )));
    }
    let n = x.shape.len();
    let (h, w) = (x.shape[n - 2], x.shape[n - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2x2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let channels: usize = x.shape[..n - 2].iter().product();
    let (oh, ow) = (h / 2, w / 2);
    let mut pooled_shape = x.shape.clone();
    pooled_shape[n - 2] = oh;
    pooled_shape[n - 1] = ow;

    let mut out = vec![0.0; channels * oh * ow];
    let mut winners = vec![0usize; channels * oh * ow];
    for ch in 0..channels {
        let base = ch * h * w;
        for r in 0..oh {
            for c in 0..ow {
                let mut best_idx = base + (2 * r) * w + 2 * c;
                let mut best = x.data[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * r + di) * w + (2 * c + dj);
                    if x.data[idx] > best {
                        best = x.data[idx];
                        best_idx = idx;
                    }
                }
                out[ch * oh * ow + r * ow + c] = best;
                winners[ch * oh * ow + r * ow + c] = best_idx;
            }
        }
    }
    Ok((
        Tensor::new(pooled_shape.clone(), out)?,
        PoolIndices {
            pooled_shape,
            winners,
        },
    ))
}

/// Backward of [`maxpool2x2`]: the cotangent of each pooled cell is routed
/// to its winning input cell only.
pub fn maxpool2x2_vjp(
    indices: &PoolIndices,
    input_shape: &[usize],
    cotangent: &Tensor,
) -> Result<Tensor> {
    if cotangent.shape() != indices.pooled_shape.as_slice() {
        return Err(Error::Shape(format!(
            "maxpool2x2_vjp: cotangent shape {:?} vs pooled shape {:?}",
            cotangent.shape(),
            indices.pooled_shape
        )));
    }
    let mut grad = Tensor::zeros(input_shape.to_vec());
    if indices.winners.iter().any(|&i| i >= grad.len()) {
        return Err(Error::Shape(
            "maxpool2x2_vjp: winner index outside input".into(),
        ));
    }
    for (&idx, &c) in indices.winners.iter().zip(cotangent.data()) {
        grad.data[idx] += c;
    }
    Ok(grad)
}
