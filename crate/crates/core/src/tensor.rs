//! Dense row-major tensors and the numeric kernels every layer is built on.
//!
//! Activations use an `H × W × C` layout with channels as the fastest
//! dimension. Convolution kernels are stored `Kh × Kw × Cin × Cout` and
//! fully-connected weights `F × K`. Every kernel has a backward counterpart
//! taking the upstream gradient and returning gradients for its inputs.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("buffer of length {len} does not fit shape {dims:?} ({expected} elements)")]
    LengthMismatch {
        dims: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid hyperparameter for {op}: {detail}")]
    InvalidHyperparameter { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

fn bad_hyper(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidHyperparameter {
        op,
        detail: detail.into(),
    }
}

/// Ordered list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Interprets the shape as `H × W × C`.
    pub fn as_hwc(&self) -> Option<(usize, usize, usize)> {
        match self.0.as_slice() {
            &[h, w, c] => Some((h, w, c)),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::LengthMismatch {
                dims: shape.dims().to_vec(),
                len: data.len(),
                expected: shape.numel(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, data)
    }

    pub fn zeros(shape: &Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &Shape, value: f64) -> Self {
        Tensor {
            shape: shape.clone(),
            data: vec![value; shape.numel()],
        }
    }

    /// A rank-1 tensor holding `values`. Panics on an empty slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_vec(vec![values.len()], values.to_vec()).expect("vector must be non-empty")
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(Shape::new(dims)?, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite(op))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(mismatch(
                "add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(mismatch("mul", format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Largest elementwise absolute difference; `None` if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Index of the largest entry, ties resolved to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    t.shape()
        .as_hwc()
        .ok_or_else(|| mismatch(op, format!("expected an H×W×C tensor, got {}", t.shape())))
}

/// Output extent of a sliding window, or `None` if the window does not fit.
pub fn window_extent(input: usize, window: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || window == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

/// Hyperparameters shared by the forward and backward convolution kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

struct ConvDims {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn conv_dims(input: &Tensor, kernels: &Tensor, geo: ConvGeometry) -> Result<ConvDims> {
    const OP: &str = "conv2d";
    let (h, w, cin) = hwc(OP, input)?;
    let (kh, kw, kcin, cout) = match kernels.dims() {
        &[a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(mismatch(
                OP,
                format!("kernels must be Kh×Kw×Cin×Cout, got {}", kernels.shape()),
            ))
        }
    };
    if kcin != cin {
        return Err(mismatch(
            OP,
            format!("input has {cin} channels but kernels expect {kcin}"),
        ));
    }
    if geo.stride == 0 {
        return Err(bad_hyper(OP, "stride must be positive"));
    }
    let oh = window_extent(h, kh, geo.stride, geo.pad);
    let ow = window_extent(w, kw, geo.stride, geo.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(ConvDims {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
        }),
        _ => Err(mismatch(
            OP,
            format!(
                "{kh}×{kw} kernel does not fit {h}×{w} input with pad {}",
                geo.pad
            ),
        )),
    }
}

/// Maps an output position and kernel offset to an input position, or `None`
/// when it lands in the zero padding.
#[inline]
fn source_index(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (out * stride + k) as isize - pad as isize;
    if pos < 0 || pos as usize >= extent {
        None
    } else {
        Some(pos as usize)
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    let d = conv_dims(input, kernels, geo)?;
    if bias.numel() != d.cout {
        return Err(mismatch(
            "conv2d",
            format!("bias has {} entries, expected {}", bias.numel(), d.cout),
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; d.oh * d.ow * d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let o = &mut out[(oy * d.ow + ox) * d.cout..][..d.cout];
            o.copy_from_slice(bias.data());
            for ky in 0..d.kh {
                let Some(iy) = source_index(oy, ky, geo.stride, geo.pad, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = source_index(ox, kx, geo.stride, geo.pad, d.w) else {
                        continue;
                    };
                    let xs = &x[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let kr = &k[kbase + ci * d.cout..][..d.cout];
                        for (ov, &kv) in o.iter_mut().zip(kr) {
                            *ov += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![d.oh, d.ow, d.cout], out)?.ensure_finite("conv2d")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
) -> Result<ConvGrads> {
    let d = conv_dims(input, kernels, geo)?;
    if grad_out.dims() != [d.oh, d.ow, d.cout] {
        return Err(mismatch(
            "conv2d_backward",
            format!(
                "upstream gradient is {}, expected {}×{}×{}",
                grad_out.shape(),
                d.oh,
                d.ow,
                d.cout
            ),
        ));
    }
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; d.cout];
    for oy in 0..d.oh {
        for ox in 0..d.ow {
            let go = &g[(oy * d.ow + ox) * d.cout..][..d.cout];
            for (b, &gv) in gb.iter_mut().zip(go) {
                *b += gv;
            }
            for ky in 0..d.kh {
                let Some(iy) = source_index(oy, ky, geo.stride, geo.pad, d.h) else {
                    continue;
                };
                for kx in 0..d.kw {
                    let Some(ix) = source_index(ox, kx, geo.stride, geo.pad, d.w) else {
                        continue;
                    };
                    let xbase = (iy * d.w + ix) * d.cin;
                    let kbase = (ky * d.kw + kx) * d.cin * d.cout;
                    for ci in 0..d.cin {
                        let xv = x[xbase + ci];
                        let kr = &k[kbase + ci * d.cout..][..d.cout];
                        let gkr = &mut gk[kbase + ci * d.cout..][..d.cout];
                        let mut acc = 0.0;
                        for ((gkv, &kv), &gv) in gkr.iter_mut().zip(kr).zip(go) {
                            *gkv += xv * gv;
                            acc += kv * gv;
                        }
                        gx[xbase + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().clone(), gx)?.ensure_finite("conv2d_backward")?,
        kernels: Tensor::new(kernels.shape().clone(), gk)?.ensure_finite("conv2d_backward")?,
        bias: Tensor::from_vec(vec![d.cout], gb)?.ensure_finite("conv2d_backward")?,
    })
}

/// Max pooling. Returns the pooled tensor and, per output element, the flat
/// index of the winning input element. Ties go to the lowest input index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    const OP: &str = "maxpool2d";
    let (h, w, c) = hwc(OP, input)?;
    if window == 0 || stride == 0 {
        return Err(bad_hyper(OP, "window and stride must be positive"));
    }
    if window > h || window > w || stride > h || stride > w {
        return Err(bad_hyper(
            OP,
            format!("window {window} / stride {stride} larger than {h}×{w} input"),
        ));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((oy * stride) * w + ox * stride) * c + ch;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                        if x[idx] > x[best_idx] {
                            best_idx = idx;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = x[best_idx];
                argmax[o] = best_idx;
            }
        }
    }
    Ok((Tensor::from_vec(vec![oh, ow, c], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &Shape, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return Err(mismatch(
            "maxpool2d_backward",
            format!(
                "{} argmax entries for {} gradient entries",
                argmax.len(),
                grad_out.numel()
            ),
        ));
    }
    let mut gx = Tensor::zeros(input_shape);
    let buf = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        if idx >= buf.len() {
            return Err(mismatch("maxpool2d_backward", "argmax index out of range"));
        }
        buf[idx] += g;
    }
    Ok(gx)
}

/// Mean over all spatial locations: `H × W × F` to `1 × 1 × F`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (h, w, f) = hwc("global_avg_pool", input)?;
    let mut out = vec![0.0; f];
    for px in input.data().chunks_exact(f) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Tensor::from_vec(vec![1, 1, f], out)?.ensure_finite("global_avg_pool")
}

pub fn global_avg_pool_backward(input_shape: &Shape, grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, f) = input_shape
        .as_hwc()
        .ok_or_else(|| mismatch("global_avg_pool_backward", "input shape must be H×W×C"))?;
    if grad_out.numel() != f {
        return Err(mismatch(
            "global_avg_pool_backward",
            format!("gradient has {} entries, expected {f}", grad_out.numel()),
        ));
    }
    let n = (h * w) as f64;
    let per: Vec<f64> = grad_out.data().iter().map(|g| g / n).collect();
    let mut data = Vec::with_capacity(h * w * f);
    for _ in 0..h * w {
        data.extend_from_slice(&per);
    }
    Tensor::new(input_shape.clone(), data)
}

pub const DEFAULT_L2_EPSILON: f64 = 1e-12;

/// `x / max(‖x‖₂, epsilon)` over the flattened tensor.
pub fn l2_normalize(input: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(bad_hyper("l2_normalize", "epsilon must be positive"));
    }
    let denom = input.norm_l2().max(epsilon);
    input.map(|v| v / denom).ensure_finite("l2_normalize")
}

/// Exact Jacobian-vector product of [`l2_normalize`]. Above the epsilon
/// floor the gradient is `(g − y·(y·g)) / ‖x‖`; below it the denominator is
/// the constant epsilon.
pub fn l2_normalize_backward(input: &Tensor, grad_out: &Tensor, epsilon: f64) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(mismatch(
            "l2_normalize_backward",
            format!("{} vs {}", input.shape(), grad_out.shape()),
        ));
    }
    let norm = input.norm_l2();
    if norm < epsilon {
        return grad_out.scale(1.0 / epsilon).ensure_finite("l2_normalize_backward");
    }
    let y = input.scale(1.0 / norm);
    let proj = y.dot(grad_out);
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(g, yv)| (g - yv * proj) / norm)
        .collect();
    Tensor::new(input.shape().clone(), data)?.ensure_finite("l2_normalize_backward")
}

fn fc_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    match weights.dims() {
        &[f, k] if f == input.numel() => Ok((f, k)),
        _ => Err(mismatch(
            "fully_connected",
            format!(
                "weights {} do not match input of {} entries",
                weights.shape(),
                input.numel()
            ),
        )),
    }
}

/// `inputᵀ · weights + bias`. The input is flattened; the output is `1 × 1 × K`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, k) = fc_dims(input, weights)?;
    if bias.numel() != k {
        return Err(mismatch(
            "fully_connected",
            format!("bias has {} entries, expected {k}", bias.numel()),
        ));
    }
    let mut out = bias.data().to_vec();
    for (&xv, row) in input.data().iter().zip(weights.data().chunks_exact(k)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    Tensor::from_vec(vec![1, 1, k], out)?.ensure_finite("fully_connected")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fully_connected_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let (_, k) = fc_dims(input, weights)?;
    if grad_out.numel() != k {
        return Err(mismatch(
            "fully_connected_backward",
            format!("gradient has {} entries, expected {k}", grad_out.numel()),
        ));
    }
    let g = grad_out.data();
    let mut gx = Vec::with_capacity(input.numel());
    let mut gw = Vec::with_capacity(weights.numel());
    for (&xv, row) in input.data().iter().zip(weights.data().chunks_exact(k)) {
        gx.push(row.iter().zip(g).map(|(w, g)| w * g).sum());
        gw.extend(g.iter().map(|gv| xv * gv));
    }
    Ok(FcGrads {
        input: Tensor::new(input.shape().clone(), gx)?.ensure_finite("fully_connected_backward")?,
        weights: Tensor::new(weights.shape().clone(), gw)?
            .ensure_finite("fully_connected_backward")?,
        bias: Tensor::from_vec(vec![k], g.to_vec())?,
    })
}

/// Elementwise sum of equally shaped tensors.
pub fn add_n(inputs: &[&Tensor]) -> Result<Tensor> {
    let (first, rest) = inputs.split_first().ok_or(TensorError::EmptyInput("add_n"))?;
    let mut out = (*first).clone();
    for t in rest {
        out.add_assign(t).map_err(|_| {
            mismatch("add_n", format!("{} vs {}", first.shape(), t.shape()))
        })?;
    }
    out.ensure_finite("add_n")
}

/// The local gradient of a sum is one for every input, so each input gets
/// the upstream gradient unchanged.
pub fn add_n_backward(grad_out: &Tensor, inputs: usize) -> Vec<Tensor> {
    vec![grad_out.clone(); inputs]
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(mismatch(
            "relu_backward",
            format!("{} vs {}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().clone(), data)
}

/// Softmax probabilities with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Returns `−log softmax(logits)[label]` and its gradient with respect to the
/// logits, `softmax(logits) − onehot(label)`, shaped like `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let k = logits.numel();
    if label >= k {
        return Err(TensorError::LabelOutOfRange { label, classes: k });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - z[label];
    let mut grad = softmax(z);
    grad[label] -= 1.0;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, Tensor::new(logits.shape().clone(), grad)?))
}
