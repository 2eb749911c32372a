//! Analytic forward/backward passes for the layers the classifier uses.
//!
//! Shapes follow the conventions of the model: time-major `[T, d]` inputs,
//! conv outputs `[T', F]`, kernels `[F, d*W]` with tap layout `w*d + c`.
//! Every backward here is checked against central finite differences in the
//! gradient suite (`tests/gradcheck.rs`).

use crate::error::{Error, Result};
use crate::tensor::{Array2, ConvSpec, Scalar};

/// Padding token index: bytes are 0..=255, padding is 256.
pub const PADDING_TOKEN: u16 = 256;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Four-lane dot product. Fixed accumulation order, so results are
/// deterministic; unrolling only exists to keep the conv inner loop from
/// serializing on one accumulator.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc0 = T::zero();
    let mut acc1 = T::zero();
    let mut acc2 = T::zero();
    let mut acc3 = T::zero();
    let mut i = 0;
    while i + 4 <= n {
        acc0 = acc0 + a[i] * b[i];
        acc1 = acc1 + a[i + 1] * b[i + 1];
        acc2 = acc2 + a[i + 2] * b[i + 2];
        acc3 = acc3 + a[i + 3] * b[i + 3];
        i += 4;
    }
    while i < n {
        acc0 = acc0 + a[i] * b[i];
        i += 1;
    }
    (acc0 + acc1) + (acc2 + acc3)
}

#[inline]
fn axpy<T: Scalar>(dst: &mut [T], scale: T, src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + scale * *s;
    }
}

fn expect_shape<T: Scalar>(a: &Array2<T>, shape: (usize, usize), what: &str) -> Result<()> {
    if a.shape() != shape {
        return Err(Error::Input(format!(
            "{what}: expected shape {:?}, got {:?}",
            shape,
            a.shape()
        )));
    }
    Ok(())
}

/// Looks up one embedding row per token. Row `t` of the output equals
/// `table` row `tokens[t]`.
pub fn embed_forward<T: Scalar>(tokens: &[u16], table: &Array2<T>) -> Result<Array2<T>> {
    let vocab = table.rows();
    let dim = table.cols();
    let mut out = Array2::zeros(tokens.len(), dim);
    for (t, &tok) in tokens.iter().enumerate() {
        if (tok as usize) >= vocab {
            return Err(Error::Input(format!(
                "token {tok} at position {t} out of range for vocab {vocab}"
            )));
        }
        out.row_mut(t).copy_from_slice(table.row(tok as usize));
    }
    Ok(out)
}

/// Gradient of the lookup: row `b` of the result accumulates `grad_out`
/// rows at every position holding token `b`; absent tokens stay zero.
pub fn embed_backward<T: Scalar>(
    tokens: &[u16],
    grad_out: &Array2<T>,
    vocab: usize,
) -> Result<Array2<T>> {
    expect_shape(grad_out, (tokens.len(), grad_out.cols()), "embed grad_out")?;
    let mut grad_table = Array2::zeros(vocab, grad_out.cols());
    for (t, &tok) in tokens.iter().enumerate() {
        if (tok as usize) >= vocab {
            return Err(Error::Input(format!(
                "token {tok} at position {t} out of range for vocab {vocab}"
            )));
        }
        axpy(grad_table.row_mut(tok as usize), T::one(), grad_out.row(t));
    }
    Ok(grad_table)
}

/// Strided 1D convolution.
///
/// `out[j, f] = bias[f] + sum_{w,c} kernel[f, w*d + c] * input[j*S + w*dil, c]`
pub fn conv1d_forward<T: Scalar>(
    input: &Array2<T>,
    spec: &ConvSpec,
    kernel: &Array2<T>,
    bias: &[T],
) -> Result<Array2<T>> {
    spec.validate()?;
    let (t_in, d) = input.shape();
    if d != spec.in_channels {
        return Err(Error::Input(format!(
            "conv input has {d} channels, spec expects {}",
            spec.in_channels
        )));
    }
    expect_shape(kernel, (spec.out_filters, d * spec.width), "conv kernel")?;
    if bias.len() != spec.out_filters {
        return Err(Error::Input(format!(
            "conv bias length {} != filters {}",
            bias.len(),
            spec.out_filters
        )));
    }
    let t_out = spec.output_len(t_in)?;
    let mut out = Array2::zeros(t_out, spec.out_filters);
    if spec.dilation == 1 {
        // Window rows are contiguous in row-major layout and the kernel tap
        // layout w*d + c matches it, so each output is one dot product.
        let win = spec.width * d;
        for j in 0..t_out {
            let base = j * spec.stride * d;
            let window = &input.data()[base..base + win];
            let out_row = out.row_mut(j);
            for f in 0..spec.out_filters {
                out_row[f] = bias[f] + dot(kernel.row(f), window);
            }
        }
    } else {
        for j in 0..t_out {
            let out_row = out.row_mut(j);
            for f in 0..spec.out_filters {
                let k_row = kernel.row(f);
                let mut acc = bias[f];
                for w in 0..spec.width {
                    let in_row = input.row(j * spec.stride + w * spec.dilation);
                    let taps = &k_row[w * d..(w + 1) * d];
                    for c in 0..d {
                        acc = acc + taps[c] * in_row[c];
                    }
                }
                out_row[f] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`conv1d_forward`]: returns `(grad_input, grad_kernel,
/// grad_bias)`. `grad_input` is zero outside positions the forward touched.
pub fn conv1d_backward<T: Scalar>(
    input: &Array2<T>,
    spec: &ConvSpec,
    kernel: &Array2<T>,
    grad_out: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>, Vec<T>)> {
    spec.validate()?;
    let (t_in, d) = input.shape();
    if d != spec.in_channels {
        return Err(Error::Input(format!(
            "conv input has {d} channels, spec expects {}",
            spec.in_channels
        )));
    }
    expect_shape(kernel, (spec.out_filters, d * spec.width), "conv kernel")?;
    let t_out = spec.output_len(t_in)?;
    expect_shape(grad_out, (t_out, spec.out_filters), "conv grad_out")?;

    let mut grad_input = Array2::zeros(t_in, d);
    let mut grad_kernel = Array2::zeros(spec.out_filters, d * spec.width);
    let mut grad_bias = vec![T::zero(); spec.out_filters];

    if spec.dilation == 1 {
        let win = spec.width * d;
        for j in 0..t_out {
            let base = j * spec.stride * d;
            let g_row = grad_out.row(j);
            for f in 0..spec.out_filters {
                let g = g_row[f];
                if g == T::zero() {
                    continue;
                }
                grad_bias[f] = grad_bias[f] + g;
                let window = &input.data()[base..base + win];
                axpy(grad_kernel.row_mut(f), g, window);
                let gi = &mut grad_input.data_mut()[base..base + win];
                axpy(gi, g, kernel.row(f));
            }
        }
    } else {
        for j in 0..t_out {
            let g_row = grad_out.row(j);
            for f in 0..spec.out_filters {
                let g = g_row[f];
                if g == T::zero() {
                    continue;
                }
                grad_bias[f] = grad_bias[f] + g;
                for w in 0..spec.width {
                    let t = j * spec.stride + w * spec.dilation;
                    let in_row = input.row(t);
                    let gk = &mut grad_kernel.row_mut(f)[w * d..(w + 1) * d];
                    for c in 0..d {
                        gk[c] = gk[c] + g * in_row[c];
                    }
                    let k_taps = &kernel.row(f)[w * d..(w + 1) * d];
                    let gi = &mut grad_input.row_mut(t)[..d];
                    for c in 0..d {
                        gi[c] = gi[c] + g * k_taps[c];
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_kernel, grad_bias))
}

/// Gated linear unit: `out = linear * sigmoid(gate)`, elementwise.
pub fn glu_forward<T: Scalar>(linear: &Array2<T>, gate: &Array2<T>) -> Result<Array2<T>> {
    if !linear.same_shape(gate) {
        return Err(Error::Input(format!(
            "glu branch shapes differ: {:?} vs {:?}",
            linear.shape(),
            gate.shape()
        )));
    }
    let mut out = linear.clone();
    for (o, g) in out.data_mut().iter_mut().zip(gate.data()) {
        *o = *o * sigmoid(*g);
    }
    Ok(out)
}

/// Adjoints of [`glu_forward`]:
/// `grad_linear = grad_out * s`, `grad_gate = grad_out * linear * s * (1-s)`
/// with `s = sigmoid(gate)`.
pub fn glu_backward<T: Scalar>(
    linear: &Array2<T>,
    gate: &Array2<T>,
    grad_out: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    if !linear.same_shape(gate) || !linear.same_shape(grad_out) {
        return Err(Error::Input(format!(
            "glu backward shapes differ: {:?} / {:?} / {:?}",
            linear.shape(),
            gate.shape(),
            grad_out.shape()
        )));
    }
    let mut grad_linear = Array2::zeros(linear.rows(), linear.cols());
    let mut grad_gate = Array2::zeros(linear.rows(), linear.cols());
    for i in 0..linear.len() {
        let s = sigmoid(gate.data()[i]);
        let g = grad_out.data()[i];
        grad_linear.data_mut()[i] = g * s;
        grad_gate.data_mut()[i] = g * linear.data()[i] * s * (T::one() - s);
    }
    Ok((grad_linear, grad_gate))
}

/// Per-filter maximum over the time axis. Ties break to the lowest index so
/// activation-map regions are deterministic.
pub fn global_max_pool<T: Scalar>(input: &Array2<T>) -> Result<(Vec<T>, Vec<usize>)> {
    let (t, f) = input.shape();
    if t == 0 || f == 0 {
        return Err(Error::Input("max pool over empty input".into()));
    }
    let mut values = input.row(0).to_vec();
    let mut argmax = vec![0usize; f];
    for j in 1..t {
        let row = input.row(j);
        for (k, &v) in row.iter().enumerate() {
            if v > values[k] {
                values[k] = v;
                argmax[k] = j;
            }
        }
    }
    Ok((values, argmax))
}

/// Routes `grad_values[f]` to row `argmax[f]`; every other entry is zero.
pub fn global_max_pool_backward<T: Scalar>(
    argmax: &[usize],
    grad_values: &[T],
    t_out: usize,
) -> Result<Array2<T>> {
    if argmax.len() != grad_values.len() {
        return Err(Error::Input(format!(
            "pool backward: argmax len {} != grad len {}",
            argmax.len(),
            grad_values.len()
        )));
    }
    let mut grad = Array2::zeros(t_out, argmax.len());
    for (f, (&j, &g)) in argmax.iter().zip(grad_values).enumerate() {
        if j >= t_out {
            return Err(Error::Internal(format!(
                "pool argmax {j} out of range for {t_out} rows"
            )));
        }
        grad[(j, f)] = g;
    }
    Ok(grad)
}

/// Output of [`fc_forward`]; `pre_activation` is present when ReLU was
/// applied (backward needs the pre-ReLU signs).
#[derive(Debug, Clone)]
pub struct FcOutput<T> {
    pub output: Array2<T>,
    pub pre_activation: Option<Array2<T>>,
}

/// Affine layer `out = input . weights + bias`, with optional elementwise
/// `max(0, .)`.
pub fn fc_forward<T: Scalar>(
    input: &Array2<T>,
    weights: &Array2<T>,
    bias: &[T],
    relu: bool,
) -> Result<FcOutput<T>> {
    let (n, i_dim) = input.shape();
    let (w_in, o_dim) = weights.shape();
    if i_dim != w_in {
        return Err(Error::Input(format!(
            "fc shapes: input cols {i_dim} != weight rows {w_in}"
        )));
    }
    if bias.len() != o_dim {
        return Err(Error::Input(format!(
            "fc bias length {} != output dim {o_dim}",
            bias.len()
        )));
    }
    let mut pre = Array2::zeros(n, o_dim);
    for r in 0..n {
        let in_row = input.row(r);
        let out_row = pre.row_mut(r);
        out_row.copy_from_slice(bias);
        for (i, &x) in in_row.iter().enumerate() {
            if x != T::zero() {
                axpy(out_row, x, weights.row(i));
            }
        }
    }
    if relu {
        let mut output = pre.clone();
        for v in output.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        Ok(FcOutput {
            output,
            pre_activation: Some(pre),
        })
    } else {
        Ok(FcOutput {
            output: pre,
            pre_activation: None,
        })
    }
}

/// Adjoints of [`fc_forward`]: `(grad_input, grad_weights, grad_bias)`.
/// Pass the forward's `pre_activation` when ReLU was applied; the ReLU
/// subgradient at exactly 0 is 0.
pub fn fc_backward<T: Scalar>(
    input: &Array2<T>,
    weights: &Array2<T>,
    pre_activation: Option<&Array2<T>>,
    grad_out: &Array2<T>,
) -> Result<(Array2<T>, Array2<T>, Vec<T>)> {
    let (n, i_dim) = input.shape();
    let (w_in, o_dim) = weights.shape();
    if i_dim != w_in {
        return Err(Error::Input(format!(
            "fc backward shapes: input cols {i_dim} != weight rows {w_in}"
        )));
    }
    expect_shape(grad_out, (n, o_dim), "fc grad_out")?;
    if let Some(pre) = pre_activation {
        expect_shape(pre, (n, o_dim), "fc pre_activation")?;
    }

    // Gradient through ReLU first when present.
    let mut g_pre = grad_out.clone();
    if let Some(pre) = pre_activation {
        for (g, &p) in g_pre.data_mut().iter_mut().zip(pre.data()) {
            if p <= T::zero() {
                *g = T::zero();
            }
        }
    }

    let mut grad_input = Array2::zeros(n, i_dim);
    let mut grad_weights = Array2::zeros(w_in, o_dim);
    let mut grad_bias = vec![T::zero(); o_dim];
    for r in 0..n {
        let g_row = g_pre.row(r);
        axpy(&mut grad_bias, T::one(), g_row);
        let in_row = input.row(r);
        for i in 0..i_dim {
            grad_input.row_mut(r)[i] = dot(weights.row(i), g_row);
            if in_row[i] != T::zero() {
                axpy(grad_weights.row_mut(i), in_row[i], g_row);
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// Row-wise softmax (max-subtracted for stability) plus mean cross-entropy.
///
/// Returns `(mean_loss, grad_logits, probs)` with
/// `grad_logits = (probs - onehot) / N`.
pub fn softmax_xent<T: Scalar>(
    logits: &Array2<T>,
    labels: &[u8],
) -> Result<(T, Array2<T>, Array2<T>)> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(Error::Input(format!(
            "softmax: {} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Input("softmax over zero rows".into()));
    }
    let mut probs = Array2::zeros(n, classes);
    let mut grad = Array2::zeros(n, classes);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    for r in 0..n {
        let label = labels[r] as usize;
        if label >= classes {
            return Err(Error::Input(format!(
                "label {} at row {r} outside 0..{classes}",
                labels[r]
            )));
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(row[0], T::max);
        let mut denom = T::zero();
        for c in 0..classes {
            let e = (row[c] - max).exp();
            probs[(r, c)] = e;
            denom = denom + e;
        }
        for c in 0..classes {
            let p = probs[(r, c)] / denom;
            probs[(r, c)] = p;
            grad[(r, c)] = p * inv_n;
        }
        grad[(r, label)] = grad[(r, label)] - inv_n;
        loss = loss - (probs[(r, label)]).ln();
    }
    Ok((loss * inv_n, grad, probs))
}

/// Batch statistics saved by the training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics for inference-mode batch norm, updated with momentum
/// 0.9 (`running = 0.9 * running + 0.1 * batch`).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(features: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }

    pub fn update(&mut self, batch: &BatchNormStats<T>) {
        let keep = T::of(0.9);
        let take = T::of(0.1);
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + take * b;
        }
    }
}

fn batchnorm_check_shapes<T: Scalar>(
    input: &Array2<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<()> {
    let f = input.cols();
    if gamma.len() != f || beta.len() != f {
        return Err(Error::Input(format!(
            "batchnorm: gamma/beta lengths {}/{} != features {f}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Input("batchnorm eps must be positive".into()));
    }
    Ok(())
}

/// Training-mode batch norm: standardizes each feature by the batch mean and
/// (population) variance, then applies the affine `gamma * xhat + beta`.
/// Returns the output and the batch statistics the backward pass needs.
pub fn batchnorm_forward_train<T: Scalar>(
    input: &Array2<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Array2<T>, BatchNormStats<T>)> {
    batchnorm_check_shapes(input, gamma, beta, eps)?;
    let (n, f) = input.shape();
    if n < 2 {
        return Err(Error::Input(format!(
            "batchnorm training mode needs at least 2 rows, got {n}"
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut mean = vec![T::zero(); f];
    for r in 0..n {
        axpy(&mut mean, inv_n, input.row(r));
    }
    let mut var = vec![T::zero(); f];
    for r in 0..n {
        let row = input.row(r);
        for c in 0..f {
            let d = row[c] - mean[c];
            var[c] = var[c] + d * d * inv_n;
        }
    }
    let mut out = Array2::zeros(n, f);
    for r in 0..n {
        let row = input.row(r);
        let out_row = out.row_mut(r);
        for c in 0..f {
            let xhat = (row[c] - mean[c]) / (var[c] + eps).sqrt();
            out_row[c] = gamma[c] * xhat + beta[c];
        }
    }
    Ok((out, BatchNormStats { mean, var }))
}

/// Inference-mode batch norm using running statistics.
pub fn batchnorm_forward_infer<T: Scalar>(
    input: &Array2<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
    running: &RunningStats<T>,
) -> Result<Array2<T>> {
    batchnorm_check_shapes(input, gamma, beta, eps)?;
    let (n, f) = input.shape();
    if running.mean.len() != f || running.var.len() != f {
        return Err(Error::Input(format!(
            "batchnorm: running stats sized {} for {f} features",
            running.mean.len()
        )));
    }
    let mut out = Array2::zeros(n, f);
    for r in 0..n {
        let row = input.row(r);
        let out_row = out.row_mut(r);
        for c in 0..f {
            let xhat = (row[c] - running.mean[c]) / (running.var[c] + eps).sqrt();
            out_row[c] = gamma[c] * xhat + beta[c];
        }
    }
    Ok(out)
}

/// Exact adjoint of the training-mode forward, with batch mean and variance
/// treated as functions of the input:
///
/// `grad_x = (gamma / (N * sqrt(var+eps))) * (N*g - sum(g) - xhat * sum(g*xhat))`
pub fn batchnorm_backward<T: Scalar>(
    input: &Array2<T>,
    gamma: &[T],
    eps: T,
    saved: &BatchNormStats<T>,
    grad_out: &Array2<T>,
) -> Result<(Array2<T>, Vec<T>, Vec<T>)> {
    let (n, f) = input.shape();
    expect_shape(grad_out, (n, f), "batchnorm grad_out")?;
    if gamma.len() != f || saved.mean.len() != f || saved.var.len() != f {
        return Err(Error::Input("batchnorm backward: feature mismatch".into()));
    }
    let n_t = T::of(n as f64);
    let mut grad_gamma = vec![T::zero(); f];
    let mut grad_beta = vec![T::zero(); f];
    // Per-feature reductions over the batch.
    let mut sum_g = vec![T::zero(); f];
    let mut sum_g_xhat = vec![T::zero(); f];
    for r in 0..n {
        let g_row = grad_out.row(r);
        let in_row = input.row(r);
        for c in 0..f {
            let xhat = (in_row[c] - saved.mean[c]) / (saved.var[c] + eps).sqrt();
            grad_gamma[c] = grad_gamma[c] + g_row[c] * xhat;
            grad_beta[c] = grad_beta[c] + g_row[c];
            sum_g[c] = sum_g[c] + g_row[c];
            sum_g_xhat[c] = sum_g_xhat[c] + g_row[c] * xhat;
        }
    }
    let mut grad_input = Array2::zeros(n, f);
    for r in 0..n {
        let g_row = grad_out.row(r);
        let in_row = input.row(r);
        let out_row = grad_input.row_mut(r);
        for c in 0..f {
            let inv_std = T::one() / (saved.var[c] + eps).sqrt();
            let xhat = (in_row[c] - saved.mean[c]) * inv_std;
            out_row[c] =
                gamma[c] * inv_std / n_t * (n_t * g_row[c] - sum_g[c] - xhat * sum_g_xhat[c]);
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
