//! The classifier itself: embedding, two gated strided conv branches,
//! temporal max pooling, and the fully connected head, assembled over whole
//! padded byte sequences.
//!
//! `forward` runs inference (batch-norm, when enabled, uses running
//! statistics); `forward_train` standardizes by per-sequence batch
//! statistics and records them in the trace so `backward` can run the exact
//! adjoint. Both fill a [`ForwardTrace`] with every intermediate the
//! explanation and diagnostics tools need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, conv1d_backward,
    conv1d_forward, embed_backward, embed_forward, fc_backward, fc_forward, glu_backward,
    glu_forward, global_max_pool, global_max_pool_backward, softmax_xent, Array2, BatchNormStats,
    ConvSpec, RunningStats, Scalar,
};

/// Padding token: bytes are 0..=255, index 256 marks positions past the end
/// of the file. It owns a trainable embedding row like any byte.
pub const PADDING_TOKEN: u16 = crate::tensor::PADDING_TOKEN;

/// Vocabulary size: 256 byte values plus the padding token.
pub const VOCAB: usize = 257;

/// Number of output classes (benign, malicious).
pub const CLASSES: usize = 2;

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Hyperparameters fixing every array shape in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Always 257; kept explicit so checkpoints are self-describing.
    pub vocab: usize,
    pub embed_dim: usize,
    pub filters: usize,
    pub window: usize,
    pub stride: usize,
    pub dilation: usize,
    pub fc_hidden: usize,
    /// Always 2.
    pub classes: usize,
    /// Fixed training length in bytes; shorter files are padded, longer
    /// files truncated.
    pub max_len: usize,
    pub use_batchnorm: bool,
    /// Weight of the activation-decorrelation penalty; 0 disables it.
    pub decov_lambda: f64,
}

impl ModelConfig {
    /// Full-scale preset: 2 MiB inputs, 128 width-500 stride-500 filters.
    pub fn paper() -> Self {
        ModelConfig {
            vocab: VOCAB,
            embed_dim: 8,
            filters: 128,
            window: 500,
            stride: 500,
            dilation: 1,
            fc_hidden: 128,
            classes: CLASSES,
            max_len: 2 * 1024 * 1024,
            use_batchnorm: false,
            decov_lambda: 0.1,
        }
    }

    /// Small preset sized for laptop-scale experiments: 16 KiB inputs,
    /// 16 width-32 stride-32 filters.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 4,
            filters: 16,
            window: 32,
            stride: 32,
            max_len: 16_384,
            ..Self::paper()
        }
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            in_channels: self.embed_dim,
            out_filters: self.filters,
            width: self.window,
            stride: self.stride,
            dilation: self.dilation,
        }
    }

    /// Conv output length for a full-length input.
    pub fn conv_output_len(&self) -> Result<usize> {
        self.conv_spec().output_len(self.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab != VOCAB {
            return Err(Error::Input(format!(
                "vocab must be {VOCAB}, got {}",
                self.vocab
            )));
        }
        if self.classes != CLASSES {
            return Err(Error::Input(format!(
                "classes must be {CLASSES}, got {}",
                self.classes
            )));
        }
        if self.embed_dim == 0 || self.filters == 0 || self.fc_hidden == 0 {
            return Err(Error::Input("model dimensions must be positive".into()));
        }
        self.conv_spec().validate()?;
        if self.max_len < self.conv_spec().effective_width() {
            return Err(Error::Input(format!(
                "max_len {} shorter than effective conv width {}",
                self.max_len,
                self.conv_spec().effective_width()
            )));
        }
        if !(self.decov_lambda >= 0.0) {
            return Err(Error::Input("decov_lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trainable batch-norm parameters and running statistics for both conv
/// branches. The affine arrays are 1xF like every other bias-shaped
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub linear_gamma: Array2<T>,
    pub linear_beta: Array2<T>,
    pub gate_gamma: Array2<T>,
    pub gate_beta: Array2<T>,
    pub linear_running: RunningStats<T>,
    pub gate_running: RunningStats<T>,
}

impl<T: Scalar> BatchNormParams<T> {
    fn new(filters: usize) -> Self {
        BatchNormParams {
            linear_gamma: Array2::from_row(&vec![T::one(); filters]),
            linear_beta: Array2::zeros(1, filters),
            gate_gamma: Array2::from_row(&vec![T::one(); filters]),
            gate_beta: Array2::zeros(1, filters),
            linear_running: RunningStats::new(filters),
            gate_running: RunningStats::new(filters),
        }
    }
}

/// Every trainable array of the model. Bias-shaped parameters are stored as
/// 1xN arrays so the optimizer and checkpoint code treat all parameters
/// uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embedding: Array2<T>,
    pub conv_linear_kernel: Array2<T>,
    pub conv_linear_bias: Array2<T>,
    pub conv_gate_kernel: Array2<T>,
    pub conv_gate_bias: Array2<T>,
    pub fc_weight: Array2<T>,
    pub fc_bias: Array2<T>,
    pub out_weight: Array2<T>,
    pub out_bias: Array2<T>,
    pub batchnorm: Option<BatchNormParams<T>>,
}

/// Canonical order of the trainable arrays; the optimizer state, gradient
/// structs, and checkpoint layout all follow it.
pub fn trainable_names(config: &ModelConfig) -> Vec<&'static str> {
    let mut names = vec![
        "embedding",
        "conv_linear.kernel",
        "conv_linear.bias",
        "conv_gate.kernel",
        "conv_gate.bias",
        "fc.weight",
        "fc.bias",
        "out.weight",
        "out.bias",
    ];
    if config.use_batchnorm {
        names.extend([
            "bn_linear.gamma",
            "bn_linear.beta",
            "bn_gate.gamma",
            "bn_gate.beta",
        ]);
    }
    names
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes the config dictates.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let f = config.filters;
        let h = config.fc_hidden;
        Ok(ModelParams {
            embedding: Array2::zeros(config.vocab, d),
            conv_linear_kernel: Array2::zeros(f, d * config.window),
            conv_linear_bias: Array2::zeros(1, f),
            conv_gate_kernel: Array2::zeros(f, d * config.window),
            conv_gate_bias: Array2::zeros(1, f),
            fc_weight: Array2::zeros(f, h),
            fc_bias: Array2::zeros(1, h),
            out_weight: Array2::zeros(h, config.classes),
            out_bias: Array2::zeros(1, config.classes),
            batchnorm: config.use_batchnorm.then(|| BatchNormParams::new(f)),
        })
    }

    /// Seeded random init: unit-variance uniform embedding, Glorot-uniform
    /// weight matrices, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        fn fill_uniform<T: Scalar>(a: &mut Array2<T>, limit: f64, rng: &mut ChaCha8Rng) {
            for v in a.data_mut() {
                *v = T::of((rng.random::<f64>() * 2.0 - 1.0) * limit);
            }
        }
        // U(-sqrt(3), sqrt(3)) has unit variance.
        let sqrt3 = 3.0f64.sqrt();
        fill_uniform(&mut params.embedding, sqrt3, &mut rng);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let conv_limit = glorot(config.embed_dim * config.window, config.filters);
        fill_uniform(&mut params.conv_linear_kernel, conv_limit, &mut rng);
        fill_uniform(&mut params.conv_gate_kernel, conv_limit, &mut rng);
        let fc_limit = glorot(config.filters, config.fc_hidden);
        fill_uniform(&mut params.fc_weight, fc_limit, &mut rng);
        let out_limit = glorot(config.fc_hidden, config.classes);
        fill_uniform(&mut params.out_weight, out_limit, &mut rng);
        Ok(params)
    }

    /// Trainable arrays in canonical order.
    pub fn trainable(&self) -> Vec<&Array2<T>> {
        let mut arrays = vec![
            &self.embedding,
            &self.conv_linear_kernel,
            &self.conv_linear_bias,
            &self.conv_gate_kernel,
            &self.conv_gate_bias,
            &self.fc_weight,
            &self.fc_bias,
            &self.out_weight,
            &self.out_bias,
        ];
        if let Some(bn) = &self.batchnorm {
            arrays.extend([
                &bn.linear_gamma,
                &bn.linear_beta,
                &bn.gate_gamma,
                &bn.gate_beta,
            ]);
        }
        arrays
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut arrays = vec![
            &mut self.embedding,
            &mut self.conv_linear_kernel,
            &mut self.conv_linear_bias,
            &mut self.conv_gate_kernel,
            &mut self.conv_gate_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ];
        if let Some(bn) = &mut self.batchnorm {
            arrays.extend([
                &mut bn.linear_gamma,
                &mut bn.linear_beta,
                &mut bn.gate_gamma,
                &mut bn.gate_beta,
            ]);
        }
        arrays
    }

    pub fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        self.trainable().iter().map(|a| a.shape()).collect()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for a in self.trainable() {
            a.ensure_finite("model parameters")?;
        }
        Ok(())
    }
}

/// Sum of all trainable parameter array sizes.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.embed_dim;
    let f = config.filters;
    let h = config.fc_hidden;
    let mut count = config.vocab * d            // embedding
        + 2 * (f * d * config.window + f)       // two conv branches
        + (f * h + h)                           // fc
        + (h * config.classes + config.classes); // output head
    if config.use_batchnorm {
        count += 4 * f;
    }
    count
}

/// Gradients for every trainable array, mirroring [`ModelParams`] shapes.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub embedding: Array2<T>,
    pub conv_linear_kernel: Array2<T>,
    pub conv_linear_bias: Array2<T>,
    pub conv_gate_kernel: Array2<T>,
    pub conv_gate_bias: Array2<T>,
    pub fc_weight: Array2<T>,
    pub fc_bias: Array2<T>,
    pub out_weight: Array2<T>,
    pub out_bias: Array2<T>,
    pub batchnorm: Option<BatchNormGrads<T>>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub linear_gamma: Array2<T>,
    pub linear_beta: Array2<T>,
    pub gate_gamma: Array2<T>,
    pub gate_beta: Array2<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let p = ModelParams::zeros(config)?;
        let f = config.filters;
        Ok(Gradients {
            embedding: p.embedding,
            conv_linear_kernel: p.conv_linear_kernel,
            conv_linear_bias: p.conv_linear_bias,
            conv_gate_kernel: p.conv_gate_kernel,
            conv_gate_bias: p.conv_gate_bias,
            fc_weight: p.fc_weight,
            fc_bias: p.fc_bias,
            out_weight: p.out_weight,
            out_bias: p.out_bias,
            batchnorm: config.use_batchnorm.then(|| BatchNormGrads {
                linear_gamma: Array2::zeros(1, f),
                linear_beta: Array2::zeros(1, f),
                gate_gamma: Array2::zeros(1, f),
                gate_beta: Array2::zeros(1, f),
            }),
        })
    }

    /// Arrays in the same canonical order as `ModelParams::trainable`.
    pub fn arrays(&self) -> Vec<&Array2<T>> {
        let mut arrays = vec![
            &self.embedding,
            &self.conv_linear_kernel,
            &self.conv_linear_bias,
            &self.conv_gate_kernel,
            &self.conv_gate_bias,
            &self.fc_weight,
            &self.fc_bias,
            &self.out_weight,
            &self.out_bias,
        ];
        if let Some(bn) = &self.batchnorm {
            arrays.extend([
                &bn.linear_gamma,
                &bn.linear_beta,
                &bn.gate_gamma,
                &bn.gate_beta,
            ]);
        }
        arrays
    }

    fn arrays_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut arrays = vec![
            &mut self.embedding,
            &mut self.conv_linear_kernel,
            &mut self.conv_linear_bias,
            &mut self.conv_gate_kernel,
            &mut self.conv_gate_bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ];
        if let Some(bn) = &mut self.batchnorm {
            arrays.extend([
                &mut bn.linear_gamma,
                &mut bn.linear_beta,
                &mut bn.gate_gamma,
                &mut bn.gate_beta,
            ]);
        }
        arrays
    }

    /// Elementwise accumulation; used to sum per-item gradients over a
    /// batch in a fixed order.
    pub fn add_assign(&mut self, other: &Gradients<T>) -> Result<()> {
        let mut mine = self.arrays_mut();
        let theirs = other.arrays();
        if mine.len() != theirs.len() {
            return Err(Error::Input("gradient structures differ".into()));
        }
        for (m, t) in mine.iter_mut().zip(theirs) {
            if !m.same_shape(t) {
                return Err(Error::Input("gradient shapes differ".into()));
            }
            for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                *a = *a + b;
            }
        }
        Ok(())
    }
}

/// A byte sequence padded (or truncated) to the model's fixed length,
/// remembering the original file length.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBytes {
    pub tokens: Vec<u16>,
    pub original_len: usize,
}

/// Copies file bytes into a fixed-length token sequence, filling positions
/// past the end of the file with the padding token and truncating oversized
/// files at `max_len`.
pub fn pad_or_truncate(bytes: &[u8], max_len: usize) -> Result<PaddedBytes> {
    if bytes.is_empty() {
        return Err(Error::Input("empty file".into()));
    }
    let copy = bytes.len().min(max_len);
    let mut tokens = Vec::with_capacity(max_len);
    tokens.extend(bytes[..copy].iter().map(|&b| b as u16));
    tokens.resize(max_len, PADDING_TOKEN);
    Ok(PaddedBytes {
        tokens,
        original_len: bytes.len(),
    })
}

/// Batch-norm intermediates captured by the forward pass.
#[derive(Debug, Clone)]
pub struct BnTrace<T> {
    /// Normalized branch outputs (the GLU inputs).
    pub linear_out: Array2<T>,
    pub gate_out: Array2<T>,
    /// Batch statistics; present only for training-mode traces.
    pub linear_stats: Option<BatchNormStats<T>>,
    pub gate_stats: Option<BatchNormStats<T>>,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    /// Raw conv responses of the linear branch, before any normalization or
    /// gating; the diagnostics measurement point.
    pub pre_activation_linear: Array2<T>,
    pub pre_activation_gate: Array2<T>,
    /// Post-gating activations, T' x F.
    pub gated: Array2<T>,
    pub pooled: Vec<T>,
    pub argmax: Vec<usize>,
    /// Post-ReLU hidden activations.
    pub penultimate: Vec<T>,
    /// Pre-ReLU hidden activations.
    pub fc_pre: Vec<T>,
    pub logits: Vec<T>,
    pub bn: Option<BnTrace<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Infer,
    Train,
}

fn forward_impl<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &[u16],
    mode: Mode,
) -> Result<ForwardTrace<T>> {
    config.validate()?;
    if tokens.len() != config.max_len {
        return Err(Error::Input(format!(
            "token sequence length {} != max_len {}",
            tokens.len(),
            config.max_len
        )));
    }
    let spec = config.conv_spec();
    let embedded = embed_forward(tokens, &params.embedding)?;
    let pre_linear = conv1d_forward(
        &embedded,
        &spec,
        &params.conv_linear_kernel,
        params.conv_linear_bias.row(0),
    )?;
    pre_linear.ensure_finite("conv linear branch")?;
    let pre_gate = conv1d_forward(
        &embedded,
        &spec,
        &params.conv_gate_kernel,
        params.conv_gate_bias.row(0),
    )?;
    pre_gate.ensure_finite("conv gate branch")?;

    let bn_trace = match (&params.batchnorm, config.use_batchnorm) {
        (Some(bn), true) => {
            let eps = T::of(BATCHNORM_EPS);
            Some(match mode {
                Mode::Train => {
                    let (linear_out, lin_stats) = batchnorm_forward_train(
                        &pre_linear,
                        bn.linear_gamma.row(0),
                        bn.linear_beta.row(0),
                        eps,
                    )?;
                    let (gate_out, gate_stats) = batchnorm_forward_train(
                        &pre_gate,
                        bn.gate_gamma.row(0),
                        bn.gate_beta.row(0),
                        eps,
                    )?;
                    BnTrace {
                        linear_out,
                        gate_out,
                        linear_stats: Some(lin_stats),
                        gate_stats: Some(gate_stats),
                    }
                }
                Mode::Infer => {
                    let linear_out = batchnorm_forward_infer(
                        &pre_linear,
                        bn.linear_gamma.row(0),
                        bn.linear_beta.row(0),
                        eps,
                        &bn.linear_running,
                    )?;
                    let gate_out = batchnorm_forward_infer(
                        &pre_gate,
                        bn.gate_gamma.row(0),
                        bn.gate_beta.row(0),
                        eps,
                        &bn.gate_running,
                    )?;
                    BnTrace {
                        linear_out,
                        gate_out,
                        linear_stats: None,
                        gate_stats: None,
                    }
                }
            })
        }
        (None, false) => None,
        _ => {
            return Err(Error::Input(
                "config use_batchnorm flag disagrees with params".into(),
            ))
        }
    };

    let gated = match &bn_trace {
        Some(bn) => glu_forward(&bn.linear_out, &bn.gate_out)?,
        None => glu_forward(&pre_linear, &pre_gate)?,
    };
    gated.ensure_finite("gated activations")?;
    let (pooled, argmax) = global_max_pool(&gated)?;

    let pooled_row = Array2::from_row(&pooled);
    let fc = fc_forward(&pooled_row, &params.fc_weight, params.fc_bias.row(0), true)?;
    let fc_pre = fc.pre_activation.as_ref().expect("relu keeps pre-activation");
    fc.output.ensure_finite("fc hidden layer")?;
    let out = fc_forward(&fc.output, &params.out_weight, params.out_bias.row(0), false)?;
    out.output.ensure_finite("output head")?;

    Ok(ForwardTrace {
        pre_activation_linear: pre_linear,
        pre_activation_gate: pre_gate,
        gated,
        pooled,
        argmax,
        penultimate: fc.output.row(0).to_vec(),
        fc_pre: fc_pre.row(0).to_vec(),
        logits: out.output.row(0).to_vec(),
        bn: bn_trace,
    })
}

/// Inference-mode forward pass over one padded sequence.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &[u16],
) -> Result<ForwardTrace<T>> {
    forward_impl(params, config, tokens, Mode::Infer)
}

/// Training-mode forward pass: batch norm (when enabled) standardizes by
/// this sequence's own conv-response statistics and saves them in the
/// trace. Pure; running statistics are the trainer's to update.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &[u16],
) -> Result<ForwardTrace<T>> {
    forward_impl(params, config, tokens, Mode::Train)
}

/// Full backward pass from an upstream logit gradient, chaining the layer
/// adjoints in reverse. `penultimate_extra` is an additional gradient
/// injected at the post-ReLU hidden layer (the regularizer's contribution
/// during training).
pub fn backward_from_logit_grad<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    trace: &ForwardTrace<T>,
    tokens: &[u16],
    grad_logits: &[T],
    penultimate_extra: Option<&[T]>,
) -> Result<Gradients<T>> {
    config.validate()?;
    if grad_logits.len() != config.classes {
        return Err(Error::Input(format!(
            "logit gradient length {} != classes {}",
            grad_logits.len(),
            config.classes
        )));
    }
    if trace.pooled.len() != config.filters || trace.penultimate.len() != config.fc_hidden {
        return Err(Error::Input("trace does not match config shapes".into()));
    }
    let check = |a: &Array2<T>, layer: &str| -> Result<()> {
        a.ensure_finite(layer)
            .map_err(|_| Error::Training(format!("non-finite gradient in {layer}")))
    };

    // Output head.
    let penult_row = Array2::from_row(&trace.penultimate);
    let grad_logits_row = Array2::from_row(grad_logits);
    let (mut grad_penult, grad_out_w, grad_out_b) =
        fc_backward(&penult_row, &params.out_weight, None, &grad_logits_row)?;
    check(&grad_penult, "output head")?;
    if let Some(extra) = penultimate_extra {
        if extra.len() != config.fc_hidden {
            return Err(Error::Input(format!(
                "penultimate extra gradient length {} != fc_hidden {}",
                extra.len(),
                config.fc_hidden
            )));
        }
        for (g, &e) in grad_penult.row_mut(0).iter_mut().zip(extra) {
            *g = *g + e;
        }
    }

    // Hidden layer with ReLU.
    let pooled_row = Array2::from_row(&trace.pooled);
    let fc_pre_row = Array2::from_row(&trace.fc_pre);
    let (grad_pooled, grad_fc_w, grad_fc_b) = fc_backward(
        &pooled_row,
        &params.fc_weight,
        Some(&fc_pre_row),
        &grad_penult,
    )?;
    check(&grad_pooled, "fc hidden layer")?;

    // Pooling.
    let t_out = trace.gated.rows();
    let grad_gated = global_max_pool_backward(&trace.argmax, grad_pooled.row(0), t_out)?;

    // Gate.
    let (glu_linear, glu_gate) = match &trace.bn {
        Some(bn) => (&bn.linear_out, &bn.gate_out),
        None => (&trace.pre_activation_linear, &trace.pre_activation_gate),
    };
    let (grad_linear_in, grad_gate_in) = glu_backward(glu_linear, glu_gate, &grad_gated)?;
    check(&grad_linear_in, "glu")?;

    // Batch norm, when present.
    let mut grads = Gradients::zeros(config)?;
    let (grad_pre_linear, grad_pre_gate) = match (&params.batchnorm, &trace.bn) {
        (Some(bn), Some(bn_trace)) => {
            let eps = T::of(BATCHNORM_EPS);
            let lin_stats = bn_trace.linear_stats.as_ref().ok_or_else(|| {
                Error::Input("backward needs a training-mode trace when batch norm is on".into())
            })?;
            let gate_stats = bn_trace.gate_stats.as_ref().ok_or_else(|| {
                Error::Input("backward needs a training-mode trace when batch norm is on".into())
            })?;
            let (g_lin, g_gamma_lin, g_beta_lin) = batchnorm_backward(
                &trace.pre_activation_linear,
                bn.linear_gamma.row(0),
                eps,
                lin_stats,
                &grad_linear_in,
            )?;
            let (g_gate, g_gamma_gate, g_beta_gate) = batchnorm_backward(
                &trace.pre_activation_gate,
                bn.gate_gamma.row(0),
                eps,
                gate_stats,
                &grad_gate_in,
            )?;
            check(&g_lin, "batch norm")?;
            let bn_grads = grads.batchnorm.as_mut().expect("config has batchnorm");
            bn_grads.linear_gamma = Array2::from_row(&g_gamma_lin);
            bn_grads.linear_beta = Array2::from_row(&g_beta_lin);
            bn_grads.gate_gamma = Array2::from_row(&g_gamma_gate);
            bn_grads.gate_beta = Array2::from_row(&g_beta_gate);
            (g_lin, g_gate)
        }
        (None, None) => (grad_linear_in, grad_gate_in),
        _ => {
            return Err(Error::Input(
                "trace and params disagree on batch norm".into(),
            ))
        }
    };

    // Conv branches share the embedded input.
    let spec = config.conv_spec();
    let embedded = embed_forward(tokens, &params.embedding)?;
    let (grad_emb_linear, grad_k_linear, grad_b_linear) = conv1d_backward(
        &embedded,
        &spec,
        &params.conv_linear_kernel,
        &grad_pre_linear,
    )?;
    let (mut grad_embedded, grad_k_gate, grad_b_gate) =
        conv1d_backward(&embedded, &spec, &params.conv_gate_kernel, &grad_pre_gate)?;
    for (a, &b) in grad_embedded
        .data_mut()
        .iter_mut()
        .zip(grad_emb_linear.data())
    {
        *a = *a + b;
    }
    check(&grad_embedded, "conv branches")?;

    grads.embedding = embed_backward(tokens, &grad_embedded, config.vocab)?;
    grads.conv_linear_kernel = grad_k_linear;
    grads.conv_linear_bias = Array2::from_row(&grad_b_linear);
    grads.conv_gate_kernel = grad_k_gate;
    grads.conv_gate_bias = Array2::from_row(&grad_b_gate);
    grads.fc_weight = grad_fc_w;
    grads.fc_bias = Array2::from_row(&grad_fc_b);
    grads.out_weight = grad_out_w;
    grads.out_bias = Array2::from_row(&grad_out_b);
    Ok(grads)
}

/// Single-example backward pass through the cross-entropy loss.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    trace: &ForwardTrace<T>,
    tokens: &[u16],
    label: u8,
) -> Result<Gradients<T>> {
    let logits = Array2::from_row(&trace.logits);
    let (_, grad_logits, _) = softmax_xent(&logits, &[label])?;
    backward_from_logit_grad(params, config, trace, tokens, grad_logits.row(0), None)
}

/// Probability that the input is malicious (class 1).
pub fn predict_proba<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    tokens: &[u16],
) -> Result<T> {
    let trace = forward(params, config, tokens)?;
    Ok(proba_from_logits(&trace.logits))
}

/// Softmax over two logits, reduced to the class-1 probability.
pub fn proba_from_logits<T: Scalar>(logits: &[T]) -> T {
    debug_assert_eq!(logits.len(), 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}
