#![allow(dead_code)]

//! Central finite-difference gradient checks, shared by the gradcheck and
//! acceptance test targets.
//!
//! Every analytic backward pass is compared against the symmetric
//! difference quotient of its own forward pass in f64. The loss used for a
//! layer op is a fixed random weighting of its output, so the layer's
//! analytic gradient is exactly its backward pass applied to those weights.

use malconv::model::{
    backward, forward, forward_train, pad_or_truncate, ModelConfig, ModelParams,
};
use malconv::tensor::{
    batchnorm_backward, batchnorm_forward_train, conv1d_backward, conv1d_forward, embed_backward,
    embed_forward, fc_backward, fc_forward, glu_backward, glu_forward, global_max_pool,
    global_max_pool_backward, softmax_xent, Array2, ConvSpec,
};
use malconv::train::decov_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step (f64 mode).
pub const H: f64 = 1e-4;
/// Per-op relative error bound.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Whole-model relative error bound.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Seeds per op.
pub const SEEDS_PER_OP: u64 = 20;

/// Relative error with a floor so vanishing gradients compare by absolute
/// difference at the finite-difference noise scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Sweeps every coordinate of `array`, comparing the central difference of
/// `loss` against `analytic`. Returns the worst relative error.
pub fn fd_sweep(
    array: &mut Array2<f64>,
    analytic: &Array2<f64>,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    assert_eq!(array.shape(), analytic.shape());
    let mut worst = 0.0f64;
    for i in 0..array.len() {
        let orig = array.data()[i];
        array.data_mut()[i] = orig + H;
        let plus = loss(array);
        array.data_mut()[i] = orig - H;
        let minus = loss(array);
        array.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

/// Like [`fd_sweep`] but over a seeded random subset of coordinates.
pub fn fd_sweep_sampled(
    array: &mut Array2<f64>,
    analytic: &Array2<f64>,
    samples: usize,
    seed: u64,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    assert_eq!(array.shape(), analytic.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples.min(array.len()) {
        let i = rng.random_range(0..array.len());
        let orig = array.data()[i];
        array.data_mut()[i] = orig + H;
        let plus = loss(array);
        array.data_mut()[i] = orig - H;
        let minus = loss(array);
        array.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    worst
}

fn rand_array(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut a = Array2::zeros(rows, cols);
    for v in a.data_mut() {
        *v = (rng.random::<f64>() * 2.0 - 1.0) * scale;
    }
    a
}

fn weighted_sum(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(&o, &x)| o * x).sum()
}

pub fn check_embed(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=4);
    let t = rng.random_range(1..=64);
    let mut table = rand_array(&mut rng, 257, d, 1.0);
    let tokens: Vec<u16> = (0..t).map(|_| rng.random_range(0..257) as u16).collect();
    let w = rand_array(&mut rng, t, d, 1.0);
    let analytic = embed_backward(&tokens, &w, 257).unwrap();
    fd_sweep(&mut table, &analytic, |tab| {
        weighted_sum(&embed_forward(&tokens, tab).unwrap(), &w)
    })
}

pub fn check_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ConvSpec {
        in_channels: rng.random_range(1..=4),
        out_filters: rng.random_range(1..=8),
        width: rng.random_range(1..=8),
        stride: rng.random_range(1..=4),
        dilation: rng.random_range(1..=3),
    };
    let t = rng.random_range(spec.effective_width()..=64.max(spec.effective_width()));
    let mut input = rand_array(&mut rng, t, spec.in_channels, 1.0);
    let mut kernel = rand_array(
        &mut rng,
        spec.out_filters,
        spec.in_channels * spec.width,
        1.0,
    );
    let t_out = spec.output_len(t).unwrap();
    let bias: Vec<f64> = (0..spec.out_filters)
        .map(|_| rng.random::<f64>() - 0.5)
        .collect();
    let w = rand_array(&mut rng, t_out, spec.out_filters, 1.0);

    let (gi, gk, gb) = conv1d_backward(&input, &spec, &kernel, &w).unwrap();

    let kernel_snapshot = kernel.clone();
    let err_input = fd_sweep(&mut input, &gi, |x| {
        weighted_sum(
            &conv1d_forward(x, &spec, &kernel_snapshot, &bias).unwrap(),
            &w,
        )
    });
    let input_snapshot = input.clone();
    let err_kernel = fd_sweep(&mut kernel, &gk, |k| {
        weighted_sum(&conv1d_forward(&input_snapshot, &spec, k, &bias).unwrap(), &w)
    });
    let mut bias_arr = Array2::from_row(&bias);
    let gb_arr = Array2::from_row(&gb);
    let err_bias = fd_sweep(&mut bias_arr, &gb_arr, |b| {
        weighted_sum(
            &conv1d_forward(&input_snapshot, &spec, &kernel, b.row(0)).unwrap(),
            &w,
        )
    });
    err_input.max(err_kernel).max(err_bias)
}

pub fn check_glu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(1..=16);
    let f = rng.random_range(1..=8);
    let mut linear = rand_array(&mut rng, t, f, 2.0);
    let mut gate = rand_array(&mut rng, t, f, 2.0);
    let w = rand_array(&mut rng, t, f, 1.0);
    let (gl, gg) = glu_backward(&linear, &gate, &w).unwrap();
    let gate_snapshot = gate.clone();
    let err_linear = fd_sweep(&mut linear, &gl, |l| {
        weighted_sum(&glu_forward(l, &gate_snapshot).unwrap(), &w)
    });
    let linear_snapshot = linear.clone();
    let err_gate = fd_sweep(&mut gate, &gg, |g| {
        weighted_sum(&glu_forward(&linear_snapshot, g).unwrap(), &w)
    });
    err_linear.max(err_gate)
}

pub fn check_max_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(2..=64);
    let f = rng.random_range(1..=8);
    // resample until every column's top-two gap clears the FD step
    let mut input = loop {
        let candidate = rand_array(&mut rng, t, f, 1.0);
        let mut ok = true;
        for col in 0..f {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for r in 0..t {
                let v = candidate[(r, col)];
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if best - second < 10.0 * H {
                ok = false;
            }
        }
        if ok {
            break candidate;
        }
    };
    let w: Vec<f64> = (0..f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let (_, argmax) = global_max_pool(&input).unwrap();
    let analytic = global_max_pool_backward(&argmax, &w, t).unwrap();
    fd_sweep(&mut input, &analytic, |x| {
        let (vals, _) = global_max_pool(x).unwrap();
        vals.iter().zip(&w).map(|(&v, &wi)| v * wi).sum()
    })
}

pub fn check_fc(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relu = seed % 2 == 0;
    let n = rng.random_range(1..=6);
    let i_dim = rng.random_range(1..=8);
    let o_dim = rng.random_range(1..=8);
    let (mut input, mut weights, bias) = loop {
        let input = rand_array(&mut rng, n, i_dim, 1.0);
        let weights = rand_array(&mut rng, i_dim, o_dim, 1.0);
        let bias: Vec<f64> = (0..o_dim).map(|_| rng.random::<f64>() - 0.5).collect();
        if !relu {
            break (input, weights, bias);
        }
        // keep pre-activations away from the ReLU kink
        let out = fc_forward(&input, &weights, &bias, true).unwrap();
        let pre = out.pre_activation.unwrap();
        if pre.data().iter().all(|&v| v.abs() > 10.0 * H) {
            break (input, weights, bias);
        }
    };
    let w = rand_array(&mut rng, n, o_dim, 1.0);

    let fc = fc_forward(&input, &weights, &bias, relu).unwrap();
    let (gi, gw, gb) = fc_backward(&input, &weights, fc.pre_activation.as_ref(), &w).unwrap();

    let weights_snapshot = weights.clone();
    let bias_snapshot = bias.clone();
    let err_input = fd_sweep(&mut input, &gi, |x| {
        weighted_sum(
            &fc_forward(x, &weights_snapshot, &bias_snapshot, relu)
                .unwrap()
                .output,
            &w,
        )
    });
    let input_snapshot = input.clone();
    let err_weights = fd_sweep(&mut weights, &gw, |wt| {
        weighted_sum(
            &fc_forward(&input_snapshot, wt, &bias_snapshot, relu)
                .unwrap()
                .output,
            &w,
        )
    });
    let mut bias_arr = Array2::from_row(&bias);
    let gb_arr = Array2::from_row(&gb);
    let err_bias = fd_sweep(&mut bias_arr, &gb_arr, |b| {
        weighted_sum(
            &fc_forward(&input_snapshot, &weights, b.row(0), relu)
                .unwrap()
                .output,
            &w,
        )
    });
    err_input.max(err_weights).max(err_bias)
}

pub fn check_softmax_xent(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let mut logits = rand_array(&mut rng, n, 2, 3.0);
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
    let (_, analytic, _) = softmax_xent(&logits, &labels).unwrap();
    fd_sweep(&mut logits, &analytic, |lg| {
        softmax_xent(lg, &labels).unwrap().0
    })
}

pub fn check_batchnorm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let f = rng.random_range(1..=6);
    let eps = 1e-5;
    let mut input = rand_array(&mut rng, n, f, 1.5);
    let gamma: Vec<f64> = (0..f).map(|_| rng.random::<f64>() + 0.5).collect();
    let beta: Vec<f64> = (0..f).map(|_| rng.random::<f64>() - 0.5).collect();
    let w = rand_array(&mut rng, n, f, 1.0);

    let (_, stats) = batchnorm_forward_train(&input, &gamma, &beta, eps).unwrap();
    let (gi, gg, gb) = batchnorm_backward(&input, &gamma, eps, &stats, &w).unwrap();

    let err_input = fd_sweep(&mut input, &gi, |x| {
        weighted_sum(&batchnorm_forward_train(x, &gamma, &beta, eps).unwrap().0, &w)
    });
    let input_snapshot = input.clone();
    let mut gamma_arr = Array2::from_row(&gamma);
    let gg_arr = Array2::from_row(&gg);
    let err_gamma = fd_sweep(&mut gamma_arr, &gg_arr, |g| {
        weighted_sum(
            &batchnorm_forward_train(&input_snapshot, g.row(0), &beta, eps)
                .unwrap()
                .0,
            &w,
        )
    });
    let mut beta_arr = Array2::from_row(&beta);
    let gb_arr = Array2::from_row(&gb);
    let err_beta = fd_sweep(&mut beta_arr, &gb_arr, |b| {
        weighted_sum(
            &batchnorm_forward_train(&input_snapshot, &gamma, b.row(0), eps)
                .unwrap()
                .0,
            &w,
        )
    });
    err_input.max(err_gamma).max(err_beta)
}

pub fn check_decov(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=8);
    let h = rng.random_range(2..=8);
    let mut activations = rand_array(&mut rng, n, h, 1.5);
    let (_, analytic) = decov_loss(&activations).unwrap();
    fd_sweep(&mut activations, &analytic, |a| {
        decov_loss(a).unwrap().0.to_owned()
    })
}

/// Desk-scale whole-model check: spot-checks coordinates of every parameter
/// array against the finite difference of the single-example cross-entropy
/// loss.
pub fn check_model_end_to_end(seed: u64, use_batchnorm: bool, with_padding: bool) -> f64 {
    let config = ModelConfig {
        use_batchnorm,
        ..ModelConfig::desk()
    };
    // resample tokens until pooling gaps and ReLU margins are wide enough
    // that a +-H parameter nudge cannot flip a max or a ReLU sign
    let mut attempt = 0u64;
    let (params, tokens, label) = loop {
        let params = ModelParams::<f64>::init(&config, seed ^ (attempt << 32)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt * 7919));
        let file_len = if with_padding {
            config.max_len / 2 + 13
        } else {
            config.max_len
        };
        let bytes: Vec<u8> = (0..file_len).map(|_| rng.random()).collect();
        let tokens = pad_or_truncate(&bytes, config.max_len).unwrap().tokens;
        let label = (seed % 2) as u8;

        let trace = if use_batchnorm {
            forward_train(&params, &config, &tokens).unwrap()
        } else {
            forward(&params, &config, &tokens).unwrap()
        };
        let mut pool_gap_ok = true;
        for f in 0..config.filters {
            let best = trace.pooled[f];
            let mut second = f64::NEG_INFINITY;
            for r in 0..trace.gated.rows() {
                let v = trace.gated[(r, f)];
                if v < best && v > second {
                    second = v;
                }
            }
            if best - second < 3e-2 {
                pool_gap_ok = false;
            }
        }
        let relu_ok = trace.fc_pre.iter().all(|&v| v.abs() > 3e-3);
        if pool_gap_ok && relu_ok {
            break (params, tokens, label);
        }
        attempt += 1;
        assert!(attempt < 50, "could not find a well-conditioned sample");
    };

    let loss_of = |p: &ModelParams<f64>| -> f64 {
        let trace = if use_batchnorm {
            forward_train(p, &config, &tokens).unwrap()
        } else {
            forward(p, &config, &tokens).unwrap()
        };
        let logits = Array2::from_row(&trace.logits);
        softmax_xent(&logits, &[label]).unwrap().0
    };

    let trace = if use_batchnorm {
        forward_train(&params, &config, &tokens).unwrap()
    } else {
        forward(&params, &config, &tokens).unwrap()
    };
    let grads = backward(&params, &config, &trace, &tokens, label).unwrap();

    let mut worst = 0.0f64;
    let names_grads: Vec<(&str, &Array2<f64>)> = {
        let names = malconv::model::trainable_names(&config);
        names.into_iter().zip(grads.arrays()).collect()
    };
    for (array_idx, (_name, analytic)) in names_grads.iter().enumerate() {
        let mut scratch = params.clone();
        let samples = 6usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (array_idx as u64) << 8);
        for _ in 0..samples {
            let len = analytic.len();
            let i = rng.random_range(0..len);
            let orig = scratch.trainable()[array_idx].data()[i];
            scratch.trainable_mut()[array_idx].data_mut()[i] = orig + H;
            let plus = loss_of(&scratch);
            scratch.trainable_mut()[array_idx].data_mut()[i] = orig - H;
            let minus = loss_of(&scratch);
            scratch.trainable_mut()[array_idx].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// One line of the suite report.
pub struct OpReport {
    pub name: &'static str,
    pub worst_err: f64,
    pub tolerance: f64,
}

/// Runs every per-op check over [`SEEDS_PER_OP`] seeds plus the whole-model
/// checks; returns one report row per op.
pub fn run_gradient_suite() -> Vec<OpReport> {
    let ops: Vec<(&'static str, fn(u64) -> f64)> = vec![
        ("embed", check_embed),
        ("conv1d", check_conv),
        ("glu", check_glu),
        ("max_pool", check_max_pool),
        ("fc", check_fc),
        ("softmax_xent", check_softmax_xent),
        ("batchnorm", check_batchnorm),
        ("decov", check_decov),
    ];
    let mut reports = Vec::new();
    for (name, check) in ops {
        let worst = (0..SEEDS_PER_OP).map(check).fold(0.0f64, f64::max);
        reports.push(OpReport {
            name,
            worst_err: worst,
            tolerance: OP_TOLERANCE,
        });
    }
    let e2e = check_model_end_to_end(1, false, false)
        .max(check_model_end_to_end(2, false, true))
        .max(check_model_end_to_end(3, true, false));
    reports.push(OpReport {
        name: "model_end_to_end",
        worst_err: e2e,
        tolerance: MODEL_TOLERANCE,
    });
    reports
}
