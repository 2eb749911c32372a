//! Mini-batch SGD training with Nesterov momentum, per-epoch exponential
//! learning-rate decay, and the activation-decorrelation (DeCov) penalty on
//! the penultimate layer, plus evaluation metrics, triage ranking, and
//! checkpoint persistence.
//!
//! Determinism contract: given (seed, corpus, config) the run is
//! reproducible. Batch items are loaded and computed in parallel, but
//! results are collected by index and reduced in index order, so worker
//! count never changes the arithmetic.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use metrics::{auc, balanced_accuracy, class_counts, ClassCounts};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::model::{
    backward_from_logit_grad, forward_train, pad_or_truncate, predict_proba, ForwardTrace,
    Gradients, ModelConfig, ModelParams,
};
use crate::tensor::{lr_decay, sgd_nesterov_step, softmax_xent, Array2, OptimizerState, Scalar};

/// Fraction of the manifest held out for validation, selected by seeded
/// path hash.
pub const VALIDATION_DENOMINATOR: u64 = 10;

/// Training-run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial learning rate; decays by `decay_factor` each epoch.
    pub learning_rate: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// DeCov weight; 0 disables the penalty.
    pub decov_lambda: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 0.01,
            momentum: 0.9,
            decay_factor: 0.95,
            decov_lambda: 0.1,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be positive".into()));
        }
        if (model.use_batchnorm || self.decov_lambda > 0.0) && self.batch_size < 2 {
            return Err(Error::Input(
                "batch size must be at least 2 when batch norm or DeCov needs batch statistics"
                    .into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Input("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input("momentum must be in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Input("decay factor must be in (0, 1]".into()));
        }
        if self.decov_lambda < 0.0 {
            return Err(Error::Input("decov lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// Penalizes off-diagonal covariance of hidden activations across a batch.
///
/// With row-centered activations `hc` and covariance `C = hc^T hc / N`:
/// `loss = (||C||_F^2 - ||diag C||^2) / 2`, `grad = (2/N) hc (C - diag C)`.
/// The gradient is the exact adjoint with the mean treated as a function of
/// the input (its correction terms cancel identically).
pub fn decov_loss<T: Scalar>(h: &Array2<T>) -> Result<(T, Array2<T>)> {
    let (n, dim) = h.shape();
    if n < 2 {
        return Err(Error::Input(format!(
            "DeCov needs at least 2 rows, got {n}"
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut mean = vec![T::zero(); dim];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(h.row(r)) {
            *m = *m + v * inv_n;
        }
    }
    let mut centered = h.clone();
    for r in 0..n {
        for (v, &m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v = *v - m;
        }
    }
    // C = centered^T centered / N, with the diagonal dropped as we go.
    let mut cov_off = Array2::zeros(dim, dim);
    for r in 0..n {
        let row = centered.row(r);
        for i in 0..dim {
            let hi = row[i];
            if hi == T::zero() {
                continue;
            }
            let out = cov_off.row_mut(i);
            for (j, &hj) in row.iter().enumerate() {
                out[j] = out[j] + hi * hj * inv_n;
            }
        }
    }
    let mut loss = T::zero();
    for i in 0..dim {
        cov_off[(i, i)] = T::zero();
        for j in 0..dim {
            let c = cov_off[(i, j)];
            loss = loss + c * c;
        }
    }
    loss = loss * T::of(0.5);

    let two_inv_n = T::of(2.0) * inv_n;
    let mut grad = Array2::zeros(n, dim);
    for r in 0..n {
        let c_row = centered.row(r);
        let g_row = grad.row_mut(r);
        for k in 0..dim {
            let mut acc = T::zero();
            for (j, &cj) in c_row.iter().enumerate() {
                acc = acc + cov_off[(k, j)] * cj;
            }
            g_row[k] = two_inv_n * acc;
        }
    }
    Ok((loss, grad))
}

/// Seeded hash split: true puts the path in the held-out validation slice
/// (about 10%).
pub fn in_validation_split(path: &str, seed: u64) -> bool {
    fn fnv1a(bytes: &[u8]) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(fnv1a(path.as_bytes()) ^ seed) % VALIDATION_DENOMINATOR == 0
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// NaN when the validation slice is empty or single-class.
    pub val_balanced_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Files skipped because they were unreadable or empty.
    pub skipped_files: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_balanced_acc,lr\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.mean_loss, e.val_balanced_acc, e.lr
            ));
        }
        out
    }
}

struct LoadedItem {
    tokens: Vec<u16>,
    label: u8,
}

/// Trains in place over the manifest; returns the per-epoch log.
///
/// Validation files are held out by [`in_validation_split`]; unreadable
/// files are skipped and counted, never relabeled. The total loss per batch
/// is `cross_entropy + lambda * decov`.
pub fn train<T: Scalar>(
    config: &ModelConfig,
    params: &mut ModelParams<T>,
    manifest: &Manifest,
    tc: &TrainConfig,
) -> Result<TrainLog> {
    config.validate()?;
    tc.validate(config)?;
    if manifest.is_empty() {
        return Err(Error::Input("manifest is empty".into()));
    }
    if !manifest.entries.iter().any(|e| e.label == 0)
        || !manifest.entries.iter().any(|e| e.label == 1)
    {
        return Err(Error::Input("manifest must contain both classes".into()));
    }

    let (val_items, train_items): (Vec<&ManifestEntry>, Vec<&ManifestEntry>) = manifest
        .entries
        .iter()
        .partition(|e| in_validation_split(&e.path, tc.seed));
    if train_items.is_empty() {
        return Err(Error::Input(
            "every file fell into the validation split".into(),
        ));
    }

    let shapes = params.trainable_shapes();
    let mut opt = OptimizerState::new(
        T::of(tc.learning_rate),
        T::of(tc.momentum),
        T::of(tc.decay_factor),
        &shapes,
    )?;
    let mut log = TrainLog::default();

    for epoch in 0..tc.epochs {
        lr_decay(&mut opt, epoch);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        if tc.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
            order.shuffle(&mut rng);
        }

        let mut loss_sum = 0.0f64;
        let mut item_count = 0usize;
        for (batch_idx, batch) in order.chunks(tc.batch_size).enumerate() {
            let loaded: Vec<Option<LoadedItem>> = batch
                .par_iter()
                .map(|&i| {
                    let entry = train_items[i];
                    let bytes = manifest.read_file(entry).ok()?;
                    let padded = pad_or_truncate(&bytes, config.max_len).ok()?;
                    Some(LoadedItem {
                        tokens: padded.tokens,
                        label: entry.label,
                    })
                })
                .collect();
            let mut items = Vec::with_capacity(loaded.len());
            for item in loaded {
                match item {
                    Some(it) => items.push(it),
                    None => log.skipped_files += 1,
                }
            }
            if items.is_empty() {
                continue;
            }
            let n = items.len();

            let shared: &ModelParams<T> = params;
            let traces: Vec<ForwardTrace<T>> = items
                .par_iter()
                .map(|it| forward_train(shared, config, &it.tokens))
                .collect::<Result<_>>()?;

            let mut logits = Array2::zeros(n, config.classes);
            for (i, tr) in traces.iter().enumerate() {
                logits.row_mut(i).copy_from_slice(&tr.logits);
            }
            let labels: Vec<u8> = items.iter().map(|it| it.label).collect();
            let (xent, grad_logits, _) = softmax_xent(&logits, &labels)?;

            let lambda = tc.decov_lambda;
            let (total_loss, decov_grad) = if lambda > 0.0 && n >= 2 {
                let mut hidden = Array2::zeros(n, config.fc_hidden);
                for (i, tr) in traces.iter().enumerate() {
                    hidden.row_mut(i).copy_from_slice(&tr.penultimate);
                }
                let (dloss, dgrad) = decov_loss(&hidden)?;
                (xent.to64() + lambda * dloss.to64(), Some(dgrad))
            } else {
                (xent.to64(), None)
            };
            if !total_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in epoch {epoch}, batch {batch_idx}"
                )));
            }

            let per_item: Vec<Gradients<T>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let extra: Option<Vec<T>> = decov_grad.as_ref().map(|dg| {
                        dg.row(i).iter().map(|&v| T::of(lambda) * v).collect()
                    });
                    backward_from_logit_grad(
                        shared,
                        config,
                        &traces[i],
                        &items[i].tokens,
                        grad_logits.row(i),
                        extra.as_deref(),
                    )
                })
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros(config)?;
            for g in &per_item {
                total.add_assign(g)?;
            }

            // Fold batch statistics into the running estimates in item
            // order before stepping.
            if params.batchnorm.is_some() {
                for tr in &traces {
                    if let (Some(bn), Some(bn_trace)) = (params.batchnorm.as_mut(), tr.bn.as_ref())
                    {
                        if let (Some(ls), Some(gs)) =
                            (bn_trace.linear_stats.as_ref(), bn_trace.gate_stats.as_ref())
                        {
                            bn.linear_running.update(ls);
                            bn.gate_running.update(gs);
                        }
                    }
                }
            }

            let grad_refs = total.arrays();
            sgd_nesterov_step(&mut params.trainable_mut(), &grad_refs, &mut opt)?;

            loss_sum += total_loss * n as f64;
            item_count += n;
        }

        let (val_scores, val_labels, skipped) = score_entries(params, config, manifest, &val_items);
        log.skipped_files += skipped;
        let val_acc = match balanced_accuracy(&val_scores, &val_labels, 0.5) {
            Ok(v) => v,
            Err(_) => f64::NAN,
        };
        log.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / item_count.max(1) as f64,
            val_balanced_acc: val_acc,
            lr: opt.learning_rate.to64(),
        });
    }
    params.ensure_finite()?;
    Ok(log)
}

fn score_entries<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    manifest: &Manifest,
    entries: &[&ManifestEntry],
) -> (Vec<f64>, Vec<u8>, usize) {
    let results: Vec<Option<(f64, u8)>> = entries
        .par_iter()
        .map(|e| {
            let bytes = manifest.read_file(e).ok()?;
            let padded = pad_or_truncate(&bytes, config.max_len).ok()?;
            let p = predict_proba(params, config, &padded.tokens).ok()?;
            Some((p.to64(), e.label))
        })
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0usize;
    for r in results {
        match r {
            Some((s, l)) => {
                scores.push(s);
                labels.push(l);
            }
            None => skipped += 1,
        }
    }
    (scores, labels, skipped)
}

/// Held-out evaluation summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub balanced_accuracy: f64,
    pub auc: f64,
    pub counts: ClassCounts,
    pub threshold: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "balanced_accuracy,auc,true_positives,false_positives,true_negatives,false_negatives,threshold\n{},{},{},{},{},{},{}\n",
            self.balanced_accuracy,
            self.auc,
            self.counts.true_positives,
            self.counts.false_positives,
            self.counts.true_negatives,
            self.counts.false_negatives,
            self.threshold,
        )
    }
}

/// Scores every manifest entry and reports balanced accuracy and AUC at the
/// given threshold.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    manifest: &Manifest,
    threshold: f64,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest is empty".into()));
    }
    let refs: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let (scores, labels, skipped) = score_entries(params, config, manifest, &refs);
    if skipped > 0 {
        return Err(Error::Environment(format!(
            "{skipped} files could not be read"
        )));
    }
    Ok(EvalReport {
        balanced_accuracy: balanced_accuracy(&scores, &labels, threshold)?,
        auc: auc(&scores, &labels)?,
        counts: class_counts(&scores, &labels, threshold)?,
        threshold,
    })
}

/// One scored file in the triage queue.
#[derive(Debug, Clone, PartialEq)]
pub struct TriageEntry {
    pub path: String,
    pub score: f64,
    /// True when the file could not be scored; such entries sort last.
    pub error: bool,
}

/// Scores every manifest entry and returns the queue ordered by descending
/// score, ties broken by path; unreadable files come last with the error
/// flag set.
pub fn triage_rank<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    manifest: &Manifest,
) -> Result<Vec<TriageEntry>> {
    let mut entries: Vec<TriageEntry> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let scored = manifest
                .read_file(e)
                .and_then(|bytes| pad_or_truncate(&bytes, config.max_len))
                .and_then(|padded| predict_proba(params, config, &padded.tokens));
            match scored {
                Ok(s) => TriageEntry {
                    path: e.path.clone(),
                    score: s.to64(),
                    error: false,
                },
                Err(_) => TriageEntry {
                    path: e.path.clone(),
                    score: f64::NAN,
                    error: true,
                },
            }
        })
        .collect();
    entries.sort_by(|a, b| {
        a.error
            .cmp(&b.error)
            .then_with(|| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.path.cmp(&b.path))
    });
    Ok(entries)
}

pub fn triage_to_csv(entries: &[TriageEntry]) -> String {
    let mut out = String::from("path,score\n");
    for e in entries {
        out.push_str(&format!("{},{}\n", e.path, e.score));
    }
    out
}
