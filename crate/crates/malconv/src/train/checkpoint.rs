//! Checkpoint persistence.
//!
//! Versioned little-endian container, magic `MCV1`:
//!
//! ```text
//! magic            4 bytes  "MCV1"
//! config_len       u32
//! config           UTF-8 "key=value\n" lines, fixed key order
//! array_count      u32
//! per array:
//!   name_len       u32
//!   name           UTF-8 bytes
//!   rank           u32 (always 2)
//!   dims           rank x u32
//!   data           prod(dims) x f32
//! ```
//!
//! Values are stored as raw 32-bit floats, so an f32 save/load round trip
//! is bit-exact. Trainable arrays come first in canonical order; when batch
//! norm is enabled the running statistics follow.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{trainable_names, ModelConfig, ModelParams};
use crate::tensor::{Array2, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCV1";

const RUNNING_STAT_NAMES: [&str; 4] = [
    "bn_linear.running_mean",
    "bn_linear.running_var",
    "bn_gate.running_mean",
    "bn_gate.running_var",
];

const CONFIG_KEYS: [&str; 11] = [
    "vocab",
    "embed_dim",
    "filters",
    "window",
    "stride",
    "dilation",
    "fc_hidden",
    "classes",
    "max_len",
    "use_batchnorm",
    "decov_lambda",
];

fn config_block(config: &ModelConfig) -> String {
    format!(
        "vocab={}\nembed_dim={}\nfilters={}\nwindow={}\nstride={}\ndilation={}\nfc_hidden={}\nclasses={}\nmax_len={}\nuse_batchnorm={}\ndecov_lambda={}\n",
        config.vocab,
        config.embed_dim,
        config.filters,
        config.window,
        config.stride,
        config.dilation,
        config.fc_hidden,
        config.classes,
        config.max_len,
        config.use_batchnorm,
        config.decov_lambda,
    )
}

fn parse_config_block(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::paper();
    let mut seen = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
        let parse_usize = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Format(format!("config field {key}: bad count {v:?}")))
        };
        match key {
            "vocab" => cfg.vocab = parse_usize(value)?,
            "embed_dim" => cfg.embed_dim = parse_usize(value)?,
            "filters" => cfg.filters = parse_usize(value)?,
            "window" => cfg.window = parse_usize(value)?,
            "stride" => cfg.stride = parse_usize(value)?,
            "dilation" => cfg.dilation = parse_usize(value)?,
            "fc_hidden" => cfg.fc_hidden = parse_usize(value)?,
            "classes" => cfg.classes = parse_usize(value)?,
            "max_len" => cfg.max_len = parse_usize(value)?,
            "use_batchnorm" => {
                cfg.use_batchnorm = value.parse::<bool>().map_err(|_| {
                    Error::Format(format!("config field use_batchnorm: bad flag {value:?}"))
                })?
            }
            "decov_lambda" => {
                cfg.decov_lambda = value.parse::<f64>().map_err(|_| {
                    Error::Format(format!("config field decov_lambda: bad value {value:?}"))
                })?
            }
            other => return Err(Error::Format(format!("unknown config key {other:?}"))),
        }
        seen.push(key.to_string());
    }
    for key in CONFIG_KEYS {
        if !seen.iter().any(|s| s == key) {
            return Err(Error::Format(format!("config field {key} missing")));
        }
    }
    cfg.validate()
        .map_err(|e| Error::Format(format!("checkpoint config invalid: {e}")))?;
    Ok(cfg)
}

fn push_array<T: Scalar>(out: &mut Vec<u8>, name: &str, array: &Array2<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(array.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(array.cols() as u32).to_le_bytes());
    for &v in array.data() {
        out.extend_from_slice(&(v.to64() as f32).to_le_bytes());
    }
}

/// Serializes config and parameters. Values narrow to f32 on the way out.
pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    path: &Path,
) -> Result<()> {
    config.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let block = config_block(config);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());

    let names = trainable_names(config);
    let arrays = params.trainable();
    let total = arrays.len() + if config.use_batchnorm { 4 } else { 0 };
    out.extend_from_slice(&(total as u32).to_le_bytes());
    for (name, array) in names.iter().zip(&arrays) {
        push_array(&mut out, name, array);
    }
    if let Some(bn) = &params.batchnorm {
        let stats = [
            &bn.linear_running.mean,
            &bn.linear_running.var,
            &bn.gate_running.mean,
            &bn.gate_running.var,
        ];
        for (name, stat) in RUNNING_STAT_NAMES.iter().zip(stats) {
            push_array(&mut out, name, &Array2::from_row(stat));
        }
    }
    fs::write(path, out)
        .map_err(|e| Error::Environment(format!("writing {}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a checkpoint, validating the magic, the config block, and every
/// array's name and shape against the config.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelParams<T>, ModelConfig)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Environment(format!("reading {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let config = parse_config_block(config_text)?;

    let mut params = ModelParams::<T>::zeros(&config)?;
    let mut expected: Vec<String> = trainable_names(&config)
        .into_iter()
        .map(str::to_string)
        .collect();
    if config.use_batchnorm {
        expected.extend(RUNNING_STAT_NAMES.iter().map(|s| s.to_string()));
    }

    let count = r.u32("array count")? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "array count {count} != expected {}",
            expected.len()
        )));
    }

    for expected_name in &expected {
        let name_len = r.u32("array name length")? as usize;
        let name_bytes = r.take(name_len, "array name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "array {name:?} out of order, expected {expected_name:?}"
            )));
        }
        let rank = r.u32(&format!("{name} rank"))?;
        if rank != 2 {
            return Err(Error::Format(format!("array {name}: rank {rank} != 2")));
        }
        let rows = r.u32(&format!("{name} rows"))? as usize;
        let cols = r.u32(&format!("{name} cols"))? as usize;
        let raw = r.take(
            rows.checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("array {name}: dims overflow")))?,
            &format!("{name} data"),
        )?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(T::of(v as f64));
        }

        let fill = |dst: &mut Array2<T>| -> Result<()> {
            if dst.shape() != (rows, cols) {
                return Err(Error::Format(format!(
                    "array {name}: shape {rows}x{cols} does not match config shape {:?}",
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(&data);
            Ok(())
        };
        match expected_name.as_str() {
            "embedding" => fill(&mut params.embedding)?,
            "conv_linear.kernel" => fill(&mut params.conv_linear_kernel)?,
            "conv_linear.bias" => fill(&mut params.conv_linear_bias)?,
            "conv_gate.kernel" => fill(&mut params.conv_gate_kernel)?,
            "conv_gate.bias" => fill(&mut params.conv_gate_bias)?,
            "fc.weight" => fill(&mut params.fc_weight)?,
            "fc.bias" => fill(&mut params.fc_bias)?,
            "out.weight" => fill(&mut params.out_weight)?,
            "out.bias" => fill(&mut params.out_bias)?,
            _ => {
                let bn = params
                    .batchnorm
                    .as_mut()
                    .ok_or_else(|| Error::Format(format!("unexpected array {name}")))?;
                match expected_name.as_str() {
                    "bn_linear.gamma" => fill(&mut bn.linear_gamma)?,
                    "bn_linear.beta" => fill(&mut bn.linear_beta)?,
                    "bn_gate.gamma" => fill(&mut bn.gate_gamma)?,
                    "bn_gate.beta" => fill(&mut bn.gate_beta)?,
                    "bn_linear.running_mean" | "bn_linear.running_var"
                    | "bn_gate.running_mean" | "bn_gate.running_var" => {
                        if rows != 1 || cols != config.filters {
                            return Err(Error::Format(format!(
                                "array {name}: shape {rows}x{cols} != 1x{}",
                                config.filters
                            )));
                        }
                        let dst = match expected_name.as_str() {
                            "bn_linear.running_mean" => &mut bn.linear_running.mean,
                            "bn_linear.running_var" => &mut bn.linear_running.var,
                            "bn_gate.running_mean" => &mut bn.gate_running.mean,
                            _ => &mut bn.gate_running.var,
                        };
                        dst.copy_from_slice(&data);
                    }
                    other => return Err(Error::Format(format!("unexpected array {other}"))),
                }
            }
        }
    }

    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last array",
            bytes.len() - r.pos
        )));
    }
    Ok((params, config))
}
