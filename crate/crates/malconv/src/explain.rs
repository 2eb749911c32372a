//! Sparse class-activation maps and PE-section attribution.
//!
//! Max pooling keeps one time position per filter, so the activation map is
//! naturally sparse: each filter nominates a single window-width byte span.
//! The head is nonlinear (ReLU), so per-filter class weights are computed
//! with the ReLU pattern frozen at the trace's activations, which makes the
//! linear path weight exact for that input: with mask `r`,
//!
//! `w_f = sum_h (out_w[h,1] - out_w[h,0]) * r[h] * fc_w[f,h]`
//!
//! and the filter's signed contribution to (malicious - benign) is
//! `w_f * pooled[f]`.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{forward, pad_or_truncate, proba_from_logits, ForwardTrace, ModelConfig, ModelParams};
use crate::pe::{offset_to_region, parse_pe, SectionMap};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leaning {
    Malicious,
    Benign,
}

impl fmt::Display for Leaning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Leaning::Malicious => write!(f, "malicious"),
            Leaning::Benign => write!(f, "benign"),
        }
    }
}

/// One explained input span. Filters whose pool argmax lands on the same
/// window merge into a single region with summed contribution; the reported
/// filter index is the strongest contributor.
#[derive(Debug, Clone, PartialEq)]
pub struct CamRegion {
    pub filter_index: usize,
    /// Byte offset of the window start: `argmax * stride`.
    pub start_offset: usize,
    /// Window width, clipped at the end of the file.
    pub width: usize,
    /// Signed weight into (malicious - benign); positive leans malicious.
    pub contribution: f64,
    pub leaning: Leaning,
    /// Region name from the file's section map.
    pub section: String,
}

/// Sparse CAM output: regions in filter order plus the count of filters
/// whose argmax fell in padding past the end of the file.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCam {
    pub regions: Vec<CamRegion>,
    pub dropped_padding: usize,
}

/// Computes the sparse activation map for one trace. Regions are reported
/// in original-file coordinates; zero-contribution filters are omitted and
/// argmax positions past the file end are dropped (counted).
pub fn sparse_cam<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    trace: &ForwardTrace<T>,
    map: &SectionMap,
) -> Result<SparseCam> {
    config.validate()?;
    if trace.pooled.len() != config.filters
        || trace.penultimate.len() != config.fc_hidden
        || trace.argmax.len() != config.filters
    {
        return Err(Error::Input("trace does not match config shapes".into()));
    }
    let file_len = map.file_len;

    // Class-gap weight of each hidden unit with the ReLU pattern frozen.
    let head_gap: Vec<T> = (0..config.fc_hidden)
        .map(|h| {
            if trace.penultimate[h] > T::zero() {
                params.out_weight[(h, 1)] - params.out_weight[(h, 0)]
            } else {
                T::zero()
            }
        })
        .collect();

    // Merge by pooled window; argmax ties share a span by construction.
    let mut by_window: std::collections::BTreeMap<usize, (f64, usize, f64)> =
        std::collections::BTreeMap::new();
    let mut dropped_padding = 0usize;
    for f in 0..config.filters {
        let mut w = T::zero();
        for (h, &g) in head_gap.iter().enumerate() {
            if g != T::zero() {
                w = w + params.fc_weight[(f, h)] * g;
            }
        }
        let contribution = (w * trace.pooled[f]).to64();
        if contribution == 0.0 {
            continue;
        }
        let start = trace.argmax[f] * config.stride;
        if start >= file_len {
            dropped_padding += 1;
            continue;
        }
        let entry = by_window.entry(trace.argmax[f]).or_insert((0.0, f, 0.0));
        entry.0 += contribution;
        // representative filter: largest |contribution|, lowest index wins ties
        if contribution.abs() > entry.2 {
            entry.1 = f;
            entry.2 = contribution.abs();
        }
    }

    let mut regions = Vec::with_capacity(by_window.len());
    for (window, (contribution, filter_index, _)) in by_window {
        if contribution == 0.0 {
            // merged contributions cancelled exactly
            continue;
        }
        let start_offset = window * config.stride;
        let width = config.window.min(file_len - start_offset);
        let section = offset_to_region(map, start_offset)?.to_string();
        regions.push(CamRegion {
            filter_index,
            start_offset,
            width,
            contribution,
            leaning: if contribution > 0.0 {
                Leaning::Malicious
            } else {
                Leaning::Benign
            },
            section,
        });
    }
    Ok(SparseCam {
        regions,
        dropped_padding,
    })
}

/// Per-(section, leaning) region counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionTally {
    pub section: String,
    pub malicious: usize,
    pub benign: usize,
}

/// Tallies regions by the section their start offset attributes to, ordered
/// by total count descending (name ascending on ties).
pub fn attribute_sections(regions: &[CamRegion], map: &SectionMap) -> Result<Vec<SectionTally>> {
    let mut counts: std::collections::BTreeMap<String, (usize, usize)> =
        std::collections::BTreeMap::new();
    for region in regions {
        let section = offset_to_region(map, region.start_offset)?.to_string();
        let entry = counts.entry(section).or_insert((0, 0));
        match region.leaning {
            Leaning::Malicious => entry.0 += 1,
            Leaning::Benign => entry.1 += 1,
        }
    }
    let mut tallies: Vec<SectionTally> = counts
        .into_iter()
        .map(|(section, (malicious, benign))| SectionTally {
            section,
            malicious,
            benign,
        })
        .collect();
    tallies.sort_by(|a, b| {
        (b.malicious + b.benign)
            .cmp(&(a.malicious + a.benign))
            .then_with(|| a.section.cmp(&b.section))
    });
    Ok(tallies)
}

/// Full explanation of one file.
#[derive(Debug, Clone)]
pub struct ExplainReport {
    /// Regions ordered by |contribution| descending.
    pub regions: Vec<CamRegion>,
    pub tallies: Vec<SectionTally>,
    pub dropped_padding: usize,
    /// Model score for the file (probability of malicious).
    pub score: f64,
}

/// Runs the forward pass, the sparse CAM, and section attribution over raw
/// file bytes.
pub fn explain_report<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    file_bytes: &[u8],
) -> Result<ExplainReport> {
    let padded = pad_or_truncate(file_bytes, config.max_len)?;
    let trace = forward(params, config, &padded.tokens)?;
    let map = parse_pe(file_bytes);
    let cam = sparse_cam(params, config, &trace, &map)?;
    let tallies = attribute_sections(&cam.regions, &map)?;
    let mut regions = cam.regions;
    regions.sort_by(|a, b| {
        b.contribution
            .abs()
            .partial_cmp(&a.contribution.abs())
            .expect("finite contributions")
            .then_with(|| a.filter_index.cmp(&b.filter_index))
    });
    Ok(ExplainReport {
        regions,
        tallies,
        dropped_padding: cam.dropped_padding,
        score: proba_from_logits(&trace.logits).to64(),
    })
}

/// `filter,start,width,contribution,leaning,section` rows.
pub fn regions_to_csv(regions: &[CamRegion]) -> String {
    let mut out = String::from("filter,start,width,contribution,leaning,section\n");
    for r in regions {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.filter_index, r.start_offset, r.width, r.contribution, r.leaning, r.section
        ));
    }
    out
}

/// `section,malicious,benign` rows.
pub fn tallies_to_csv(tallies: &[SectionTally]) -> String {
    let mut out = String::from("section,malicious,benign\n");
    for t in tallies {
        out.push_str(&format!("{},{},{}\n", t.section, t.malicious, t.benign));
    }
    out
}
