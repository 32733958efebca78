//! Where generated tokens look: attention mass on visual versus text keys,
//! per layer or per generated-token ordinal, plus deep-layer pruning of
//! visual tokens.
//!
//! For dual-mask maps the visual share is read from `W_I` and the text
//! share from `W_T`. Each of those rows is a full softmax whenever its
//! modality is present, so an MDA model's visual share is exactly 1 at
//! every layer by construction. The renormalized columns divide both
//! shares by their sum, which puts dual and single-softmax models on the
//! same scale.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::Modality;
use crate::decode::Generation;
use crate::error::{Error, Result};
use crate::model::{forward_with, ForwardOptions, ForwardOutput, HeadMaps, LayerCapture, ModelInput, ModelParams, PruneSpec};
use crate::tensor::Tensor;

/// Default number of evaluation samples averaged per statistic.
pub const DEFAULT_ANALYSIS_SAMPLES: usize = 30;

/// Captured maps of one sample plus the text positions whose rows emitted
/// generated tokens (one per generated token, in order).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<LayerCapture>,
    pub query_rows: Vec<usize>,
}

impl AttentionRecord {
    pub fn from_generation(g: &Generation) -> Result<Self> {
        let capture = g
            .attention
            .as_ref()
            .ok_or_else(|| Error::contract("generation was run without attention capture"))?;
        Ok(AttentionRecord {
            layers: capture.layers.clone(),
            query_rows: g.query_rows.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Layer,
    Step,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Layer => "layer",
            Axis::Step => "step",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    /// Layer (0-based) or generated-token ordinal (1-based).
    pub index: usize,
    pub visual_share: f64,
    pub text_share: f64,
    pub visual_share_renorm: f64,
    pub text_share_renorm: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationStats {
    pub axis: Axis,
    pub rows: Vec<AllocationRow>,
}

/// Shares of one query row under one head: `(visual, text)`.
fn row_shares(head: &HeadMaps, tags: &[Modality], row: usize) -> Result<(f64, f64)> {
    let check = |t: &Tensor| {
        if t.rows() != tags.len() || t.cols() != tags.len() || row >= tags.len() {
            Err(Error::Shape {
                op: "attention record",
                lhs: t.shape().to_vec(),
                rhs: vec![tags.len(), row],
            })
        } else {
            Ok(())
        }
    };
    let mass = |t: &Tensor, m: Modality| -> f64 {
        t.row(row).iter().zip(tags).filter(|(_, &tag)| tag == m).map(|(w, _)| w).sum()
    };
    match head {
        HeadMaps::Dual(w) => {
            check(&w.visual)?;
            check(&w.text)?;
            Ok((mass(&w.visual, Modality::Visual), mass(&w.text, Modality::Text)))
        }
        HeadMaps::Single(w) => {
            check(w)?;
            Ok((mass(w, Modality::Visual), mass(w, Modality::Text)))
        }
    }
}

/// Absolute row of text position `t` in a layer's (possibly pruned) map.
fn text_row(tags: &[Modality], t: usize) -> Result<usize> {
    tags.iter()
        .enumerate()
        .filter(|(_, &m)| m == Modality::Text)
        .nth(t)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::contract(format!("text position {t} outside the captured sequence")))
}

/// Mean `(visual, text, visual_renorm, text_renorm)` over heads for one query.
fn query_shares(layer: &LayerCapture, t: usize) -> Result<[f64; 4]> {
    let row = text_row(&layer.tags, t)?;
    let mut acc = [0.0; 4];
    for head in &layer.heads {
        let (v, x) = row_shares(head, &layer.tags, row)?;
        let total = v + x;
        let (vr, xr) = if total > 0.0 { (v / total, x / total) } else { (0.0, 0.0) };
        for (a, s) in acc.iter_mut().zip([v, x, vr, xr]) {
            *a += s;
        }
    }
    let h = layer.heads.len().max(1) as f64;
    Ok(acc.map(|a| a / h))
}

fn finish(index: usize, sums: [f64; 4], n: usize) -> AllocationRow {
    let d = n.max(1) as f64;
    AllocationRow {
        index,
        visual_share: sums[0] / d,
        text_share: sums[1] / d,
        visual_share_renorm: sums[2] / d,
        text_share_renorm: sums[3] / d,
        n_samples: n,
    }
}

/// Per layer: mean over samples of the mean over heads and generated-token
/// query rows.
pub fn layer_allocation(records: &[AttentionRecord]) -> Result<AllocationStats> {
    let first = records.first().ok_or_else(|| Error::contract("no attention records"))?;
    let n_layers = first.layers.len();
    let mut sums = vec![[0.0; 4]; n_layers];
    for rec in records {
        if rec.layers.len() != n_layers {
            return Err(Error::contract(format!(
                "records disagree on depth: {} vs {n_layers}",
                rec.layers.len()
            )));
        }
        if rec.query_rows.is_empty() {
            return Err(Error::contract("record without generated tokens"));
        }
        for (layer, sum) in rec.layers.iter().zip(&mut sums) {
            let mut per = [0.0; 4];
            for &t in &rec.query_rows {
                let s = query_shares(layer, t)?;
                for (p, v) in per.iter_mut().zip(s) {
                    *p += v;
                }
            }
            for (acc, p) in sum.iter_mut().zip(per) {
                *acc += p / rec.query_rows.len() as f64;
            }
        }
    }
    Ok(AllocationStats {
        axis: Axis::Layer,
        rows: sums.into_iter().enumerate().map(|(l, s)| finish(l, s, records.len())).collect(),
    })
}

/// Per generated-token ordinal `1..=max_steps`: mean over samples of the
/// mean over layers and heads. Shorter generations simply do not
/// contribute to later ordinals; `n_samples` counts contributors.
pub fn position_allocation(records: &[AttentionRecord], max_steps: usize) -> Result<AllocationStats> {
    let mut sums = vec![[0.0; 4]; max_steps];
    let mut counts = vec![0usize; max_steps];
    for rec in records {
        if rec.layers.is_empty() {
            return Err(Error::contract("record without layers"));
        }
        for (step, &t) in rec.query_rows.iter().take(max_steps).enumerate() {
            let mut per = [0.0; 4];
            for layer in &rec.layers {
                for (p, v) in per.iter_mut().zip(query_shares(layer, t)?) {
                    *p += v;
                }
            }
            for (acc, p) in sums[step].iter_mut().zip(per) {
                *acc += p / rec.layers.len() as f64;
            }
            counts[step] += 1;
        }
    }
    Ok(AllocationStats {
        axis: Axis::Step,
        rows: sums
            .into_iter()
            .zip(counts)
            .enumerate()
            .map(|(i, (s, n))| finish(i + 1, s, n))
            .collect(),
    })
}

/// Forward with the lowest-ranked visual tokens dropped from layer `layer`
/// onwards.
pub fn prune_visual_tokens(params: &ModelParams, input: &ModelInput, layer: usize, keep_ratio: f64) -> Result<ForwardOutput> {
    let opts = ForwardOptions {
        prune: Some(PruneSpec { layer, keep_ratio }),
        ..ForwardOptions::default()
    };
    forward_with(params, input, &opts)
}

/// Default pruning depth: the first layer of the deeper half.
pub fn default_prune_layer(n_layers: usize) -> usize {
    (n_layers / 2).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

const CSV_COLUMNS: [&str; 5] = ["visual_share", "text_share", "visual_share_renorm", "text_share_renorm", "n_samples"];

pub fn export_stats(stats: &AllocationStats, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(stats).map_err(|e| Error::io(path, e.into()))?;
            v.push(b'\n');
            v
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header: Vec<&str> = std::iter::once(stats.axis.name()).chain(CSV_COLUMNS).collect();
            let csv_err = |e: csv::Error| Error::io(path, e.into());
            w.write_record(&header).map_err(csv_err)?;
            for r in &stats.rows {
                // `Display` for f64 is locale-free and round-trips exactly.
                w.write_record([
                    r.index.to_string(),
                    r.visual_share.to_string(),
                    r.text_share.to_string(),
                    r.visual_share_renorm.to_string(),
                    r.text_share_renorm.to_string(),
                    r.n_samples.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::io(path, e.into_error()))?
        }
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn import_stats(path: &Path, format: Format) -> Result<AllocationStats> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Json => serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        }),
        Format::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| parse_err(1, e))?.clone();
            let axis = match header.get(0) {
                Some("layer") => Axis::Layer,
                Some("step") => Axis::Step,
                other => {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unexpected first column {other:?}"),
                    })
                }
            };
            let mut rows = Vec::new();
            for (i, rec) in r.records().enumerate() {
                let line = i + 2;
                let rec = rec.map_err(|e| parse_err(line, e))?;
                let field = |k: usize| -> Result<&str> {
                    rec.get(k).ok_or_else(|| Error::Parse {
                        line,
                        message: format!("missing column {k}"),
                    })
                };
                let num = |k: usize| -> Result<f64> {
                    field(k)?.parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                        line,
                        message: e.to_string(),
                    })
                };
                let int = |k: usize| -> Result<usize> {
                    field(k)?.parse().map_err(|e: std::num::ParseIntError| Error::Parse {
                        line,
                        message: e.to_string(),
                    })
                };
                rows.push(AllocationRow {
                    index: int(0)?,
                    visual_share: num(1)?,
                    text_share: num(2)?,
                    visual_share_renorm: num(3)?,
                    text_share_renorm: num(4)?,
                    n_samples: int(5)?,
                });
            }
            Ok(AllocationStats { axis, rows })
        }
    }
}

fn parse_err(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
