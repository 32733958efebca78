use super::{AttentionMode, ModelParams};
use crate::attention::{build_modality_masks, masked_head_on_tape, mda_head_on_tape, DualWeights, Modality};
use crate::error::{Error, Result};
use crate::tensor::{Mask, ParamId, Tape, Tensor, Var};

/// The visual slot of an input: real patch features or the soft prompt.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualInput {
    /// `l_visual × d_patch` raw features, projected by the adapter MLP.
    Patches(Tensor),
    /// Use the learned soft visual prompt verbatim.
    SoftPrompt,
}

/// One sequence: visual slots followed by text tokens.
///
/// `loss_mask[p]` marks text position `p` as supervised on predicting
/// `text_tokens[p + 1]`; the last position is never supervised.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub visual: VisualInput,
    pub text_tokens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl ModelInput {
    pub fn new(visual: VisualInput, text_tokens: Vec<usize>) -> Self {
        let loss_mask = vec![false; text_tokens.len()];
        ModelInput {
            visual,
            text_tokens,
            loss_mask,
        }
    }

    /// Same text, visual slot replaced by the soft prompt.
    pub fn to_null(&self) -> ModelInput {
        ModelInput {
            visual: VisualInput::SoftPrompt,
            ..self.clone()
        }
    }

    pub fn uses_soft_prompt(&self) -> bool {
        matches!(self.visual, VisualInput::SoftPrompt)
    }

    /// Next-token targets; the final position targets PAD (id 0).
    pub fn targets(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.text_tokens.iter().skip(1).copied().collect();
        t.push(0);
        t
    }

    pub fn modality_tags(&self, l_visual: usize) -> Vec<Modality> {
        let mut tags = vec![Modality::Visual; l_visual];
        tags.extend(std::iter::repeat_n(Modality::Text, self.text_tokens.len()));
        tags
    }
}

/// Visual-token pruning at a given depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PruneSpec {
    /// First layer that runs on the pruned sequence.
    pub layer: usize,
    /// Fraction of visual tokens kept.
    pub keep_ratio: f64,
}

/// Which text positions get logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LogitRows {
    #[default]
    AllText,
    /// Only positions with `loss_mask == true`.
    Supervised,
    /// Only the final text position.
    Last,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    pub prune: Option<PruneSpec>,
    pub logits: LogitRows,
}

/// Attention maps of one head.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadMaps {
    Dual(DualWeights),
    Single(Tensor),
}

impl HeadMaps {
    /// The weights actually applied to values (`W_I + W_T` for dual maps).
    pub fn applied(&self) -> Tensor {
        match self {
            HeadMaps::Dual(w) => w.combined(),
            HeadMaps::Single(w) => w.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    /// Modality of each row/column of this layer's maps.
    pub tags: Vec<Modality>,
    pub heads: Vec<HeadMaps>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AttentionCapture {
    pub layers: Vec<LayerCapture>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// One row per selected text position.
    pub logits: Tensor,
    /// Text positions (0-based within the text) of the logit rows.
    pub positions: Vec<usize>,
    pub attention: Option<AttentionCapture>,
}

/// Result of a batched forward pass recorded on a tape.
pub struct BatchForward {
    /// Stacked logit rows for all samples, in sample order.
    pub logits: Var,
    /// `(sample, text position)` of each logit row.
    pub rows: Vec<(usize, usize)>,
    pub captures: Vec<Option<AttentionCapture>>,
}

fn bind(tape: &mut Tape, params: &ModelParams, id: ParamId) -> Var {
    tape.param(&params.set, id)
}

fn validate_batch(params: &ModelParams, inputs: &[&ModelInput]) -> Result<usize> {
    let cfg = &params.config;
    let n_text = inputs
        .first()
        .map(|i| i.text_tokens.len())
        .ok_or_else(|| Error::contract("forward needs at least one input"))?;
    for input in inputs {
        let len = input.text_tokens.len();
        if len != n_text {
            return Err(Error::contract(format!(
                "batched inputs need equal text lengths ({len} vs {n_text})"
            )));
        }
        if len > cfg.max_text_len {
            return Err(Error::ContextOverflow {
                len,
                max: cfg.max_text_len,
            });
        }
        if input.loss_mask.len() != len {
            return Err(Error::Shape {
                op: "loss_mask",
                lhs: vec![len],
                rhs: vec![input.loss_mask.len()],
            });
        }
        if let Some(&t) = input.text_tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::contract(format!("token {t} out of range for vocab {}", cfg.vocab_size)));
        }
        if let VisualInput::Patches(p) = &input.visual {
            if p.shape() != [cfg.l_visual, cfg.d_patch] {
                return Err(Error::Shape {
                    op: "patches",
                    lhs: vec![cfg.l_visual, cfg.d_patch],
                    rhs: p.shape().to_vec(),
                });
            }
        }
    }
    if cfg.l_visual + n_text == 0 {
        return Err(Error::contract("empty sequence"));
    }
    Ok(n_text)
}

/// Embeds a batch into stacked `[B·N × d_model]` rows, positions added.
fn embed_batch(tape: &mut Tape, params: &ModelParams, inputs: &[&ModelInput], n_text: usize) -> Result<Var> {
    let cfg = &params.config;
    let ids = &params.ids;
    let l_vis = cfg.l_visual;
    let n = l_vis + n_text;

    let patch_samples: Vec<&Tensor> = inputs
        .iter()
        .filter_map(|i| match &i.visual {
            VisualInput::Patches(p) => Some(p),
            VisualInput::SoftPrompt => None,
        })
        .collect();

    let mut sources = Vec::new();
    let mut offset = 0;
    let proj_offset = offset;
    if !patch_samples.is_empty() && l_vis > 0 {
        let mut raw = Vec::with_capacity(patch_samples.len() * l_vis * cfg.d_patch);
        for p in &patch_samples {
            raw.extend_from_slice(p.data());
        }
        let raw = tape.constant(Tensor::matrix(patch_samples.len() * l_vis, cfg.d_patch, raw)?);
        let (w1, b1) = (bind(tape, params, ids.proj1_w), bind(tape, params, ids.proj1_b));
        let (w2, b2) = (bind(tape, params, ids.proj2_w), bind(tape, params, ids.proj2_b));
        let h = tape.linear(raw, w1, b1)?;
        let h = tape.gelu(h);
        sources.push(tape.linear(h, w2, b2)?);
        offset += patch_samples.len() * l_vis;
    }
    let soft_offset = offset;
    if l_vis > 0 && inputs.iter().any(|i| i.uses_soft_prompt()) {
        sources.push(bind(tape, params, ids.soft_prompt));
        offset += l_vis;
    }
    let text_offset = offset;
    let tokens: Vec<usize> = inputs.iter().flat_map(|i| i.text_tokens.iter().copied()).collect();
    if !tokens.is_empty() {
        let table = bind(tape, params, ids.token_embed);
        sources.push(tape.gather_rows(table, tokens)?);
    }

    let mut index = Vec::with_capacity(inputs.len() * n);
    let mut patch_rank = 0;
    for (b, input) in inputs.iter().enumerate() {
        match input.visual {
            VisualInput::Patches(_) => {
                index.extend((0..l_vis).map(|s| proj_offset + patch_rank * l_vis + s));
                patch_rank += 1;
            }
            VisualInput::SoftPrompt => index.extend((0..l_vis).map(|s| soft_offset + s)),
        }
        index.extend((0..n_text).map(|t| text_offset + b * n_text + t));
    }
    let stacked = if sources.len() == 1 {
        sources[0]
    } else {
        tape.concat_rows(&sources)?
    };
    let x = tape.gather_rows(stacked, index)?;
    let table = bind(tape, params, ids.pos_embed);
    let pos = tape.gather_rows(table, (0..inputs.len()).flat_map(|_| 0..n).collect())?;
    tape.add(x, pos)
}

/// Visual positions kept by pruning: rank by attention received (summed
/// over query rows, averaged over heads), ties to the lower position.
pub fn rank_visual_tokens(maps: &LayerCapture, keep_ratio: f64) -> Result<Vec<usize>> {
    let visual: Vec<usize> = (0..maps.tags.len()).filter(|&j| maps.tags[j] == Modality::Visual).collect();
    let keep = (visual.len() as f64 * keep_ratio + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(Error::contract(format!(
            "keep_ratio {keep_ratio} would drop all {} visual tokens",
            visual.len()
        )));
    }
    let mut received: Vec<(usize, f64)> = visual
        .iter()
        .map(|&j| {
            let total: f64 = maps
                .heads
                .iter()
                .map(|h| {
                    let w = h.applied();
                    (0..w.rows()).map(|i| w.at(i, j)).sum::<f64>()
                })
                .sum();
            (j, total / maps.heads.len() as f64)
        })
        .collect();
    received.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = received[..keep].iter().map(|&(j, _)| j).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Records a batched forward pass on `tape`. All inputs must share a text length.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &[&ModelInput],
    opts: &ForwardOptions,
) -> Result<BatchForward> {
    let cfg = &params.config;
    let n_text = validate_batch(params, inputs)?;
    if let Some(p) = opts.prune {
        if p.layer == 0 || p.layer >= cfg.n_layers {
            return Err(Error::contract(format!(
                "prune layer must satisfy 1 <= K < n_layers ({}), got {}",
                cfg.n_layers, p.layer
            )));
        }
        if !(p.keep_ratio > 0.0 && p.keep_ratio <= 1.0) {
            return Err(Error::contract(format!("keep_ratio must be in (0, 1], got {}", p.keep_ratio)));
        }
    }
    let batch = inputs.len();
    let (d, dh) = (cfg.d_model, cfg.d_head());

    let mut x = embed_batch(tape, params, inputs, n_text)?;
    let mut tags = inputs[0].modality_tags(cfg.l_visual);
    let mut captures: Vec<Option<AttentionCapture>> = vec![None; batch];
    let need_maps = |l: usize| opts.capture_attention || opts.prune.is_some_and(|p| p.layer == l + 1);
    let mut previous: Vec<Option<LayerCapture>> = vec![None; batch];

    for (l, ids) in params.ids.layers.iter().enumerate() {
        if let Some(p) = opts.prune.filter(|p| p.layer == l) {
            let n = tags.len();
            let mut index = Vec::new();
            let mut new_tags = None;
            for (b, maps) in previous.iter().enumerate() {
                let maps = maps.as_ref().expect("maps recorded for the layer before pruning");
                let kept = rank_visual_tokens(maps, p.keep_ratio)?;
                let text: Vec<usize> = (0..n).filter(|&j| tags[j] == Modality::Text).collect();
                let rows: Vec<usize> = kept.iter().chain(&text).copied().collect();
                new_tags.get_or_insert_with(|| rows.iter().map(|&j| tags[j]).collect::<Vec<_>>());
                index.extend(rows.iter().map(|&j| b * n + j));
            }
            x = tape.gather_rows(x, index)?;
            tags = new_tags.expect("nonempty batch");
        }

        let n = tags.len();
        let masks = build_modality_masks(&tags)?;
        let causal = Mask::causal(n);
        let (qkv_w, qkv_b) = (bind(tape, params, ids.qkv_w), bind(tape, params, ids.qkv_b));
        let qkv = tape.linear(x, qkv_w, qkv_b)?;

        let mut sample_outs = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut maps = Vec::new();
            for h in 0..cfg.n_heads {
                let q = tape.block(qkv, b * n, n, h * dh, dh)?;
                let k = tape.block(qkv, b * n, n, d + h * dh, dh)?;
                let v = tape.block(qkv, b * n, n, 2 * d + h * dh, dh)?;
                match cfg.attention_mode {
                    AttentionMode::Mda => {
                        let head = mda_head_on_tape(tape, q, k, v, &masks, cfg.renormalize_dual_weights)?;
                        heads.push(head.output);
                        if need_maps(l) {
                            maps.push(HeadMaps::Dual(DualWeights {
                                visual: tape.value(head.visual).clone(),
                                text: tape.value(head.text).clone(),
                            }));
                        }
                    }
                    AttentionMode::Causal => {
                        let (out, w) = masked_head_on_tape(tape, q, k, v, &causal)?;
                        heads.push(out);
                        if need_maps(l) {
                            maps.push(HeadMaps::Single(tape.value(w).clone()));
                        }
                    }
                }
            }
            sample_outs.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
            if need_maps(l) {
                let layer = LayerCapture {
                    tags: tags.clone(),
                    heads: maps,
                };
                if opts.capture_attention {
                    captures[b].get_or_insert_with(AttentionCapture::default).layers.push(layer.clone());
                }
                previous[b] = Some(layer);
            }
        }
        let attn = if batch == 1 {
            sample_outs[0]
        } else {
            tape.concat_rows(&sample_outs)?
        };
        let (out_w, out_b) = (bind(tape, params, ids.out_w), bind(tape, params, ids.out_b));
        let attn = tape.linear(attn, out_w, out_b)?;
        let res = tape.add(x, attn)?;
        let (g1, b1) = (bind(tape, params, ids.norm1_gain), bind(tape, params, ids.norm1_bias));
        let h = tape.layer_norm(res, g1, b1)?;

        let (f1w, f1b) = (bind(tape, params, ids.ff1_w), bind(tape, params, ids.ff1_b));
        let (f2w, f2b) = (bind(tape, params, ids.ff2_w), bind(tape, params, ids.ff2_b));
        let m = tape.linear(h, f1w, f1b)?;
        let m = tape.gelu(m);
        let m = tape.linear(m, f2w, f2b)?;
        let res = tape.add(h, m)?;
        let (g2, b2) = (bind(tape, params, ids.norm2_gain), bind(tape, params, ids.norm2_bias));
        x = tape.layer_norm(res, g2, b2)?;
    }

    let n = tags.len();
    let text_start = n - n_text;
    let mut rows = Vec::new();
    for (b, input) in inputs.iter().enumerate() {
        match opts.logits {
            LogitRows::AllText => rows.extend((0..n_text).map(|t| (b, t))),
            LogitRows::Supervised => rows.extend((0..n_text).filter(|&t| input.loss_mask[t]).map(|t| (b, t))),
            LogitRows::Last if n_text > 0 => rows.push((b, n_text - 1)),
            LogitRows::Last => {}
        }
    }
    let selected = tape.gather_rows(x, rows.iter().map(|&(b, t)| b * n + text_start + t).collect())?;
    let (lm_w, lm_b) = (bind(tape, params, params.ids.lm_w), bind(tape, params, params.ids.lm_b));
    let logits = tape.linear(selected, lm_w, lm_b)?;
    Ok(BatchForward { logits, rows, captures })
}

/// Inference over a batch of equal-length inputs.
pub fn forward_batch(params: &ModelParams, inputs: &[&ModelInput], opts: &ForwardOptions) -> Result<Vec<ForwardOutput>> {
    let mut tape = Tape::new();
    let out = forward_on_tape(&mut tape, params, inputs, opts)?;
    let logits = tape.value(out.logits);
    let vocab = logits.cols();
    let mut per_sample: Vec<(Vec<f64>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); inputs.len()];
    for (r, &(b, t)) in out.rows.iter().enumerate() {
        per_sample[b].0.extend_from_slice(logits.row(r));
        per_sample[b].1.push(t);
    }
    per_sample
        .into_iter()
        .zip(out.captures)
        .map(|((data, positions), attention)| {
            Ok(ForwardOutput {
                logits: Tensor::matrix(positions.len(), vocab, data)?,
                positions,
                attention,
            })
        })
        .collect()
}

pub fn forward_with(params: &ModelParams, input: &ModelInput, opts: &ForwardOptions) -> Result<ForwardOutput> {
    Ok(forward_batch(params, &[input], opts)?.remove(0))
}

/// Logits at every text position, optionally with attention maps.
pub fn forward(params: &ModelParams, input: &ModelInput, capture_attention: bool) -> Result<ForwardOutput> {
    let opts = ForwardOptions {
        capture_attention,
        ..ForwardOptions::default()
    };
    forward_with(params, input, &opts)
}

/// Input embeddings (with positions) and the modality tags of the sequence.
pub fn embed_inputs(params: &ModelParams, input: &ModelInput) -> Result<(Tensor, Vec<Modality>)> {
    let n_text = validate_batch(params, &[input])?;
    let mut tape = Tape::new();
    let x = embed_batch(&mut tape, params, &[input], n_text)?;
    Ok((tape.value(x).clone(), input.modality_tags(params.config.l_visual)))
}
