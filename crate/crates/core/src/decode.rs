//! Guided decoding: every step runs the conditional branch (real patches)
//! and the multimodal-null branch (soft prompt) on the same text, mixes
//! their logits with scale λ, and appends the chosen token to both.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_batch, AttentionCapture, ForwardOptions, LogitRows, ModelInput, ModelParams, PruneSpec};
use crate::seed;
use crate::tensor::softmax_row;

pub const DEFAULT_LAMBDA: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Greedy,
    Nucleus,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(Strategy::Greedy),
            "nucleus" => Ok(Strategy::Nucleus),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (greedy | nucleus)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Greedy => "greedy",
            Strategy::Nucleus => "nucleus",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub lambda: f64,
    pub strategy: Strategy,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Generation stops after emitting this token; `None` never stops early.
    pub eos_token: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            lambda: DEFAULT_LAMBDA,
            strategy: Strategy::Greedy,
            top_p: 0.9,
            max_new_tokens: 2,
            seed: 0,
            eos_token: Some(crate::data::EOS),
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

/// Conditional, null-branch and mixed logits of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitTriple {
    pub conditional: Vec<f64>,
    pub null: Vec<f64>,
    pub guided: Vec<f64>,
}

/// `λ·ℓ_c + (1−λ)·ℓ_u`, i.e. `ℓ_u + (ℓ_c − ℓ_u)·λ` arranged so that λ = 1
/// and λ = 0 return the inputs bit for bit.
pub fn mix_logits(conditional: &[f64], null: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if conditional.len() != null.len() {
        return Err(Error::Shape {
            op: "mix_logits",
            lhs: vec![conditional.len()],
            rhs: vec![null.len()],
        });
    }
    Ok(conditional
        .iter()
        .zip(null)
        .map(|(&c, &u)| lambda * c + (1.0 - lambda) * u)
        .collect())
}

/// Argmax; ties go to the lowest id.
pub fn greedy_select(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Smallest probability-sorted prefix reaching `top_p` (ties by id),
/// renormalized.
pub fn nucleus_support(logits: &[f64], top_p: f64) -> Vec<(usize, f64)> {
    let probs = softmax_row(logits);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push((i, probs[i]));
        mass += probs[i];
        // Tolerate rounding so a prefix summing to exactly `top_p` stops.
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    kept.into_iter().map(|(i, p)| (i, p / mass)).collect()
}

/// One uniform draw walked along the nucleus.
pub fn nucleus_select<R: Rng + ?Sized>(logits: &[f64], top_p: f64, rng: &mut R) -> usize {
    let support = nucleus_support(logits, top_p);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(i, p) in &support {
        acc += p;
        if u < acc {
            return i;
        }
    }
    support.last().map_or(0, |&(i, _)| i)
}

fn select(logits: &[f64], cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> usize {
    match cfg.strategy {
        Strategy::Greedy => greedy_select(logits),
        Strategy::Nucleus => nucleus_select(logits, cfg.top_p, rng),
    }
}

/// Forwards both contexts and selects one token from the mixed logits. The
/// contexts must carry identical text.
pub fn decode_step(
    params: &ModelParams,
    real: &ModelInput,
    null: &ModelInput,
    cfg: &DecodeConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, LogitTriple)> {
    if real.text_tokens != null.text_tokens {
        return Err(Error::contract("branches disagree on the text prefix"));
    }
    let opts = ForwardOptions {
        logits: LogitRows::Last,
        ..ForwardOptions::default()
    };
    let out = forward_batch(params, &[real, null], &opts)?;
    let triple = triple(out[0].logits.data().to_vec(), out[1].logits.data().to_vec(), cfg.lambda)?;
    Ok((select(&triple.guided, cfg, rng), triple))
}

fn triple(conditional: Vec<f64>, null: Vec<f64>, lambda: f64) -> Result<LogitTriple> {
    let guided = mix_logits(&conditional, &null, lambda)?;
    Ok(LogitTriple {
        conditional,
        null,
        guided,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerateOptions {
    /// Keep the conditional branch's attention maps from the final step.
    pub capture_attention: bool,
    /// Visual-token pruning applied to both branches.
    pub prune: Option<PruneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub steps: Vec<LogitTriple>,
    /// Conditional-branch maps over the final context. Causality makes the
    /// rows of earlier steps identical to what those steps saw.
    pub attention: Option<AttentionCapture>,
    /// Text position whose query row emitted each generated token.
    pub query_rows: Vec<usize>,
}

pub fn generate(params: &ModelParams, prompt: &ModelInput, cfg: &DecodeConfig) -> Result<Generation> {
    Ok(generate_batch(params, std::slice::from_ref(prompt), cfg, &GenerateOptions::default())?.remove(0))
}

/// Greedy or nucleus decoding from the conditional branch alone.
pub fn generate_plain(params: &ModelParams, prompt: &ModelInput, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let mut rng = seed::stream(cfg.seed, "decode", 0);
    let mut ctx = prompt.clone();
    let mut tokens = Vec::new();
    let opts = ForwardOptions {
        logits: LogitRows::Last,
        ..ForwardOptions::default()
    };
    for _ in 0..cfg.max_new_tokens {
        let logits = forward_batch(params, &[&ctx], &opts)?.remove(0).logits;
        let token = select(logits.data(), cfg, &mut rng);
        tokens.push(token);
        if Some(token) == cfg.eos_token {
            break;
        }
        ctx.text_tokens.push(token);
        ctx.loss_mask.push(false);
    }
    Ok(tokens)
}

/// Decodes every prompt in lockstep. Prompts must share a text length.
/// Sample `i` draws from its own seeded stream, so results do not depend
/// on how prompts are grouped.
pub fn generate_batch(
    params: &ModelParams,
    prompts: &[ModelInput],
    cfg: &DecodeConfig,
    opts: &GenerateOptions,
) -> Result<Vec<Generation>> {
    generate_batch_from(params, prompts, 0, cfg, opts)
}

/// As [`generate_batch`], numbering samples from `first_index`.
pub fn generate_batch_from(
    params: &ModelParams,
    prompts: &[ModelInput],
    first_index: u64,
    cfg: &DecodeConfig,
    opts: &GenerateOptions,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    let mut real: Vec<ModelInput> = prompts.to_vec();
    let mut rngs: Vec<ChaCha8Rng> = (0..prompts.len() as u64)
        .map(|i| seed::stream(cfg.seed, "decode", first_index + i))
        .collect();
    let mut out: Vec<Generation> = prompts
        .iter()
        .map(|_| Generation {
            tokens: Vec::new(),
            steps: Vec::new(),
            attention: None,
            query_rows: Vec::new(),
        })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).collect();
    let fwd = ForwardOptions {
        capture_attention: opts.capture_attention,
        prune: opts.prune,
        logits: LogitRows::Last,
    };
    for _ in 0..cfg.max_new_tokens {
        if active.is_empty() {
            break;
        }
        let nulls: Vec<ModelInput> = active.iter().map(|&i| real[i].to_null()).collect();
        let mut batch: Vec<&ModelInput> = active.iter().map(|&i| &real[i]).collect();
        batch.extend(nulls.iter());
        let mut results = forward_batch(params, &batch, &fwd)?;
        let null_results = results.split_off(active.len());
        let mut still = Vec::with_capacity(active.len());
        for ((&i, cond), null) in active.iter().zip(results).zip(null_results) {
            let t = triple(cond.logits.into_data(), null.logits.into_data(), cfg.lambda)?;
            let token = select(&t.guided, cfg, &mut rngs[i]);
            let g = &mut out[i];
            g.query_rows.push(real[i].text_tokens.len() - 1);
            g.tokens.push(token);
            g.steps.push(t);
            if cond.attention.is_some() {
                g.attention = cond.attention;
            }
            if Some(token) != cfg.eos_token {
                real[i].text_tokens.push(token);
                real[i].loss_mask.push(false);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample: usize,
    pub lambda: f64,
    pub step: usize,
    pub token: usize,
    pub lc_top5: Vec<(usize, f64)>,
    pub lu_top5: Vec<(usize, f64)>,
    pub lg_top5: Vec<(usize, f64)>,
}

/// Five largest entries, ties by id.
pub fn top5(logits: &[f64]) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.into_iter().take(5).map(|i| (i, logits[i])).collect()
}

pub fn trace_records(sample: usize, lambda: f64, g: &Generation) -> Vec<TraceRecord> {
    g.tokens
        .iter()
        .zip(&g.steps)
        .enumerate()
        .map(|(step, (&token, t))| TraceRecord {
            sample,
            lambda,
            step,
            token,
            lc_top5: top5(&t.conditional),
            lu_top5: top5(&t.null),
            lg_top5: top5(&t.guided),
        })
        .collect()
}

pub fn write_trace<W: Write>(w: &mut W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
