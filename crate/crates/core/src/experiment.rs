//! Glue for running the toy experiment end to end: training inputs from a
//! dataset, answer accuracy under guided decoding, attention records.

use serde::{Deserialize, Serialize};

use crate::analysis::AttentionRecord;
use crate::data::GridSample;
use crate::decode::{generate_batch_from, DecodeConfig, GenerateOptions, Generation, Strategy};
use crate::error::Result;
use crate::model::{ModelConfig, ModelInput, ModelParams};
use crate::train::{train_loop, TrainConfig, TrainOutcome};

const CHUNK: usize = 100;

/// Training inputs, optionally with zeroed patches.
pub fn training_inputs(samples: &[GridSample], blind: bool, supervise_all_text: bool) -> Result<Vec<ModelInput>> {
    samples
        .iter()
        .map(|s| if blind { s.blinded() } else { s.clone() }.to_model_input(supervise_all_text))
        .collect()
}

/// Model config with the visual geometry taken from the data.
pub fn fit_model_config(mut model: ModelConfig, samples: &[GridSample]) -> ModelConfig {
    if let Some(s) = samples.first() {
        let v = s.vocab();
        model.l_visual = v.grid * v.grid;
        model.d_patch = v.colors + 2;
        model.vocab_size = model.vocab_size.max(v.size());
    }
    model
}

pub fn train_on(
    model: &ModelConfig,
    cfg: &TrainConfig,
    samples: &[GridSample],
    blind: bool,
    out_dir: Option<&std::path::Path>,
) -> Result<TrainOutcome> {
    let inputs = training_inputs(samples, blind, cfg.supervise_all_text)?;
    train_loop(&fit_model_config(model.clone(), samples), cfg, &inputs, out_dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub lambda: f64,
    pub strategy: Strategy,
    pub top_p: f64,
    pub seed: u64,
}

/// Decodes every sample's question and scores the first generated token
/// against the answer. Sample `i` always uses decode stream `i`.
pub fn evaluate(
    params: &ModelParams,
    samples: &[GridSample],
    cfg: &DecodeConfig,
    opts: &GenerateOptions,
    blind: bool,
) -> Result<(EvalReport, Vec<Generation>)> {
    let mut generations = Vec::with_capacity(samples.len());
    let mut correct = 0;
    for (c, chunk) in samples.chunks(CHUNK).enumerate() {
        let prompts = chunk
            .iter()
            .map(|s| if blind { s.blinded() } else { s.clone() }.prompt_input())
            .collect::<Result<Vec<_>>>()?;
        let gens = generate_batch_from(params, &prompts, (c * CHUNK) as u64, cfg, opts)?;
        correct += gens
            .iter()
            .zip(chunk)
            .filter(|(g, s)| g.tokens.first() == Some(&s.answer_token))
            .count();
        generations.extend(gens);
    }
    let n = samples.len();
    let report = EvalReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        correct,
        n,
        lambda: cfg.lambda,
        strategy: cfg.strategy,
        top_p: cfg.top_p,
        seed: cfg.seed,
    };
    Ok((report, generations))
}

/// Generates `max_steps` tokens per sample with EOS disabled and keeps the
/// conditional branch's attention maps.
pub fn attention_records(
    params: &ModelParams,
    samples: &[GridSample],
    cfg: &DecodeConfig,
    max_steps: usize,
) -> Result<Vec<AttentionRecord>> {
    let cfg = DecodeConfig {
        max_new_tokens: max_steps,
        eos_token: None,
        ..cfg.clone()
    };
    let opts = GenerateOptions {
        capture_attention: true,
        prune: None,
    };
    let (_, gens) = evaluate(params, samples, &cfg, &opts, false)?;
    gens.iter().map(AttentionRecord::from_generation).collect()
}
