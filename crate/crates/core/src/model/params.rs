use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tensor};

/// Standard deviation for embeddings, positions and the soft prompt.
pub const EMBED_INIT_STD: f64 = 0.02;

pub const SOFT_PROMPT: &str = "soft_prompt";

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct ParamIds {
    pub proj1_w: ParamId,
    pub proj1_b: ParamId,
    pub proj2_w: ParamId,
    pub proj2_b: ParamId,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerIds>,
    pub lm_w: ParamId,
    pub lm_b: ParamId,
    pub soft_prompt: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Embedding,
    /// Normal with std `1/sqrt(fan_in)`; fan-in is the first extent.
    Linear,
}

/// Every parameter's name, shape, and initializer, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("projector.fc1.weight".into(), vec![cfg.d_patch, d], Init::Linear),
        ("projector.fc1.bias".into(), vec![d], Init::Zeros),
        ("projector.fc2.weight".into(), vec![d, d], Init::Linear),
        ("projector.fc2.bias".into(), vec![d], Init::Zeros),
        ("embed.tokens".into(), vec![cfg.vocab_size, d], Init::Embedding),
        ("embed.positions".into(), vec![cfg.max_positions(), d], Init::Embedding),
    ];
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        out.extend([
            (format!("{p}.attn.qkv.weight"), vec![d, 3 * d], Init::Linear),
            (format!("{p}.attn.qkv.bias"), vec![3 * d], Init::Zeros),
            (format!("{p}.attn.out.weight"), vec![d, d], Init::Linear),
            (format!("{p}.attn.out.bias"), vec![d], Init::Zeros),
            (format!("{p}.norm1.gain"), vec![d], Init::Ones),
            (format!("{p}.norm1.bias"), vec![d], Init::Zeros),
            (format!("{p}.mlp.fc1.weight"), vec![d, f], Init::Linear),
            (format!("{p}.mlp.fc1.bias"), vec![f], Init::Zeros),
            (format!("{p}.mlp.fc2.weight"), vec![f, d], Init::Linear),
            (format!("{p}.mlp.fc2.bias"), vec![d], Init::Zeros),
            (format!("{p}.norm2.gain"), vec![d], Init::Ones),
            (format!("{p}.norm2.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("lm_head.weight".into(), vec![d, cfg.vocab_size], Init::Linear),
        ("lm_head.bias".into(), vec![cfg.vocab_size], Init::Zeros),
        (SOFT_PROMPT.into(), vec![cfg.l_visual, d], Init::Embedding),
    ]);
    out
}

/// All learnable state of the model, including the soft visual prompt.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet,
    pub ids: ParamIds,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Embedding => sample(&mut rng, n, EMBED_INIT_STD),
                Init::Linear => sample(&mut rng, n, 1.0 / (shape[0].max(1) as f64).sqrt()),
            };
            set.add(name, Tensor::new(shape, data)?);
        }
        Self::from_set(config.clone(), set)
    }

    /// Wraps an existing parameter set after checking names and shapes
    /// against `config`.
    pub fn from_set(config: ModelConfig, set: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != set.len() {
            return Err(Error::Integrity(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                set.len()
            )));
        }
        for ((name, shape, _), (_, p)) in expected.iter().zip(set.iter()) {
            if &p.name != name {
                return Err(Error::Integrity(format!("expected tensor `{name}`, found `{}`", p.name)));
            }
            if p.value().shape() != shape.as_slice() {
                return Err(Error::ShapeConflict {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.value().shape().to_vec(),
                });
            }
        }
        let id = |name: &str| set.find(name).expect("layout checked");
        let layers = (0..config.n_layers)
            .map(|l| {
                let n = |s: &str| id(&format!("layers.{l}.{s}"));
                LayerIds {
                    qkv_w: n("attn.qkv.weight"),
                    qkv_b: n("attn.qkv.bias"),
                    out_w: n("attn.out.weight"),
                    out_b: n("attn.out.bias"),
                    norm1_gain: n("norm1.gain"),
                    norm1_bias: n("norm1.bias"),
                    ff1_w: n("mlp.fc1.weight"),
                    ff1_b: n("mlp.fc1.bias"),
                    ff2_w: n("mlp.fc2.weight"),
                    ff2_b: n("mlp.fc2.bias"),
                    norm2_gain: n("norm2.gain"),
                    norm2_bias: n("norm2.bias"),
                }
            })
            .collect();
        let ids = ParamIds {
            proj1_w: id("projector.fc1.weight"),
            proj1_b: id("projector.fc1.bias"),
            proj2_w: id("projector.fc2.weight"),
            proj2_b: id("projector.fc2.bias"),
            token_embed: id("embed.tokens"),
            pos_embed: id("embed.positions"),
            layers,
            lm_w: id("lm_head.weight"),
            lm_b: id("lm_head.bias"),
            soft_prompt: id(SOFT_PROMPT),
        };
        Ok(ModelParams { config, set, ids })
    }

    pub fn soft_prompt(&self) -> &Tensor {
        self.set.get(self.ids.soft_prompt).value()
    }

    pub fn projector_ids(&self) -> [ParamId; 4] {
        [self.ids.proj1_w, self.ids.proj1_b, self.ids.proj2_w, self.ids.proj2_b]
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut components: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.set.iter() {
            let component = if p.name.starts_with("projector.") {
                "projector"
            } else if p.name == "embed.tokens" {
                "token_embeddings"
            } else if p.name == "embed.positions" {
                "positional_embeddings"
            } else if p.name.starts_with("layers.") {
                "transformer_blocks"
            } else if p.name.starts_with("lm_head.") {
                "lm_head"
            } else {
                SOFT_PROMPT
            };
            match components.iter_mut().find(|(c, _)| c == component) {
                Some((_, n)) => *n += p.value().numel(),
                None => components.push((component.to_string(), p.value().numel())),
            }
        }
        let total = components.iter().map(|(_, n)| n).sum();
        let soft_prompt = self.soft_prompt().numel();
        ParamCounts {
            components,
            total,
            soft_prompt,
            soft_prompt_fraction: soft_prompt as f64 / total as f64,
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCounts {
    pub components: Vec<(String, usize)>,
    pub total: usize,
    pub soft_prompt: usize,
    pub soft_prompt_fraction: f64,
}
