//! Joint training of the model and its soft visual prompt.
//!
//! Every sample in a batch independently has its visual input swapped for
//! the soft prompt with probability θ, so a single model learns both the
//! conditional and the multimodal-null distribution that guided decoding
//! contrasts.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use optim::{learning_rate, warmup_steps, AdamW, Schedule, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_loss, ModelConfig, ModelInput, ModelParams};
use crate::seed;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Per-sample probability of replacing the visual input with the soft prompt.
    pub theta: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Supervise every next-token prediction instead of the answer only.
    pub supervise_all_text: bool,
    pub log_every: usize,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            theta: 0.1,
            batch_size: 32,
            steps: 2000,
            lr: 3e-4,
            warmup_ratio: 0.03,
            schedule: Schedule::Cosine,
            weight_decay: 0.0,
            optimizer: Optimizer::AdamW,
            seed: 0,
            supervise_all_text: false,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta {} outside [0, 1]", self.theta));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        learning_rate(self.schedule, self.lr, step, self.steps, self.warmup_ratio)
    }
}

/// True with probability `theta`. Always consumes exactly one draw.
pub fn sample_replacement<R: Rng + ?Sized>(rng: &mut R, theta: f64) -> bool {
    rng.gen::<f64>() < theta
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Updates applied so far.
    pub step: usize,
    pub optimizer: AdamW,
    /// Drives batch selection and replacement, in that order per sample.
    pub rng: ChaCha8Rng,
    pub replaced: u64,
    pub seen: u64,
    /// Loss sum and count since the last metrics record.
    pub running_loss: (f64, usize),
}

impl TrainState {
    pub fn new(params: &ModelParams, seed: u64) -> Self {
        TrainState {
            step: 0,
            optimizer: AdamW::new(&params.set),
            rng: seed::stream(seed, "train", 0),
            replaced: 0,
            seen: 0,
            running_loss: (0.0, 0),
        }
    }

    pub fn replaced_fraction(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.replaced as f64 / self.seen as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub replaced: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Cumulative over the run so far.
    pub replaced_fraction: f64,
}

/// One update on `batch`: per-sample replacement, mean loss, backward,
/// AdamW on every tensor (the soft prompt included), grads zeroed.
pub fn train_step(params: &mut ModelParams, state: &mut TrainState, cfg: &TrainConfig, batch: &[ModelInput]) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let lr = cfg.lr_at(state.step);
    let mut replaced = 0;
    let inputs: Vec<ModelInput> = batch
        .iter()
        .map(|x| {
            if sample_replacement(&mut state.rng, cfg.theta) {
                replaced += 1;
                x.to_null()
            } else {
                x.clone()
            }
        })
        .collect();
    let refs: Vec<&ModelInput> = inputs.iter().collect();

    let mut tape = Tape::new();
    let loss_var = batch_loss(&mut tape, params, &refs)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            lr,
            loss,
        });
    }
    let grads = tape.backward(loss_var)?;
    params.set.zero_grads();
    grads.accumulate_into(&mut params.set, 1.0);
    state.optimizer.update(&mut params.set, lr, cfg.weight_decay, state.step + 1)?;
    params.set.zero_grads();

    state.step += 1;
    state.replaced += replaced as u64;
    state.seen += batch.len() as u64;
    state.running_loss.0 += loss;
    state.running_loss.1 += 1;
    Ok(StepOutcome { loss, lr, replaced })
}

/// Uniform draws with replacement, one per batch slot.
fn draw_batch(state: &mut TrainState, dataset: &[ModelInput], batch_size: usize) -> Vec<ModelInput> {
    (0..batch_size)
        .map(|_| dataset[state.rng.gen_range(0..dataset.len())].clone())
        .collect()
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

/// Fresh run: parameters initialised from the config seed.
pub fn train_loop(model: &ModelConfig, cfg: &TrainConfig, dataset: &[ModelInput], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let params = ModelParams::init(model, seed::derive_seed(cfg.seed, "init", 0))?;
    let state = TrainState::new(&params, cfg.seed);
    resume_loop(params, state, cfg, dataset, out_dir)
}

/// Continues from `state.step` to `cfg.steps`. With `out_dir`, appends to
/// `metrics.jsonl`, writes periodic `checkpoint-<step>` directories, and
/// the final state to `checkpoint`.
pub fn resume_loop(
    mut params: ModelParams,
    mut state: TrainState,
    cfg: &TrainConfig,
    dataset: &[ModelInput],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            let file = if state.step == 0 {
                File::create(&path)
            } else {
                File::options().append(true).create(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut metrics = Vec::new();
    while state.step < cfg.steps {
        let batch = draw_batch(&mut state, dataset, cfg.batch_size);
        let outcome = train_step(&mut params, &mut state, cfg, &batch)?;
        let log_every = cfg.log_every.max(1);
        if state.step.is_multiple_of(log_every) || state.step == cfg.steps {
            let (sum, n) = state.running_loss;
            let record = MetricsRecord {
                step: state.step,
                loss: sum / n as f64,
                lr: outcome.lr,
                replaced_fraction: state.replaced_fraction(),
            };
            state.running_loss = (0.0, 0);
            if let Some((path, w)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(|e| Error::io(&*path, e.into()))?;
                w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            }
            metrics.push(record);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < cfg.steps {
                save_checkpoint(&params, &state, cfg, &dir.join(format!("checkpoint-{}", state.step)))?;
            }
        }
    }
    if let (Some(dir), Some((path, mut w))) = (out_dir, log) {
        w.flush().map_err(|e| Error::io(&path, e))?;
        save_checkpoint(&params, &state, cfg, &dir.join("checkpoint"))?;
    }
    Ok(TrainOutcome { params, state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, Split};
    use crate::model::{AttentionMode, SOFT_PROMPT};
    use rand::SeedableRng;

    fn small_model(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            vocab_size: vocab,
            l_visual: 9,
            d_patch: 5,
            max_text_len: 8,
            d_ff: 32,
            attention_mode: AttentionMode::Mda,
            renormalize_dual_weights: false,
        }
    }

    fn small_data(n: usize) -> Vec<ModelInput> {
        generate_dataset(11, n, 3, 3, 0.8, Split::TrainBiased)
            .unwrap()
            .iter()
            .map(|s| s.to_model_input(false).unwrap())
            .collect()
    }

    fn cfg(theta: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            theta,
            steps,
            batch_size: 8,
            lr: 3e-3,
            log_every: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn replacement_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| !sample_replacement(&mut rng, 0.0)));
        assert!((0..1000).all(|_| sample_replacement(&mut rng, 1.0)));
        let hits = (0..10_000).filter(|_| sample_replacement(&mut rng, 0.1)).count();
        assert!((900..=1100).contains(&hits), "{hits}");
    }

    #[test]
    fn replacement_consumes_one_draw() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = a.clone();
        sample_replacement(&mut a, 0.3);
        let _: f64 = b.gen();
        assert_eq!(a.gen::<u64>(), b.gen::<u64>());
    }

    #[test]
    fn theta_zero_never_moves_the_soft_prompt() {
        let data = small_data(32);
        let out = train_loop(&small_model(14), &cfg(0.0, 15), &data, None).unwrap();
        let init = ModelParams::init(&small_model(14), seed::derive_seed(3, "init", 0)).unwrap();
        let id = out.params.set.find(SOFT_PROMPT).unwrap();
        assert_eq!(out.params.set.get(id).value(), init.set.get(id).value());
        assert!(out.metrics.iter().all(|m| m.replaced_fraction == 0.0));
    }

    #[test]
    fn theta_one_never_moves_the_projector() {
        let data = small_data(32);
        let out = train_loop(&small_model(14), &cfg(1.0, 15), &data, None).unwrap();
        let init = ModelParams::init(&small_model(14), seed::derive_seed(3, "init", 0)).unwrap();
        for id in init.projector_ids() {
            assert_eq!(out.params.set.get(id).value(), init.set.get(id).value());
        }
        let eps = out.params.ids.soft_prompt;
        assert_ne!(out.params.set.get(eps).value(), init.set.get(eps).value());
    }

    #[test]
    fn mixed_theta_trains_both_paths() {
        let data = small_data(32);
        let out = train_loop(&small_model(14), &cfg(0.5, 15), &data, None).unwrap();
        let init = ModelParams::init(&small_model(14), seed::derive_seed(3, "init", 0)).unwrap();
        let changed = |id| out.params.set.get(id).value() != init.set.get(id).value();
        assert!(changed(out.params.ids.soft_prompt));
        assert!(out.params.projector_ids().into_iter().all(changed));
        let f = out.state.replaced_fraction();
        assert!((f - 0.5).abs() < 0.15, "{f}");
    }

    #[test]
    fn runs_are_deterministic() {
        let data = small_data(32);
        let a = train_loop(&small_model(14), &cfg(0.3, 10), &data, None).unwrap();
        let b = train_loop(&small_model(14), &cfg(0.3, 10), &data, None).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state, b.state);
        for ((_, x), (_, y)) in a.params.set.iter().zip(b.params.set.iter()) {
            assert_eq!(x.value(), y.value());
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let data = small_data(8);
        let mut params = ModelParams::init(&small_model(14), 0).unwrap();
        let id = params.ids.lm_b;
        params.set.get_mut(id).value_mut().data_mut()[0] = f64::NAN;
        let mut state = TrainState::new(&params, 0);
        match train_step(&mut params, &mut state, &cfg(0.1, 5), &data) {
            Err(Error::Diverged { step: 0, loss, .. }) => assert!(loss.is_nan()),
            other => panic!("{:?}", other.map(|o| o.loss)),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            TrainConfig { theta: 1.5, ..TrainConfig::default() },
            TrainConfig { steps: 0, ..TrainConfig::default() },
            TrainConfig { lr: -1.0, ..TrainConfig::default() },
        ] {
            assert!(c.validate().is_err());
        }
        assert!(train_loop(&small_model(14), &cfg(0.1, 2), &[], None).is_err());
    }

    #[test]
    fn config_json_uses_plain_field_names() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        for key in ["theta", "batch_size", "steps", "lr", "warmup_ratio", "schedule", "weight_decay", "optimizer", "seed"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["schedule"], "cosine");
        assert_eq!(json["optimizer"], "adamw");
        let back: TrainConfig = serde_json::from_value(serde_json::json!({"theta": 0.25})).unwrap();
        assert_eq!(back.theta, 0.25);
        assert_eq!(back.steps, 2000);
    }
}
