//! A small multimodal decoder.
//!
//! Patch features pass through a two-layer MLP adapter (or are replaced
//! wholesale by the learned soft prompt), text tokens are embedded, learned
//! absolute positions are added to every slot, and a stack of post-norm
//! transformer blocks runs either dual-mask or plain causal attention.

mod config;
mod forward;
mod params;

pub use config::{AttentionMode, ModelConfig};
pub use forward::{
    embed_inputs, forward, forward_batch, forward_on_tape, forward_with, rank_visual_tokens, AttentionCapture,
    BatchForward, ForwardOptions, ForwardOutput, HeadMaps, LayerCapture, LogitRows, ModelInput, PruneSpec,
    VisualInput,
};
pub use params::{LayerIds, ModelParams, ParamCounts, ParamIds, EMBED_INIT_STD, SOFT_PROMPT};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Mean over samples of each sample's mean cross-entropy on its supervised
/// positions, recorded on `tape`.
pub fn batch_loss(tape: &mut Tape, params: &ModelParams, inputs: &[&ModelInput]) -> Result<Var> {
    let opts = ForwardOptions {
        logits: LogitRows::Supervised,
        ..ForwardOptions::default()
    };
    let counts: Vec<usize> = inputs.iter().map(|i| i.loss_mask.iter().filter(|&&m| m).count()).collect();
    if counts.contains(&0) {
        return Err(Error::EmptySupervision);
    }
    let out = forward_on_tape(tape, params, inputs, &opts)?;
    let batch = inputs.len() as f64;
    let mut targets = Vec::with_capacity(out.rows.len());
    let mut weights = Vec::with_capacity(out.rows.len());
    let all_targets: Vec<Vec<usize>> = inputs.iter().map(|i| i.targets()).collect();
    for &(b, t) in &out.rows {
        targets.push(all_targets[b][t]);
        weights.push(1.0 / (counts[b] as f64 * batch));
    }
    tape.weighted_cross_entropy(out.logits, &targets, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Modality;
    use crate::tensor::{cross_entropy, finite_diff_check, Coords, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(mode: AttentionMode) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            vocab_size: 12,
            l_visual: 3,
            d_patch: 4,
            max_text_len: 6,
            d_ff: 8,
            attention_mode: mode,
            renormalize_dual_weights: false,
        }
    }

    fn patches(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor {
        Tensor::matrix(
            cfg.l_visual,
            cfg.d_patch,
            (0..cfg.l_visual * cfg.d_patch).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn sample_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig, len: usize) -> ModelInput {
        let tokens = (0..len).map(|_| rng.gen_range(4..cfg.vocab_size)).collect();
        let mut input = ModelInput::new(VisualInput::Patches(patches(rng, cfg)), tokens);
        input.loss_mask[len - 2] = true;
        input
    }

    #[test]
    fn soft_prompt_slots_are_prompt_plus_positions() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let input = ModelInput::new(VisualInput::SoftPrompt, vec![4, 5]);
        let (x, tags) = embed_inputs(&params, &input).unwrap();
        let eps = params.soft_prompt();
        let pos = params.set.get(params.ids.pos_embed).value();
        for s in 0..cfg.l_visual {
            for c in 0..cfg.d_model {
                assert_eq!(x.at(s, c), eps.at(s, c) + pos.at(s, c));
            }
        }
        assert_eq!(&tags[..3], &[Modality::Visual; 3]);
    }

    #[test]
    fn embedding_is_pure_and_length_preserving() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = sample_input(&mut rng, &cfg, 4);
        let (a, tags_a) = embed_inputs(&params, &input).unwrap();
        let (b, _) = embed_inputs(&params, &input).unwrap();
        assert_eq!(a, b);
        let (null, tags_null) = embed_inputs(&params, &input.to_null()).unwrap();
        assert_eq!(a.rows(), cfg.l_visual + 4);
        assert_eq!(null.shape(), a.shape());
        assert_eq!(tags_a, tags_null);
    }

    #[test]
    fn wrong_patch_width_is_a_shape_error() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let input = ModelInput::new(VisualInput::Patches(Tensor::zeros(&[3, 5])), vec![4]);
        assert!(matches!(forward(&params, &input, false), Err(Error::Shape { .. })));
    }

    #[test]
    fn too_long_text_overflows() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 3).unwrap();
        let input = ModelInput::new(VisualInput::SoftPrompt, vec![4; 7]);
        assert!(matches!(forward(&params, &input, false), Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn text_only_modes_agree() {
        let mda = ModelConfig {
            l_visual: 0,
            ..tiny(AttentionMode::Mda)
        };
        let causal = ModelConfig {
            attention_mode: AttentionMode::Causal,
            ..mda.clone()
        };
        let p_mda = ModelParams::init(&mda, 9).unwrap();
        let p_causal = ModelParams::from_set(causal, p_mda.set.clone()).unwrap();
        let input = ModelInput::new(VisualInput::SoftPrompt, vec![4, 7, 9, 5, 6]);
        let a = forward(&p_mda, &input, false).unwrap();
        let b = forward(&p_causal, &input, false).unwrap();
        assert_eq!(a.logits.shape(), &[5, 12]);
        assert!(a.logits.max_abs_diff(&b.logits) <= 1e-12);
    }

    #[test]
    fn forward_is_deterministic_and_batch_consistent() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<ModelInput> = (0..3).map(|_| sample_input(&mut rng, &cfg, 4)).collect();
        let refs: Vec<&ModelInput> = inputs.iter().collect();
        let batched = forward_batch(&params, &refs, &ForwardOptions::default()).unwrap();
        for (input, out) in inputs.iter().zip(&batched) {
            let single = forward(&params, input, false).unwrap();
            assert_eq!(single.logits, forward(&params, input, false).unwrap().logits);
            assert!(single.logits.max_abs_diff(&out.logits) <= 1e-12);
        }
    }

    #[test]
    fn capture_has_one_map_per_layer_and_head() {
        for mode in [AttentionMode::Mda, AttentionMode::Causal] {
            let cfg = tiny(mode);
            let params = ModelParams::init(&cfg, 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let out = forward(&params, &sample_input(&mut rng, &cfg, 4), true).unwrap();
            let cap = out.attention.unwrap();
            assert_eq!(cap.layers.len(), cfg.n_layers);
            assert!(cap.layers.iter().all(|l| l.heads.len() == cfg.n_heads && l.tags.len() == 7));
        }
    }

    #[test]
    fn batch_loss_matches_plain_cross_entropy() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = sample_input(&mut rng, &cfg, 5);
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &params, &[&input]).unwrap();
        let logits = forward(&params, &input, false).unwrap().logits;
        let want = cross_entropy(&logits, &input.targets(), &input.loss_mask).unwrap();
        assert!((tape.value(loss).item() - want).abs() <= 1e-12);
    }

    #[test]
    fn soft_prompt_gradient_matches_finite_differences() {
        let cfg = tiny(AttentionMode::Mda);
        let mut params = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let null = sample_input(&mut rng, &cfg, 4).to_null();
        let eps_id = params.ids.soft_prompt;
        for (id, p) in params.set.iter_mut().enumerate() {
            p.requires_grad = id == eps_id.index();
        }
        let config = params.config.clone();
        let ids = params.ids.clone();
        let report = finite_diff_check(
            |tape, set| {
                let view = ModelParams {
                    config: config.clone(),
                    set: set.clone(),
                    ids: ids.clone(),
                };
                batch_loss(tape, &view, &[&null])
            },
            &mut params.set,
            1e-5,
            Coords::All,
        )
        .unwrap();
        assert_eq!(report.checked, cfg.l_visual * cfg.d_model);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn soft_prompt_gradient_only_on_null_inputs() {
        let cfg = tiny(AttentionMode::Mda);
        let mut params = ModelParams::init(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = sample_input(&mut rng, &cfg, 4);
        let eps = params.ids.soft_prompt;

        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &params, &[&real]).unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut params.set, 1.0);
        assert!(params.set.get(eps).grad().data().iter().all(|&g| g == 0.0));

        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &params, &[&real.to_null()]).unwrap();
        tape.backward(loss).unwrap().accumulate_into(&mut params.set, 1.0);
        assert!(params.set.get(eps).grad().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn every_parameter_tensor_receives_gradient() {
        for mode in [AttentionMode::Mda, AttentionMode::Causal] {
            let cfg = tiny(mode);
            let mut params = ModelParams::init(&cfg, 10).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let mut inputs: Vec<ModelInput> = (0..4).map(|_| sample_input(&mut rng, &cfg, 5)).collect();
            inputs[0] = inputs[0].to_null();
            let refs: Vec<&ModelInput> = inputs.iter().collect();
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, &params, &refs).unwrap();
            tape.backward(loss).unwrap().accumulate_into(&mut params.set, 1.0);
            for (_, p) in params.set.iter() {
                assert!(p.grad().data().iter().any(|&g| g != 0.0), "{mode}: dead `{}`", p.name);
            }
        }
    }

    #[test]
    fn full_keep_ratio_pruning_is_identity() {
        let cfg = ModelConfig {
            n_layers: 3,
            ..tiny(AttentionMode::Mda)
        };
        let params = ModelParams::init(&cfg, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input = sample_input(&mut rng, &cfg, 4);
        let plain = forward(&params, &input, false).unwrap();
        let pruned = forward_with(
            &params,
            &input,
            &ForwardOptions {
                prune: Some(PruneSpec { layer: 1, keep_ratio: 1.0 }),
                ..ForwardOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain.logits, pruned.logits);
    }

    #[test]
    fn pruning_leaves_shallow_layers_alone() {
        for mode in [AttentionMode::Mda, AttentionMode::Causal] {
            let cfg = ModelConfig {
                n_layers: 4,
                l_visual: 4,
                ..tiny(mode)
            };
            let params = ModelParams::init(&cfg, 13).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let input = sample_input(&mut rng, &cfg, 4);
            let plain = forward(&params, &input, true).unwrap().attention.unwrap();
            let opts = ForwardOptions {
                capture_attention: true,
                prune: Some(PruneSpec { layer: 2, keep_ratio: 0.5 }),
                ..ForwardOptions::default()
            };
            let pruned = forward_with(&params, &input, &opts).unwrap().attention.unwrap();
            assert_eq!(plain.layers[..2], pruned.layers[..2]);
            assert_eq!(pruned.layers[2].tags.len(), 2 + 4);
            assert_eq!(pruned.layers[3].tags.iter().filter(|&&t| t == Modality::Visual).count(), 2);
        }
    }

    #[test]
    fn pruning_ranks_by_received_attention() {
        // Four visual keys and one text query; column sums 0.4, 0.3, 0.2, 0.1.
        let mut w = Tensor::zeros(&[5, 5]);
        w.data_mut()[20..25].copy_from_slice(&[0.4, 0.3, 0.2, 0.1, 0.0]);
        let maps = LayerCapture {
            tags: vec![Modality::Visual, Modality::Visual, Modality::Visual, Modality::Visual, Modality::Text],
            heads: vec![HeadMaps::Single(w)],
        };
        assert_eq!(rank_visual_tokens(&maps, 0.5).unwrap(), vec![0, 1]);
        assert!(rank_visual_tokens(&maps, 0.2).is_err());

        // Ties fall to the lower position.
        let maps = LayerCapture {
            heads: vec![HeadMaps::Single(Tensor::zeros(&[5, 5]))],
            ..maps
        };
        assert_eq!(rank_visual_tokens(&maps, 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn invalid_prune_requests_are_rejected() {
        let cfg = tiny(AttentionMode::Mda);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let input = ModelInput::new(VisualInput::SoftPrompt, vec![4, 5]);
        for prune in [
            PruneSpec { layer: 0, keep_ratio: 0.5 },
            PruneSpec { layer: 2, keep_ratio: 0.5 },
            PruneSpec { layer: 1, keep_ratio: 0.0 },
            PruneSpec { layer: 1, keep_ratio: 0.2 },
        ] {
            let opts = ForwardOptions {
                prune: Some(prune),
                ..ForwardOptions::default()
            };
            assert!(forward_with(&params, &input, &opts).is_err(), "{prune:?}");
        }
    }
}
