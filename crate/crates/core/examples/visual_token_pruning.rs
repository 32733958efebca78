//! Drops half of the visual tokens after the middle layer, keeping the
//! ones that receive the most attention, and compares the accuracy cost
//! for a dual-mask model and a causal baseline.

use dualguide::analysis::default_prune_layer;
use dualguide::data::{generate_dataset, Split};
use dualguide::decode::{DecodeConfig, GenerateOptions};
use dualguide::experiment::{evaluate, train_on};
use dualguide::model::{forward, rank_visual_tokens, AttentionMode, ModelConfig, PruneSpec};
use dualguide::train::TrainConfig;

fn main() -> dualguide::Result<()> {
    let train = generate_dataset(0, 2000, 3, 4, 0.8, Split::TrainBiased)?;
    let eval = generate_dataset(0, 300, 3, 4, 0.8, Split::EvalAnti)?;
    let cfg = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let decode = DecodeConfig {
        lambda: 1.0,
        max_new_tokens: 1,
        ..DecodeConfig::default()
    };
    for mode in [AttentionMode::Mda, AttentionMode::Causal] {
        let model = ModelConfig {
            d_model: 32,
            d_ff: 64,
            attention_mode: mode,
            ..ModelConfig::default()
        };
        let params = train_on(&model, &cfg, &train, false, None)?.params;
        let layer = default_prune_layer(params.config.n_layers);
        let pruned = GenerateOptions {
            capture_attention: false,
            prune: Some(PruneSpec { layer, keep_ratio: 0.5 }),
        };
        let full = evaluate(&params, &eval, &decode, &GenerateOptions::default(), false)?.0.accuracy;
        let cut = evaluate(&params, &eval, &decode, &pruned, false)?.0.accuracy;
        println!("{mode:?}: accuracy {full:.3} -> {cut:.3} with half the visual tokens after layer {layer}");

        let maps = forward(&params, &eval[0].prompt_input()?, true)?.attention.expect("captured");
        println!("  kept tokens for sample 0: {:?}", rank_visual_tokens(&maps.layers[layer - 1], 0.5)?);
    }
    Ok(())
}
