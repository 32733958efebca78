//! Finite-difference check of the full model loss, including the learned
//! soft prompt, on a tiny configuration.

use dualguide::model::{batch_loss, ModelConfig, ModelInput, ModelParams, VisualInput};
use dualguide::tensor::{finite_diff_check, Coords, Tensor};

fn main() -> dualguide::Result<()> {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        vocab_size: 12,
        l_visual: 3,
        d_patch: 4,
        max_text_len: 6,
        d_ff: 16,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(&config, 11)?;
    let patches = Tensor::matrix(3, 4, (0..12).map(|x| (x % 3) as f64 - 1.0).collect())?;
    let mut real = ModelInput::new(VisualInput::Patches(patches), vec![4, 7, 9, 3]);
    real.loss_mask = vec![false, true, false, true];
    let null = real.to_null();

    let (cfg, ids) = (params.config.clone(), params.ids.clone());
    let report = finite_diff_check(
        |tape, set| {
            let view = ModelParams {
                config: cfg.clone(),
                set: set.clone(),
                ids: ids.clone(),
            };
            batch_loss(tape, &view, &[&real, &null])
        },
        &mut params.set,
        1e-5,
        Coords::Sample { per_param: 6, seed: 0 },
    )?;
    println!("checked {} coordinates, max relative error {:.2e}", report.checked, report.max_rel_error);
    if let Some(w) = &report.worst {
        println!("worst coordinate: {w:?}");
    }
    Ok(())
}
