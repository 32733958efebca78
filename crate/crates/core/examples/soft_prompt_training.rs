//! Short training run with stochastic image replacement: about a tenth of
//! the samples see the learned soft prompt instead of their projected
//! patches. Also saves and reloads the checkpoint.

use dualguide::data::{generate_dataset, Split};
use dualguide::experiment::train_on;
use dualguide::model::ModelConfig;
use dualguide::train::{load_checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = generate_dataset(0, 2000, 3, 4, 0.8, Split::TrainBiased)?;
    let model = ModelConfig {
        d_model: 32,
        d_ff: 64,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        steps: 300,
        log_every: 50,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir()?;
    let out = train_on(&model, &cfg, &samples, false, Some(dir.path()))?;
    for m in &out.metrics {
        println!("step {:>4}  loss {:.4}  lr {:.2e}  replaced {:.3}", m.step, m.loss, m.lr, m.replaced_fraction);
    }

    let counts = out.params.count_params();
    println!(
        "soft prompt: {} of {} parameters ({:.2}%)",
        counts.soft_prompt,
        counts.total,
        100.0 * counts.soft_prompt_fraction
    );
    let eps = out.params.soft_prompt();
    let norm = eps.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    println!("soft prompt norm after training {norm:.3}");

    let back = load_checkpoint(&dir.path().join("checkpoint"))?;
    println!(
        "reloaded checkpoint at step {}, soft prompt identical: {}",
        back.state.step,
        back.params.soft_prompt() == eps
    );
    Ok(())
}
